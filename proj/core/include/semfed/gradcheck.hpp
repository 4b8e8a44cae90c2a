#pragma once

#include <functional>

#include "semfed/matrix.hpp"

namespace semfed {

// Central finite differences of a scalar function, entry by entry.
Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& x,
                        double eps = 1e-5);

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps near-zero
// entries from blowing the ratio up on pure roundoff.
double max_rel_error(const Matrix& analytic, const Matrix& numeric, double floor = 1e-6);

}  // namespace semfed
