#include "semfed/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace semfed {

Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& x,
                        double eps) {
    if (eps <= 0.0) throw std::invalid_argument("finite_diff_grad: eps must be positive");
    Matrix g(x.rows(), x.cols());
    Matrix probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe.data()[i];
        probe.data()[i] = orig + eps;
        const double fp = f(probe);
        probe.data()[i] = orig - eps;
        const double fm = f(probe);
        probe.data()[i] = orig;
        g.data()[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

double max_rel_error(const Matrix& analytic, const Matrix& numeric, double floor) {
    if (!analytic.same_shape(numeric))
        throw std::invalid_argument("max_rel_error: shape mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic.data()[i];
        const double n = numeric.data()[i];
        const double denom = std::max({std::fabs(a), std::fabs(n), floor});
        worst = std::max(worst, std::fabs(a - n) / denom);
    }
    return worst;
}

}  // namespace semfed
