#pragma once

#include <cstdint>
#include <vector>

#include "semfed/matrix.hpp"

namespace semfed {

// a.b / (|a||b|). Throws if either norm is zero — callers that can see
// zero vectors must handle them before asking for a cosine.
double cosine_similarity(const double* a, const double* b, std::size_t n);
double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

// exp(-|a-b|^2 / (2 sigma^2)), sigma > 0.
double gaussian_kernel(const double* a, const double* b, std::size_t n, double sigma);
double gaussian_kernel(const std::vector<double>& a, const std::vector<double>& b, double sigma);

// Indices of the k largest values, ascending index order in the result.
// Ties prefer the lower index. k >= n returns every index.
std::vector<std::size_t> top_k_indices(const std::vector<double>& values, std::size_t k);

// Row-wise softmax of (scale * logits) over unmasked entries; masked entries
// (mask 0) are exactly zero in the output. A fully masked row stays all-zero
// so isolated graph nodes pass through untouched.
Matrix masked_row_softmax(const Matrix& logits, const std::vector<std::uint8_t>& mask,
                          double scale);

}  // namespace semfed
