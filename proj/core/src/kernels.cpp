#include "semfed/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace semfed {

double cosine_similarity(const double* a, const double* b, std::size_t n) {
    const double na = norm2(a, n);
    const double nb = norm2(b, n);
    if (na == 0.0 || nb == 0.0) throw std::domain_error("cosine_similarity: zero-norm input");
    return dot(a, b, n) / (na * nb);
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
    return cosine_similarity(a.data(), b.data(), a.size());
}

double gaussian_kernel(const double* a, const double* b, std::size_t n, double sigma) {
    if (sigma <= 0.0) throw std::domain_error("gaussian_kernel: sigma must be positive");
    double d2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        d2 += d * d;
    }
    return std::exp(-d2 / (2.0 * sigma * sigma));
}

double gaussian_kernel(const std::vector<double>& a, const std::vector<double>& b, double sigma) {
    if (a.size() != b.size()) throw std::invalid_argument("gaussian_kernel: length mismatch");
    return gaussian_kernel(a.data(), b.data(), a.size(), sigma);
}

std::vector<std::size_t> top_k_indices(const std::vector<double>& values, std::size_t k) {
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t take = std::min(k, values.size());
    // Stable order on equal values falls out of comparing indices explicitly.
    std::partial_sort(idx.begin(), idx.begin() + take, idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (values[a] != values[b]) return values[a] > values[b];
                          return a < b;
                      });
    idx.resize(take);
    std::sort(idx.begin(), idx.end());
    return idx;
}

Matrix masked_row_softmax(const Matrix& logits, const std::vector<std::uint8_t>& mask,
                          double scale) {
    if (mask.size() != logits.size())
        throw std::invalid_argument("masked_row_softmax: mask shape mismatch");
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const double* li = logits.row(i);
        const std::uint8_t* mi = mask.data() + i * logits.cols();
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < logits.cols(); ++j)
            if (mi[j] && scale * li[j] > mx) mx = scale * li[j];
        if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
        double sum = 0.0;
        double* oi = out.row(i);
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            if (!mi[j]) continue;
            oi[j] = std::exp(scale * li[j] - mx);
            sum += oi[j];
        }
        for (std::size_t j = 0; j < logits.cols(); ++j)
            if (mi[j]) oi[j] /= sum;
    }
    return out;
}

}  // namespace semfed
