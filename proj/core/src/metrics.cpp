#include "semfed/metrics.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

#include "semfed/kernels.hpp"

namespace semfed {

namespace {

// Rank of column c in row: 1 + strictly-better count + equal-but-lower-index count.
std::size_t rank_of(const double* row, std::size_t m, std::size_t c) {
    std::size_t rank = 1;
    for (std::size_t j = 0; j < m; ++j) {
        if (j == c) continue;
        if (row[j] > row[c] || (row[j] == row[c] && j < c)) ++rank;
    }
    return rank;
}

}  // namespace

double recall_at_k(const Matrix& sim, const std::vector<std::vector<std::size_t>>& ground_truth,
                   std::size_t k) {
    if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
    if (ground_truth.size() != sim.rows())
        throw std::invalid_argument("recall_at_k: ground truth size != rows");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < sim.rows(); ++i) {
        if (ground_truth[i].empty())
            throw std::invalid_argument("recall_at_k: query without ground truth");
        std::size_t best = std::numeric_limits<std::size_t>::max();
        for (std::size_t c : ground_truth[i]) best = std::min(best, rank_of(sim.row(i), sim.cols(), c));
        if (best <= k) ++hits;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(sim.rows());
}

RsumBreakdown rsum(const Matrix& tokens_img, const Matrix& tokens_txt,
                   const std::vector<std::size_t>& pairing) {
    if (tokens_img.rows() == 0 || tokens_txt.rows() == 0)
        throw std::invalid_argument("rsum: empty token set");
    if (pairing.size() != tokens_img.rows())
        throw std::invalid_argument("rsum: pairing size != image rows");
    if (tokens_img.cols() != tokens_txt.cols())
        throw std::invalid_argument("rsum: token dim mismatch");

    // Cosine similarity matrix (tokens may arrive unnormalized).
    const std::size_t n = tokens_img.rows(), m = tokens_txt.rows(), d = tokens_img.cols();
    Matrix s(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            s(i, j) = cosine_similarity(tokens_img.row(i), tokens_txt.row(j), d);

    std::vector<std::vector<std::size_t>> truth_i2t(n);
    std::vector<std::vector<std::size_t>> truth_t2i(m);
    for (std::size_t i = 0; i < n; ++i) {
        if (pairing[i] >= m) throw std::invalid_argument("rsum: pairing out of range");
        truth_i2t[i].push_back(pairing[i]);
        truth_t2i[pairing[i]].push_back(i);
    }
    Matrix st = transpose(s);

    RsumBreakdown out;
    out.r1_i2t = recall_at_k(s, truth_i2t, 1);
    out.r5_i2t = recall_at_k(s, truth_i2t, 5);
    out.r10_i2t = recall_at_k(s, truth_i2t, 10);
    out.r1_t2i = recall_at_k(st, truth_t2i, 1);
    out.r5_t2i = recall_at_k(st, truth_t2i, 5);
    out.r10_t2i = recall_at_k(st, truth_t2i, 10);
    out.rsum = out.r1_i2t + out.r5_i2t + out.r10_i2t + out.r1_t2i + out.r5_t2i + out.r10_t2i;
    return out;
}

}  // namespace semfed
