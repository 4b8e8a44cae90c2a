#pragma once

#include <cstddef>
#include <vector>

#include "semfed/matrix.hpp"

namespace semfed {

// Percentage of query rows whose best ground-truth column ranks in the top k
// by descending similarity. Equal similarities rank the lower column index
// first. One-to-many ground truth: any correct column counts.
double recall_at_k(const Matrix& sim, const std::vector<std::vector<std::size_t>>& ground_truth,
                   std::size_t k);

struct RsumBreakdown {
    double r1_i2t = 0.0, r5_i2t = 0.0, r10_i2t = 0.0;
    double r1_t2i = 0.0, r5_t2i = 0.0, r10_t2i = 0.0;
    double rsum = 0.0;
};

// Recall@{1,5,10} in both retrieval directions over the cosine similarity
// matrix of the two token sets; pairing[i] = text row paired with image row i.
RsumBreakdown rsum(const Matrix& tokens_img, const Matrix& tokens_txt,
                   const std::vector<std::size_t>& pairing);

}  // namespace semfed
