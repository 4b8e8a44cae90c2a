#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "semfed/matrix.hpp"

namespace semfed {

// Shared store of unit-norm anchor embeddings, one per semantic class.
// Immutable during a training run; versioned so runs can swap stores.
struct Skb {
    Matrix anchors;  // C x d_s, every row unit L2 norm
    std::vector<std::uint32_t> class_ids;
    std::uint32_t version = 1;

    std::size_t num_classes() const { return anchors.rows(); }
    std::size_t dim() const { return anchors.cols(); }

    bool operator==(const Skb& o) const {
        return anchors == o.anchors && class_ids == o.class_ids && version == o.version;
    }
};

struct Alignment {
    std::uint32_t anchor_id = 0;
    std::size_t anchor_index = 0;
    double similarity = 0.0;
};

// Normalizes prototype rows; rejects zero rows and duplicate ids. C >= 2.
Skb build_skb(const Matrix& prototypes, std::vector<std::uint32_t> class_ids);

// Nearest anchor by cosine; ties go to the lower anchor index.
Alignment align_token(const double* token, std::size_t n, const Skb& skb);

// Same, plus the runner-up similarity (for top1-top2 confidence gaps).
std::pair<Alignment, double> align_token_top2(const double* token, std::size_t n, const Skb& skb);

void skb_save(const Skb& skb, const std::filesystem::path& path);
Skb skb_load(const std::filesystem::path& path);

}  // namespace semfed
