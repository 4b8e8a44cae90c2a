#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "semfed/adapter.hpp"
#include "semfed/labeling.hpp"
#include "semfed/optim.hpp"
#include "semfed/skb.hpp"

namespace semfed {

struct TrainConfig {
    double margin = 0.2;
    double reg_weight = 1.0;
    double lr = 1e-4;
    std::size_t batch_size = 128;
    std::size_t local_epochs = 5;
    double confidence_quantile = 0.1;  // q
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;  // stream seed for this (client, round)
};

struct LossBreakdown {
    double triplet = 0.0;
    double regularizer = 0.0;
    double total = 0.0;
    std::size_t retained_count = 0;
};

// Bidirectional hinge with the hardest in-batch negative. pairing[i] is the
// tokens_b row paired with tokens_a row i (a bijection over retained rows).
// Returns the mean over retained anchors of both directions, plus the
// per-anchor hinge values (a-direction then b-direction).
std::pair<double, std::vector<double>> triplet_loss(const Matrix& tokens_a,
                                                    const Matrix& tokens_b,
                                                    const std::vector<std::size_t>& pairing,
                                                    double margin,
                                                    const std::vector<std::uint8_t>& mask);

// Mean over retained rows of |token_i - anchor(label_i)|^2. anchor_idx holds
// SKB row indices (not class ids).
double alignment_regularizer(const Matrix& tokens, const std::vector<std::size_t>& anchor_idx,
                             const Skb& skb, const std::vector<std::uint8_t>& mask);

// One training batch after labeling: one slice per modality, in signature
// order. With two modalities row i of each slice is the same pair; anchor
// indices run image rows first, then text rows. retained is per pair.
struct LossInputs {
    Batch batch;
    std::vector<std::size_t> anchor_idx;
    std::vector<std::uint8_t> retained;
};

// Masked pairs are dropped before the graph is built, so they are invisible
// to loss and gradients alike.
LossBreakdown total_loss(const LossInputs& in, const AdapterParams& params, const Skb& skb,
                         const TrainConfig& cfg);

// Analytic gradients of total_loss for every trainable block; the gradient
// holder reuses the AdapterParams layout. Edge selection is treated as
// constant within the step.
AdapterParams backward(const LossInputs& in, const AdapterParams& params, const Skb& skb,
                       const TrainConfig& cfg, LossBreakdown* loss_out = nullptr);

// ---- client-side round ----

struct PairRef {
    std::uint64_t pair_id = 0;
    std::uint32_t img_row = 0;
    std::uint32_t txt_row = 0;  // corrupted assignments live here
};

// A client's slice of the dataset: references into shared feature matrices.
struct ShardView {
    const Matrix* img_features = nullptr;
    const Matrix* txt_features = nullptr;
    EncoderSignature img_sig;
    EncoderSignature txt_sig;
    std::vector<PairRef> pairs;

    bool has_img() const { return img_features != nullptr; }
    bool has_txt() const { return txt_features != nullptr; }
};

struct LocalStats {
    double mean_loss = 0.0;
    double retained_fraction = 0.0;     // retained / shard pairs (pruned count as lost)
    std::uint64_t retained_samples = 0;  // retained pairs in the final epoch
    LabelStats label_stats;
};

struct LocalUpdateResult {
    AdapterParams params;
    std::vector<AdamState> adam;  // one per trainable block, vectorization order
    LocalStats stats;
};

// One federated round's local work: local_epochs seeded-shuffled passes, each
// batch labeled, confidence-masked, trained on the retained remainder. The
// ledger is folded once at the end with the final per-pair observations.
LocalUpdateResult local_update(const AdapterParams& params, const ShardView& shard,
                               LabelLedger& ledger, const Skb& skb, const TrainConfig& cfg,
                               std::uint32_t round);

}  // namespace semfed
