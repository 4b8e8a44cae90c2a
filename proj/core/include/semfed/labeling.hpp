#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "semfed/adapter.hpp"
#include "semfed/matrix.hpp"
#include "semfed/skb.hpp"

namespace semfed {

// Self-generated training target: the nearest SKB anchor of a token.
struct ProvisionalLabel {
    std::uint64_t sample_id = 0;
    Modality modality = Modality::image;
    std::uint32_t anchor_id = 0;
    std::size_t anchor_index = 0;
    double anchor_similarity = 0.0;
    double confidence = 0.0;  // filled by batch_confidence (pair level)
};

std::vector<ProvisionalLabel> provisional_labels(const Matrix& tokens,
                                                 const std::vector<std::uint64_t>& sample_ids,
                                                 Modality modality, const Skb& skb);

// Pair confidence from the in-batch similarity matrix: margin of the true
// pair over the best distractor, averaged over both retrieval directions.
// pairing[i] is the text row paired with image row i. A 1-sample batch has
// no distractors; its confidence is the pair similarity itself.
std::vector<double> batch_confidence(const Matrix& tokens_img, const Matrix& tokens_txt,
                                     const std::vector<std::size_t>& pairing);

// Single-modality fallback: top1 - top2 anchor similarity gap per token.
std::vector<double> anchor_gap_confidence(const Matrix& tokens, const Skb& skb);

// Flags the floor(q*n) lowest-confidence samples; ties flag the lower index
// first. Returned mask is true = retained.
std::vector<std::uint8_t> mask_low_confidence(const std::vector<double>& confidences, double q);

// ---- cross-round ledger ----

enum class SampleStatus : std::uint8_t { active = 0, tracked = 1, pruned = 2 };

struct LedgerEvent {
    std::uint32_t round = 0;
    double confidence = 0.0;
    bool flagged = false;
};

struct LedgerEntry {
    SampleStatus status = SampleStatus::active;
    std::uint32_t consecutive_low = 0;
    std::uint32_t last_anchor = 0;
    bool has_anchor = false;
    std::vector<LedgerEvent> history;
};

struct LabelLedger {
    std::map<std::uint64_t, LedgerEntry> entries;

    bool is_pruned(std::uint64_t sample_id) const {
        auto it = entries.find(sample_id);
        return it != entries.end() && it->second.status == SampleStatus::pruned;
    }
};

// Per-anchor consensus statistics shared through the coordinator.
struct AnchorStat {
    std::uint64_t count = 0;
    double mean_confidence = 0.0;
};

struct LabelStats {
    std::map<std::uint32_t, AnchorStat> per_anchor;

    void add(std::uint32_t anchor, double confidence, std::uint64_t count = 1);
};

// Folds one round of observations in: flagged samples accumulate
// consecutive_low and become tracked, unflagged ones reset to active.
// Pruned samples ignore further updates.
void ledger_update(LabelLedger& ledger, std::uint32_t round,
                   const std::vector<ProvisionalLabel>& labels,
                   const std::vector<std::uint8_t>& mask);

// Prunes tracked samples that stayed flagged for >= patience rounds and whose
// last anchor the consensus does not vouch for (mean confidence < tau_g, or
// absent entirely). Returns the newly pruned sample ids.
std::vector<std::uint64_t> ledger_prune(LabelLedger& ledger, const LabelStats& consensus,
                                        std::uint32_t patience, double tau_g);

// Nearest-rank percentile of the consensus per-anchor mean confidences,
// used to derive tau_g each round. Empty stats return -infinity; pruning
// then rests entirely on the absent-anchor rule.
double consensus_percentile(const LabelStats& stats, double percentile);

// One line per sample: "<id> <status> <consecutive_low> <anchor|->".
void ledger_save(const LabelLedger& ledger, const std::filesystem::path& path);
LabelLedger ledger_load(const std::filesystem::path& path);

}  // namespace semfed
