#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "semfed/adapter.hpp"
#include "semfed/labeling.hpp"
#include "semfed/trainer.hpp"

namespace semfed {

enum class ErrorLevel : std::uint8_t { none = 0, mild = 1, severe = 2 };

std::string error_level_name(ErrorLevel e);

// Static description of one client's place in the network.
struct ClientProfile {
    std::uint32_t client_id = 0;
    std::vector<EncoderSignature> signatures;
    double compute_speed = 1.0;   // relative; simulated time divides by this
    double dropout_prob = 0.0;
    ErrorLevel error_level = ErrorLevel::none;
};

struct RoundReport {
    std::uint32_t client_id = 0;
    AdapterParams params_after;
    std::uint64_t retained_samples = 0;
    LabelStats label_stats;
    double wall_time = 0.0;  // simulated
    std::vector<EncoderSignature> trained_signatures;
    double mean_loss = 0.0;
    std::uint64_t shard_pairs = 0;
};

// Independent Bernoulli participation per client, one seeded stream per
// round; deterministic given (round, seed).
std::vector<std::uint32_t> select_clients(std::uint32_t round,
                                          const std::vector<ClientProfile>& profiles,
                                          std::uint64_t seed);

// Entrywise weighted mean of params_after, weights = retained_samples (all
// weights 1 when every count is zero). Projection blocks average over the
// clients that actually trained them; blocks nobody trained keep their
// previous global values. Reports reduce in ascending client id regardless
// of input order, and bit-identical reports short-circuit to a plain copy.
AdapterParams aggregate_params(const std::vector<RoundReport>& reports,
                               const AdapterParams& previous);

LabelStats aggregate_label_stats(const std::vector<RoundReport>& reports);

// ---- round orchestration ----

struct FederationConfig {
    std::uint64_t master_seed = 0;
    TrainConfig train;
    std::uint32_t patience = 3;       // consecutive flagged rounds before pruning
    double tau_percentile = 25.0;     // consensus percentile defining tau_g
    bool pruning_enabled = true;
    bool aggregate = true;            // false: local-only training, no sharing
};

struct ClientState {
    ClientProfile profile;
    ShardView shard;
    LabelLedger ledger;
    AdapterParams params;  // per-client params, used when aggregate is off
    std::vector<std::uint64_t> pruned_ids;
};

struct GlobalState {
    AdapterParams params;
    std::uint32_t round = 0;
    std::uint64_t pruned_total = 0;
    LabelStats consensus;
};

struct RoundOutcome {
    std::vector<std::uint32_t> participants;
    double mean_loss = 0.0;           // plain mean over participants
    double retained_fraction = 0.0;   // retained pairs / shard pairs, over participants
    double sim_duration = 0.0;        // max participant time (synchronous round)
    std::uint64_t newly_pruned = 0;
    bool skipped = false;
};

// One synchronous round: select, broadcast, local updates, aggregate params
// and label statistics, then every client prunes against the new consensus.
RoundOutcome run_round(GlobalState& state, std::vector<ClientState>& clients,
                       const Skb& skb, const FederationConfig& cfg);

// ---- checkpoints ----

void checkpoint_save(const AdapterParams& params, std::uint32_t round,
                     const std::filesystem::path& path);
std::pair<AdapterParams, std::uint32_t> checkpoint_load(const std::filesystem::path& path);

}  // namespace semfed
