#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "semfed/dataio.hpp"
#include "semfed/federation.hpp"
#include "semfed/metrics.hpp"

namespace semfed {

// Raised for anything wrong with inputs (config contents, referenced files);
// the CLI maps it to exit code 1 as opposed to 2 for runtime failures.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ExperimentMode : std::uint8_t {
    proposed = 0,
    single_modal_fl = 1,
    no_denoise = 2,
    local_only = 3,
};

std::string mode_name(ExperimentMode m);
ExperimentMode mode_from_name(const std::string& name);

struct SyntheticSpec {
    std::size_t classes = 20;
    std::size_t n_per_class = 50;
    std::size_t d_s = 64;
    std::size_t d_img = 256;
    std::size_t d_txt = 128;
    double noise_sigma = 0.1;
    double eval_fraction = 0.2;
};

struct FileDatasetSpec {
    std::string img_features;
    std::string txt_features;
    std::string manifest;
    std::string skb;
};

struct DatasetSpec {
    bool synthetic = true;
    SyntheticSpec synth;
    FileDatasetSpec files;
};

struct FederationSpec {
    std::size_t n_clients = 10;
    std::uint32_t rounds = 50;
    double alpha = 0.5;
    double dropout_prob = 0.0;
    std::vector<double> compute_speeds;  // empty = all 1.0
};

struct AdapterSpec {
    std::size_t d_h = 128;
    std::size_t k_intra = 8;
    std::size_t k_cross = 8;
    double sigma = 1.0;
    std::size_t layers = 1;
    double attn_scale = 1.5;
};

struct LabelingSpec {
    double q = 0.1;  // confidence quantile masked per batch
    std::uint32_t patience = 3;
    double tau_percentile = 25.0;
};

struct ErrorSpec {
    double mild_rate = 0.10;
    double severe_rate = 0.40;
    std::vector<ErrorLevel> client_levels;  // empty = all none
};

struct ExperimentConfig {
    ExperimentMode mode = ExperimentMode::proposed;
    std::uint64_t master_seed = 0;
    std::string out_dir = "run";
    DatasetSpec dataset;
    FederationSpec federation;
    AdapterSpec adapter;
    TrainConfig train;  // seed and confidence_quantile are filled per run
    LabelingSpec labeling;
    ErrorSpec error;
};

// Strict parse: unknown keys anywhere are rejected, every omitted field takes
// its default, everything is range-checked. The echo emits all fields.
ExperimentConfig parse_config_text(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& cfg, int indent = 2);
void validate_config(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);  // fnv1a64 of the canonical echo

struct MetricRecord {
    std::uint32_t round = 0;
    RsumBreakdown retrieval;
    double mean_loss = 0.0;          // nan on round 0 and skipped rounds
    double retained_fraction = 0.0;  // nan on round 0 and skipped rounds
    std::uint64_t pruned_total = 0;  // cumulative
    double sim_duration = 0.0;
};

std::string metrics_csv_header();
std::string metric_csv_row(const MetricRecord& r);

struct ClientSummary {
    std::uint32_t id = 0;
    ErrorLevel level = ErrorLevel::none;
    std::uint64_t shard_pairs = 0;
    double final_rsum = 0.0;
    std::vector<std::uint64_t> corrupted_pairs;              // ground truth, harness-only
    std::vector<std::pair<std::uint32_t, std::uint64_t>> pruned;  // (round, pair id)
};

struct GroupSummary {
    std::vector<std::uint32_t> clients;
    double final_rsum = 0.0;  // mean of members' per-client final RSUM
    std::uint64_t pruned_total = 0;
};

struct RunResult {
    std::vector<MetricRecord> history;
    std::vector<ClientSummary> clients;
    std::vector<std::pair<std::string, GroupSummary>> groups;  // by level name, present levels only
};

// Runs the configured experiment and writes metrics.csv, summary.json,
// config-echo.json and checkpoints under out_dir. A failure mid-run still
// flushes the rows recorded so far before rethrowing.
RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

// Writes the synthetic dataset of cfg.dataset as img.semf / txt.semf /
// skb.skb1 / manifest.json under out_dir.
void generate_dataset_files(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

// Retrieval metrics of a saved adapter checkpoint on the config's eval split.
struct EvalReport {
    RsumBreakdown retrieval;
    std::uint32_t round = 0;
};
EvalReport evaluate_checkpoint(const ExperimentConfig& cfg,
                               const std::filesystem::path& checkpoint);

// Merges several runs' metrics.csv into one long-format CSV with columns
// run,round,metric,value; values are copied verbatim.
void compare_runs(const std::vector<std::filesystem::path>& run_dirs,
                  const std::filesystem::path& out_path);

// Central finite differences against the analytic backward on a small seeded
// instance. perturb deliberately corrupts one gradient entry (negative
// control). Guarded to <= 20000 parameters.
struct GradCheckReport {
    std::vector<std::pair<std::string, double>> per_block;  // max rel error per block
    double max_rel_error = 0.0;
    bool pass = false;  // max_rel_error <= 1e-4
};
GradCheckReport grad_check(std::uint64_t seed, std::size_t d_h = 8, std::size_t d_s = 4,
                           std::size_t pairs = 6, bool perturb = false);

}  // namespace semfed
