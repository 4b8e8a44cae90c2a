#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "semfed/adapter.hpp"
#include "semfed/matrix.hpp"
#include "semfed/skb.hpp"

namespace semfed {

// One frozen encoder's output for a whole dataset split.
struct FeatureSet {
    EncoderSignature signature;
    std::vector<std::uint64_t> sample_ids;
    Matrix features;  // N x signature.dim

    bool operator==(const FeatureSet&) const = default;
};

void save_features(const FeatureSet& fs, const std::filesystem::path& path);
FeatureSet load_features(const std::filesystem::path& path);

struct DatasetManifest {
    // pairings[k] = (image sample id, text sample id) of pair k
    std::vector<std::pair<std::uint64_t, std::uint64_t>> pairings;
    std::vector<std::uint32_t> class_labels;  // per pair, ground truth (evaluation only)
    std::vector<std::size_t> train_pairs;     // pair indices
    std::vector<std::size_t> eval_pairs;
    std::string skb_prototypes_file;

    bool operator==(const DatasetManifest&) const = default;
};

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

struct SyntheticData {
    FeatureSet img;
    FeatureSet txt;
    DatasetManifest manifest;
    Skb skb;
    Matrix latents;  // N x d_s, the ground-truth latent behind each pair
};

// Anchors on the unit sphere, per-sample latents anchor + N(0, noise^2 I),
// both modalities as fixed random full-rank linear images of the latent.
// Pure function of its arguments.
SyntheticData generate_synthetic(std::size_t classes, std::size_t n_per_class, std::size_t d_s,
                                 std::size_t d_img, std::size_t d_txt, double noise_sigma,
                                 double eval_fraction, std::uint64_t seed);

// Per class, client proportions ~ Dirichlet(alpha); redrawn (bounded) until
// every client owns at least one sample. Returns train-pair indices per
/// client: disjoint and covering.
std::vector<std::vector<std::size_t>> partition_dirichlet(const DatasetManifest& manifest,
                                                          std::size_t n_clients, double alpha,
                                                          std::uint64_t seed);

struct CorruptionResult {
    std::vector<std::uint32_t> txt_rows;      // corrupted assignment per position
    std::vector<std::size_t> corrupted;       // positions whose pairing changed
};

// Mis-pairs floor(rate*m) positions by cycling their text assignments so
// every selected position ends up with some other position's text.
CorruptionResult inject_label_error(const std::vector<std::uint32_t>& txt_rows, double rate,
                                    std::uint64_t seed);

}  // namespace semfed
