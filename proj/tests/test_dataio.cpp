#include <algorithm>
#include <stdexcept>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "doctest.h"
#include "semfed/dataio.hpp"
#include "semfed/rng.hpp"

using namespace semfed;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const char* name) { return fs::temp_directory_path() / name; }

// Standalone encoder mirroring the documented feature-file layout, so the
// test fails if either side drifts.
std::string encode_features_by_hand(const FeatureSet& f) {
    std::string out;
    auto put = [&](const void* p, std::size_t n) {
        out.append(static_cast<const char*>(p), n);
    };
    out += "SEMF";
    std::uint32_t version = 1;
    put(&version, 4);
    std::uint8_t modality = static_cast<std::uint8_t>(f.signature.modality);
    put(&modality, 1);
    put(&f.signature.family, 2);
    put(&f.signature.dim, 4);
    std::uint64_t n = f.sample_ids.size();
    put(&n, 8);
    for (std::uint64_t id : f.sample_ids) put(&id, 8);
    put(f.features.data(), f.features.size() * 8);
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

TEST_CASE("synthetic data is a pure function of the arguments") {
    auto a = generate_synthetic(4, 10, 8, 12, 10, 0.1, 0.2, 7);
    auto b = generate_synthetic(4, 10, 8, 12, 10, 0.1, 0.2, 7);
    auto c = generate_synthetic(4, 10, 8, 12, 10, 0.1, 0.2, 8);
    CHECK(a.img == b.img);
    CHECK(a.txt == b.txt);
    CHECK(a.manifest == b.manifest);
    CHECK(a.skb == b.skb);
    CHECK(a.latents == b.latents);
    CHECK(a.img != c.img);

    CHECK(a.img.features.rows() == 40);
    CHECK(a.img.features.cols() == 12);
    CHECK(a.txt.features.cols() == 10);
    CHECK(a.skb.num_classes() == 4);
    CHECK(a.skb.dim() == 8);
    REQUIRE(a.manifest.pairings.size() == 40);
    for (std::size_t i = 0; i < 40; ++i) {
        CHECK(a.manifest.pairings[i].first == i);
        CHECK(a.manifest.pairings[i].second == i);
        CHECK(a.manifest.class_labels[i] == i / 10);
    }

    // stratified split: floor(0.2 * 10) = 2 eval pairs per class
    CHECK(a.manifest.eval_pairs.size() == 8);
    CHECK(a.manifest.train_pairs.size() == 32);
    std::set<std::size_t> seen(a.manifest.train_pairs.begin(), a.manifest.train_pairs.end());
    seen.insert(a.manifest.eval_pairs.begin(), a.manifest.eval_pairs.end());
    CHECK(seen.size() == 40);
}

TEST_CASE("noise-free latents sit exactly on their anchors") {
    auto d = generate_synthetic(5, 4, 8, 8, 8, 0.0, 0.0, 3);
    for (std::size_t i = 0; i < d.latents.rows(); ++i) {
        auto al = align_token(d.latents.row(i), d.latents.cols(), d.skb);
        CHECK(al.anchor_id == d.manifest.class_labels[i]);
        CHECK(al.similarity == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("mild noise keeps latents recoverable") {
    auto d = generate_synthetic(6, 20, 16, 20, 18, 0.1, 0.0, 11);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < d.latents.rows(); ++i) {
        auto al = align_token(d.latents.row(i), d.latents.cols(), d.skb);
        if (al.anchor_id == d.manifest.class_labels[i]) ++hit;
    }
    CHECK(hit >= 114);  // >= 95% of 120
}

TEST_CASE("synthetic generation rejects bad shapes") {
    CHECK_THROWS_AS(generate_synthetic(1, 10, 8, 12, 10, 0.1, 0.2, 7), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic(4, 0, 8, 12, 10, 0.1, 0.2, 7), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic(4, 10, 8, 4, 10, 0.1, 0.2, 7), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic(4, 10, 8, 12, 10, -0.1, 0.2, 7), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic(4, 10, 8, 12, 10, 0.1, 1.0, 7), std::invalid_argument);
}

TEST_CASE("feature files survive a round trip") {
    auto d = generate_synthetic(3, 5, 4, 6, 4, 0.2, 0.2, 21);
    auto path = tmp("semfed_test_feat.semf");
    save_features(d.img, path);
    FeatureSet back = load_features(path);
    CHECK(back == d.img);

    // byte-for-byte agreement with an independently written encoding
    CHECK(slurp(path) == encode_features_by_hand(d.img));
    fs::remove(path);
}

TEST_CASE("feature loading rejects damaged files") {
    auto d = generate_synthetic(3, 5, 4, 6, 4, 0.2, 0.2, 21);
    auto path = tmp("semfed_test_feat_bad.semf");
    save_features(d.txt, path);

    std::string bytes = slurp(path);
    {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
    }
    CHECK_THROWS(load_features(path));

    {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        std::string wrong = bytes;
        wrong[0] = 'X';
        os.write(wrong.data(), static_cast<std::streamsize>(wrong.size()));
    }
    CHECK_THROWS(load_features(path));
    fs::remove(path);
    CHECK_THROWS(load_features(path));
}

TEST_CASE("manifests survive a round trip") {
    auto d = generate_synthetic(3, 6, 4, 6, 4, 0.2, 0.34, 5);
    d.manifest.skb_prototypes_file = "skb.skb1";
    auto path = tmp("semfed_test_manifest.json");
    save_manifest(d.manifest, path);
    DatasetManifest back = load_manifest(path);
    CHECK(back == d.manifest);
    fs::remove(path);
}

TEST_CASE("dirichlet partition covers the training set exactly once") {
    auto d = generate_synthetic(5, 20, 8, 10, 9, 0.1, 0.2, 13);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto shards = partition_dirichlet(d.manifest, 6, 0.5, seed);
        REQUIRE(shards.size() == 6);
        std::vector<std::size_t> all;
        for (const auto& s : shards) {
            CHECK(!s.empty());
            CHECK(std::is_sorted(s.begin(), s.end()));
            all.insert(all.end(), s.begin(), s.end());
        }
        std::sort(all.begin(), all.end());
        CHECK(all == d.manifest.train_pairs);
    }

    auto again = partition_dirichlet(d.manifest, 6, 0.5, 1);
    auto first = partition_dirichlet(d.manifest, 6, 0.5, 1);
    CHECK(again == first);
}

TEST_CASE("partition edge cases") {
    auto d = generate_synthetic(4, 10, 8, 10, 9, 0.1, 0.2, 13);

    auto solo = partition_dirichlet(d.manifest, 1, 0.5, 2);
    REQUIRE(solo.size() == 1);
    CHECK(solo[0] == d.manifest.train_pairs);

    // huge alpha concentrates the Dirichlet near uniform proportions
    auto even = partition_dirichlet(d.manifest, 4, 1e6, 2);
    const double expect = static_cast<double>(d.manifest.train_pairs.size()) / 4.0;
    for (const auto& s : even)
        CHECK(std::abs(static_cast<double>(s.size()) - expect) <= 4.0);

    CHECK_THROWS_AS(partition_dirichlet(d.manifest, 0, 0.5, 2), std::invalid_argument);
    CHECK_THROWS_AS(partition_dirichlet(d.manifest, 4, 0.0, 2), std::invalid_argument);
    CHECK_THROWS_AS(partition_dirichlet(d.manifest, 9999, 0.5, 2), std::invalid_argument);
}

TEST_CASE("label corruption changes exactly the selected pairings") {
    std::vector<std::uint32_t> rows(10);
    std::iota(rows.begin(), rows.end(), 0u);

    auto none = inject_label_error(rows, 0.0, 5);
    CHECK(none.txt_rows == rows);
    CHECK(none.corrupted.empty());

    auto half = inject_label_error(rows, 0.5, 5);
    CHECK(half.corrupted.size() == 5);
    std::vector<std::size_t> changed;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (half.txt_rows[i] != rows[i]) changed.push_back(i);
    CHECK(changed == half.corrupted);

    // the corrupted positions permute their texts among themselves
    std::multiset<std::uint32_t> before, after;
    for (std::size_t i : half.corrupted) {
        before.insert(rows[i]);
        after.insert(half.txt_rows[i]);
    }
    CHECK(before == after);

    auto all = inject_label_error(rows, 1.0, 5);
    CHECK(all.corrupted.size() == 10);
    for (std::size_t i = 0; i < rows.size(); ++i) CHECK(all.txt_rows[i] != rows[i]);

    CHECK_THROWS_AS(inject_label_error(rows, -0.1, 5), std::invalid_argument);
    CHECK_THROWS_AS(inject_label_error(rows, 1.5, 5), std::invalid_argument);
}

TEST_CASE("single-pair corruption swaps with an unselected pair") {
    std::vector<std::uint32_t> rows{0, 1, 2, 3, 4};
    auto one = inject_label_error(rows, 0.2, 9);  // floor(0.2 * 5) = 1 selected
    REQUIRE(one.corrupted.size() == 2);           // the partner moves too
    std::vector<std::size_t> changed;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (one.txt_rows[i] != rows[i]) changed.push_back(i);
    CHECK(changed == one.corrupted);
    CHECK(one.txt_rows[one.corrupted[0]] == rows[one.corrupted[1]]);
    CHECK(one.txt_rows[one.corrupted[1]] == rows[one.corrupted[0]]);

    std::vector<std::uint32_t> lone{7};
    auto noop = inject_label_error(lone, 1.0, 9);
    CHECK(noop.txt_rows == lone);
    CHECK(noop.corrupted.empty());

    CHECK(inject_label_error(std::vector<std::uint32_t>{}, 0.7, 9).txt_rows.empty());
}

TEST_CASE("corruption is deterministic in the seed") {
    std::vector<std::uint32_t> rows(30);
    std::iota(rows.begin(), rows.end(), 100u);
    auto a = inject_label_error(rows, 0.4, 77);
    auto b = inject_label_error(rows, 0.4, 77);
    auto c = inject_label_error(rows, 0.4, 78);
    CHECK(a.txt_rows == b.txt_rows);
    CHECK(a.corrupted == b.corrupted);
    CHECK(a.txt_rows != c.txt_rows);
}
