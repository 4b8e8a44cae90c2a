#include <cstring>
#include <stdexcept>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "semfed/rng.hpp"
#include "semfed/skb.hpp"

using namespace semfed;
namespace fs = std::filesystem;

namespace {

// Encodes the SKB layout by hand: magic, u32 version, u32 C, u32 d_s,
// row-major f64 anchors, then C u32 class ids. Kept deliberately independent
// of the library writer.
std::string independent_skb_bytes(const Matrix& anchors,
                                  const std::vector<std::uint32_t>& ids) {
    std::string out = "SKB1";
    auto put_u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    };
    auto put_f64 = [&](double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    };
    put_u32(1);
    put_u32(static_cast<std::uint32_t>(anchors.rows()));
    put_u32(static_cast<std::uint32_t>(anchors.cols()));
    for (std::size_t i = 0; i < anchors.size(); ++i) put_f64(anchors.data()[i]);
    for (std::uint32_t id : ids) put_u32(id);
    return out;
}

}  // namespace

TEST_CASE("build_skb normalizes rows and validates input") {
    Matrix protos = Matrix::from_rows(2, 2, {3, 4, 0, 2});
    Skb skb = build_skb(protos, {7, 9});
    CHECK(skb.num_classes() == 2);
    CHECK(skb.dim() == 2);
    CHECK(skb.anchors(0, 0) == doctest::Approx(0.6));
    CHECK(skb.anchors(0, 1) == doctest::Approx(0.8));
    CHECK(skb.anchors(1, 1) == 1.0);

    CHECK_THROWS_AS(build_skb(Matrix(1, 2, 1.0), {0}), std::invalid_argument);
    CHECK_THROWS_AS(build_skb(protos, {7, 7}), std::invalid_argument);
    Matrix with_zero = Matrix::from_rows(2, 2, {1, 0, 0, 0});
    CHECK_THROWS_AS(build_skb(with_zero, {0, 1}), std::invalid_argument);
}

TEST_CASE("align_token picks the nearest anchor, ties to lower index") {
    Matrix protos = Matrix::from_rows(3, 2, {1, 0, 0, 1, 1, 1});
    Skb skb = build_skb(protos, {10, 20, 30});
    const double t[2] = {2.0, 0.1};
    Alignment al = align_token(t, 2, skb);
    CHECK(al.anchor_id == 10);
    CHECK(al.anchor_index == 0);
    CHECK(al.similarity == doctest::Approx(2.0 / std::sqrt(4.01)).epsilon(1e-12));

    // exactly between anchors 0 and 1: strict > keeps the first seen (lower index)
    const double mid[2] = {1.0, 1.0};
    Alignment tie = align_token(mid, 2, skb);
    CHECK(tie.anchor_index == 2);  // the diagonal anchor matches best here
    const double mid2[2] = {0.5, 0.5};
    CHECK(align_token(mid2, 2, skb).anchor_index == 2);

    const double zero[2] = {0.0, 0.0};
    CHECK_THROWS_AS(align_token(zero, 2, skb), std::domain_error);
}

TEST_CASE("align_token_top2 reports the runner-up") {
    Matrix protos = Matrix::from_rows(2, 2, {1, 0, 0, 1});
    Skb skb = build_skb(protos, {0, 1});
    const double t[2] = {0.9, 0.1};
    auto [best, second] = align_token_top2(t, 2, skb);
    CHECK(best.anchor_index == 0);
    CHECK(second == doctest::Approx(0.1 / std::hypot(0.9, 0.1)).epsilon(1e-12));
    CHECK(best.similarity > second);
}

TEST_CASE("skb file roundtrip matches an independently written file") {
    Matrix protos = Matrix::from_rows(2, 3, {1, 0, 0, 0.6, 0, 0.8});
    Skb skb = build_skb(protos, {4, 2});

    const fs::path path = fs::temp_directory_path() / "semfed-test-skb.skb1";
    skb_save(skb, path);

    // byte-for-byte equality with the independent writer
    std::ifstream in(path, std::ios::binary);
    std::string written((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(written == independent_skb_bytes(skb.anchors, skb.class_ids));

    Skb loaded = skb_load(path);
    CHECK(loaded == skb);
    fs::remove(path);
}

TEST_CASE("randomized skb roundtrips") {
    Rng rng(404);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t c = 2 + rng.below(6);
        const std::size_t d = 2 + rng.below(9);
        Matrix protos(c, d);
        for (std::size_t i = 0; i < protos.size(); ++i) protos.data()[i] = rng.normal();
        std::vector<std::uint32_t> ids;
        for (std::size_t i = 0; i < c; ++i) ids.push_back(static_cast<std::uint32_t>(100 + i));
        Skb skb = build_skb(protos, ids);
        const fs::path path = fs::temp_directory_path() / "semfed-test-skb-rand.skb1";
        skb_save(skb, path);
        CHECK(skb_load(path) == skb);
        fs::remove(path);
    }
}
