#include <algorithm>
#include <stdexcept>
#include <cmath>
#include <cstdlib>

#include "doctest.h"
#include "semfed/adapter.hpp"
#include "semfed/rng.hpp"

using namespace semfed;

namespace {

const EncoderSignature kImg{Modality::image, 0, 2};
const EncoderSignature kTxt{Modality::text, 0, 3};

// Hand-built params: identity-ish projections so every stage has a value we
// can compute on paper. d_h = 2, d_s = 2.
AdapterParams handmade_params() {
    AdapterParams p;
    p.input_proj[kImg] = InputProj{Matrix::from_rows(2, 2, {1, 0, 0, 1}),
                                   Matrix::from_rows(1, 2, {0.5, -2.0})};
    p.input_proj[kTxt] = InputProj{Matrix::from_rows(3, 2, {1, 0, 0, 1, 0, 0}),
                                   Matrix(1, 2)};
    p.cross_map = Matrix::from_rows(2, 2, {1, 0, 0, 1});
    p.mp_weight = Matrix(2, 2);  // zeros: message passing degenerates to normalize(h)
    p.out_proj = Matrix::from_rows(2, 2, {1, 0, 0, 1});
    p.attn_scale = 1.5;
    p.hyper = AdapterHyper{1, 1, 1.0, 1};
    return p;
}

Batch handmade_batch() {
    Batch batch;
    batch.push_back({kImg, {10, 11}, Matrix::from_rows(2, 2, {1, -1, 0, 2})});
    batch.push_back({kTxt, {20, 21}, Matrix::from_rows(2, 3, {2, 0, 9, 0, 3, 9})});
    return batch;
}

Batch random_batch(std::uint64_t seed, std::size_t n_img, std::size_t n_txt,
                   const EncoderSignature& img, const EncoderSignature& txt) {
    Rng rng(seed);
    Matrix fi(n_img, img.dim), ft(n_txt, txt.dim);
    for (std::size_t i = 0; i < fi.size(); ++i) fi.data()[i] = rng.normal();
    for (std::size_t i = 0; i < ft.size(); ++i) ft.data()[i] = rng.normal();
    std::vector<std::uint64_t> ids_i, ids_t;
    for (std::size_t i = 0; i < n_img; ++i) ids_i.push_back(100 + i);
    for (std::size_t i = 0; i < n_txt; ++i) ids_t.push_back(200 + i);
    Batch b;
    b.push_back({img, ids_i, fi});
    b.push_back({txt, ids_t, ft});
    return b;
}

}  // namespace

TEST_CASE("names are stable") {
    CHECK(modality_name(Modality::image) == "image");
    CHECK(modality_name(Modality::text) == "text");
    CHECK(signature_name(kTxt) == "text/f0/d3");
}

TEST_CASE("init is reproducible and bounded") {
    AdapterHyper hyper{3, 3, 1.0, 1};
    auto a = init_adapter_params({kImg, kTxt}, 8, 4, hyper, 1.5, 42);
    auto b = init_adapter_params({kImg, kTxt}, 8, 4, hyper, 1.5, 42);
    auto c = init_adapter_params({kImg, kTxt}, 8, 4, hyper, 1.5, 43);
    CHECK(a == b);
    CHECK(a != c);

    for (const auto& [sig, proj] : a.input_proj) {
        const double s = 1.0 / std::sqrt(static_cast<double>(sig.dim));
        for (std::size_t i = 0; i < proj.w.size(); ++i)
            CHECK(std::abs(proj.w.data()[i]) <= s);
        for (std::size_t i = 0; i < proj.b.size(); ++i) CHECK(proj.b.data()[i] == 0.0);
    }
    const double sh = 1.0 / std::sqrt(8.0);
    for (std::size_t i = 0; i < a.mp_weight.size(); ++i)
        CHECK(std::abs(a.mp_weight.data()[i]) <= sh);
    CHECK(a.d_h() == 8);
    CHECK(a.d_s() == 4);
}

TEST_CASE("trainable blocks follow the vectorization order") {
    AdapterHyper hyper{3, 3, 1.0, 1};
    auto p = init_adapter_params({kTxt, kImg}, 8, 4, hyper, 1.5, 1);  // order given backwards
    auto blocks = trainable_blocks(p);
    REQUIRE(blocks.size() == 7);
    CHECK(blocks[0].first == "proj:image/f0/d2:w");
    CHECK(blocks[1].first == "proj:image/f0/d2:b");
    CHECK(blocks[2].first == "proj:text/f0/d3:w");
    CHECK(blocks[3].first == "proj:text/f0/d3:b");
    CHECK(blocks[4].first == "cross_map");
    CHECK(blocks[5].first == "mp_weight");
    CHECK(blocks[6].first == "out_proj");

    std::size_t total = 0;
    for (auto& [name, m] : blocks) total += m->size();
    CHECK(total == total_param_count(p));
    CHECK(total == (2 * 8 + 8) + (3 * 8 + 8) + 8 * 8 + 8 * 8 + 8 * 4);

    auto zero = zeros_like(p);
    CHECK(zero.d_h() == p.d_h());
    for (auto& [name, m] : trainable_blocks(zero))
        for (std::size_t i = 0; i < m->size(); ++i) CHECK(m->data()[i] == 0.0);
}

TEST_CASE("project_inputs applies affine map then relu") {
    auto nodes = project_inputs(handmade_batch(), handmade_params());
    REQUIRE(nodes.size() == 4);
    // img row 0: [1,-1] -> z = [1.5, -3] -> relu
    CHECK(nodes[0].h == std::vector<double>{1.5, 0.0});
    // img row 1: [0,2] -> z = [0.5, 0]
    CHECK(nodes[1].h == std::vector<double>{0.5, 0.0});
    // txt rows keep their first two coordinates (third column of W is dead)
    CHECK(nodes[2].h == std::vector<double>{2.0, 0.0});
    CHECK(nodes[3].h == std::vector<double>{0.0, 3.0});

    CHECK(nodes[0].sample_id == 10);
    CHECK(nodes[3].sample_id == 21);
    CHECK(nodes[0].modality == Modality::image);
    CHECK(nodes[2].modality == Modality::text);
    for (std::size_t i = 0; i < 4; ++i) CHECK(nodes[i].node_id == i);
}

TEST_CASE("intra edges carry the gaussian kernel of embedding distance") {
    auto nodes = project_inputs(handmade_batch(), handmade_params());
    auto edges = build_intra_edges(nodes, 1.0, 1);
    // Two modalities, two nodes each, k=1: everyone picks their only sibling.
    REQUIRE(edges.size() == 4);
    for (const auto& e : edges) {
        CHECK(e.kind == EdgeKind::intra);
        CHECK(nodes[e.src].modality == nodes[e.dst].modality);
    }
    // |h(img0) - h(img1)| = 1 -> exp(-1/2)
    const double expected = 0.60653065971263342;
    auto img01 = std::find_if(edges.begin(), edges.end(),
                              [](const GraphEdge& e) { return e.src == 0 && e.dst == 1; });
    REQUIRE(img01 != edges.end());
    CHECK(img01->weight == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("cross edges average raw and refined cosine") {
    auto params = handmade_params();
    auto nodes = project_inputs(handmade_batch(), params);
    auto edges = build_cross_edges(nodes, params, 1);
    REQUIRE(edges.size() == 4);
    for (const auto& e : edges) {
        CHECK(e.kind == EdgeKind::cross);
        CHECK(nodes[e.src].modality != nodes[e.dst].modality);
    }
    // img0 h=(1.5,0) vs txt0 h=(2,0): cosine 1 both raw and refined (W_x = I).
    auto img0 = std::find_if(edges.begin(), edges.end(),
                             [](const GraphEdge& e) { return e.src == 0; });
    REQUIRE(img0 != edges.end());
    CHECK(img0->dst == 2);
    CHECK(img0->weight == doctest::Approx(1.0).epsilon(1e-14));
    // txt1 h=(0,3) is orthogonal to both image nodes; weight mean(0,0) = 0.
    auto txt1 = std::find_if(edges.begin(), edges.end(),
                             [](const GraphEdge& e) { return e.src == 3; });
    REQUIRE(txt1 != edges.end());
    CHECK(txt1->weight == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("forward composes the public stages exactly") {
    auto params = handmade_params();
    auto batch = handmade_batch();

    auto nodes = project_inputs(batch, params);
    SemanticGraph g;
    g.nodes = nodes;
    auto intra = build_intra_edges(nodes, params.hyper.sigma, params.hyper.k_intra);
    auto cross = build_cross_edges(nodes, params, params.hyper.k_cross);
    g.edges = intra;
    g.edges.insert(g.edges.end(), cross.begin(), cross.end());
    auto refined = message_pass(g, params);
    Matrix tokens = emit_tokens(refined, params);

    auto out = adapter_forward(batch, params);
    CHECK(out.tokens == tokens);
    REQUIRE(out.graph.nodes.size() == g.nodes.size());
    REQUIRE(out.graph.edges.size() == g.edges.size());
    for (std::size_t i = 0; i < g.edges.size(); ++i) {
        CHECK(out.graph.edges[i].src == g.edges[i].src);
        CHECK(out.graph.edges[i].dst == g.edges[i].dst);
        CHECK(out.graph.edges[i].weight == g.edges[i].weight);
    }
}

TEST_CASE("handmade forward hits the paper-and-pencil tokens") {
    // W_g = 0 turns message passing into row normalization; W_o = I keeps it.
    auto out = adapter_forward(handmade_batch(), handmade_params());
    REQUIRE(out.tokens.rows() == 4);
    REQUIRE(out.tokens.cols() == 2);
    CHECK(out.tokens(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(out.tokens(0, 1) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(out.tokens(1, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(out.tokens(2, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(out.tokens(3, 0) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(out.tokens(3, 1) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("tokens come out unit length, node order matches batch order") {
    EncoderSignature img{Modality::image, 2, 7};
    EncoderSignature txt{Modality::text, 1, 5};
    AdapterHyper hyper{3, 3, 1.0, 1};
    auto params = init_adapter_params({img, txt}, 8, 6, hyper, 1.5, 7);
    auto batch = random_batch(99, 6, 5, img, txt);
    auto out = adapter_forward(batch, params);

    REQUIRE(out.tokens.rows() == 11);
    REQUIRE(out.tokens.cols() == 6);
    for (std::size_t i = 0; i < out.tokens.rows(); ++i)
        CHECK(norm2(out.tokens.row(i), 6) == doctest::Approx(1.0).epsilon(1e-12));

    auto rows_img = modality_rows(out.graph, Modality::image);
    auto rows_txt = modality_rows(out.graph, Modality::text);
    REQUIRE(rows_img.size() == 6);
    REQUIRE(rows_txt.size() == 5);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(rows_img[i] == i);
        CHECK(out.graph.nodes[i].sample_id == 100 + i);
    }
    for (std::size_t i = 0; i < 5; ++i) CHECK(rows_txt[i] == 6 + i);
}

TEST_CASE("every node keeps at most k neighbours per edge family") {
    EncoderSignature img{Modality::image, 2, 7};
    EncoderSignature txt{Modality::text, 1, 5};
    AdapterHyper hyper{2, 3, 0.7, 1};
    auto params = init_adapter_params({img, txt}, 8, 6, hyper, 1.5, 7);
    auto batch = random_batch(5, 7, 6, img, txt);
    auto out = adapter_forward(batch, params);

    std::vector<std::size_t> intra(13, 0), cross(13, 0);
    for (const auto& e : out.graph.edges)
        (e.kind == EdgeKind::intra ? intra : cross)[e.src]++;
    for (std::size_t i = 0; i < 13; ++i) {
        CHECK(intra[i] == 2);  // plenty of same-modality candidates
        CHECK(cross[i] == 3);
    }
}

TEST_CASE("forward is deterministic") {
    EncoderSignature img{Modality::image, 0, 9};
    EncoderSignature txt{Modality::text, 0, 4};
    AdapterHyper hyper{3, 2, 1.3, 2};
    auto params = init_adapter_params({img, txt}, 10, 5, hyper, 1.5, 3);
    auto batch = random_batch(17, 8, 8, img, txt);
    auto a = adapter_forward(batch, params);
    auto b = adapter_forward(batch, params);
    CHECK(a.tokens == b.tokens);
    REQUIRE(a.graph.edges.size() == b.graph.edges.size());
    for (std::size_t i = 0; i < a.graph.edges.size(); ++i)
        CHECK(a.graph.edges[i].weight == b.graph.edges[i].weight);
}

TEST_CASE("permuting rows within a slice permutes tokens the same way") {
    EncoderSignature img{Modality::image, 0, 6};
    EncoderSignature txt{Modality::text, 0, 4};
    AdapterHyper hyper{2, 2, 1.0, 1};
    auto params = init_adapter_params({img, txt}, 8, 5, hyper, 1.5, 11);
    auto batch = random_batch(31, 5, 4, img, txt);

    std::vector<std::size_t> pi{3, 0, 4, 1, 2};  // permutation of img rows
    std::vector<std::size_t> pt{2, 3, 1, 0};     // permutation of txt rows
    Batch shuffled = batch;
    for (std::size_t r = 0; r < 5; ++r) {
        shuffled[0].sample_ids[r] = batch[0].sample_ids[pi[r]];
        for (std::size_t c = 0; c < 6; ++c)
            shuffled[0].features(r, c) = batch[0].features(pi[r], c);
    }
    for (std::size_t r = 0; r < 4; ++r) {
        shuffled[1].sample_ids[r] = batch[1].sample_ids[pt[r]];
        for (std::size_t c = 0; c < 4; ++c)
            shuffled[1].features(r, c) = batch[1].features(pt[r], c);
    }

    auto base = adapter_forward(batch, params);
    auto perm = adapter_forward(shuffled, params);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 5; ++c)
            CHECK(perm.tokens(r, c) ==
                  doctest::Approx(base.tokens(pi[r], c)).epsilon(1e-9));
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 5; ++c)
            CHECK(perm.tokens(5 + r, c) ==
                  doctest::Approx(base.tokens(5 + pt[r], c)).epsilon(1e-9));
}

TEST_CASE("stacking layers changes tokens but keeps the first-layer graph") {
    EncoderSignature img{Modality::image, 0, 6};
    EncoderSignature txt{Modality::text, 0, 4};
    AdapterHyper one{2, 2, 1.0, 1};
    AdapterHyper two{2, 2, 1.0, 2};
    auto p1 = init_adapter_params({img, txt}, 8, 5, one, 1.5, 11);
    auto p2 = p1;
    p2.hyper = two;
    auto batch = random_batch(31, 5, 4, img, txt);

    auto o1 = adapter_forward(batch, p1);
    auto o2 = adapter_forward(batch, p2);
    CHECK(o1.tokens != o2.tokens);
    REQUIRE(o1.graph.edges.size() == o2.graph.edges.size());
    for (std::size_t i = 0; i < o1.graph.edges.size(); ++i)
        CHECK(o1.graph.edges[i].weight == o2.graph.edges[i].weight);
}

TEST_CASE("forward rejects malformed batches") {
    auto params = handmade_params();
    Batch empty;
    CHECK_THROWS_AS(adapter_forward(empty, params), std::invalid_argument);

    Batch unknown;
    unknown.push_back({EncoderSignature{Modality::image, 9, 2}, {1},
                       Matrix::from_rows(1, 2, {1, 0})});
    CHECK_THROWS_AS(adapter_forward(unknown, params), std::invalid_argument);

    Batch mismatch;
    mismatch.push_back({kImg, {1, 2}, Matrix::from_rows(1, 2, {1, 0})});
    CHECK_THROWS_AS(adapter_forward(mismatch, params), std::invalid_argument);
}
