#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "semfed/matrix.hpp"
#include "semfed/rng.hpp"

namespace semfed {

enum class Modality : std::uint8_t { image = 0, text = 1 };

std::string modality_name(Modality m);

// Identifies a frozen encoder: what it encodes, which family produced it,
// and the feature width it emits. Keys the adapter's input projections.
struct EncoderSignature {
    Modality modality = Modality::image;
    std::uint16_t family = 0;
    std::uint32_t dim = 0;

    auto operator<=>(const EncoderSignature&) const = default;
};

std::string signature_name(const EncoderSignature& sig);

struct InputProj {
    Matrix w;  // d_m x d_h
    Matrix b;  // 1 x d_h

    bool operator==(const InputProj&) const = default;
};

struct AdapterHyper {
    std::size_t k_intra = 8;
    std::size_t k_cross = 8;
    double sigma = 1.0;
    std::size_t layers = 1;

    bool operator==(const AdapterHyper&) const = default;
};

// All trainable state of the shared adapter. The std::map keeps input
// projections in signature order, which fixes the parameter vectorization
// used by aggregation and checkpoints: per signature W then b (ascending
// signature), then cross_map, mp_weight, out_proj, all row-major.
struct AdapterParams {
    std::map<EncoderSignature, InputProj> input_proj;
    Matrix cross_map;  // W_x: d_h x d_h
    Matrix mp_weight;  // W_g: d_h x d_h
    Matrix out_proj;   // W_o: d_h x d_s
    double attn_scale = 1.5;  // fixed, not trained
    AdapterHyper hyper;

    std::size_t d_h() const { return mp_weight.rows(); }
    std::size_t d_s() const { return out_proj.cols(); }

    bool operator==(const AdapterParams&) const = default;
};

// Seeded init: uniform(-s, s) with s = 1/sqrt(fan_in) per matrix, biases 0,
// entries drawn in vectorization order so the whole thing is reproducible.
AdapterParams init_adapter_params(const std::vector<EncoderSignature>& signatures,
                                  std::size_t d_h, std::size_t d_s, const AdapterHyper& hyper,
                                  double attn_scale, std::uint64_t seed);

AdapterParams zeros_like(const AdapterParams& p);

// Trainable blocks in vectorization order, name + matrix. Gradients reuse
// AdapterParams as the holder so the two lists always line up.
std::vector<std::pair<std::string, Matrix*>> trainable_blocks(AdapterParams& p);
std::vector<std::pair<std::string, const Matrix*>> trainable_blocks_const(const AdapterParams& p);

std::size_t total_param_count(const AdapterParams& p);

// ---- graph ----

struct GraphNode {
    std::size_t node_id = 0;
    std::uint64_t sample_id = 0;
    Modality modality = Modality::image;
    std::vector<double> h;  // d_h embedding
};

enum class EdgeKind : std::uint8_t { intra = 0, cross = 1 };

struct GraphEdge {
    std::size_t src = 0;
    std::size_t dst = 0;
    double weight = 0.0;
    EdgeKind kind = EdgeKind::intra;
};

struct SemanticGraph {
    std::vector<GraphNode> nodes;
    std::vector<GraphEdge> edges;
};

// One slice of a mini-batch: rows from a single frozen encoder.
struct BatchSlice {
    EncoderSignature signature;
    std::vector<std::uint64_t> sample_ids;
    Matrix features;  // m x signature.dim
};
using Batch = std::vector<BatchSlice>;

// ---- forward pipeline, exposed stage by stage; adapter_forward composes ----

std::vector<GraphNode> project_inputs(const Batch& batch, const AdapterParams& params);
std::vector<GraphEdge> build_intra_edges(const std::vector<GraphNode>& nodes, double sigma,
                                         std::size_t k_intra);
std::vector<GraphEdge> build_cross_edges(const std::vector<GraphNode>& nodes,
                                         const AdapterParams& params, std::size_t k_cross);
// One message-passing layer over the given graph.
std::vector<GraphNode> message_pass(const SemanticGraph& graph, const AdapterParams& params);
Matrix emit_tokens(const std::vector<GraphNode>& nodes, const AdapterParams& params);

// Everything the backward pass needs from one forward run.
struct LayerTrace {
    Matrix h_in;                     // n x d_h embeddings entering the layer
    std::vector<GraphEdge> edges;    // selected edges with weights
    Matrix logits;                   // n x n edge weights (0 off-edge)
    std::vector<std::uint8_t> mask;  // n*n adjacency mask
    Matrix attn;                     // n x n row-softmax of attn_scale * logits
    Matrix hw;                       // h_in * W_g
    Matrix u;                        // pre-normalization residual
    std::vector<double> u_norm;
    Matrix h_out;                    // n x d_h, unit rows
};

struct ForwardTrace {
    Matrix z;   // n x d_h pre-relu projections
    Matrix h0;  // n x d_h post-relu
    std::vector<LayerTrace> layers;
    Matrix y;   // n x d_s pre-normalization token projections
    std::vector<double> y_norm;
};

struct AdapterOutput {
    SemanticGraph graph;  // first-layer graph (later layers rebuild edges)
    Matrix tokens;        // n x d_s unit rows, node order = batch order
};

AdapterOutput adapter_forward(const Batch& batch, const AdapterParams& params);
AdapterOutput adapter_forward_traced(const Batch& batch, const AdapterParams& params,
                                     ForwardTrace& trace);

// Row indices of nodes carrying the given modality, in node order.
std::vector<std::size_t> modality_rows(const SemanticGraph& graph, Modality m);

}  // namespace semfed
