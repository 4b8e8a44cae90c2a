#include "semfed/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "semfed/kernels.hpp"
#include "semfed/log.hpp"

namespace semfed {

std::string modality_name(Modality m) {
    switch (m) {
        case Modality::image: return "image";
        case Modality::text: return "text";
    }
    return "modality#" + std::to_string(static_cast<unsigned>(m));
}

std::string signature_name(const EncoderSignature& sig) {
    return modality_name(sig.modality) + "/f" + std::to_string(sig.family) + "/d" +
           std::to_string(sig.dim);
}

AdapterParams init_adapter_params(const std::vector<EncoderSignature>& signatures,
                                  std::size_t d_h, std::size_t d_s, const AdapterHyper& hyper,
                                  double attn_scale, std::uint64_t seed) {
    if (signatures.empty()) throw std::invalid_argument("init_adapter_params: no signatures");
    if (d_h == 0 || d_s == 0) throw std::invalid_argument("init_adapter_params: zero dims");
    if (attn_scale <= 0.0) throw std::invalid_argument("init_adapter_params: attn_scale <= 0");

    std::vector<EncoderSignature> sigs = signatures;
    std::sort(sigs.begin(), sigs.end());
    for (std::size_t i = 1; i < sigs.size(); ++i) {
        if (sigs[i].modality == sigs[i - 1].modality && sigs[i].family == sigs[i - 1].family)
            throw std::invalid_argument("init_adapter_params: conflicting dims for " +
                                        signature_name(sigs[i]));
    }

    Rng rng(derive_seed(seed, "adapter-init"));
    auto fill_uniform = [&](Matrix& m, std::size_t fan_in) {
        const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-s, s);
    };

    AdapterParams p;
    p.attn_scale = attn_scale;
    p.hyper = hyper;
    for (const auto& sig : sigs) {
        InputProj proj{Matrix(sig.dim, d_h), Matrix(1, d_h)};
        fill_uniform(proj.w, sig.dim);
        p.input_proj.emplace(sig, std::move(proj));
    }
    p.cross_map = Matrix(d_h, d_h);
    fill_uniform(p.cross_map, d_h);
    p.mp_weight = Matrix(d_h, d_h);
    fill_uniform(p.mp_weight, d_h);
    p.out_proj = Matrix(d_h, d_s);
    fill_uniform(p.out_proj, d_h);
    return p;
}

AdapterParams zeros_like(const AdapterParams& p) {
    AdapterParams z;
    z.attn_scale = p.attn_scale;
    z.hyper = p.hyper;
    for (const auto& [sig, proj] : p.input_proj)
        z.input_proj.emplace(sig, InputProj{Matrix(proj.w.rows(), proj.w.cols()),
                                            Matrix(proj.b.rows(), proj.b.cols())});
    z.cross_map = Matrix(p.cross_map.rows(), p.cross_map.cols());
    z.mp_weight = Matrix(p.mp_weight.rows(), p.mp_weight.cols());
    z.out_proj = Matrix(p.out_proj.rows(), p.out_proj.cols());
    return z;
}

std::vector<std::pair<std::string, Matrix*>> trainable_blocks(AdapterParams& p) {
    std::vector<std::pair<std::string, Matrix*>> blocks;
    for (auto& [sig, proj] : p.input_proj) {
        blocks.emplace_back("proj:" + signature_name(sig) + ":w", &proj.w);
        blocks.emplace_back("proj:" + signature_name(sig) + ":b", &proj.b);
    }
    blocks.emplace_back("cross_map", &p.cross_map);
    blocks.emplace_back("mp_weight", &p.mp_weight);
    blocks.emplace_back("out_proj", &p.out_proj);
    return blocks;
}

std::vector<std::pair<std::string, const Matrix*>> trainable_blocks_const(const AdapterParams& p) {
    std::vector<std::pair<std::string, const Matrix*>> blocks;
    for (const auto& [sig, proj] : p.input_proj) {
        blocks.emplace_back("proj:" + signature_name(sig) + ":w", &proj.w);
        blocks.emplace_back("proj:" + signature_name(sig) + ":b", &proj.b);
    }
    blocks.emplace_back("cross_map", &p.cross_map);
    blocks.emplace_back("mp_weight", &p.mp_weight);
    blocks.emplace_back("out_proj", &p.out_proj);
    return blocks;
}

std::size_t total_param_count(const AdapterParams& p) {
    std::size_t n = 0;
    for (const auto& [name, m] : trainable_blocks_const(p)) n += m->size();
    return n;
}

// ---- forward ----

std::vector<GraphNode> project_inputs(const Batch& batch, const AdapterParams& params) {
    std::vector<GraphNode> nodes;
    for (const auto& slice : batch) {
        auto it = params.input_proj.find(slice.signature);
        if (it == params.input_proj.end())
            throw std::invalid_argument("project_inputs: no projection registered for " +
                                        signature_name(slice.signature));
        const InputProj& proj = it->second;
        if (slice.features.cols() != proj.w.rows())
            throw std::invalid_argument("project_inputs: feature dim mismatch for " +
                                        signature_name(slice.signature));
        Matrix z = matmul(slice.features, proj.w);
        for (std::size_t r = 0; r < z.rows(); ++r) {
            GraphNode node;
            node.node_id = nodes.size();
            node.sample_id = slice.sample_ids[r];
            node.modality = slice.signature.modality;
            node.h.resize(z.cols());
            for (std::size_t c = 0; c < z.cols(); ++c) {
                const double v = z(r, c) + proj.b(0, c);
                node.h[c] = v > 0.0 ? v : 0.0;
            }
            nodes.push_back(std::move(node));
        }
    }
    return nodes;
}

std::vector<GraphEdge> build_intra_edges(const std::vector<GraphNode>& nodes, double sigma,
                                         std::size_t k_intra) {
    if (sigma <= 0.0) throw std::invalid_argument("build_intra_edges: sigma must be positive");
    std::vector<GraphEdge> edges;
    if (k_intra == 0) return edges;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        std::vector<std::size_t> cand;
        std::vector<double> vals;
        for (std::size_t j = 0; j < nodes.size(); ++j) {
            if (j == i || nodes[j].modality != nodes[i].modality) continue;
            cand.push_back(j);
            vals.push_back(gaussian_kernel(nodes[i].h, nodes[j].h, sigma));
        }
        for (std::size_t pos : top_k_indices(vals, k_intra))
            edges.push_back({i, cand[pos], vals[pos], EdgeKind::intra});
    }
    return edges;
}

std::vector<GraphEdge> build_cross_edges(const std::vector<GraphNode>& nodes,
                                         const AdapterParams& params, std::size_t k_cross) {
    std::vector<GraphEdge> edges;
    if (k_cross == 0) return edges;
    std::set<Modality> present;
    for (const auto& n : nodes) present.insert(n.modality);
    if (present.size() < 2) return edges;

    const std::size_t n = nodes.size();
    const std::size_t d_h = params.mp_weight.rows();
    // Map every embedding through W_x once.
    Matrix h(n, d_h), mapped;
    for (std::size_t i = 0; i < n; ++i)
        std::copy(nodes[i].h.begin(), nodes[i].h.end(), h.row(i));
    mapped = matmul(h, params.cross_map);

    std::vector<double> hn(n), mn(n);
    for (std::size_t i = 0; i < n; ++i) {
        hn[i] = norm2(h.row(i), d_h);
        mn[i] = norm2(mapped.row(i), d_h);
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (hn[i] == 0.0 || mn[i] == 0.0) {
            log_warn("build_cross_edges: node " + std::to_string(i) +
                     " has a zero-norm embedding, no cross edges");
            continue;
        }
        std::vector<std::size_t> cand;
        std::vector<double> refined, raw;
        for (std::size_t j = 0; j < n; ++j) {
            if (nodes[j].modality == nodes[i].modality) continue;
            if (hn[j] == 0.0 || mn[j] == 0.0) continue;
            cand.push_back(j);
            raw.push_back(dot(h.row(i), h.row(j), d_h) / (hn[i] * hn[j]));
            refined.push_back(dot(mapped.row(i), mapped.row(j), d_h) / (mn[i] * mn[j]));
        }
        for (std::size_t pos : top_k_indices(refined, k_cross))
            edges.push_back({i, cand[pos], (raw[pos] + refined[pos]) / 2.0, EdgeKind::cross});
    }
    return edges;
}

namespace {

// One attention + aggregate + normalize layer over fixed edges. h is n x d_h
// entering the layer; returns the normalized output and fills the trace.
Matrix run_layer(const Matrix& h, const std::vector<GraphEdge>& edges,
                 const AdapterParams& params, LayerTrace* trace) {
    const std::size_t n = h.rows();
    const std::size_t d_h = h.cols();

    Matrix logits(n, n);
    std::vector<std::uint8_t> mask(n * n, 0);
    for (const auto& e : edges) {
        logits(e.src, e.dst) = e.weight;
        mask[e.src * n + e.dst] = 1;
    }
    Matrix attn = masked_row_softmax(logits, mask, params.attn_scale);

    Matrix hw = matmul(h, params.mp_weight);
    Matrix u = matmul(attn, hw);
    u += h;

    Matrix out(n, d_h);
    std::vector<double> u_norm(n);
    for (std::size_t i = 0; i < n; ++i) {
        u_norm[i] = norm2(u.row(i), d_h);
        if (u_norm[i] == 0.0)
            throw std::runtime_error(
                "message_pass: node " + std::to_string(i) +
                " collapsed to the zero vector after aggregation (embedding norm " +
                std::to_string(norm2(h.row(i), d_h)) + ")");
        for (std::size_t c = 0; c < d_h; ++c) out(i, c) = u(i, c) / u_norm[i];
    }

    if (trace) {
        trace->h_in = h;
        trace->edges = edges;
        trace->logits = std::move(logits);
        trace->mask = std::move(mask);
        trace->attn = std::move(attn);
        trace->hw = std::move(hw);
        trace->u = std::move(u);
        trace->u_norm = std::move(u_norm);
        trace->h_out = out;
    }
    return out;
}

Matrix nodes_to_matrix(const std::vector<GraphNode>& nodes, std::size_t d_h) {
    Matrix h(nodes.size(), d_h);
    for (std::size_t i = 0; i < nodes.size(); ++i)
        std::copy(nodes[i].h.begin(), nodes[i].h.end(), h.row(i));
    return h;
}

}  // namespace

std::vector<GraphNode> message_pass(const SemanticGraph& graph, const AdapterParams& params) {
    const std::size_t d_h = params.mp_weight.rows();
    Matrix h = nodes_to_matrix(graph.nodes, d_h);
    Matrix out = run_layer(h, graph.edges, params, nullptr);
    std::vector<GraphNode> result = graph.nodes;
    for (std::size_t i = 0; i < result.size(); ++i)
        result[i].h.assign(out.row(i), out.row(i) + d_h);
    return result;
}

Matrix emit_tokens(const std::vector<GraphNode>& nodes, const AdapterParams& params) {
    const std::size_t d_h = params.out_proj.rows();
    Matrix h = nodes_to_matrix(nodes, d_h);
    Matrix y = matmul(h, params.out_proj);
    Matrix tokens(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
        const double n = norm2(y.row(i), y.cols());
        if (n == 0.0)
            throw std::runtime_error("emit_tokens: zero-norm projection for node " +
                                     std::to_string(i));
        for (std::size_t c = 0; c < y.cols(); ++c) tokens(i, c) = y(i, c) / n;
    }
    return tokens;
}

AdapterOutput adapter_forward_traced(const Batch& batch, const AdapterParams& params,
                                     ForwardTrace& trace) {
    if (batch.empty()) throw std::invalid_argument("adapter_forward: empty batch");
    std::size_t total = 0;
    for (const auto& s : batch) total += s.features.rows();
    if (total == 0) throw std::invalid_argument("adapter_forward: no rows in batch");

    const std::size_t d_h = params.mp_weight.rows();

    // Projection, keeping the pre-relu values for backward.
    std::vector<GraphNode> nodes;
    trace.z = Matrix(total, d_h);
    {
        std::size_t row = 0;
        for (const auto& slice : batch) {
            auto it = params.input_proj.find(slice.signature);
            if (it == params.input_proj.end())
                throw std::invalid_argument("adapter_forward: no projection registered for " +
                                            signature_name(slice.signature));
            const InputProj& proj = it->second;
            if (slice.features.cols() != proj.w.rows())
                throw std::invalid_argument("adapter_forward: feature dim mismatch for " +
                                            signature_name(slice.signature));
            if (slice.sample_ids.size() != slice.features.rows())
                throw std::invalid_argument("adapter_forward: sample id count mismatch");
            Matrix z = matmul(slice.features, proj.w);
            for (std::size_t r = 0; r < z.rows(); ++r, ++row) {
                GraphNode node;
                node.node_id = row;
                node.sample_id = slice.sample_ids[r];
                node.modality = slice.signature.modality;
                node.h.resize(d_h);
                for (std::size_t c = 0; c < d_h; ++c) {
                    const double v = z(r, c) + proj.b(0, c);
                    trace.z(row, c) = v;
                    node.h[c] = v > 0.0 ? v : 0.0;
                }
                nodes.push_back(std::move(node));
            }
        }
    }
    trace.h0 = nodes_to_matrix(nodes, d_h);

    AdapterOutput out;
    out.graph.nodes = nodes;

    // Message passing; layers beyond the first rebuild edges from the
    // refreshed embeddings so "iterative" stays meaningful.
    trace.layers.clear();
    Matrix h = trace.h0;
    std::vector<GraphNode> work = nodes;
    const std::size_t layers = params.hyper.layers == 0 ? 1 : params.hyper.layers;
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t i = 0; i < work.size(); ++i)
            work[i].h.assign(h.row(i), h.row(i) + d_h);
        std::vector<GraphEdge> edges = build_intra_edges(work, params.hyper.sigma,
                                                         params.hyper.k_intra);
        std::vector<GraphEdge> cross = build_cross_edges(work, params, params.hyper.k_cross);
        edges.insert(edges.end(), cross.begin(), cross.end());
        if (l == 0) out.graph.edges = edges;
        trace.layers.emplace_back();
        h = run_layer(h, edges, params, &trace.layers.back());
    }

    // Output projection.
    trace.y = matmul(h, params.out_proj);
    trace.y_norm.resize(total);
    out.tokens = Matrix(total, params.out_proj.cols());
    for (std::size_t i = 0; i < total; ++i) {
        trace.y_norm[i] = norm2(trace.y.row(i), trace.y.cols());
        if (trace.y_norm[i] == 0.0)
            throw std::runtime_error("adapter_forward: zero-norm token for node " +
                                     std::to_string(i));
        for (std::size_t c = 0; c < trace.y.cols(); ++c)
            out.tokens(i, c) = trace.y(i, c) / trace.y_norm[i];
    }
    return out;
}

AdapterOutput adapter_forward(const Batch& batch, const AdapterParams& params) {
    ForwardTrace trace;
    return adapter_forward_traced(batch, params, trace);
}

std::vector<std::size_t> modality_rows(const SemanticGraph& graph, Modality m) {
    std::vector<std::size_t> rows;
    for (const auto& node : graph.nodes)
        if (node.modality == m) rows.push_back(node.node_id);
    return rows;
}

}  // namespace semfed
