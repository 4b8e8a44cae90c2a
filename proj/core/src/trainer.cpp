#include "semfed/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "semfed/kernels.hpp"
#include "semfed/log.hpp"

namespace semfed {

std::pair<double, std::vector<double>> triplet_loss(const Matrix& tokens_a,
                                                    const Matrix& tokens_b,
                                                    const std::vector<std::size_t>& pairing,
                                                    double margin,
                                                    const std::vector<std::uint8_t>& mask) {
    const std::size_t n = tokens_a.rows();
    if (tokens_b.rows() != n || pairing.size() != n || mask.size() != n)
        throw std::invalid_argument("triplet_loss: shape mismatch");
    if (margin < 0.0) throw std::invalid_argument("triplet_loss: negative margin");

    std::vector<std::size_t> retained;
    for (std::size_t i = 0; i < n; ++i)
        if (mask[i]) retained.push_back(i);
    if (retained.empty()) return {0.0, {}};

    // Similarities touching retained rows only; masked samples are invisible
    // even as negatives.
    std::vector<double> hinges;
    double sum = 0.0;
    auto sim = [&](std::size_t ai, std::size_t bj) {
        return cosine_similarity(tokens_a.row(ai), tokens_b.row(bj), tokens_a.cols());
    };
    for (std::size_t i : retained) {
        double h = 0.0;
        if (retained.size() >= 2) {
            const double pos = sim(i, pairing[i]);
            double neg = -std::numeric_limits<double>::infinity();
            for (std::size_t j : retained)
                if (j != i && sim(i, pairing[j]) > neg) neg = sim(i, pairing[j]);
            h = std::max(0.0, margin - pos + neg);
        }
        hinges.push_back(h);
        sum += h;
    }
    for (std::size_t i : retained) {
        double h = 0.0;
        if (retained.size() >= 2) {
            const double pos = sim(i, pairing[i]);
            double neg = -std::numeric_limits<double>::infinity();
            for (std::size_t j : retained)
                if (j != i && sim(j, pairing[i]) > neg) neg = sim(j, pairing[i]);
            h = std::max(0.0, margin - pos + neg);
        }
        hinges.push_back(h);
        sum += h;
    }
    return {sum / static_cast<double>(hinges.size()), hinges};
}

double alignment_regularizer(const Matrix& tokens, const std::vector<std::size_t>& anchor_idx,
                             const Skb& skb, const std::vector<std::uint8_t>& mask) {
    if (anchor_idx.size() != tokens.rows() || mask.size() != tokens.rows())
        throw std::invalid_argument("alignment_regularizer: shape mismatch");
    if (tokens.cols() != skb.dim())
        throw std::invalid_argument("alignment_regularizer: token dim != d_s");
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < tokens.rows(); ++i) {
        if (!mask[i]) continue;
        const double* a = skb.anchors.row(anchor_idx[i]);
        for (std::size_t c = 0; c < tokens.cols(); ++c) {
            const double d = tokens(i, c) - a[c];
            sum += d * d;
        }
        ++count;
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

namespace {

// The batch with masked pairs removed. Node order: image rows, then text.
struct Prepared {
    Batch batch;
    std::vector<std::size_t> anchor_idx;
    std::size_t n_rows = 0;  // retained pairs (rows per modality slice)
    bool two_modal = false;
    bool empty() const { return n_rows == 0; }
};

Prepared prepare(const LossInputs& in) {
    if (in.batch.empty() || in.batch.size() > 2)
        throw std::invalid_argument("total_loss: expected one or two modality slices");
    const std::size_t n_pairs = in.batch.front().features.rows();
    for (const auto& s : in.batch)
        if (s.features.rows() != n_pairs)
            throw std::invalid_argument("total_loss: slice row counts differ");
    if (in.retained.size() != n_pairs)
        throw std::invalid_argument("total_loss: retained mask size mismatch");
    if (in.anchor_idx.size() != n_pairs * in.batch.size())
        throw std::invalid_argument("total_loss: anchor index count mismatch");
    if (in.batch.size() == 2 && !(in.batch[0].signature < in.batch[1].signature))
        throw std::invalid_argument("total_loss: slices must be in signature order");

    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < n_pairs; ++i)
        if (in.retained[i]) keep.push_back(i);

    Prepared p;
    p.n_rows = keep.size();
    p.two_modal = in.batch.size() == 2;
    if (keep.empty()) return p;

    for (std::size_t s = 0; s < in.batch.size(); ++s) {
        const BatchSlice& src = in.batch[s];
        BatchSlice dst;
        dst.signature = src.signature;
        dst.features = Matrix(keep.size(), src.features.cols());
        for (std::size_t r = 0; r < keep.size(); ++r) {
            dst.sample_ids.push_back(src.sample_ids[keep[r]]);
            std::copy(src.features.row(keep[r]), src.features.row(keep[r]) + src.features.cols(),
                      dst.features.row(r));
        }
        p.batch.push_back(std::move(dst));
        for (std::size_t r = 0; r < keep.size(); ++r)
            p.anchor_idx.push_back(in.anchor_idx[s * n_pairs + keep[r]]);
    }
    return p;
}

// Loss value and its gradient w.r.t. the emitted tokens. The tokens are unit
// rows, so plain dot products equal cosines there; the radial component the
// two gradients differ by is annihilated by the normalization backward that
// follows, so the simpler dot form is exact end to end.
LossBreakdown loss_and_token_grad(const Prepared& p, const Matrix& tokens, const Skb& skb,
                                  const TrainConfig& cfg, Matrix* d_tokens) {
    const std::size_t n = p.n_rows;
    const std::size_t rows = tokens.rows();
    const std::size_t ds = tokens.cols();
    LossBreakdown out;
    out.retained_count = n;

    if (d_tokens) *d_tokens = Matrix(rows, ds);

    // Alignment regularizer over every retained token row.
    double reg = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* a = skb.anchors.row(p.anchor_idx[r]);
        for (std::size_t c = 0; c < ds; ++c) {
            const double d = tokens(r, c) - a[c];
            reg += d * d;
            if (d_tokens)
                (*d_tokens)(r, c) += cfg.reg_weight * 2.0 * d / static_cast<double>(rows);
        }
    }
    out.regularizer = reg / static_cast<double>(rows);

    // Bidirectional hardest-negative triplet over the image/text pairs.
    // Image tokens are rows [0, n), text tokens rows [n, 2n), pair i <-> i.
    if (p.two_modal && n >= 2) {
        Matrix s(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                s(i, j) = dot(tokens.row(i), tokens.row(n + j), ds);

        const double scale = 1.0 / (2.0 * static_cast<double>(n));
        double tri = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            // image anchor i vs text distractors
            double neg = -std::numeric_limits<double>::infinity();
            std::size_t jstar = 0;
            for (std::size_t j = 0; j < n; ++j)
                if (j != i && s(i, j) > neg) {
                    neg = s(i, j);
                    jstar = j;
                }
            double h = cfg.margin - s(i, i) + neg;
            if (h > 0.0) {
                tri += h;
                if (d_tokens) {
                    for (std::size_t c = 0; c < ds; ++c) {
                        (*d_tokens)(i, c) += scale * (tokens(n + jstar, c) - tokens(n + i, c));
                        (*d_tokens)(n + jstar, c) += scale * tokens(i, c);
                        (*d_tokens)(n + i, c) -= scale * tokens(i, c);
                    }
                }
            }
            // text anchor i vs image distractors
            neg = -std::numeric_limits<double>::infinity();
            std::size_t kstar = 0;
            for (std::size_t k = 0; k < n; ++k)
                if (k != i && s(k, i) > neg) {
                    neg = s(k, i);
                    kstar = k;
                }
            h = cfg.margin - s(i, i) + neg;
            if (h > 0.0) {
                tri += h;
                if (d_tokens) {
                    for (std::size_t c = 0; c < ds; ++c) {
                        (*d_tokens)(n + i, c) += scale * (tokens(kstar, c) - tokens(i, c));
                        (*d_tokens)(kstar, c) += scale * tokens(n + i, c);
                        (*d_tokens)(i, c) -= scale * tokens(n + i, c);
                    }
                }
            }
        }
        out.triplet = tri / (2.0 * static_cast<double>(n));
    }

    out.total = out.triplet + cfg.reg_weight * out.regularizer;
    return out;
}

void check_finite(const AdapterParams& grads) {
    for (const auto& [name, m] : trainable_blocks_const(grads))
        for (std::size_t i = 0; i < m->size(); ++i)
            if (!std::isfinite(m->data()[i]))
                throw std::runtime_error("backward: non-finite gradient in " + name);
}

}  // namespace

LossBreakdown total_loss(const LossInputs& in, const AdapterParams& params, const Skb& skb,
                         const TrainConfig& cfg) {
    Prepared p = prepare(in);
    if (p.empty()) return LossBreakdown{};
    const AdapterOutput out = adapter_forward(p.batch, params);
    return loss_and_token_grad(p, out.tokens, skb, cfg, nullptr);
}

AdapterParams backward(const LossInputs& in, const AdapterParams& params, const Skb& skb,
                       const TrainConfig& cfg, LossBreakdown* loss_out) {
    AdapterParams grads = zeros_like(params);
    Prepared p = prepare(in);
    if (p.empty()) {
        if (loss_out) *loss_out = LossBreakdown{};
        return grads;
    }

    ForwardTrace trace;
    const AdapterOutput out = adapter_forward_traced(p.batch, params, trace);
    const std::size_t rows = out.tokens.rows();
    const std::size_t dh = params.d_h();
    const std::size_t ds = params.d_s();

    Matrix d_tokens;
    LossBreakdown breakdown = loss_and_token_grad(p, out.tokens, skb, cfg, &d_tokens);
    if (loss_out) *loss_out = breakdown;

    // ---- emit_tokens: y = h W_o, t = y / |y| ----
    Matrix d_y(rows, ds);
    for (std::size_t i = 0; i < rows; ++i) {
        const double proj = dot(d_tokens.row(i), out.tokens.row(i), ds);
        for (std::size_t c = 0; c < ds; ++c)
            d_y(i, c) = (d_tokens(i, c) - proj * out.tokens(i, c)) / trace.y_norm[i];
    }
    const Matrix& h_last = trace.layers.back().h_out;
    grads.out_proj += matmul_transa(h_last, d_y);
    Matrix dH = matmul_transb(d_y, params.out_proj);

    // ---- message-passing layers, last to first ----
    for (std::size_t li = trace.layers.size(); li-- > 0;) {
        const LayerTrace& lt = trace.layers[li];
        const std::size_t n = lt.h_in.rows();

        // h_out = u / |u|
        Matrix d_u(n, dh);
        for (std::size_t i = 0; i < n; ++i) {
            const double proj = dot(dH.row(i), lt.h_out.row(i), dh);
            for (std::size_t c = 0; c < dh; ++c)
                d_u(i, c) = (dH(i, c) - proj * lt.h_out(i, c)) / lt.u_norm[i];
        }

        // u = h_in + attn (h_in W_g)
        Matrix d_hin = d_u;
        Matrix d_attn = matmul_transb(d_u, lt.hw);
        Matrix d_hw = matmul_transa(lt.attn, d_u);
        grads.mp_weight += matmul_transa(lt.h_in, d_hw);
        d_hin += matmul_transb(d_hw, params.mp_weight);

        // softmax over the unmasked entries of attn_scale * logits
        Matrix d_logits(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            double mixed = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                if (lt.mask[i * n + j]) mixed += lt.attn(i, j) * d_attn(i, j);
            for (std::size_t j = 0; j < n; ++j)
                if (lt.mask[i * n + j])
                    d_logits(i, j) = params.attn_scale * lt.attn(i, j) * (d_attn(i, j) - mixed);
        }

        // edge weights: gaussian kernels and mean-pooled cosines
        bool any_cross = false;
        for (const auto& e : lt.edges)
            if (e.kind == EdgeKind::cross) {
                any_cross = true;
                break;
            }
        Matrix mapped;
        std::vector<double> hn(n), mn(n);
        for (std::size_t i = 0; i < n; ++i) hn[i] = norm2(lt.h_in.row(i), dh);
        if (any_cross) {
            mapped = matmul(lt.h_in, params.cross_map);
            for (std::size_t i = 0; i < n; ++i) mn[i] = norm2(mapped.row(i), dh);
        }
        Matrix vacc(n, dh);  // gradient w.r.t. the W_x-mapped vectors, grouped per node

        const double sigma2 = params.hyper.sigma * params.hyper.sigma;
        for (const auto& e : lt.edges) {
            const double g = d_logits(e.src, e.dst);
            if (g == 0.0) continue;
            const double* hi = lt.h_in.row(e.src);
            const double* hj = lt.h_in.row(e.dst);
            if (e.kind == EdgeKind::intra) {
                const double coef = g * lt.logits(e.src, e.dst) / sigma2;
                for (std::size_t c = 0; c < dh; ++c) {
                    const double diff = hj[c] - hi[c];
                    d_hin(e.src, c) += coef * diff;
                    d_hin(e.dst, c) -= coef * diff;
                }
            } else {
                const double gi = g / 2.0;  // raw and refined views pooled by mean
                const double ni = hn[e.src], nj = hn[e.dst];
                const double raw = dot(hi, hj, dh) / (ni * nj);
                for (std::size_t c = 0; c < dh; ++c) {
                    d_hin(e.src, c) += gi * (hj[c] / (ni * nj) - raw * hi[c] / (ni * ni));
                    d_hin(e.dst, c) += gi * (hi[c] / (ni * nj) - raw * hj[c] / (nj * nj));
                }
                const double* mi = mapped.row(e.src);
                const double* mj = mapped.row(e.dst);
                const double pi = mn[e.src], pj = mn[e.dst];
                const double ref = dot(mi, mj, dh) / (pi * pj);
                for (std::size_t c = 0; c < dh; ++c) {
                    vacc(e.src, c) += gi * (mj[c] / (pi * pj) - ref * mi[c] / (pi * pi));
                    vacc(e.dst, c) += gi * (mi[c] / (pi * pj) - ref * mj[c] / (pj * pj));
                }
            }
        }
        if (any_cross) {
            grads.cross_map += matmul_transa(lt.h_in, vacc);
            d_hin += matmul_transb(vacc, params.cross_map);
        }
        dH = std::move(d_hin);
    }

    // ---- relu and input projections ----
    Matrix d_z(rows, dh);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t c = 0; c < dh; ++c) d_z(i, c) = trace.z(i, c) > 0.0 ? dH(i, c) : 0.0;

    std::size_t row0 = 0;
    for (const auto& slice : p.batch) {
        const std::size_t m = slice.features.rows();
        Matrix d_z_slice(m, dh);
        for (std::size_t r = 0; r < m; ++r)
            std::copy(d_z.row(row0 + r), d_z.row(row0 + r) + dh, d_z_slice.row(r));
        InputProj& gproj = grads.input_proj.at(slice.signature);
        gproj.w += matmul_transa(slice.features, d_z_slice);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < dh; ++c) gproj.b(0, c) += d_z_slice(r, c);
        row0 += m;
    }

    check_finite(grads);
    return grads;
}

// ---- local round ----

LocalUpdateResult local_update(const AdapterParams& params, const ShardView& shard,
                               LabelLedger& ledger, const Skb& skb, const TrainConfig& cfg,
                               std::uint32_t round) {
    if (shard.pairs.empty()) throw std::invalid_argument("local_update: empty shard");
    if (!shard.has_img() && !shard.has_txt())
        throw std::invalid_argument("local_update: shard has no modalities");

    LocalUpdateResult result;
    result.params = params;
    auto blocks = trainable_blocks(result.params);
    for (const auto& [name, m] : blocks) result.adam.push_back(AdamState::for_param(*m));

    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < shard.pairs.size(); ++i)
        if (!ledger.is_pruned(shard.pairs[i].pair_id)) active.push_back(i);
    if (active.empty()) {
        log_warn("local_update: every sample pruned, nothing to train on");
        return result;
    }

    const AdamConfig adam_cfg{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps};
    const bool two_modal = shard.has_img() && shard.has_txt();

    struct Observation {
        std::uint32_t anchor_id = 0;
        double confidence = 0.0;
        bool flagged = false;
    };
    std::map<std::uint64_t, Observation> final_obs;

    double loss_sum = 0.0;
    std::size_t batch_count = 0;
    std::uint64_t last_epoch_retained = 0;

    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        std::vector<std::size_t> order = active;
        Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", epoch));
        shuffle_rng.shuffle(order);
        if (epoch + 1 == cfg.local_epochs) last_epoch_retained = 0;

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::size_t bn = end - start;

            // Assemble the full batch (labeling sees everything unpruned).
            Batch batch;
            if (shard.has_img()) {
                BatchSlice s;
                s.signature = shard.img_sig;
                s.features = Matrix(bn, shard.img_features->cols());
                for (std::size_t r = 0; r < bn; ++r) {
                    const PairRef& pr = shard.pairs[order[start + r]];
                    s.sample_ids.push_back(pr.pair_id);
                    std::copy(shard.img_features->row(pr.img_row),
                              shard.img_features->row(pr.img_row) + shard.img_features->cols(),
                              s.features.row(r));
                }
                batch.push_back(std::move(s));
            }
            if (shard.has_txt()) {
                BatchSlice s;
                s.signature = shard.txt_sig;
                s.features = Matrix(bn, shard.txt_features->cols());
                for (std::size_t r = 0; r < bn; ++r) {
                    const PairRef& pr = shard.pairs[order[start + r]];
                    s.sample_ids.push_back(pr.pair_id);
                    std::copy(shard.txt_features->row(pr.txt_row),
                              shard.txt_features->row(pr.txt_row) + shard.txt_features->cols(),
                              s.features.row(r));
                }
                batch.push_back(std::move(s));
            }
            std::sort(batch.begin(), batch.end(), [](const BatchSlice& a, const BatchSlice& b) {
                return a.signature < b.signature;
            });

            // Label the whole batch with the current local params.
            const AdapterOutput cur = adapter_forward(batch, result.params);

            std::vector<std::size_t> anchor_idx;
            std::vector<ProvisionalLabel> primary(bn);
            std::vector<double> conf;
            {
                std::size_t row0 = 0;
                bool primary_set = false;
                for (const auto& slice : batch) {
                    Matrix t(bn, cur.tokens.cols());
                    for (std::size_t r = 0; r < bn; ++r)
                        std::copy(cur.tokens.row(row0 + r), cur.tokens.row(row0 + r) + t.cols(),
                                  t.row(r));
                    auto labels = provisional_labels(t, slice.sample_ids,
                                                     slice.signature.modality, skb);
                    for (std::size_t r = 0; r < bn; ++r) anchor_idx.push_back(labels[r].anchor_index);
                    if (!primary_set) {
                        primary.assign(labels.begin(), labels.end());
                        primary_set = true;
                    }
                    row0 += bn;
                }
                if (two_modal) {
                    Matrix ti(bn, cur.tokens.cols()), tt(bn, cur.tokens.cols());
                    for (std::size_t r = 0; r < bn; ++r) {
                        std::copy(cur.tokens.row(r), cur.tokens.row(r) + ti.cols(), ti.row(r));
                        std::copy(cur.tokens.row(bn + r), cur.tokens.row(bn + r) + tt.cols(),
                                  tt.row(r));
                    }
                    std::vector<std::size_t> ident(bn);
                    std::iota(ident.begin(), ident.end(), std::size_t{0});
                    conf = batch_confidence(ti, tt, ident);
                } else {
                    conf = anchor_gap_confidence(cur.tokens, skb);
                }
            }

            std::vector<std::uint8_t> mask = mask_low_confidence(conf, cfg.confidence_quantile);

            for (std::size_t r = 0; r < bn; ++r) {
                primary[r].confidence = conf[r];
                final_obs[primary[r].sample_id] =
                    Observation{primary[r].anchor_id, conf[r], mask[r] == 0};
            }

            LossInputs inputs{std::move(batch), std::move(anchor_idx), mask};
            LossBreakdown breakdown;
            AdapterParams grads = backward(inputs, result.params, skb, cfg, &breakdown);
            auto gblocks = trainable_blocks(grads);
            for (std::size_t b = 0; b < blocks.size(); ++b)
                adam_step(*blocks[b].second, *gblocks[b].second, result.adam[b], adam_cfg);

            loss_sum += breakdown.total;
            ++batch_count;
            if (epoch + 1 == cfg.local_epochs) last_epoch_retained += breakdown.retained_count;
        }
    }

    // Ledger fold and label statistics from the final per-pair observations.
    if (!final_obs.empty()) {
        std::vector<ProvisionalLabel> labels;
        std::vector<std::uint8_t> mask;
        for (const auto& [id, obs] : final_obs) {
            ProvisionalLabel l;
            l.sample_id = id;
            l.modality = shard.has_img() ? Modality::image : Modality::text;
            l.anchor_id = obs.anchor_id;
            l.confidence = obs.confidence;
            labels.push_back(l);
            mask.push_back(obs.flagged ? 0 : 1);
            result.stats.label_stats.add(obs.anchor_id, obs.confidence);
        }
        ledger_update(ledger, round, labels, mask);
    }

    result.stats.mean_loss = batch_count == 0 ? 0.0 : loss_sum / static_cast<double>(batch_count);
    result.stats.retained_samples = last_epoch_retained;
    result.stats.retained_fraction =
        static_cast<double>(last_epoch_retained) / static_cast<double>(shard.pairs.size());
    return result;
}

}  // namespace semfed
