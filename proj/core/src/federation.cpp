#include "semfed/federation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

#include "semfed/log.hpp"
#include "semfed/rng.hpp"
#include "semfed/serialize.hpp"

namespace semfed {

std::string error_level_name(ErrorLevel e) {
    switch (e) {
        case ErrorLevel::none: return "none";
        case ErrorLevel::mild: return "mild";
        case ErrorLevel::severe: return "severe";
    }
    throw std::invalid_argument("unknown error level");
}

std::vector<std::uint32_t> select_clients(std::uint32_t round,
                                          const std::vector<ClientProfile>& profiles,
                                          std::uint64_t seed) {
    std::vector<const ClientProfile*> order;
    order.reserve(profiles.size());
    for (const auto& p : profiles) {
        if (p.dropout_prob < 0.0 || p.dropout_prob >= 1.0)
            throw std::invalid_argument("dropout_prob must be in [0, 1) for client " +
                                        std::to_string(p.client_id));
        order.push_back(&p);
    }
    std::sort(order.begin(), order.end(),
              [](const ClientProfile* a, const ClientProfile* b) {
                  return a->client_id < b->client_id;
              });
    for (std::size_t i = 1; i < order.size(); ++i)
        if (order[i]->client_id == order[i - 1]->client_id)
            throw std::invalid_argument("duplicate client_id " +
                                        std::to_string(order[i]->client_id));

    Rng rng(derive_seed(seed, "select", round));
    std::vector<std::uint32_t> out;
    for (const auto* p : order) {
        const double u = rng.uniform();
        if (u >= p->dropout_prob) out.push_back(p->client_id);
    }
    return out;
}

namespace {

void check_compatible(const AdapterParams& a, const AdapterParams& b) {
    if (a.d_h() != b.d_h() || a.d_s() != b.d_s())
        throw std::invalid_argument("aggregate: mismatched adapter dimensions");
    if (a.input_proj.size() != b.input_proj.size())
        throw std::invalid_argument("aggregate: projection set mismatch");
    for (const auto& [sig, proj] : a.input_proj) {
        auto it = b.input_proj.find(sig);
        if (it == b.input_proj.end())
            throw std::invalid_argument("aggregate: report missing projection for " +
                                        signature_name(sig));
        if (!proj.w.same_shape(it->second.w))
            throw std::invalid_argument("aggregate: projection shape mismatch for " +
                                        signature_name(sig));
    }
}

void axpy(Matrix& acc, double w, const Matrix& x) {
    double* a = acc.data();
    const double* v = x.data();
    for (std::size_t i = 0; i < acc.size(); ++i) a[i] += w * v[i];
}

}  // namespace

AdapterParams aggregate_params(const std::vector<RoundReport>& reports,
                               const AdapterParams& previous) {
    if (reports.empty()) return previous;

    std::vector<const RoundReport*> order;
    order.reserve(reports.size());
    for (const auto& r : reports) order.push_back(&r);
    std::sort(order.begin(), order.end(), [](const RoundReport* a, const RoundReport* b) {
        return a->client_id < b->client_id;
    });
    for (const auto* r : order) check_compatible(r->params_after, previous);

    bool all_identical = true;
    for (std::size_t i = 1; i < order.size() && all_identical; ++i)
        all_identical = order[i]->params_after == order[0]->params_after;
    if (all_identical) return order[0]->params_after;

    // Weight by retained sample count; when every contributor retained
    // nothing the mean falls back to uniform.
    auto weighted_mean = [](auto block_of, const std::vector<const RoundReport*>& who,
                            Matrix& out) {
        double wsum = 0.0;
        for (const auto* r : who) wsum += static_cast<double>(r->retained_samples);
        const bool uniform = wsum == 0.0;
        if (uniform) wsum = static_cast<double>(who.size());
        std::fill(out.vec().begin(), out.vec().end(), 0.0);
        for (const auto* r : who) {
            const double w = uniform ? 1.0 : static_cast<double>(r->retained_samples);
            axpy(out, w, block_of(r->params_after));
        }
        out *= 1.0 / wsum;
    };

    AdapterParams result = previous;
    weighted_mean([](const AdapterParams& p) -> const Matrix& { return p.cross_map; }, order,
                  result.cross_map);
    weighted_mean([](const AdapterParams& p) -> const Matrix& { return p.mp_weight; }, order,
                  result.mp_weight);
    weighted_mean([](const AdapterParams& p) -> const Matrix& { return p.out_proj; }, order,
                  result.out_proj);

    for (auto& [sig, proj] : result.input_proj) {
        std::vector<const RoundReport*> contributors;
        for (const auto* r : order) {
            if (std::find(r->trained_signatures.begin(), r->trained_signatures.end(), sig) !=
                r->trained_signatures.end())
                contributors.push_back(r);
        }
        if (contributors.empty()) continue;  // nobody trained it; keep previous
        weighted_mean(
            [&](const AdapterParams& p) -> const Matrix& { return p.input_proj.at(sig).w; },
            contributors, proj.w);
        weighted_mean(
            [&](const AdapterParams& p) -> const Matrix& { return p.input_proj.at(sig).b; },
            contributors, proj.b);
    }
    return result;
}

LabelStats aggregate_label_stats(const std::vector<RoundReport>& reports) {
    std::vector<const RoundReport*> order;
    order.reserve(reports.size());
    for (const auto& r : reports) order.push_back(&r);
    std::sort(order.begin(), order.end(), [](const RoundReport* a, const RoundReport* b) {
        return a->client_id < b->client_id;
    });
    LabelStats merged;
    for (const auto* r : order)
        for (const auto& [anchor, stat] : r->label_stats.per_anchor)
            merged.add(anchor, stat.mean_confidence, stat.count);
    return merged;
}

RoundOutcome run_round(GlobalState& state, std::vector<ClientState>& clients,
                       const Skb& skb, const FederationConfig& cfg) {
    const std::uint32_t round = state.round + 1;  // rounds are 1-based; round 0 is the untrained baseline
    std::vector<ClientProfile> profiles;
    profiles.reserve(clients.size());
    for (const auto& c : clients) profiles.push_back(c.profile);

    RoundOutcome out;
    out.participants = select_clients(round, profiles, cfg.master_seed);
    if (out.participants.empty()) {
        log_warn("round " + std::to_string(round) + ": no participants, skipping");
        out.skipped = true;
        state.round = round;
        return out;
    }

    std::vector<RoundReport> reports;
    std::vector<std::uint32_t> succeeded;
    for (std::uint32_t cid : out.participants) {
        auto it = std::find_if(clients.begin(), clients.end(),
                               [&](const ClientState& c) { return c.profile.client_id == cid; });
        if (it == clients.end())
            throw std::logic_error("selected unknown client " + std::to_string(cid));
        ClientState& client = *it;

        // One shared stream per round, not per client: clients with identical
        // shards must produce identical updates (aggregation symmetry), so
        // individuality enters through data alone.
        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(cfg.master_seed, "local", round);
        const AdapterParams& start = cfg.aggregate ? state.params : client.params;
        LocalUpdateResult res;
        try {
            res = local_update(start, client.shard, client.ledger, skb, tc, round);
        } catch (const std::exception& e) {
            log_warn("round " + std::to_string(round) + ": client " + std::to_string(cid) +
                     " failed (" + std::string(e.what()) + "), dropped from round");
            continue;
        }

        RoundReport rep;
        rep.client_id = cid;
        rep.params_after = std::move(res.params);
        rep.retained_samples = res.stats.retained_samples;
        rep.label_stats = std::move(res.stats.label_stats);
        rep.mean_loss = res.stats.mean_loss;
        rep.shard_pairs = client.shard.pairs.size();
        rep.wall_time = client.profile.compute_speed > 0.0
                            ? static_cast<double>(tc.local_epochs) *
                                  static_cast<double>(rep.shard_pairs) /
                                  client.profile.compute_speed
                            : 0.0;
        if (client.shard.has_img()) rep.trained_signatures.push_back(client.shard.img_sig);
        if (client.shard.has_txt()) rep.trained_signatures.push_back(client.shard.txt_sig);

        // Always keep the post-update params on the client: local-only mode
        // trains from them, and per-client evaluation reads them.
        client.params = rep.params_after;
        succeeded.push_back(cid);
        reports.push_back(std::move(rep));
    }

    if (reports.empty()) {
        log_warn("round " + std::to_string(round) + ": every participant failed, skipping");
        out.skipped = true;
        out.participants.clear();
        state.round = round;
        return out;
    }
    out.participants = succeeded;

    if (cfg.aggregate) state.params = aggregate_params(reports, state.params);
    state.consensus = aggregate_label_stats(reports);

    double loss_sum = 0.0;
    double time_max = 0.0;
    std::uint64_t retained_sum = 0, pairs_sum = 0;
    for (const auto& r : reports) {
        loss_sum += r.mean_loss;
        time_max = std::max(time_max, r.wall_time);
        retained_sum += r.retained_samples;
        pairs_sum += r.shard_pairs;
    }
    out.mean_loss = loss_sum / static_cast<double>(reports.size());
    out.sim_duration = time_max;
    out.retained_fraction =
        pairs_sum > 0 ? static_cast<double>(retained_sum) / static_cast<double>(pairs_sum) : 0.0;

    if (cfg.pruning_enabled) {
        const double tau_g = consensus_percentile(state.consensus, cfg.tau_percentile);
        for (auto& client : clients) {
            auto newly = ledger_prune(client.ledger, state.consensus, cfg.patience, tau_g);
            out.newly_pruned += newly.size();
            client.pruned_ids.insert(client.pruned_ids.end(), newly.begin(), newly.end());
        }
        state.pruned_total += out.newly_pruned;
    }

    state.round = round;
    return out;
}

// ---- checkpoints ----

static constexpr char kCkptMagic[4] = {'S', 'E', 'M', 'C'};
static constexpr std::uint32_t kCkptVersion = 1;

void checkpoint_save(const AdapterParams& params, std::uint32_t round,
                     const std::filesystem::path& path) {
    atomic_write_file(path, [&](std::ostream& os) {
        write_magic(os, kCkptMagic);
        write_u32(os, kCkptVersion);
        write_u32(os, round);
        write_u32(os, static_cast<std::uint32_t>(params.d_h()));
        write_u32(os, static_cast<std::uint32_t>(params.d_s()));
        write_f64(os, params.attn_scale);
        write_u32(os, static_cast<std::uint32_t>(params.hyper.k_intra));
        write_u32(os, static_cast<std::uint32_t>(params.hyper.k_cross));
        write_f64(os, params.hyper.sigma);
        write_u32(os, static_cast<std::uint32_t>(params.hyper.layers));
        write_u32(os, static_cast<std::uint32_t>(params.input_proj.size()));
        for (const auto& [sig, proj] : params.input_proj) {
            write_u8(os, static_cast<std::uint8_t>(sig.modality));
            write_u16(os, sig.family);
            write_u32(os, sig.dim);
        }
        for (const auto& [sig, proj] : params.input_proj) {
            write_f64_array(os, proj.w.data(), proj.w.size());
            write_f64_array(os, proj.b.data(), proj.b.size());
        }
        write_f64_array(os, params.cross_map.data(), params.cross_map.size());
        write_f64_array(os, params.mp_weight.data(), params.mp_weight.size());
        write_f64_array(os, params.out_proj.data(), params.out_proj.size());
    });
}

std::pair<AdapterParams, std::uint32_t> checkpoint_load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint_load: cannot open " + path.string());
    expect_magic(is, kCkptMagic, "checkpoint_load");
    const std::uint32_t version = read_u32(is);
    if (version != kCkptVersion)
        throw std::runtime_error("checkpoint_load: unsupported version " +
                                 std::to_string(version));
    const std::uint32_t round = read_u32(is);
    const std::uint32_t d_h = read_u32(is);
    const std::uint32_t d_s = read_u32(is);
    const double attn_scale = read_f64(is);
    AdapterHyper hyper;
    hyper.k_intra = read_u32(is);
    hyper.k_cross = read_u32(is);
    hyper.sigma = read_f64(is);
    hyper.layers = read_u32(is);
    const std::uint32_t n_sigs = read_u32(is);
    if (d_h == 0 || d_s == 0 || n_sigs == 0)
        throw std::runtime_error("checkpoint_load: degenerate header");

    std::vector<EncoderSignature> sigs;
    for (std::uint32_t i = 0; i < n_sigs; ++i) {
        EncoderSignature s;
        s.modality = static_cast<Modality>(read_u8(is));
        s.family = read_u16(is);
        s.dim = read_u32(is);
        if (s.modality != Modality::image && s.modality != Modality::text)
            throw std::runtime_error("checkpoint_load: bad modality tag");
        sigs.push_back(s);
    }

    AdapterParams params;
    params.attn_scale = attn_scale;
    params.hyper = hyper;
    for (const auto& s : sigs) {
        InputProj proj;
        proj.w = Matrix(s.dim, d_h);
        proj.b = Matrix(1, d_h);
        read_f64_array(is, proj.w.data(), proj.w.size());
        read_f64_array(is, proj.b.data(), proj.b.size());
        if (!params.input_proj.emplace(s, std::move(proj)).second)
            throw std::runtime_error("checkpoint_load: duplicate signature");
    }
    params.cross_map = Matrix(d_h, d_h);
    params.mp_weight = Matrix(d_h, d_h);
    params.out_proj = Matrix(d_h, d_s);
    read_f64_array(is, params.cross_map.data(), params.cross_map.size());
    read_f64_array(is, params.mp_weight.data(), params.mp_weight.size());
    read_f64_array(is, params.out_proj.data(), params.out_proj.size());
    if (is.peek() != std::char_traits<char>::eof())
        throw std::runtime_error("checkpoint_load: trailing bytes");
    return {std::move(params), round};
}

}  // namespace semfed
