#include "semfed/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "semfed/gradcheck.hpp"
#include "semfed/log.hpp"
#include "semfed/rng.hpp"
#include "semfed/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace semfed {

std::string mode_name(ExperimentMode m) {
    switch (m) {
        case ExperimentMode::proposed: return "proposed";
        case ExperimentMode::single_modal_fl: return "single_modal_fl";
        case ExperimentMode::no_denoise: return "no_denoise";
        case ExperimentMode::local_only: return "local_only";
    }
    throw std::invalid_argument("unknown mode");
}

ExperimentMode mode_from_name(const std::string& name) {
    if (name == "proposed") return ExperimentMode::proposed;
    if (name == "single_modal_fl") return ExperimentMode::single_modal_fl;
    if (name == "no_denoise") return ExperimentMode::no_denoise;
    if (name == "local_only") return ExperimentMode::local_only;
    throw ValidationError("config: unknown mode \"" + name + "\"");
}

namespace {

ErrorLevel level_from_name(const std::string& name) {
    if (name == "none") return ErrorLevel::none;
    if (name == "mild") return ErrorLevel::mild;
    if (name == "severe") return ErrorLevel::severe;
    throw ValidationError("config: unknown error level \"" + name + "\"");
}

[[noreturn]] void bad(const std::string& msg) { throw ValidationError("config: " + msg); }

void expect_keys(const json& o, const std::string& where,
                 std::initializer_list<const char*> allowed) {
    for (auto it = o.begin(); it != o.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                ok = true;
                break;
            }
        if (!ok) bad("unknown key \"" + it.key() + "\" in " + where);
    }
}

const json* maybe(const json& o, const char* key) {
    auto it = o.find(key);
    return it == o.end() ? nullptr : &*it;
}

std::size_t get_count(const json& o, const char* key, std::size_t dflt, const std::string& where) {
    const json* v = maybe(o, key);
    if (!v) return dflt;
    if (!v->is_number_integer() && !v->is_number_unsigned())
        bad(where + "." + key + " must be a non-negative integer");
    if (v->is_number_integer() && v->get<std::int64_t>() < 0)
        bad(where + "." + key + " must be a non-negative integer");
    return static_cast<std::size_t>(v->get<std::uint64_t>());
}

double get_real(const json& o, const char* key, double dflt, const std::string& where) {
    const json* v = maybe(o, key);
    if (!v) return dflt;
    if (!v->is_number()) bad(where + "." + key + " must be a number");
    return v->get<double>();
}

std::string get_str(const json& o, const char* key, const std::string& dflt,
                    const std::string& where) {
    const json* v = maybe(o, key);
    if (!v) return dflt;
    if (!v->is_string()) bad(where + "." + key + " must be a string");
    return v->get<std::string>();
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    if (!j.is_object()) bad("top level must be an object");
    expect_keys(j, "config",
                {"mode", "master_seed", "out_dir", "dataset", "federation", "adapter", "train",
                 "labeling", "error"});

    ExperimentConfig cfg;
    cfg.mode = mode_from_name(get_str(j, "mode", "proposed", "config"));
    cfg.master_seed = static_cast<std::uint64_t>(get_count(j, "master_seed", 0, "config"));
    cfg.out_dir = get_str(j, "out_dir", "run", "config");

    if (const json* d = maybe(j, "dataset")) {
        if (!d->is_object()) bad("dataset must be an object");
        const std::string type = get_str(*d, "type", "synthetic", "dataset");
        if (type == "synthetic") {
            cfg.dataset.synthetic = true;
            expect_keys(*d, "dataset",
                        {"type", "classes", "n_per_class", "d_s", "d_img", "d_txt", "noise_sigma",
                         "eval_fraction"});
            auto& s = cfg.dataset.synth;
            s.classes = get_count(*d, "classes", s.classes, "dataset");
            s.n_per_class = get_count(*d, "n_per_class", s.n_per_class, "dataset");
            s.d_s = get_count(*d, "d_s", s.d_s, "dataset");
            s.d_img = get_count(*d, "d_img", s.d_img, "dataset");
            s.d_txt = get_count(*d, "d_txt", s.d_txt, "dataset");
            s.noise_sigma = get_real(*d, "noise_sigma", s.noise_sigma, "dataset");
            s.eval_fraction = get_real(*d, "eval_fraction", s.eval_fraction, "dataset");
        } else if (type == "files") {
            cfg.dataset.synthetic = false;
            expect_keys(*d, "dataset", {"type", "img_features", "txt_features", "manifest", "skb"});
            auto& f = cfg.dataset.files;
            f.img_features = get_str(*d, "img_features", "", "dataset");
            f.txt_features = get_str(*d, "txt_features", "", "dataset");
            f.manifest = get_str(*d, "manifest", "", "dataset");
            f.skb = get_str(*d, "skb", "", "dataset");
        } else {
            bad("dataset.type must be \"synthetic\" or \"files\"");
        }
    }

    if (const json* f = maybe(j, "federation")) {
        if (!f->is_object()) bad("federation must be an object");
        expect_keys(*f, "federation",
                    {"n_clients", "rounds", "alpha", "dropout_prob", "compute_speeds"});
        auto& fd = cfg.federation;
        fd.n_clients = get_count(*f, "n_clients", fd.n_clients, "federation");
        fd.rounds = static_cast<std::uint32_t>(get_count(*f, "rounds", fd.rounds, "federation"));
        fd.alpha = get_real(*f, "alpha", fd.alpha, "federation");
        fd.dropout_prob = get_real(*f, "dropout_prob", fd.dropout_prob, "federation");
        if (const json* cs = maybe(*f, "compute_speeds")) {
            if (!cs->is_array()) bad("federation.compute_speeds must be an array");
            fd.compute_speeds.clear();
            for (const auto& v : *cs) {
                if (!v.is_number()) bad("federation.compute_speeds entries must be numbers");
                fd.compute_speeds.push_back(v.get<double>());
            }
        }
    }

    if (const json* a = maybe(j, "adapter")) {
        if (!a->is_object()) bad("adapter must be an object");
        expect_keys(*a, "adapter", {"d_h", "k_intra", "k_cross", "sigma", "layers", "attn_scale"});
        auto& ad = cfg.adapter;
        ad.d_h = get_count(*a, "d_h", ad.d_h, "adapter");
        ad.k_intra = get_count(*a, "k_intra", ad.k_intra, "adapter");
        ad.k_cross = get_count(*a, "k_cross", ad.k_cross, "adapter");
        ad.sigma = get_real(*a, "sigma", ad.sigma, "adapter");
        ad.layers = get_count(*a, "layers", ad.layers, "adapter");
        ad.attn_scale = get_real(*a, "attn_scale", ad.attn_scale, "adapter");
    }

    if (const json* t = maybe(j, "train")) {
        if (!t->is_object()) bad("train must be an object");
        expect_keys(*t, "train",
                    {"margin", "reg_weight", "lr", "batch_size", "local_epochs", "beta1", "beta2",
                     "adam_eps"});
        auto& tr = cfg.train;
        tr.margin = get_real(*t, "margin", tr.margin, "train");
        tr.reg_weight = get_real(*t, "reg_weight", tr.reg_weight, "train");
        tr.lr = get_real(*t, "lr", tr.lr, "train");
        tr.batch_size = get_count(*t, "batch_size", tr.batch_size, "train");
        tr.local_epochs = get_count(*t, "local_epochs", tr.local_epochs, "train");
        tr.beta1 = get_real(*t, "beta1", tr.beta1, "train");
        tr.beta2 = get_real(*t, "beta2", tr.beta2, "train");
        tr.adam_eps = get_real(*t, "adam_eps", tr.adam_eps, "train");
    }

    if (const json* l = maybe(j, "labeling")) {
        if (!l->is_object()) bad("labeling must be an object");
        expect_keys(*l, "labeling", {"q", "patience", "tau_percentile"});
        auto& lb = cfg.labeling;
        lb.q = get_real(*l, "q", lb.q, "labeling");
        lb.patience =
            static_cast<std::uint32_t>(get_count(*l, "patience", lb.patience, "labeling"));
        lb.tau_percentile = get_real(*l, "tau_percentile", lb.tau_percentile, "labeling");
    }

    if (const json* e = maybe(j, "error")) {
        if (!e->is_object()) bad("error must be an object");
        expect_keys(*e, "error", {"mild_rate", "severe_rate", "client_levels"});
        auto& er = cfg.error;
        er.mild_rate = get_real(*e, "mild_rate", er.mild_rate, "error");
        er.severe_rate = get_real(*e, "severe_rate", er.severe_rate, "error");
        if (const json* cl = maybe(*e, "client_levels")) {
            if (!cl->is_array()) bad("error.client_levels must be an array");
            er.client_levels.clear();
            for (const auto& v : *cl) {
                if (!v.is_string()) bad("error.client_levels entries must be strings");
                er.client_levels.push_back(level_from_name(v.get<std::string>()));
            }
        }
    }

    validate_config(cfg);
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const std::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    return parse_config_text(text);
}

void validate_config(const ExperimentConfig& cfg) {
    if (cfg.dataset.synthetic) {
        const auto& s = cfg.dataset.synth;
        if (s.classes < 2) bad("dataset.classes must be >= 2");
        if (s.n_per_class < 1) bad("dataset.n_per_class must be >= 1");
        if (s.d_s < 2) bad("dataset.d_s must be >= 2");
        if (s.d_img < s.d_s || s.d_txt < s.d_s)
            bad("dataset feature dims must be >= d_s (full-rank latent maps)");
        if (s.noise_sigma < 0.0) bad("dataset.noise_sigma must be >= 0");
        if (!(s.eval_fraction >= 0.0 && s.eval_fraction < 1.0))
            bad("dataset.eval_fraction must be in [0, 1)");
        const std::size_t eval_per_class =
            static_cast<std::size_t>(s.eval_fraction * static_cast<double>(s.n_per_class));
        if (s.classes * eval_per_class == 0) bad("dataset: eval split would be empty");
        const std::size_t train_total = s.classes * (s.n_per_class - eval_per_class);
        if (train_total < cfg.federation.n_clients)
            bad("dataset: fewer train pairs than clients");
    } else {
        const auto& f = cfg.dataset.files;
        const std::pair<const char*, std::string> refs[] = {{"img_features", f.img_features},
                                                            {"txt_features", f.txt_features},
                                                            {"manifest", f.manifest},
                                                            {"skb", f.skb}};
        for (const auto& [key, path] : refs) {
            if (path.empty()) bad(std::string("dataset.") + key + " is required for files mode");
            if (!fs::exists(path))
                bad(std::string("dataset.") + key + ": no such file: " + path);
        }
    }

    const auto& fd = cfg.federation;
    if (fd.n_clients < 1) bad("federation.n_clients must be >= 1");
    if (!(fd.alpha > 0.0)) bad("federation.alpha must be > 0");
    if (!(fd.dropout_prob >= 0.0 && fd.dropout_prob < 1.0))
        bad("federation.dropout_prob must be in [0, 1)");
    if (!fd.compute_speeds.empty()) {
        if (fd.compute_speeds.size() != fd.n_clients)
            bad("federation.compute_speeds must list one speed per client");
        for (double v : fd.compute_speeds)
            if (!(v > 0.0)) bad("federation.compute_speeds entries must be > 0");
    }

    const auto& a = cfg.adapter;
    if (a.d_h < 2) bad("adapter.d_h must be >= 2");
    if (a.k_intra < 1 || a.k_cross < 1) bad("adapter.k_intra/k_cross must be >= 1");
    if (!(a.sigma > 0.0)) bad("adapter.sigma must be > 0");
    if (a.layers < 1) bad("adapter.layers must be >= 1");
    if (!(a.attn_scale > 0.0)) bad("adapter.attn_scale must be > 0");

    const auto& t = cfg.train;
    if (t.margin < 0.0) bad("train.margin must be >= 0");
    if (t.reg_weight < 0.0) bad("train.reg_weight must be >= 0");
    if (!(t.lr > 0.0)) bad("train.lr must be > 0");
    if (t.batch_size < 1) bad("train.batch_size must be >= 1");
    if (t.local_epochs < 1) bad("train.local_epochs must be >= 1");
    if (!(t.beta1 >= 0.0 && t.beta1 < 1.0)) bad("train.beta1 must be in [0, 1)");
    if (!(t.beta2 >= 0.0 && t.beta2 < 1.0)) bad("train.beta2 must be in [0, 1)");
    if (!(t.adam_eps > 0.0)) bad("train.adam_eps must be > 0");

    const auto& l = cfg.labeling;
    if (!(l.q >= 0.0 && l.q < 1.0)) bad("labeling.q must be in [0, 1)");
    if (l.patience < 1) bad("labeling.patience must be >= 1");
    if (!(l.tau_percentile >= 0.0 && l.tau_percentile <= 100.0))
        bad("labeling.tau_percentile must be in [0, 100]");

    const auto& e = cfg.error;
    if (!(e.mild_rate >= 0.0 && e.mild_rate <= 1.0)) bad("error.mild_rate must be in [0, 1]");
    if (!(e.severe_rate >= 0.0 && e.severe_rate <= 1.0))
        bad("error.severe_rate must be in [0, 1]");
    if (!e.client_levels.empty() && e.client_levels.size() != fd.n_clients)
        bad("error.client_levels must list one level per client");
}

std::string config_to_json(const ExperimentConfig& cfg, int indent) {
    json j;
    j["mode"] = mode_name(cfg.mode);
    j["master_seed"] = cfg.master_seed;
    j["out_dir"] = cfg.out_dir;

    json d;
    if (cfg.dataset.synthetic) {
        const auto& s = cfg.dataset.synth;
        d["type"] = "synthetic";
        d["classes"] = s.classes;
        d["n_per_class"] = s.n_per_class;
        d["d_s"] = s.d_s;
        d["d_img"] = s.d_img;
        d["d_txt"] = s.d_txt;
        d["noise_sigma"] = s.noise_sigma;
        d["eval_fraction"] = s.eval_fraction;
    } else {
        const auto& f = cfg.dataset.files;
        d["type"] = "files";
        d["img_features"] = f.img_features;
        d["txt_features"] = f.txt_features;
        d["manifest"] = f.manifest;
        d["skb"] = f.skb;
    }
    j["dataset"] = d;

    json f;
    f["n_clients"] = cfg.federation.n_clients;
    f["rounds"] = cfg.federation.rounds;
    f["alpha"] = cfg.federation.alpha;
    f["dropout_prob"] = cfg.federation.dropout_prob;
    json speeds = json::array();
    for (std::size_t i = 0; i < cfg.federation.n_clients; ++i)
        speeds.push_back(cfg.federation.compute_speeds.empty() ? 1.0
                                                               : cfg.federation.compute_speeds[i]);
    f["compute_speeds"] = speeds;
    j["federation"] = f;

    json a;
    a["d_h"] = cfg.adapter.d_h;
    a["k_intra"] = cfg.adapter.k_intra;
    a["k_cross"] = cfg.adapter.k_cross;
    a["sigma"] = cfg.adapter.sigma;
    a["layers"] = cfg.adapter.layers;
    a["attn_scale"] = cfg.adapter.attn_scale;
    j["adapter"] = a;

    json t;
    t["margin"] = cfg.train.margin;
    t["reg_weight"] = cfg.train.reg_weight;
    t["lr"] = cfg.train.lr;
    t["batch_size"] = cfg.train.batch_size;
    t["local_epochs"] = cfg.train.local_epochs;
    t["beta1"] = cfg.train.beta1;
    t["beta2"] = cfg.train.beta2;
    t["adam_eps"] = cfg.train.adam_eps;
    j["train"] = t;

    json l;
    l["q"] = cfg.labeling.q;
    l["patience"] = cfg.labeling.patience;
    l["tau_percentile"] = cfg.labeling.tau_percentile;
    j["labeling"] = l;

    json e;
    e["mild_rate"] = cfg.error.mild_rate;
    e["severe_rate"] = cfg.error.severe_rate;
    json levels = json::array();
    for (std::size_t i = 0; i < cfg.federation.n_clients; ++i)
        levels.push_back(error_level_name(cfg.error.client_levels.empty()
                                              ? ErrorLevel::none
                                              : cfg.error.client_levels[i]));
    e["client_levels"] = levels;
    j["error"] = e;

    return indent < 0 ? j.dump() : j.dump(indent);
}

std::string config_hash(const ExperimentConfig& cfg) {
    const std::uint64_t h = fnv1a64(config_to_json(cfg, -1));
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// ---- metrics rows ----

std::string metrics_csv_header() {
    return "round,rsum,r1_i2t,r5_i2t,r10_i2t,r1_t2i,r5_t2i,r10_t2i,mean_loss,"
           "retained_fraction,pruned_total,sim_duration";
}

std::string metric_csv_row(const MetricRecord& r) {
    std::string row = std::to_string(r.round);
    const auto& b = r.retrieval;
    for (double v : {b.rsum, b.r1_i2t, b.r5_i2t, b.r10_i2t, b.r1_t2i, b.r5_t2i, b.r10_t2i,
                     r.mean_loss, r.retained_fraction}) {
        row += ',';
        row += format_double(v);
    }
    row += ',';
    row += std::to_string(r.pruned_total);
    row += ',';
    row += format_double(r.sim_duration);
    return row;
}

// ---- dataset preparation ----

namespace {

struct Prepared {
    FeatureSet img;
    FeatureSet txt;
    DatasetManifest manifest;
    Skb skb;
    std::vector<std::vector<PairRef>> shard_pairs;           // per client, corrupted
    std::vector<std::vector<std::uint64_t>> corrupted_ids;   // per client, ground truth
    Batch eval_batch;                                        // img slice then txt slice
    std::size_t eval_n = 0;
};

std::unordered_map<std::uint64_t, std::uint32_t> row_index(const FeatureSet& fs) {
    std::unordered_map<std::uint64_t, std::uint32_t> m;
    m.reserve(fs.sample_ids.size());
    for (std::size_t i = 0; i < fs.sample_ids.size(); ++i)
        m.emplace(fs.sample_ids[i], static_cast<std::uint32_t>(i));
    return m;
}

Prepared prepare_dataset(const ExperimentConfig& cfg) {
    Prepared prep;
    if (cfg.dataset.synthetic) {
        const auto& s = cfg.dataset.synth;
        SyntheticData data =
            generate_synthetic(s.classes, s.n_per_class, s.d_s, s.d_img, s.d_txt, s.noise_sigma,
                               s.eval_fraction, cfg.master_seed);
        prep.img = std::move(data.img);
        prep.txt = std::move(data.txt);
        prep.manifest = std::move(data.manifest);
        prep.skb = std::move(data.skb);
    } else {
        const auto& f = cfg.dataset.files;
        try {
            prep.img = load_features(f.img_features);
            prep.txt = load_features(f.txt_features);
            prep.manifest = load_manifest(f.manifest);
            prep.skb = skb_load(f.skb);
        } catch (const std::exception& e) {
            throw ValidationError(std::string("dataset: ") + e.what());
        }
        if (prep.img.signature.modality != Modality::image)
            throw ValidationError("dataset: img_features is not an image feature file");
        if (prep.txt.signature.modality != Modality::text)
            throw ValidationError("dataset: txt_features is not a text feature file");
    }
    if (prep.manifest.eval_pairs.empty())
        throw ValidationError("dataset: empty eval split");
    if (prep.manifest.train_pairs.empty())
        throw ValidationError("dataset: empty train split");

    const auto img_rows = row_index(prep.img);
    const auto txt_rows = row_index(prep.txt);
    auto img_row_of = [&](std::size_t pair) {
        auto it = img_rows.find(prep.manifest.pairings[pair].first);
        if (it == img_rows.end())
            throw ValidationError("dataset: pairing references unknown image sample");
        return it->second;
    };
    auto txt_row_of = [&](std::size_t pair) {
        auto it = txt_rows.find(prep.manifest.pairings[pair].second);
        if (it == txt_rows.end())
            throw ValidationError("dataset: pairing references unknown text sample");
        return it->second;
    };

    // Non-IID shards, then per-client pairing corruption by error level.
    auto shards = partition_dirichlet(prep.manifest, cfg.federation.n_clients,
                                      cfg.federation.alpha,
                                      derive_seed(cfg.master_seed, "partition"));
    prep.shard_pairs.resize(shards.size());
    prep.corrupted_ids.resize(shards.size());
    for (std::size_t c = 0; c < shards.size(); ++c) {
        const auto& shard = shards[c];
        const ErrorLevel level =
            cfg.error.client_levels.empty() ? ErrorLevel::none : cfg.error.client_levels[c];
        const double rate = level == ErrorLevel::mild     ? cfg.error.mild_rate
                            : level == ErrorLevel::severe ? cfg.error.severe_rate
                                                          : 0.0;
        std::vector<std::uint32_t> rows(shard.size());
        for (std::size_t k = 0; k < shard.size(); ++k) rows[k] = txt_row_of(shard[k]);
        CorruptionResult corr =
            inject_label_error(rows, rate, derive_seed(cfg.master_seed, "corrupt", c));
        auto& pairs = prep.shard_pairs[c];
        pairs.reserve(shard.size());
        for (std::size_t k = 0; k < shard.size(); ++k)
            pairs.push_back(PairRef{static_cast<std::uint64_t>(shard[k]), img_row_of(shard[k]),
                                    corr.txt_rows[k]});
        for (std::size_t pos : corr.corrupted)
            prep.corrupted_ids[c].push_back(static_cast<std::uint64_t>(shard[pos]));
    }

    // Evaluation always uses the true pairing; corruption never touches it.
    const std::size_t n = prep.manifest.eval_pairs.size();
    BatchSlice img_slice, txt_slice;
    img_slice.signature = prep.img.signature;
    txt_slice.signature = prep.txt.signature;
    img_slice.features = Matrix(n, prep.img.signature.dim);
    txt_slice.features = Matrix(n, prep.txt.signature.dim);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t pair = prep.manifest.eval_pairs[k];
        const std::uint32_t ir = img_row_of(pair), tr = txt_row_of(pair);
        img_slice.sample_ids.push_back(prep.img.sample_ids[ir]);
        txt_slice.sample_ids.push_back(prep.txt.sample_ids[tr]);
        for (std::size_t d = 0; d < prep.img.signature.dim; ++d)
            img_slice.features(k, d) = prep.img.features(ir, d);
        for (std::size_t d = 0; d < prep.txt.signature.dim; ++d)
            txt_slice.features(k, d) = prep.txt.features(tr, d);
    }
    prep.eval_batch.push_back(std::move(img_slice));
    prep.eval_batch.push_back(std::move(txt_slice));
    prep.eval_n = n;
    return prep;
}

std::vector<std::size_t> identity_pairing(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    return p;
}

// Joint evaluation: both eval slices through one adapter, as in training.
RsumBreakdown eval_joint(const AdapterParams& params, const Prepared& prep) {
    AdapterOutput out = adapter_forward(prep.eval_batch, params);
    const std::size_t n = prep.eval_n, ds = params.d_s();
    Matrix ti(n, ds), tt(n, ds);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < ds; ++d) {
            ti(i, d) = out.tokens(i, d);
            tt(i, d) = out.tokens(n + i, d);
        }
    return rsum(ti, tt, identity_pairing(n));
}

// Split evaluation for the single-modal baseline: each modality through its
// own adapter, tokens meeting only in the retrieval metric.
RsumBreakdown eval_split(const AdapterParams& img_params, const AdapterParams& txt_params,
                         const Prepared& prep) {
    Batch bi{prep.eval_batch[0]};
    Batch bt{prep.eval_batch[1]};
    AdapterOutput oi = adapter_forward(bi, img_params);
    AdapterOutput ot = adapter_forward(bt, txt_params);
    return rsum(oi.tokens, ot.tokens, identity_pairing(prep.eval_n));
}

RsumBreakdown mean_breakdown(const std::vector<RsumBreakdown>& parts) {
    RsumBreakdown m;
    if (parts.empty()) return m;
    for (const auto& b : parts) {
        m.r1_i2t += b.r1_i2t;
        m.r5_i2t += b.r5_i2t;
        m.r10_i2t += b.r10_i2t;
        m.r1_t2i += b.r1_t2i;
        m.r5_t2i += b.r5_t2i;
        m.r10_t2i += b.r10_t2i;
        m.rsum += b.rsum;
    }
    const double inv = 1.0 / static_cast<double>(parts.size());
    m.r1_i2t *= inv;
    m.r5_i2t *= inv;
    m.r10_i2t *= inv;
    m.r1_t2i *= inv;
    m.r5_t2i *= inv;
    m.r10_t2i *= inv;
    m.rsum *= inv;
    return m;
}

std::vector<ClientProfile> build_profiles(const ExperimentConfig& cfg,
                                          const EncoderSignature& img_sig,
                                          const EncoderSignature& txt_sig) {
    std::vector<ClientProfile> profiles;
    for (std::size_t i = 0; i < cfg.federation.n_clients; ++i) {
        ClientProfile p;
        p.client_id = static_cast<std::uint32_t>(i);
        p.signatures = {img_sig, txt_sig};
        p.compute_speed =
            cfg.federation.compute_speeds.empty() ? 1.0 : cfg.federation.compute_speeds[i];
        p.dropout_prob = cfg.federation.dropout_prob;
        p.error_level =
            cfg.error.client_levels.empty() ? ErrorLevel::none : cfg.error.client_levels[i];
        profiles.push_back(std::move(p));
    }
    return profiles;
}

FederationConfig build_fed_config(const ExperimentConfig& cfg) {
    FederationConfig fcfg;
    fcfg.master_seed = cfg.master_seed;
    fcfg.train = cfg.train;
    fcfg.train.confidence_quantile = cfg.labeling.q;
    fcfg.patience = cfg.labeling.patience;
    fcfg.tau_percentile = cfg.labeling.tau_percentile;
    switch (cfg.mode) {
        case ExperimentMode::proposed:
        case ExperimentMode::single_modal_fl:
            break;
        case ExperimentMode::no_denoise:
            // The scheme minus its denoiser: nothing masked, nothing pruned.
            fcfg.train.confidence_quantile = 0.0;
            fcfg.pruning_enabled = false;
            break;
        case ExperimentMode::local_only:
            // No sharing means no consensus to prune against.
            fcfg.aggregate = false;
            fcfg.pruning_enabled = false;
            break;
    }
    return fcfg;
}

const double kNan = std::numeric_limits<double>::quiet_NaN();

struct PruneLog {
    std::vector<std::size_t> seen;
    std::vector<std::map<std::uint64_t, std::uint32_t>> earliest;  // pair id -> round

    explicit PruneLog(std::size_t n) : seen(n, 0), earliest(n) {}

    void absorb(const std::vector<ClientState>& clients, std::uint32_t round) {
        for (std::size_t i = 0; i < clients.size(); ++i) {
            const auto& ids = clients[i].pruned_ids;
            for (std::size_t k = seen[i]; k < ids.size(); ++k)
                earliest[i].emplace(ids[k], round);
            seen[i] = ids.size();
        }
    }
};

std::vector<std::pair<std::uint32_t, std::uint64_t>> sorted_prunes(
    const std::map<std::uint64_t, std::uint32_t>& earliest) {
    std::vector<std::pair<std::uint32_t, std::uint64_t>> out;
    out.reserve(earliest.size());
    for (const auto& [id, round] : earliest) out.emplace_back(round, id);
    std::stable_sort(out.begin(), out.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

void finish_summaries(const ExperimentConfig& cfg, const Prepared& prep,
                      const std::vector<double>& final_rsum, const PruneLog& log,
                      RunResult& result) {
    const std::size_t n = cfg.federation.n_clients;
    for (std::size_t i = 0; i < n; ++i) {
        ClientSummary cs;
        cs.id = static_cast<std::uint32_t>(i);
        cs.level = cfg.error.client_levels.empty() ? ErrorLevel::none : cfg.error.client_levels[i];
        cs.shard_pairs = prep.shard_pairs[i].size();
        cs.final_rsum = final_rsum[i];
        cs.corrupted_pairs = prep.corrupted_ids[i];
        cs.pruned = sorted_prunes(log.earliest[i]);
        result.clients.push_back(std::move(cs));
    }
    for (ErrorLevel level : {ErrorLevel::none, ErrorLevel::mild, ErrorLevel::severe}) {
        GroupSummary g;
        double sum = 0.0;
        for (const auto& cs : result.clients) {
            if (cs.level != level) continue;
            g.clients.push_back(cs.id);
            g.pruned_total += cs.pruned.size();
            sum += cs.final_rsum;
        }
        if (g.clients.empty()) continue;
        g.final_rsum = sum / static_cast<double>(g.clients.size());
        result.groups.emplace_back(error_level_name(level), g);
    }
}

json record_to_json(const MetricRecord& r) {
    json j;
    j["round"] = r.round;
    j["rsum"] = r.retrieval.rsum;
    j["r1_i2t"] = r.retrieval.r1_i2t;
    j["r5_i2t"] = r.retrieval.r5_i2t;
    j["r10_i2t"] = r.retrieval.r10_i2t;
    j["r1_t2i"] = r.retrieval.r1_t2i;
    j["r5_t2i"] = r.retrieval.r5_t2i;
    j["r10_t2i"] = r.retrieval.r10_t2i;
    j["mean_loss"] = r.mean_loss;
    j["retained_fraction"] = r.retained_fraction;
    j["pruned_total"] = r.pruned_total;
    j["sim_duration"] = r.sim_duration;
    return j;
}

void write_summary(const ExperimentConfig& cfg, const RunResult& result,
                   const fs::path& out_dir) {
    json s;
    s["mode"] = mode_name(cfg.mode);
    s["rounds"] = cfg.federation.rounds;
    s["config"] = json::parse(config_to_json(cfg, -1));
    s["config_hash"] = config_hash(cfg);
    s["final"] = record_to_json(result.history.back());
    std::size_t best = 0;
    for (std::size_t i = 1; i < result.history.size(); ++i)
        if (result.history[i].retrieval.rsum > result.history[best].retrieval.rsum) best = i;
    s["best"] = {{"round", result.history[best].round},
                 {"rsum", result.history[best].retrieval.rsum}};
    json groups = json::object();
    for (const auto& [name, g] : result.groups) {
        json gj;
        gj["clients"] = g.clients;
        gj["final_rsum"] = g.final_rsum;
        gj["pruned_total"] = g.pruned_total;
        groups[name] = gj;
    }
    s["groups"] = groups;
    json clients = json::array();
    for (const auto& cs : result.clients) {
        json cj;
        cj["id"] = cs.id;
        cj["error_level"] = error_level_name(cs.level);
        cj["shard_pairs"] = cs.shard_pairs;
        cj["final_rsum"] = cs.final_rsum;
        cj["corrupted_pairs"] = cs.corrupted_pairs;
        json pruned = json::array();
        for (const auto& [round, id] : cs.pruned) pruned.push_back({round, id});
        cj["pruned"] = pruned;
        clients.push_back(cj);
    }
    s["clients"] = clients;
    atomic_write_text(out_dir / "summary.json", s.dump(2) + "\n");
}

void save_ledgers(const std::vector<ClientState>& clients, const fs::path& dir,
                  const std::string& suffix) {
    fs::create_directories(dir);
    for (const auto& c : clients)
        ledger_save(c.ledger,
                    dir / ("client-" + std::to_string(c.profile.client_id) + suffix + ".ledger"));
}

// proposed / no_denoise / local_only: one shared adapter over both modalities.
void run_shared(const ExperimentConfig& cfg, const Prepared& prep, const fs::path& out_dir,
                const std::function<void(const MetricRecord&)>& record, RunResult& result) {
    const EncoderSignature img_sig = prep.img.signature, txt_sig = prep.txt.signature;
    const bool per_client_eval = cfg.mode == ExperimentMode::local_only;

    AdapterHyper hyper{cfg.adapter.k_intra, cfg.adapter.k_cross, cfg.adapter.sigma,
                       cfg.adapter.layers};
    AdapterParams init =
        init_adapter_params({img_sig, txt_sig}, cfg.adapter.d_h, prep.skb.dim(), hyper,
                            cfg.adapter.attn_scale, cfg.master_seed);

    GlobalState state;
    state.params = init;
    std::vector<ClientState> clients;
    const auto profiles = build_profiles(cfg, img_sig, txt_sig);
    for (std::size_t i = 0; i < profiles.size(); ++i) {
        ClientState c;
        c.profile = profiles[i];
        c.shard = ShardView{&prep.img.features, &prep.txt.features, img_sig, txt_sig,
                            prep.shard_pairs[i]};
        c.params = init;
        clients.push_back(std::move(c));
    }
    const FederationConfig fcfg = build_fed_config(cfg);
    PruneLog prune_log(clients.size());

    auto round_eval = [&]() {
        if (!per_client_eval) return eval_joint(state.params, prep);
        std::vector<RsumBreakdown> parts;
        parts.reserve(clients.size());
        for (const auto& c : clients) parts.push_back(eval_joint(c.params, prep));
        return mean_breakdown(parts);
    };

    MetricRecord r0;
    r0.round = 0;
    r0.retrieval = per_client_eval ? eval_joint(init, prep) : round_eval();
    r0.mean_loss = kNan;
    r0.retained_fraction = kNan;
    record(r0);

    for (std::uint32_t t = 1; t <= cfg.federation.rounds; ++t) {
        RoundOutcome out = run_round(state, clients, prep.skb, fcfg);
        prune_log.absorb(clients, t);
        MetricRecord r;
        r.round = t;
        r.retrieval = round_eval();
        r.mean_loss = out.skipped ? kNan : out.mean_loss;
        r.retained_fraction = out.skipped ? kNan : out.retained_fraction;
        r.pruned_total = state.pruned_total;
        r.sim_duration = out.skipped ? 0.0 : out.sim_duration;
        record(r);
    }

    std::vector<double> final_rsum;
    for (const auto& c : clients) final_rsum.push_back(eval_joint(c.params, prep).rsum);
    finish_summaries(cfg, prep, final_rsum, prune_log, result);

    if (cfg.mode != ExperimentMode::local_only)
        checkpoint_save(state.params, cfg.federation.rounds, out_dir / "checkpoint.semc");
    save_ledgers(clients, out_dir / "ledgers", "");
}

// single_modal_fl: two independent per-modality federations in lockstep.
void run_single_modal(const ExperimentConfig& cfg, const Prepared& prep, const fs::path& out_dir,
                      const std::function<void(const MetricRecord&)>& record, RunResult& result) {
    const EncoderSignature img_sig = prep.img.signature, txt_sig = prep.txt.signature;
    AdapterHyper hyper{cfg.adapter.k_intra, cfg.adapter.k_cross, cfg.adapter.sigma,
                       cfg.adapter.layers};
    AdapterParams init_img =
        init_adapter_params({img_sig}, cfg.adapter.d_h, prep.skb.dim(), hyper,
                            cfg.adapter.attn_scale, derive_seed(cfg.master_seed, "sm-image"));
    AdapterParams init_txt =
        init_adapter_params({txt_sig}, cfg.adapter.d_h, prep.skb.dim(), hyper,
                            cfg.adapter.attn_scale, derive_seed(cfg.master_seed, "sm-text"));

    GlobalState state_img, state_txt;
    state_img.params = init_img;
    state_txt.params = init_txt;
    std::vector<ClientState> clients_img, clients_txt;
    const auto profiles = build_profiles(cfg, img_sig, txt_sig);
    for (std::size_t i = 0; i < profiles.size(); ++i) {
        ClientState ci;
        ci.profile = profiles[i];
        ci.shard = ShardView{&prep.img.features, nullptr, img_sig, EncoderSignature{},
                             prep.shard_pairs[i]};
        ci.params = init_img;
        clients_img.push_back(std::move(ci));
        ClientState ct;
        ct.profile = profiles[i];
        ct.shard = ShardView{nullptr, &prep.txt.features, EncoderSignature{}, txt_sig,
                             prep.shard_pairs[i]};
        ct.params = init_txt;
        clients_txt.push_back(std::move(ct));
    }
    const FederationConfig fcfg = build_fed_config(cfg);
    PruneLog log_img(clients_img.size()), log_txt(clients_txt.size());

    MetricRecord r0;
    r0.round = 0;
    r0.retrieval = eval_split(init_img, init_txt, prep);
    r0.mean_loss = kNan;
    r0.retained_fraction = kNan;
    record(r0);

    for (std::uint32_t t = 1; t <= cfg.federation.rounds; ++t) {
        RoundOutcome oi = run_round(state_img, clients_img, prep.skb, fcfg);
        RoundOutcome ot = run_round(state_txt, clients_txt, prep.skb, fcfg);
        log_img.absorb(clients_img, t);
        log_txt.absorb(clients_txt, t);
        MetricRecord r;
        r.round = t;
        r.retrieval = eval_split(state_img.params, state_txt.params, prep);
        double loss_sum = 0.0, ret_sum = 0.0;
        int parts = 0;
        for (const RoundOutcome* o : {&oi, &ot}) {
            if (o->skipped) continue;
            loss_sum += o->mean_loss;
            ret_sum += o->retained_fraction;
            ++parts;
        }
        r.mean_loss = parts ? loss_sum / parts : kNan;
        r.retained_fraction = parts ? ret_sum / parts : kNan;
        r.pruned_total = state_img.pruned_total + state_txt.pruned_total;
        // A client trains both adapters, so its round time is the sum.
        r.sim_duration = oi.sim_duration + ot.sim_duration;
        record(r);
    }

    std::vector<double> final_rsum;
    for (std::size_t i = 0; i < clients_img.size(); ++i)
        final_rsum.push_back(eval_split(clients_img[i].params, clients_txt[i].params, prep).rsum);

    // Per-client prune log merged over the two federations (earliest round).
    PruneLog merged(clients_img.size());
    merged.earliest = log_img.earliest;
    for (std::size_t i = 0; i < log_txt.earliest.size(); ++i)
        for (const auto& [id, round] : log_txt.earliest[i]) {
            auto [it, fresh] = merged.earliest[i].emplace(id, round);
            if (!fresh && round < it->second) it->second = round;
        }
    finish_summaries(cfg, prep, final_rsum, merged, result);

    checkpoint_save(state_img.params, cfg.federation.rounds, out_dir / "checkpoint-image.semc");
    checkpoint_save(state_txt.params, cfg.federation.rounds, out_dir / "checkpoint-text.semc");
    save_ledgers(clients_img, out_dir / "ledgers", "-image");
    save_ledgers(clients_txt, out_dir / "ledgers", "-text");
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
    validate_config(cfg);
    Prepared prep = prepare_dataset(cfg);
    fs::create_directories(out_dir);
    atomic_write_text(out_dir / "config-echo.json", config_to_json(cfg, 2) + "\n");

    std::string csv = "# config " + config_to_json(cfg, -1) + "\n" + metrics_csv_header() + "\n";
    RunResult result;
    auto record = [&](const MetricRecord& r) {
        result.history.push_back(r);
        csv += metric_csv_row(r) + "\n";
    };

    try {
        if (cfg.mode == ExperimentMode::single_modal_fl)
            run_single_modal(cfg, prep, out_dir, record, result);
        else
            run_shared(cfg, prep, out_dir, record, result);
    } catch (...) {
        atomic_write_text(out_dir / "metrics.csv", csv);  // partial history, still valid CSV
        throw;
    }
    atomic_write_text(out_dir / "metrics.csv", csv);
    write_summary(cfg, result, out_dir);
    return result;
}

void generate_dataset_files(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
    validate_config(cfg);
    if (!cfg.dataset.synthetic)
        throw ValidationError("gen-data: config must use a synthetic dataset block");
    const auto& s = cfg.dataset.synth;
    SyntheticData data =
        generate_synthetic(s.classes, s.n_per_class, s.d_s, s.d_img, s.d_txt, s.noise_sigma,
                           s.eval_fraction, cfg.master_seed);
    fs::create_directories(out_dir);
    save_features(data.img, out_dir / "img.semf");
    save_features(data.txt, out_dir / "txt.semf");
    skb_save(data.skb, out_dir / "skb.skb1");
    data.manifest.skb_prototypes_file = "skb.skb1";
    save_manifest(data.manifest, out_dir / "manifest.json");
}

EvalReport evaluate_checkpoint(const ExperimentConfig& cfg,
                               const std::filesystem::path& checkpoint) {
    validate_config(cfg);
    if (!fs::exists(checkpoint))
        throw ValidationError("eval: no such checkpoint: " + checkpoint.string());
    Prepared prep = prepare_dataset(cfg);
    auto [params, round] = checkpoint_load(checkpoint);
    if (params.input_proj.find(prep.img.signature) == params.input_proj.end() ||
        params.input_proj.find(prep.txt.signature) == params.input_proj.end())
        throw ValidationError("eval: checkpoint lacks projections for the dataset's encoders");
    if (params.d_s() != prep.skb.dim())
        throw ValidationError("eval: checkpoint token width != SKB dimension");
    EvalReport report;
    report.retrieval = eval_joint(params, prep);
    report.round = round;
    return report;
}

void compare_runs(const std::vector<std::filesystem::path>& run_dirs,
                  const std::filesystem::path& out_path) {
    if (run_dirs.empty()) throw ValidationError("compare: no run directories given");
    std::string out = "run,round,metric,value\n";
    for (const auto& dir : run_dirs) {
        const fs::path file = dir / "metrics.csv";
        if (!fs::exists(file))
            throw ValidationError("compare: missing metrics.csv in run " + dir.string());
        std::istringstream in(read_text_file(file));
        std::string line;
        std::vector<std::string> header;
        const std::string run = dir.generic_string();
        while (std::getline(in, line)) {
            if (line.empty() || line[0] == '#') continue;
            std::vector<std::string> cells;
            std::size_t start = 0;
            while (true) {
                const std::size_t comma = line.find(',', start);
                cells.push_back(line.substr(start, comma - start));
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
            if (header.empty()) {
                header = cells;
                if (header.empty() || header[0] != "round")
                    throw ValidationError("compare: malformed metrics.csv in run " + dir.string());
                continue;
            }
            if (cells.size() != header.size())
                throw ValidationError("compare: ragged row in run " + dir.string());
            for (std::size_t c = 1; c < cells.size(); ++c)
                out += run + "," + cells[0] + "," + header[c] + "," + cells[c] + "\n";
        }
        if (header.empty())
            throw ValidationError("compare: empty metrics.csv in run " + dir.string());
    }
    atomic_write_text(out_path, out);
}

GradCheckReport grad_check(std::uint64_t seed, std::size_t d_h, std::size_t d_s,
                           std::size_t pairs, bool perturb) {
    if (d_h < 2 || d_s < 2 || pairs < 2)
        throw ValidationError("grad-check: sizes too small");
    const EncoderSignature img_sig{Modality::image, 0, 12};
    const EncoderSignature txt_sig{Modality::text, 0, 10};
    AdapterHyper hyper;
    hyper.k_intra = 3;
    hyper.k_cross = 3;
    hyper.sigma = 1.0;
    hyper.layers = 1;
    AdapterParams params = init_adapter_params({img_sig, txt_sig}, d_h, d_s, hyper, 1.5,
                                               derive_seed(seed, "gc-params"));
    if (total_param_count(params) > 20000)
        throw ValidationError("grad-check: instance exceeds the 20000-parameter guard");

    Rng rng(derive_seed(seed, "gc-data"));
    const std::size_t classes = 5;
    Matrix protos(classes, d_s);
    for (std::size_t i = 0; i < protos.size(); ++i) protos.data()[i] = rng.normal();
    std::vector<std::uint32_t> ids(classes);
    std::iota(ids.begin(), ids.end(), 0u);
    const Skb skb = build_skb(protos, ids);

    LossInputs in;
    BatchSlice img_slice, txt_slice;
    img_slice.signature = img_sig;
    txt_slice.signature = txt_sig;
    img_slice.features = Matrix(pairs, img_sig.dim);
    txt_slice.features = Matrix(pairs, txt_sig.dim);
    for (std::size_t i = 0; i < img_slice.features.size(); ++i)
        img_slice.features.data()[i] = rng.normal();
    for (std::size_t i = 0; i < txt_slice.features.size(); ++i)
        txt_slice.features.data()[i] = rng.normal();
    for (std::size_t i = 0; i < pairs; ++i) {
        img_slice.sample_ids.push_back(i);
        txt_slice.sample_ids.push_back(1000 + i);
    }
    in.batch.push_back(std::move(img_slice));
    in.batch.push_back(std::move(txt_slice));
    for (std::size_t i = 0; i < 2 * pairs; ++i) in.anchor_idx.push_back(i % classes);
    in.retained.assign(pairs, 1);
    if (pairs >= 3) in.retained[1] = 0;  // one masked pair exercises the filter

    TrainConfig tcfg;
    tcfg.margin = 0.2;
    tcfg.reg_weight = 1.0;

    AdapterParams grads = backward(in, params, skb, tcfg, nullptr);
    if (perturb) grads.cross_map(0, 0) += 1e-2;

    auto grad_blocks = trainable_blocks(grads);
    auto param_blocks = trainable_blocks(params);
    GradCheckReport report;
    const double eps = 1e-5;
    for (std::size_t b = 0; b < param_blocks.size(); ++b) {
        Matrix* pm = param_blocks[b].second;
        const Matrix* gm = grad_blocks[b].second;
        Matrix numeric(pm->rows(), pm->cols());
        for (std::size_t i = 0; i < pm->size(); ++i) {
            const double keep = pm->data()[i];
            pm->data()[i] = keep + eps;
            const double up = total_loss(in, params, skb, tcfg).total;
            pm->data()[i] = keep - eps;
            const double down = total_loss(in, params, skb, tcfg).total;
            pm->data()[i] = keep;
            numeric.data()[i] = (up - down) / (2.0 * eps);
        }
        const double err = max_rel_error(*gm, numeric);
        report.per_block.emplace_back(param_blocks[b].first, err);
        report.max_rel_error = std::max(report.max_rel_error, err);
    }
    report.pass = report.max_rel_error <= 1e-4;
    return report;
}

}  // namespace semfed
