#include "semfed/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

#include "semfed/log.hpp"
#include "semfed/rng.hpp"
#include "semfed/serialize.hpp"

namespace semfed {

static constexpr char kFeatureMagic[4] = {'S', 'E', 'M', 'F'};

void save_features(const FeatureSet& fs, const std::filesystem::path& path) {
    if (fs.sample_ids.size() != fs.features.rows())
        throw std::invalid_argument("save_features: id count != rows");
    atomic_write_file(path, [&](std::ostream& os) {
        write_magic(os, kFeatureMagic);
        write_u32(os, 1);
        write_u8(os, static_cast<std::uint8_t>(fs.signature.modality));
        write_u16(os, fs.signature.family);
        write_u32(os, fs.signature.dim);
        write_u64(os, fs.sample_ids.size());
        for (std::uint64_t id : fs.sample_ids) write_u64(os, id);
        write_f64_array(os, fs.features.data(), fs.features.size());
    });
}

FeatureSet load_features(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_features: cannot open " + path.string());
    expect_magic(is, kFeatureMagic, "load_features");
    const std::uint32_t version = read_u32(is);
    if (version != 1)
        throw std::runtime_error("load_features: unsupported version " + std::to_string(version));
    FeatureSet fs;
    fs.signature.modality = static_cast<Modality>(read_u8(is));
    fs.signature.family = read_u16(is);
    fs.signature.dim = read_u32(is);
    const std::uint64_t n = read_u64(is);
    fs.sample_ids.resize(n);
    for (auto& id : fs.sample_ids) id = read_u64(is);
    fs.features = Matrix(n, fs.signature.dim);
    read_f64_array(is, fs.features.data(), fs.features.size());
    return fs;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    nlohmann::json j;
    auto& pairs = j["pairings"] = nlohmann::json::array();
    for (const auto& [img, txt] : m.pairings) pairs.push_back({img, txt});
    j["class_labels"] = m.class_labels;
    j["splits"]["train"] = m.train_pairs;
    j["splits"]["eval"] = m.eval_pairs;
    j["skb_prototypes_file"] = m.skb_prototypes_file;
    atomic_write_text(path, j.dump(2) + "\n");
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    nlohmann::json j = nlohmann::json::parse(read_text_file(path));
    DatasetManifest m;
    for (const auto& p : j.at("pairings"))
        m.pairings.emplace_back(p.at(0).get<std::uint64_t>(), p.at(1).get<std::uint64_t>());
    m.class_labels = j.at("class_labels").get<std::vector<std::uint32_t>>();
    m.train_pairs = j.at("splits").at("train").get<std::vector<std::size_t>>();
    m.eval_pairs = j.at("splits").at("eval").get<std::vector<std::size_t>>();
    m.skb_prototypes_file = j.value("skb_prototypes_file", std::string{});
    if (m.class_labels.size() != m.pairings.size())
        throw std::runtime_error("load_manifest: class_labels/pairings size mismatch");
    return m;
}

SyntheticData generate_synthetic(std::size_t classes, std::size_t n_per_class, std::size_t d_s,
                                 std::size_t d_img, std::size_t d_txt, double noise_sigma,
                                 double eval_fraction, std::uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("generate_synthetic: need >= 2 classes");
    if (n_per_class < 1) throw std::invalid_argument("generate_synthetic: empty classes");
    if (d_s < 2 || d_img < 2 || d_txt < 2)
        throw std::invalid_argument("generate_synthetic: dims must be >= 2");
    if (d_img < d_s || d_txt < d_s)
        throw std::invalid_argument(
            "generate_synthetic: feature dims must be >= d_s so the latent stays recoverable");
    if (noise_sigma < 0.0) throw std::invalid_argument("generate_synthetic: negative noise");
    if (eval_fraction < 0.0 || eval_fraction >= 1.0)
        throw std::invalid_argument("generate_synthetic: eval_fraction out of [0,1)");

    Rng rng(derive_seed(seed, "synth"));
    const std::size_t n = classes * n_per_class;

    // Unit anchors.
    Matrix prototypes(classes, d_s);
    for (std::size_t c = 0; c < classes; ++c) {
        double nrm = 0.0;
        for (std::size_t k = 0; k < d_s; ++k) {
            prototypes(c, k) = rng.normal();
            nrm += prototypes(c, k) * prototypes(c, k);
        }
        nrm = std::sqrt(nrm);
        for (std::size_t k = 0; k < d_s; ++k) prototypes(c, k) /= nrm;
    }

    // Fixed full-rank maps into each modality's feature space. Gaussian
    // matrices of this shape are full rank with probability 1.
    Matrix map_img(d_s, d_img), map_txt(d_s, d_txt);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_s));
    for (std::size_t i = 0; i < map_img.size(); ++i) map_img.data()[i] = rng.normal() * scale;
    for (std::size_t i = 0; i < map_txt.size(); ++i) map_txt.data()[i] = rng.normal() * scale;

    SyntheticData out;
    out.latents = Matrix(n, d_s);
    std::vector<std::uint32_t> class_ids(classes);
    std::iota(class_ids.begin(), class_ids.end(), 0u);
    out.skb = build_skb(prototypes, class_ids);

    out.manifest.class_labels.resize(n);
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t k = 0; k < n_per_class; ++k) {
            const std::size_t i = c * n_per_class + k;
            out.manifest.class_labels[i] = static_cast<std::uint32_t>(c);
            for (std::size_t d = 0; d < d_s; ++d)
                out.latents(i, d) = out.skb.anchors(c, d) + noise_sigma * rng.normal();
        }
    }

    out.img.signature = {Modality::image, 0, static_cast<std::uint32_t>(d_img)};
    out.txt.signature = {Modality::text, 0, static_cast<std::uint32_t>(d_txt)};
    out.img.features = matmul(out.latents, map_img);
    out.txt.features = matmul(out.latents, map_txt);
    out.img.sample_ids.resize(n);
    out.txt.sample_ids.resize(n);
    std::iota(out.img.sample_ids.begin(), out.img.sample_ids.end(), std::uint64_t{0});
    std::iota(out.txt.sample_ids.begin(), out.txt.sample_ids.end(), std::uint64_t{0});

    for (std::size_t i = 0; i < n; ++i) out.manifest.pairings.emplace_back(i, i);

    // Stratified split: the same count held out from every class.
    const std::size_t eval_per_class =
        static_cast<std::size_t>(eval_fraction * static_cast<double>(n_per_class));
    Rng split_rng(derive_seed(seed, "split"));
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::size_t> members(n_per_class);
        std::iota(members.begin(), members.end(), c * n_per_class);
        split_rng.shuffle(members);
        for (std::size_t k = 0; k < n_per_class; ++k) {
            if (k < eval_per_class)
                out.manifest.eval_pairs.push_back(members[k]);
            else
                out.manifest.train_pairs.push_back(members[k]);
        }
    }
    std::sort(out.manifest.train_pairs.begin(), out.manifest.train_pairs.end());
    std::sort(out.manifest.eval_pairs.begin(), out.manifest.eval_pairs.end());
    return out;
}

std::vector<std::vector<std::size_t>> partition_dirichlet(const DatasetManifest& manifest,
                                                          std::size_t n_clients, double alpha,
                                                          std::uint64_t seed) {
    if (n_clients == 0) throw std::invalid_argument("partition_dirichlet: zero clients");
    if (alpha <= 0.0) throw std::invalid_argument("partition_dirichlet: alpha must be positive");
    if (manifest.train_pairs.size() < n_clients)
        throw std::invalid_argument("partition_dirichlet: fewer train samples than clients");

    // Train pairs grouped by class.
    std::map<std::uint32_t, std::vector<std::size_t>> by_class;
    for (std::size_t idx : manifest.train_pairs)
        by_class[manifest.class_labels[idx]].push_back(idx);

    Rng rng(derive_seed(seed, "partition"));
    constexpr int kMaxRetries = 100;
    for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
        std::vector<std::vector<std::size_t>> shards(n_clients);
        for (auto& [cls, members] : by_class) {
            std::vector<std::size_t> pool = members;
            rng.shuffle(pool);
            const std::vector<double> w = rng.dirichlet(alpha, n_clients);
            // Largest-remainder allocation of |pool| samples by weight.
            const double m = static_cast<double>(pool.size());
            std::vector<std::size_t> take(n_clients);
            std::vector<std::pair<double, std::size_t>> frac;
            std::size_t assigned = 0;
            for (std::size_t k = 0; k < n_clients; ++k) {
                const double exact = w[k] * m;
                take[k] = static_cast<std::size_t>(exact);
                assigned += take[k];
                frac.emplace_back(exact - static_cast<double>(take[k]), k);
            }
            std::sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            for (std::size_t r = 0; assigned < pool.size(); ++r, ++assigned)
                take[frac[r % n_clients].second] += 1;

            std::size_t offset = 0;
            for (std::size_t k = 0; k < n_clients; ++k) {
                for (std::size_t t = 0; t < take[k]; ++t) shards[k].push_back(pool[offset++]);
            }
        }
        const bool all_nonempty =
            std::all_of(shards.begin(), shards.end(), [](const auto& s) { return !s.empty(); });
        if (all_nonempty) {
            for (auto& s : shards) std::sort(s.begin(), s.end());
            return shards;
        }
    }
    throw std::runtime_error(
        "partition_dirichlet: could not give every client data after 100 draws; "
        "use a larger dataset or a larger alpha");
}

CorruptionResult inject_label_error(const std::vector<std::uint32_t>& txt_rows, double rate,
                                    std::uint64_t seed) {
    if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("inject_label_error: bad rate");
    CorruptionResult out;
    out.txt_rows = txt_rows;
    const std::size_t m = txt_rows.size();
    const std::size_t k = static_cast<std::size_t>(rate * static_cast<double>(m));
    if (k == 0) return out;

    Rng rng(derive_seed(seed, "corrupt"));
    std::vector<std::size_t> positions(m);
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    rng.shuffle(positions);
    std::vector<std::size_t> selected(positions.begin(), positions.begin() + k);
    std::sort(selected.begin(), selected.end());

    if (k == 1) {
        // A single selection cannot be deranged against itself; trade texts
        // with a random untouched position instead.
        if (m < 2) {
            log_warn("inject_label_error: only one pair in total, nothing to swap with");
            return out;
        }
        std::size_t other = selected[0];
        while (other == selected[0])
            other = static_cast<std::size_t>(rng.below(m));
        log_warn("inject_label_error: single selected pair, swapping with an unselected one");
        std::swap(out.txt_rows[selected[0]], out.txt_rows[other]);
        out.corrupted = {std::min(selected[0], other), std::max(selected[0], other)};
        return out;
    }

    // Sattolo: one cycle over the selected positions, so nobody keeps their text.
    std::vector<std::size_t> perm = selected;
    rng.cycle(perm);
    for (std::size_t i = 0; i < k; ++i) out.txt_rows[selected[i]] = txt_rows[perm[i]];
    out.corrupted = selected;
    return out;
}

}  // namespace semfed
