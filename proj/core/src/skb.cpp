#include "semfed/skb.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "semfed/serialize.hpp"

namespace semfed {

static constexpr char kMagic[4] = {'S', 'K', 'B', '1'};

Skb build_skb(const Matrix& prototypes, std::vector<std::uint32_t> class_ids) {
    if (prototypes.rows() < 2) throw std::invalid_argument("build_skb: need at least 2 classes");
    if (class_ids.size() != prototypes.rows())
        throw std::invalid_argument("build_skb: id count != prototype rows");
    std::set<std::uint32_t> seen(class_ids.begin(), class_ids.end());
    if (seen.size() != class_ids.size()) throw std::invalid_argument("build_skb: duplicate class ids");

    Skb skb;
    skb.anchors = Matrix(prototypes.rows(), prototypes.cols());
    for (std::size_t i = 0; i < prototypes.rows(); ++i) {
        const double n = norm2(prototypes.row(i), prototypes.cols());
        if (n == 0.0) throw std::invalid_argument("build_skb: zero-norm prototype row");
        for (std::size_t j = 0; j < prototypes.cols(); ++j)
            skb.anchors(i, j) = prototypes(i, j) / n;
    }
    skb.class_ids = std::move(class_ids);
    skb.version = 1;
    return skb;
}

std::pair<Alignment, double> align_token_top2(const double* token, std::size_t n, const Skb& skb) {
    if (n != skb.dim()) throw std::invalid_argument("align_token: token length != d_s");
    const double tn = norm2(token, n);
    if (tn == 0.0) throw std::domain_error("align_token: zero token");

    double best = -2.0, second = -2.0;
    std::size_t best_i = 0;
    for (std::size_t c = 0; c < skb.num_classes(); ++c) {
        // anchors are unit rows, so cosine = dot / |token|
        const double s = dot(token, skb.anchors.row(c), n) / tn;
        if (s > best) {
            second = best;
            best = s;
            best_i = c;
        } else if (s > second) {
            second = s;
        }
    }
    return {Alignment{skb.class_ids[best_i], best_i, best}, second};
}

Alignment align_token(const double* token, std::size_t n, const Skb& skb) {
    return align_token_top2(token, n, skb).first;
}

void skb_save(const Skb& skb, const std::filesystem::path& path) {
    atomic_write_file(path, [&](std::ostream& os) {
        write_magic(os, kMagic);
        write_u32(os, skb.version);
        write_u32(os, static_cast<std::uint32_t>(skb.num_classes()));
        write_u32(os, static_cast<std::uint32_t>(skb.dim()));
        write_f64_array(os, skb.anchors.data(), skb.anchors.size());
        for (std::uint32_t id : skb.class_ids) write_u32(os, id);
    });
}

Skb skb_load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("skb_load: cannot open " + path.string());
    expect_magic(is, kMagic, "skb_load");
    Skb skb;
    skb.version = read_u32(is);
    const std::uint32_t c = read_u32(is);
    const std::uint32_t d = read_u32(is);
    skb.anchors = Matrix(c, d);
    read_f64_array(is, skb.anchors.data(), skb.anchors.size());
    skb.class_ids.resize(c);
    for (auto& id : skb.class_ids) id = read_u32(is);
    return skb;
}

}  // namespace semfed
