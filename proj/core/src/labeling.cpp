#include "semfed/labeling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "semfed/kernels.hpp"
#include "semfed/serialize.hpp"

namespace semfed {

std::vector<ProvisionalLabel> provisional_labels(const Matrix& tokens,
                                                 const std::vector<std::uint64_t>& sample_ids,
                                                 Modality modality, const Skb& skb) {
    if (sample_ids.size() != tokens.rows())
        throw std::invalid_argument("provisional_labels: id count != token rows");
    std::vector<ProvisionalLabel> labels;
    labels.reserve(tokens.rows());
    for (std::size_t i = 0; i < tokens.rows(); ++i) {
        const Alignment a = align_token(tokens.row(i), tokens.cols(), skb);
        labels.push_back({sample_ids[i], modality, a.anchor_id, a.anchor_index, a.similarity, 0.0});
    }
    return labels;
}

std::vector<double> batch_confidence(const Matrix& tokens_img, const Matrix& tokens_txt,
                                     const std::vector<std::size_t>& pairing) {
    const std::size_t n = tokens_img.rows();
    if (pairing.size() != n) throw std::invalid_argument("batch_confidence: pairing size");
    if (tokens_img.cols() != tokens_txt.cols())
        throw std::invalid_argument("batch_confidence: token dim mismatch");

    // S_ij = cosine(img_i, txt_j)
    Matrix s(n, tokens_txt.rows());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < tokens_txt.rows(); ++j)
            s(i, j) = cosine_similarity(tokens_img.row(i), tokens_txt.row(j), tokens_img.cols());

    std::vector<double> conf(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t p = pairing[i];
        if (p >= tokens_txt.rows()) throw std::invalid_argument("batch_confidence: pairing range");
        const double true_sim = s(i, p);
        if (n == 1) {
            conf[i] = true_sim;  // no distractors in a 1-sample batch
            continue;
        }
        double best_col = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < s.cols(); ++j)
            if (j != p && s(i, j) > best_col) best_col = s(i, j);
        double best_row = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < n; ++k)
            if (k != i && s(k, p) > best_row) best_row = s(k, p);
        conf[i] = ((true_sim - best_col) + (true_sim - best_row)) / 2.0;
    }
    return conf;
}

std::vector<double> anchor_gap_confidence(const Matrix& tokens, const Skb& skb) {
    std::vector<double> conf(tokens.rows());
    for (std::size_t i = 0; i < tokens.rows(); ++i) {
        const auto [best, second] = align_token_top2(tokens.row(i), tokens.cols(), skb);
        conf[i] = best.similarity - second;
    }
    return conf;
}

std::vector<std::uint8_t> mask_low_confidence(const std::vector<double>& confidences, double q) {
    if (q < 0.0 || q >= 1.0) throw std::invalid_argument("mask_low_confidence: q out of [0,1)");
    const std::size_t n = confidences.size();
    std::vector<std::uint8_t> mask(n, 1);
    const std::size_t flag = static_cast<std::size_t>(q * static_cast<double>(n));
    if (flag == 0) return mask;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (confidences[a] != confidences[b]) return confidences[a] < confidences[b];
        return a < b;
    });
    for (std::size_t i = 0; i < flag; ++i) mask[order[i]] = 0;
    return mask;
}

void LabelStats::add(std::uint32_t anchor, double confidence, std::uint64_t count) {
    if (count == 0) return;
    AnchorStat& st = per_anchor[anchor];
    const double total = st.mean_confidence * static_cast<double>(st.count) +
                         confidence * static_cast<double>(count);
    st.count += count;
    st.mean_confidence = total / static_cast<double>(st.count);
}

void ledger_update(LabelLedger& ledger, std::uint32_t round,
                   const std::vector<ProvisionalLabel>& labels,
                   const std::vector<std::uint8_t>& mask) {
    if (labels.size() != mask.size())
        throw std::invalid_argument("ledger_update: labels/mask size mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        LedgerEntry& e = ledger.entries[labels[i].sample_id];
        if (e.status == SampleStatus::pruned) continue;  // absorbing
        const bool flagged = mask[i] == 0;
        if (flagged) {
            e.consecutive_low += 1;
            e.status = SampleStatus::tracked;
        } else {
            e.consecutive_low = 0;
            e.status = SampleStatus::active;
        }
        e.last_anchor = labels[i].anchor_id;
        e.has_anchor = true;
        e.history.push_back({round, labels[i].confidence, flagged});
    }
}

std::vector<std::uint64_t> ledger_prune(LabelLedger& ledger, const LabelStats& consensus,
                                        std::uint32_t patience, double tau_g) {
    std::vector<std::uint64_t> pruned;
    for (auto& [id, e] : ledger.entries) {
        if (e.status != SampleStatus::tracked || e.consecutive_low < patience) continue;
        bool vouched = false;
        if (e.has_anchor) {
            auto it = consensus.per_anchor.find(e.last_anchor);
            vouched = it != consensus.per_anchor.end() && it->second.mean_confidence >= tau_g;
        }
        if (!vouched) {
            e.status = SampleStatus::pruned;
            pruned.push_back(id);
        }
    }
    return pruned;
}

double consensus_percentile(const LabelStats& stats, double percentile) {
    if (stats.per_anchor.empty()) return -std::numeric_limits<double>::infinity();
    std::vector<double> means;
    means.reserve(stats.per_anchor.size());
    for (const auto& [anchor, st] : stats.per_anchor) means.push_back(st.mean_confidence);
    std::sort(means.begin(), means.end());
    // nearest-rank: smallest value with at least percentile% of mass below-or-at
    const double rank = std::ceil(percentile / 100.0 * static_cast<double>(means.size()));
    std::size_t idx = rank <= 1.0 ? 0 : static_cast<std::size_t>(rank) - 1;
    if (idx >= means.size()) idx = means.size() - 1;
    return means[idx];
}

void ledger_save(const LabelLedger& ledger, const std::filesystem::path& path) {
    atomic_write_file(path, [&](std::ostream& os) {
        for (const auto& [id, e] : ledger.entries) {
            const char* status = e.status == SampleStatus::active   ? "active"
                                 : e.status == SampleStatus::tracked ? "tracked"
                                                                     : "pruned";
            os << id << ' ' << status << ' ' << e.consecutive_low << ' ';
            if (e.has_anchor)
                os << e.last_anchor;
            else
                os << '-';
            os << '\n';
        }
    });
}

LabelLedger ledger_load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("ledger_load: cannot open " + path.string());
    LabelLedger ledger;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::uint64_t id;
        std::string status, anchor;
        std::uint32_t low;
        if (!(ss >> id >> status >> low >> anchor))
            throw std::runtime_error("ledger_load: malformed line: " + line);
        LedgerEntry e;
        if (status == "active")
            e.status = SampleStatus::active;
        else if (status == "tracked")
            e.status = SampleStatus::tracked;
        else if (status == "pruned")
            e.status = SampleStatus::pruned;
        else
            throw std::runtime_error("ledger_load: unknown status: " + status);
        e.consecutive_low = low;
        if (anchor != "-") {
            e.last_anchor = static_cast<std::uint32_t>(std::stoul(anchor));
            e.has_anchor = true;
        }
        ledger.entries.emplace(id, std::move(e));
    }
    return ledger;
}

}  // namespace semfed
