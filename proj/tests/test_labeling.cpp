#include <cmath>
#include <stdexcept>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "semfed/labeling.hpp"

using namespace semfed;

namespace {

Skb two_anchor_skb() {
    return build_skb(Matrix::from_rows(2, 2, {1, 0, 0, 1}), {10, 20});
}

}  // namespace

TEST_CASE("provisional labels pick the nearest anchor") {
    Skb skb = two_anchor_skb();
    Matrix tokens = Matrix::from_rows(3, 2, {0.9, 0.1, -0.2, 0.8, 1.0, 1.0});
    auto labels = provisional_labels(tokens, {5, 6, 7}, Modality::text, skb);
    REQUIRE(labels.size() == 3);
    CHECK(labels[0].sample_id == 5);
    CHECK(labels[0].modality == Modality::text);
    CHECK(labels[0].anchor_id == 10);
    CHECK(labels[0].anchor_index == 0);
    CHECK(labels[1].anchor_id == 20);
    CHECK(labels[2].anchor_index == 0);  // exact tie goes to the lower index
    CHECK_THROWS_AS(provisional_labels(tokens, {1, 2}, Modality::text, skb),
                    std::invalid_argument);
}

TEST_CASE("batch confidence averages both retrieval margins") {
    // txt0 sits 60 degrees from img0, txt1 matches img1 exactly.
    const double c = 0.5, s = std::sqrt(3.0) / 2.0;
    Matrix ti = Matrix::from_rows(2, 2, {1, 0, 0, 1});
    Matrix tt = Matrix::from_rows(2, 2, {c, s, 0, 1});
    auto conf = batch_confidence(ti, tt, {0, 1});
    REQUIRE(conf.size() == 2);
    CHECK(conf[0] == doctest::Approx(0.066987298107780813).epsilon(1e-12));
    CHECK(conf[1] == doctest::Approx(0.5669872981077807).epsilon(1e-12));
}

TEST_CASE("singleton batches fall back to the pair similarity") {
    Matrix ti = Matrix::from_rows(1, 2, {1, 0});
    Matrix tt = Matrix::from_rows(1, 2, {0.5, std::sqrt(3.0) / 2.0});
    auto conf = batch_confidence(ti, tt, {0});
    REQUIRE(conf.size() == 1);
    CHECK(conf[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("anchor gap confidence is top1 minus top2") {
    Skb skb = two_anchor_skb();
    Matrix tokens = Matrix::from_rows(2, 2, {1, 0, 1, 1});
    auto conf = anchor_gap_confidence(tokens, skb);
    CHECK(conf[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(conf[1] == doctest::Approx(0.0).epsilon(1e-12));  // equidistant token
}

TEST_CASE("low-confidence masking flags the floor(q n) lowest") {
    std::vector<double> conf{0.9, 0.1, 0.5, 0.1, 0.7};
    auto mask = mask_low_confidence(conf, 0.5);  // floor(2.5) = 2 flagged
    CHECK(mask == std::vector<std::uint8_t>{1, 0, 1, 0, 1});  // tie: lower index first

    CHECK(mask_low_confidence(conf, 0.0) == std::vector<std::uint8_t>(5, 1));
    CHECK_THROWS_AS(mask_low_confidence(conf, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(mask_low_confidence(conf, -0.1), std::invalid_argument);
}

TEST_CASE("label stats keep count-weighted running means") {
    LabelStats st;
    st.add(3, 0.5, 2);
    st.add(3, 0.7, 2);
    st.add(4, 0.1);
    st.add(4, 0.0, 0);  // no-op
    CHECK(st.per_anchor.at(3).count == 4);
    CHECK(st.per_anchor.at(3).mean_confidence == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(st.per_anchor.at(4).count == 1);
    CHECK(st.per_anchor.at(4).mean_confidence == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("the ledger tracks consecutive low-confidence rounds") {
    LabelLedger ledger;
    auto label = [](std::uint64_t id, std::uint32_t anchor, double conf) {
        return ProvisionalLabel{id, Modality::image, anchor, anchor, 0.0, conf};
    };

    ledger_update(ledger, 1, {label(7, 2, 0.1)}, {0});
    CHECK(ledger.entries[7].status == SampleStatus::tracked);
    CHECK(ledger.entries[7].consecutive_low == 1);

    ledger_update(ledger, 2, {label(7, 2, 0.1)}, {0});
    CHECK(ledger.entries[7].consecutive_low == 2);

    // one good round resets the streak
    ledger_update(ledger, 3, {label(7, 2, 0.9)}, {1});
    CHECK(ledger.entries[7].status == SampleStatus::active);
    CHECK(ledger.entries[7].consecutive_low == 0);
    CHECK(ledger.entries[7].history.size() == 3);
    CHECK(ledger.entries[7].last_anchor == 2);
    CHECK(ledger.entries[7].has_anchor);

    CHECK_THROWS_AS(ledger_update(ledger, 4, {label(7, 2, 0.1)}, {0, 1}),
                    std::invalid_argument);
}

TEST_CASE("pruned is absorbing") {
    LabelLedger ledger;
    ledger.entries[9].status = SampleStatus::pruned;
    ProvisionalLabel l{9, Modality::image, 1, 1, 0.0, 0.99};
    ledger_update(ledger, 5, {l}, {1});
    CHECK(ledger.entries[9].status == SampleStatus::pruned);
    CHECK(ledger.entries[9].history.empty());
    CHECK(ledger.is_pruned(9));
    CHECK_FALSE(ledger.is_pruned(12345));
}

TEST_CASE("pruning needs patience plus a failed consensus vote") {
    LabelStats consensus;
    consensus.add(1, 0.8, 10);  // trusted anchor
    consensus.add(2, 0.1, 10);  // weak anchor
    const double tau = 0.5;

    LabelLedger ledger;
    auto entry = [](SampleStatus st, std::uint32_t low, std::uint32_t anchor, bool has) {
        LedgerEntry e;
        e.status = st;
        e.consecutive_low = low;
        e.last_anchor = anchor;
        e.has_anchor = has;
        return e;
    };
    ledger.entries[1] = entry(SampleStatus::tracked, 2, 2, true);   // not enough patience
    ledger.entries[2] = entry(SampleStatus::tracked, 3, 1, true);   // vouched for
    ledger.entries[3] = entry(SampleStatus::tracked, 3, 2, true);   // weak anchor: prune
    ledger.entries[4] = entry(SampleStatus::tracked, 3, 99, true);  // unknown anchor: prune
    ledger.entries[5] = entry(SampleStatus::tracked, 4, 0, false);  // anchorless: prune
    ledger.entries[6] = entry(SampleStatus::active, 7, 2, true);    // active is safe

    auto pruned = ledger_prune(ledger, consensus, 3, tau);
    CHECK(pruned == std::vector<std::uint64_t>{3, 4, 5});
    CHECK(ledger.entries[1].status == SampleStatus::tracked);
    CHECK(ledger.entries[2].status == SampleStatus::tracked);
    CHECK(ledger.entries[3].status == SampleStatus::pruned);
    CHECK(ledger.entries[4].status == SampleStatus::pruned);
    CHECK(ledger.entries[5].status == SampleStatus::pruned);
    CHECK(ledger.entries[6].status == SampleStatus::active);

    // second sweep finds nothing new
    CHECK(ledger_prune(ledger, consensus, 3, tau).empty());
}

TEST_CASE("consensus percentile uses nearest-rank") {
    LabelStats st;
    st.add(0, 0.2);
    st.add(1, 0.4);
    st.add(2, 0.1);
    st.add(3, 0.3);
    CHECK(consensus_percentile(st, 0.0) == doctest::Approx(0.1));
    CHECK(consensus_percentile(st, 25.0) == doctest::Approx(0.1));
    CHECK(consensus_percentile(st, 50.0) == doctest::Approx(0.2));
    CHECK(consensus_percentile(st, 75.0) == doctest::Approx(0.3));
    CHECK(consensus_percentile(st, 100.0) == doctest::Approx(0.4));
    CHECK(consensus_percentile(LabelStats{}, 25.0) ==
          -std::numeric_limits<double>::infinity());
}

TEST_CASE("ledger round-trips through disk") {
    LabelLedger ledger;
    ledger.entries[3].status = SampleStatus::tracked;
    ledger.entries[3].consecutive_low = 2;
    ledger.entries[3].last_anchor = 14;
    ledger.entries[3].has_anchor = true;
    ledger.entries[8].status = SampleStatus::pruned;
    ledger.entries[8].consecutive_low = 5;
    ledger.entries[8].last_anchor = 1;
    ledger.entries[8].has_anchor = true;
    ledger.entries[11].status = SampleStatus::active;  // never labeled yet

    auto path = std::filesystem::temp_directory_path() / "semfed_test_ledger.txt";
    ledger_save(ledger, path);
    LabelLedger back = ledger_load(path);
    std::filesystem::remove(path);

    REQUIRE(back.entries.size() == 3);
    CHECK(back.entries[3].status == SampleStatus::tracked);
    CHECK(back.entries[3].consecutive_low == 2);
    CHECK(back.entries[3].last_anchor == 14);
    CHECK(back.entries[3].has_anchor);
    CHECK(back.entries[8].status == SampleStatus::pruned);
    CHECK(back.entries[11].status == SampleStatus::active);
    CHECK_FALSE(back.entries[11].has_anchor);

    CHECK_THROWS_AS(ledger_load(path), std::runtime_error);  // file is gone
}
