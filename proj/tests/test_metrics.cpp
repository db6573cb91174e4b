#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "attnlab/errors.hpp"
#include "attnlab/metrics.hpp"
#include "attnlab/rng.hpp"

using namespace attnlab;

namespace {

ResponseRecord rec(std::optional<std::uint32_t> pair, Answer truth, Answer said) {
    static std::uint32_t next_id = 0;
    return {pair, next_id++, truth, said};
}

std::vector<ResponseRecord> random_paired(Rng& rng, std::size_t pairs) {
    std::vector<ResponseRecord> out;
    for (std::uint32_t i = 0; i < pairs; ++i) {
        out.push_back(rec(i, Answer::Yes, rng.uniform() < 0.7 ? Answer::Yes : Answer::No));
        out.push_back(rec(i, Answer::No, rng.uniform() < 0.4 ? Answer::Yes : Answer::No));
    }
    return out;
}

}  // namespace

TEST_CASE("yes-rate deltas match the published table rendering") {
    auto [pp1, rel1] = yes_rate_deltas(0.8980, 0.4217);
    CHECK(std::abs(rel1 - 112.95) <= 0.01);
    CHECK(pp1 == doctest::Approx(47.63));
    auto [pp2, rel2] = yes_rate_deltas(0.5962, 0.4217);
    CHECK(std::abs(rel2 - 41.38) <= 0.01);
    CHECK(pp2 == doctest::Approx(17.45));
    CHECK_THROWS_AS(yes_rate_deltas(0.5, 0.0), DegenerateGroundTruth);
    CHECK_THROWS_AS(yes_rate_deltas(0.5, 1.0), DegenerateGroundTruth);
}

TEST_CASE("small hand-computed example") {
    const std::vector<ResponseRecord> r{
        rec(0, Answer::Yes, Answer::Yes), rec(0, Answer::No, Answer::No),
        rec(1, Answer::Yes, Answer::Yes), rec(1, Answer::No, Answer::Yes),
    };
    CHECK(simple_accuracy(r) == 0.75);
    CHECK(paired_accuracy(r) == 0.5);
    CHECK(yes_rate(r) == 0.75);
    CHECK(ground_truth_yes_fraction(r) == 0.5);
    const MetricBlock m = compute_metrics(r);
    CHECK(m.n_prompts == 4);
    CHECK(m.n_pairs == 2);
    REQUIRE(m.paired_accuracy.has_value());
    CHECK(*m.paired_accuracy == 0.5);
    CHECK(m.yes_rate_delta_pp == doctest::Approx(25.0));
    CHECK(m.yes_rate_delta_rel == doctest::Approx(50.0));
}

TEST_CASE("constant yes responder") {
    std::vector<ResponseRecord> r;
    for (std::uint32_t i = 0; i < 200; ++i) {
        r.push_back(rec(i, Answer::Yes, Answer::Yes));
        r.push_back(rec(i, Answer::No, Answer::Yes));
    }
    const MetricBlock m = compute_metrics(r);
    CHECK(m.simple_accuracy == 0.5);
    CHECK(*m.paired_accuracy == 0.0);
    CHECK(m.yes_rate == 1.0);
}

TEST_CASE("unpaired records leave paired accuracy empty") {
    const std::vector<ResponseRecord> r{rec(std::nullopt, Answer::Yes, Answer::No),
                                        rec(std::nullopt, Answer::No, Answer::No)};
    const MetricBlock m = compute_metrics(r);
    CHECK_FALSE(m.paired_accuracy.has_value());
    CHECK(m.n_pairs == 0);
    CHECK_THROWS_AS(paired_accuracy(r), PairingError);
}

TEST_CASE("errors") {
    const std::vector<ResponseRecord> none;
    CHECK_THROWS_AS(simple_accuracy(none), EmptyInput);
    CHECK_THROWS_AS(yes_rate(none), EmptyInput);
    CHECK_THROWS_AS(ground_truth_yes_fraction(none), EmptyInput);
    CHECK_THROWS_AS(paired_accuracy(none), EmptyInput);
    CHECK_THROWS_AS(compute_metrics(none), EmptyInput);

    const std::vector<ResponseRecord> triple{rec(0, Answer::Yes, Answer::Yes), rec(0, Answer::No, Answer::No),
                                             rec(0, Answer::No, Answer::No)};
    CHECK_THROWS_AS(paired_accuracy(triple), PairingError);
    const std::vector<ResponseRecord> lone{rec(0, Answer::Yes, Answer::Yes), rec(1, Answer::No, Answer::No)};
    CHECK_THROWS_AS(paired_accuracy(lone), PairingError);
    // A degenerate ground truth leaves the deltas at zero instead of failing the block.
    const std::vector<ResponseRecord> all_yes{rec(std::nullopt, Answer::Yes, Answer::Yes),
                                              rec(std::nullopt, Answer::Yes, Answer::No)};
    const MetricBlock m = compute_metrics(all_yes);
    CHECK(m.yes_rate_delta_pp == 0.0);
    CHECK(m.yes_rate_delta_rel == 0.0);
}

TEST_CASE("properties over random responders") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<ResponseRecord> r = random_paired(rng, 1 + rng.below(40));
        const MetricBlock m = compute_metrics(r);

        CHECK(*m.paired_accuracy <= m.simple_accuracy);
        // Brute-force paired accuracy.
        std::size_t both = 0;
        for (std::size_t i = 0; i < r.size(); i += 2) both += r[i].correct() && r[i + 1].correct();
        CHECK(*m.paired_accuracy == static_cast<double>(both) / static_cast<double>(r.size() / 2));

        // The deltas reconstruct the yes-rate.
        CHECK(m.ground_truth_yes_fraction + m.yes_rate_delta_pp / 100.0 == doctest::Approx(m.yes_rate));
        CHECK(m.ground_truth_yes_fraction * (1.0 + m.yes_rate_delta_rel / 100.0) == doctest::Approx(m.yes_rate));

        // Record order is irrelevant.
        std::vector<ResponseRecord> shuffled = r;
        for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
        const MetricBlock s = compute_metrics(shuffled);
        CHECK(s.simple_accuracy == m.simple_accuracy);
        CHECK(s.paired_accuracy == m.paired_accuracy);
        CHECK(s.yes_rate == m.yes_rate);
    }
}
