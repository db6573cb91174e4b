#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstring>

#include "attnlab/errors.hpp"
#include "attnlab/intervention.hpp"
#include "attnlab/oracle.hpp"
#include "support.hpp"

using namespace attnlab;

namespace {

const ModalityLayout k211 = build_layout(2, 1, 1);
const std::vector<double> kRow{0.4, 0.1, 0.3, 0.2};

void check_row(const std::vector<double>& got, const std::vector<double>& want, double tol = 1e-12) {
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(tol));
}

double mass(const std::vector<double>& row, const ModalityLayout& l, Modality m) {
    double s = 0.0;
    for (std::size_t i = l.span(m).begin; i < l.span(m).end; ++i) s += row[i];
    return s;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("proportional redistribution, worked examples") {
    check_row(redistribute_row_proportional(kRow, k211, Modality::System, 1.0), {0, 0, 0.6, 0.4});
    check_row(redistribute_row_proportional(kRow, k211, Modality::System, 0.2),
              {0.32, 0.08, 0.36, 0.24});
    // Source exactly zeroed at p = 1.
    const auto out = redistribute_row_proportional(kRow, k211, Modality::System, 1.0);
    CHECK(out[0] == 0.0);
    CHECK(out[1] == 0.0);
}

TEST_CASE("proportional redistribution, degenerate rows") {
    const std::vector<double> no_source{0.0, 0.0, 0.5, 0.5};
    CHECK(bit_equal(redistribute_row_proportional(no_source, k211, Modality::System, 1.0), no_source));

    // A query inside the system span sees only system keys.
    const std::vector<double> masked{0.7, 0.3, 0.0, 0.0};
    CHECK(bit_equal(redistribute_row_proportional(masked, k211, Modality::System, 1.0), masked));

    std::vector<double> r = masked;
    CHECK(redistribute_proportional_inplace(r, k211, Modality::System, 1.0) ==
          RowOutcome::SkippedZeroRecipient);
    r = no_source;
    CHECK(redistribute_proportional_inplace(r, k211, Modality::System, 1.0) ==
          RowOutcome::SkippedZeroSource);
    // Both empty: the recipient check wins.
    std::vector<double> image_only{0.0, 0.0, 1.0, 0.0};
    CHECK(redistribute_pairwise_inplace(image_only, k211, Modality::System, Modality::Text, 1.0) ==
          RowOutcome::SkippedZeroRecipient);
}

TEST_CASE("pairwise transfer, worked examples") {
    check_row(redistribute_row_pairwise(kRow, k211, Modality::System, Modality::Text, 1.0),
              {0, 0, 0.3, 0.7});
    check_row(redistribute_row_pairwise(kRow, k211, Modality::System, Modality::Image, 1.0),
              {0, 0, 0.8, 0.2});
    CHECK_THROWS_AS(redistribute_row_pairwise(kRow, k211, Modality::Text, Modality::Text, 1.0),
                    InvalidSpec);
}

TEST_CASE("ablation, worked examples") {
    const auto out = ablate_row(kRow, k211, Modality::System);
    check_row(out, {0, 0, 0.3, 0.2});
    CHECK(testing::sum(out) == doctest::Approx(0.5));
    const std::vector<double> zero_source{0.0, 0.0, 0.3, 0.7};
    CHECK(bit_equal(ablate_row(zero_source, k211, Modality::System), zero_source));
    check_row(ablate_row(std::vector<double>{0.7, 0.3, 0.0, 0.0}, k211, Modality::System), {0, 0, 0, 0});
}

TEST_CASE("scale, worked examples") {
    check_row(scale_row(kRow, k211, Modality::Image, 2.0), {0.4, 0.1, 0.6, 0.2});
    CHECK(bit_equal(scale_row(kRow, k211, Modality::Image, 1.0), kRow));
    const std::vector<double> no_image{0.5, 0.3, 0.0, 0.2};
    CHECK(bit_equal(scale_row(no_image, k211, Modality::Image, 2.0), no_image));
}

TEST_CASE("AD-HH, worked examples") {
    check_row(adhh_row(std::vector<double>{0.2, 0.1, 0.2, 0.5}, k211, 0.4), {0.2, 0.1, 0.2, 0.0});
    CHECK(bit_equal(adhh_row(kRow, k211, 0.4), kRow));
    // Text mass exactly at the threshold stays (strict inequality).
    const std::vector<double> boundary{0.25, 0.25, 0.1, 0.4};
    CHECK(bit_equal(adhh_row(boundary, k211, 0.4), boundary));
}

TEST_CASE("PAI logit fusion") {
    const std::vector<double> a{2, 1};
    const std::vector<double> b{1, 1};
    check_row(pai_logit_fusion(a, b, 0.5), {2.5, 1.0});
    CHECK(bit_equal(pai_logit_fusion(a, b, 0.0), a));
    check_row(pai_logit_fusion(b, b, 0.5), {1, 1});
    CHECK_THROWS_AS(pai_logit_fusion(a, std::vector<double>{1}, 0.5), ShapeError);
}

TEST_CASE("resolve_scope") {
    auto layers_of = [](const ScopeSet& s) {
        std::vector<std::size_t> out;
        for (std::size_t l = 0; l < s.layer_count(); ++l) {
            if (s.layer_touched(l)) out.push_back(l);
        }
        return out;
    };
    std::vector<std::size_t> q4;
    for (std::size_t l = 24; l < 32; ++l) q4.push_back(l);
    CHECK(layers_of(resolve_scope(LayerScope::of_quarter(4), 32, 1)) == q4);
    CHECK(layers_of(resolve_scope(LayerScope::of_quarter(1), 8, 1)) == std::vector<std::size_t>{0, 1});
    CHECK_THROWS_AS(resolve_scope(LayerScope::of_quarter(2), 6, 1), InvalidScope);
    CHECK_THROWS_AS(resolve_scope(LayerScope::of_quarter(5), 8, 1), InvalidScope);
    CHECK_THROWS_AS(resolve_scope(LayerScope::of_layers(3, 3), 8, 1), InvalidScope);
    CHECK_THROWS_AS(resolve_scope(LayerScope::of_layers(2, 9), 8, 1), InvalidScope);
    CHECK_THROWS_AS(resolve_scope(LayerScope::global().with_heads({4}), 8, 4), InvalidScope);

    const ScopeSet s = resolve_scope(LayerScope::of_layers(2, 4).with_heads({1, 3}), 8, 4);
    using P = std::pair<std::size_t, std::size_t>;
    CHECK(s.pairs() == std::vector<P>{{2, 1}, {2, 3}, {3, 1}, {3, 3}});
    CHECK(resolve_scope(LayerScope::global(), 8, 4).pairs().size() == 32);
}

TEST_CASE("spec validation") {
    CHECK_NOTHROW(InterventionSpec::none().validate());
    CHECK_THROWS_AS(InterventionSpec::proportional(Modality::System, 1.5, {}).validate(), InvalidSpec);
    CHECK_THROWS_AS(InterventionSpec::proportional(Modality::System, -0.1, {}).validate(), InvalidSpec);
    CHECK_THROWS_AS(InterventionSpec::pairwise(Modality::Image, Modality::Image, 1.0, {}).validate(),
                    InvalidSpec);
    CHECK_THROWS_AS(InterventionSpec::scale(Modality::Image, 0.0, {}).validate(), InvalidSpec);
    CHECK_THROWS_AS(InterventionSpec::adhh(1.0, {}).validate(), InvalidSpec);
    CHECK_THROWS_AS(InterventionSpec::adhh(0.0, {}).validate(), InvalidSpec);
    CHECK_THROWS_AS(InterventionSpec::pai(-1.0, 1.5, {}).validate(), InvalidSpec);
    CHECK_THROWS_AS(InterventionSpec::pai(0.5, 0.0, {}).validate(), InvalidSpec);
    for (auto k : {InterventionKind::None, InterventionKind::ProportionalRedistribution,
                   InterventionKind::PairwiseTransfer, InterventionKind::Ablation,
                   InterventionKind::Scale, InterventionKind::AdHH, InterventionKind::PAI}) {
        CHECK(parse_intervention_kind(to_string(k)) == k);
    }
    CHECK_THROWS_AS(parse_intervention_kind("steer"), InvalidSpec);
}

TEST_CASE("property: stochasticity, source zeroing and proportionality") {
    Rng rng(11);
    for (int trial = 0; trial < 10000; ++trial) {
        const ModalityLayout l = testing::random_layout(rng);
        const auto row = testing::random_full_row(rng, l);
        const Modality src = all_modalities[rng.below(3)];
        const auto out = redistribute_row_proportional(row, l, src, 1.0);
        CHECK(testing::sum(out) == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(mass(out, l, src) == 0.0);
        for (std::size_t i = 0; i + 1 < row.size(); ++i) {
            const std::size_t j = i + 1;
            if (l.span(src).contains(i) || l.span(src).contains(j)) continue;
            CHECK(out[i] / out[j] == doctest::Approx(row[i] / row[j]).epsilon(1e-9));
        }
    }
}

TEST_CASE("property: aggregate identity at the mass level") {
    Rng rng(12);
    for (int trial = 0; trial < 2000; ++trial) {
        const ModalityLayout l = testing::random_layout(rng);
        const auto row = testing::random_full_row(rng, l);
        const Modality src = all_modalities[rng.below(3)];
        const auto out = redistribute_row_proportional(row, l, src, 1.0);
        const double a_s = mass(row, l, src);
        double a_rec = 0.0;
        for (Modality m : all_modalities) {
            if (m != src) a_rec += mass(row, l, m);
        }
        for (Modality m : all_modalities) {
            if (m == src) continue;
            const double a_r = mass(row, l, m);
            CHECK(std::abs(mass(out, l, m) - (a_r + a_s * a_r / a_rec)) < 1e-6);
        }
    }
}

TEST_CASE("property: pairwise purity and monotonicity") {
    Rng rng(13);
    for (int trial = 0; trial < 2000; ++trial) {
        const ModalityLayout l = testing::random_layout(rng);
        const auto row = testing::random_full_row(rng, l);
        const Modality src = all_modalities[rng.below(3)];
        const Modality rec = all_modalities[(static_cast<std::size_t>(src) + 1 + rng.below(2)) % 3];
        Modality third = Modality::System;
        for (Modality m : all_modalities) {
            if (m != src && m != rec) third = m;
        }
        const auto out = redistribute_row_pairwise(row, l, src, rec, 1.0);
        CHECK(testing::sum(out) == doctest::Approx(1.0).epsilon(1e-6));
        for (std::size_t i = l.span(third).begin; i < l.span(third).end; ++i) {
            CHECK(std::memcmp(&out[i], &row[i], sizeof(double)) == 0);
        }
        double prev = mass(row, l, rec);
        for (double p : {0.1, 0.2, 0.3, 0.6, 1.0}) {
            const double now = mass(redistribute_row_pairwise(row, l, src, rec, p), l, rec);
            CHECK(now > prev);
            prev = now;
        }
    }
}

TEST_CASE("property: oracle equivalence including degenerate rows") {
    Rng rng(14);
    for (int trial = 0; trial < 1000; ++trial) {
        const ModalityLayout l = testing::random_layout(rng);
        // Partial visibility produces zero-recipient rows.
        const std::size_t visible = 1 + rng.below(l.prompt_len());
        const auto row = testing::random_row(rng, l.prompt_len(), visible);
        const Modality src = all_modalities[rng.below(3)];
        const double p = trial % 3 == 0 ? 1.0 : rng.uniform(0.05, 1.0);

        std::vector<Modality> recips;
        for (Modality m : all_modalities) {
            if (m != src) recips.push_back(m);
        }
        CHECK(testing::max_abs_diff(redistribute_row_proportional(row, l, src, p),
                                    brute_force_redistribute(row, l, src, recips, p)) <= 1e-9);
        for (Modality rec : recips) {
            const std::array<Modality, 1> one{rec};
            CHECK(testing::max_abs_diff(redistribute_row_pairwise(row, l, src, rec, p),
                                        brute_force_redistribute(row, l, src, one, p)) <= 1e-9);
        }
    }
}

TEST_CASE("property: idempotence of full redistribution") {
    Rng rng(15);
    for (int trial = 0; trial < 1000; ++trial) {
        const ModalityLayout l = testing::random_layout(rng);
        const auto row = testing::random_full_row(rng, l);
        const auto once = redistribute_row_proportional(row, l, Modality::System, 1.0);
        const auto twice = redistribute_row_proportional(once, l, Modality::System, 1.0);
        CHECK(bit_equal(once, twice));
    }
}

TEST_CASE("property: ablation and redistribution differ in row sums") {
    Rng rng(16);
    for (int trial = 0; trial < 1000; ++trial) {
        const ModalityLayout l = testing::random_layout(rng);
        const auto row = testing::random_full_row(rng, l);
        const double a_s = mass(row, l, Modality::System);
        CHECK(testing::sum(ablate_row(row, l, Modality::System)) == doctest::Approx(1.0 - a_s).epsilon(1e-9));
        CHECK(testing::sum(redistribute_row_proportional(row, l, Modality::System, 1.0)) ==
              doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("apply_spec") {
    Rng rng(17);
    const ModalityLayout l = build_layout(2, 3, 2);
    const AttentionTensor t = testing::random_tensor(rng, 8, 2, l.prompt_len());

    SUBCASE("none is the identity") {
        const auto [out, stats] = apply_spec(t, l, InterventionSpec::none());
        CHECK(out == t);
        CHECK(stats == RowRewriteStats{});
    }
    SUBCASE("Q4 touches only layers 6 and 7") {
        const auto [out, stats] =
            apply_spec(t, l, InterventionSpec::proportional(Modality::System, 1.0, LayerScope::of_quarter(4)));
        for (std::size_t layer = 0; layer < 8; ++layer) {
            bool same = true;
            for (std::size_t h = 0; h < 2; ++h) {
                for (std::size_t q = 0; q < l.prompt_len(); ++q) {
                    const auto a = t.row(layer, h, q);
                    const auto b = out.row(layer, h, q);
                    same = same && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
                }
            }
            CHECK(same == (layer < 6));
        }
        // Queries 0 and 1 sit in the system span: skipped, zero recipient.
        CHECK(stats.rows_skipped_zero_recipient == 2 * 2 * 2);
        CHECK(stats.rows_modified == 2 * 2 * 5);
        CHECK(out.is_valid(1e-6));
    }
    SUBCASE("global ablation leaves each row summing to 1 - alpha_system") {
        const auto [out, stats] = apply_spec(t, l, InterventionSpec::ablation(Modality::System, {}));
        for (std::size_t layer = 0; layer < 8; ++layer) {
            for (std::size_t h = 0; h < 2; ++h) {
                for (std::size_t q = 0; q < l.prompt_len(); ++q) {
                    double before_sys = 0.0;
                    double after = 0.0;
                    for (std::size_t k = 0; k < l.prompt_len(); ++k) {
                        if (k < 2) before_sys += t.row(layer, h, q)[k];
                        after += out.row(layer, h, q)[k];
                    }
                    CHECK(after == doctest::Approx(1.0 - before_sys).epsilon(1e-5));
                }
            }
        }
        CHECK(stats.rows_modified == 8 * 2 * l.prompt_len());
    }
    SUBCASE("PAI is rejected") {
        CHECK_THROWS_AS(apply_spec(t, l, InterventionSpec::pai(0.5, 1.5, {})), InvalidSpec);
    }
    SUBCASE("stats never exceed the in-scope row count") {
        const auto [out, stats] = apply_spec(t, l, InterventionSpec::pairwise(Modality::Image, Modality::Text, 0.3, {}));
        CHECK(stats.rows_modified + stats.rows_skipped_zero_recipient + stats.rows_skipped_zero_source <=
              t.row_count());
    }
}
