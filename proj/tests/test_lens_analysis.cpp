#include <cmath>
#include <numeric>
#include <random>

#include "groundprobe/lens_analysis.hpp"
#include "groundprobe/synth.hpp"
#include "support.hpp"

using namespace gp_test;
using lens::TrajectoryBundle;

namespace {

trace::Unembedding random_unembedding(std::uint32_t v, std::uint32_t d, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<float> normal(0.0f, static_cast<float>(scale));
    trace::Unembedding u{"m", v, d, std::vector<float>(static_cast<std::size_t>(v) * d), std::nullopt};
    for (auto& x : u.matrix) x = normal(rng);
    return u;
}

trace::TraceRecord record_with(std::vector<std::vector<float>> states, std::string id = "r") {
    trace::TraceRecord r;
    r.datapoint_id = std::move(id);
    r.hidden_states = std::move(states);
    return r;
}

}  // namespace

TEST(LogitLens, ZeroVectorGivesUniform) {
    std::mt19937_64 rng(1);
    auto u = random_unembedding(37, 8, rng);
    auto p = lens::logit_lens(std::vector<float>(8, 0.0f), u);
    for (double x : p) EXPECT_NEAR(x, 1.0 / 37.0, 1e-9);
}

TEST(LogitLens, IdentityWithDominantOneHot) {
    trace::Unembedding u{"m", 6, 6, std::vector<float>(36, 0.0f), std::nullopt};
    for (int i = 0; i < 6; ++i) u.matrix[i * 6 + i] = 1.0f;
    std::vector<float> h(6, 0.0f);
    h[4] = 100.0f;
    auto p = lens::logit_lens(h, u);
    EXPECT_EQ(std::max_element(p.begin(), p.end()) - p.begin(), 4);
    EXPECT_GT(p[4], 0.99);
}

TEST(LogitLens, MatchesDirectFormulaAndSumsToOne) {
    std::mt19937_64 rng(2);
    std::normal_distribution<float> normal;
    for (int draw = 0; draw < 200; ++draw) {
        const std::uint32_t v = 2 + rng() % 60, d = 1 + rng() % 16;
        auto u = random_unembedding(v, d, rng, 0.3);
        std::vector<float> h(d);
        for (auto& x : h) x = normal(rng);
        auto p = lens::logit_lens(h, u);
        // Direct exp/sum without max-subtraction; magnitudes are small here.
        std::vector<double> e(v);
        double z = 0.0;
        for (std::uint32_t t = 0; t < v; ++t) {
            double acc = 0.0;
            for (std::uint32_t i = 0; i < d; ++i) acc += double(u.matrix[t * d + i]) * h[i];
            e[t] = std::exp(acc);
            z += e[t];
        }
        double sum = 0.0;
        for (std::uint32_t t = 0; t < v; ++t) {
            EXPECT_NEAR(p[t], e[t] / z, 1e-6);
            EXPECT_GE(p[t], 0.0);
            EXPECT_LE(p[t], 1.0);
            sum += p[t];
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(LogitLens, StableForHugeLogits) {
    std::mt19937_64 rng(3);
    auto u = random_unembedding(50, 4, rng, 1e3);
    auto p = lens::logit_lens(std::vector<float>{1e3f, -2e3f, 5e2f, 7e2f}, u);
    double sum = 0.0;
    for (double x : p) {
        EXPECT_TRUE(std::isfinite(x));
        sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
}

TEST(LogitLens, ShiftInvariantSoftmax) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> normal;
    for (int c = 0; c < 50; ++c) {
        std::vector<double> logits(1 + rng() % 30);
        for (auto& x : logits) x = normal(rng);
        auto shifted = logits;
        const double k = normal(rng) * 50.0;
        for (auto& x : shifted) x += k;
        auto a = lens::softmax(logits), b = lens::softmax(shifted);
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    }
}

TEST(LogitLens, DimensionMismatchAndMissingNorm) {
    std::mt19937_64 rng(5);
    auto u = random_unembedding(5, 3, rng);
    EXPECT_THROW(lens::logit_lens(std::vector<float>(4, 0.0f), u), DimensionError);
    EXPECT_THROW(lens::logit_lens(std::vector<float>(3, 0.0f), u, {true}), PreconditionError);
}

TEST(LogitLens, FinalNormIsApplied) {
    trace::Unembedding u{"m", 2, 2, {1, 0, 0, 1}, std::nullopt};
    u.final_norm = trace::FinalNorm{trace::FinalNorm::Kind::RmsNorm, 0.0, {2.0f, 2.0f}, {}};
    auto logits = lens::lens_logits(std::vector<float>{3.0f, 4.0f}, u, {true});
    const double rms = std::sqrt((9.0 + 16.0) / 2.0);
    EXPECT_NEAR(logits[0], 2.0 * 3.0 / rms, 1e-12);
    EXPECT_NEAR(logits[1], 2.0 * 4.0 / rms, 1e-12);
    u.final_norm = trace::FinalNorm{trace::FinalNorm::Kind::LayerNorm, 0.0, {1.0f, 1.0f}, {0.5f, 0.0f}};
    logits = lens::lens_logits(std::vector<float>{3.0f, 5.0f}, u, {true});
    EXPECT_NEAR(logits[0], -1.0 + 0.5, 1e-12);
    EXPECT_NEAR(logits[1], 1.0, 1e-12);
}

TEST(TokenTrajectory, ZeroStatesGiveConstantUniform) {
    std::mt19937_64 rng(6);
    auto u = random_unembedding(11, 4, rng);
    auto r = record_with(std::vector<std::vector<float>>(5, std::vector<float>(4, 0.0f)));
    for (double x : lens::token_probability_trajectory(r, u, 3)) EXPECT_NEAR(x, 1.0 / 11.0, 1e-12);
    EXPECT_THROW(lens::token_probability_trajectory(r, u, 11), PreconditionError);
}

TEST(TokenTrajectory, DominantFinalStateSelectsTarget) {
    trace::Unembedding u{"m", 4, 4, std::vector<float>(16, 0.0f), std::nullopt};
    for (int i = 0; i < 4; ++i) u.matrix[i * 4 + i] = 1.0f;
    std::vector<std::vector<float>> states(3, std::vector<float>(4, 0.0f));
    states[2][1] = 30.0f;
    auto traj = lens::token_probability_trajectory(record_with(states), u, 1);
    EXPECT_GT(traj.back(), 0.99);
    EXPECT_NEAR(traj.front(), 0.25, 1e-12);
}

TEST(TokenTrajectory, SyntheticLateRiserCrossesAfterLayer25) {
    synth::SynthConfig cfg;
    cfg.per_class = 6;
    cfg.noise = 0.0;
    auto out = synth::generate(cfg);
    int checked = 0;
    for (std::size_t i = 0; i < out.plans.size(); ++i) {
        const auto& plan = out.plans[i];
        if (plan.success) continue;
        auto traj = lens::token_probability_trajectory(out.visual.records[i], out.unembedding, plan.target_token);
        auto cross = lens::first_crossing_layer(traj);
        ASSERT_TRUE(cross.has_value());
        EXPECT_GT(*cross, 25u);
        ++checked;
    }
    EXPECT_EQ(checked, 6);
}

TEST(Cosine, IdenticalAntipodalOrthogonal) {
    std::mt19937_64 rng(7);
    std::normal_distribution<float> normal;
    std::vector<std::vector<float>> a(6, std::vector<float>(5));
    for (auto& h : a)
        for (auto& x : h) x = normal(rng);
    auto neg = a;
    for (auto& h : neg)
        for (auto& x : h) x = -x;
    for (double c : lens::cosine_trajectory(record_with(a), record_with(a))) EXPECT_NEAR(c, 1.0, 1e-12);
    for (double c : lens::cosine_trajectory(record_with(a), record_with(neg))) EXPECT_NEAR(c, -1.0, 1e-12);

    std::vector<std::vector<float>> e1(4, {1, 0, 0}), e2(4, {0, 0, 3});
    for (double c : lens::cosine_trajectory(record_with(e1), record_with(e2))) EXPECT_NEAR(c, 0.0, 1e-6);
}

TEST(Cosine, ScaleInvariantPerLayer) {
    std::mt19937_64 rng(8);
    std::normal_distribution<float> normal;
    std::uniform_real_distribution<float> scale(0.01f, 100.0f);
    for (int c = 0; c < 30; ++c) {
        std::vector<std::vector<float>> a(4, std::vector<float>(6)), b = a;
        for (auto* s : {&a, &b})
            for (auto& h : *s)
                for (auto& x : h) x = normal(rng);
        auto scaled = a;
        for (auto& h : scaled) {
            const float k = scale(rng);
            for (auto& x : h) x *= k;
        }
        auto base = lens::cosine_trajectory(record_with(a), record_with(b));
        auto other = lens::cosine_trajectory(record_with(scaled), record_with(b));
        for (std::size_t l = 0; l < base.size(); ++l) EXPECT_NEAR(base[l], other[l], 1e-6);
    }
}

TEST(Cosine, ZeroNormNamesLayerAndIdMismatchFails) {
    std::vector<std::vector<float>> a(3, {1, 2}), b = a;
    b[1] = {0, 0};
    try {
        lens::cosine_trajectory(record_with(a), record_with(b));
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 2"), std::string::npos);
    }
    EXPECT_THROW(lens::cosine_trajectory(record_with(a, "x"), record_with(a, "y")), PairingError);
}

TEST(CosineBundles, PairsByIdAndRejectsMismatchedSets) {
    auto v = random_trace(3, 4, 5, 6, 1);
    auto f = random_trace(3, 4, 5, 6, 2, trace::Setting::FullInfo);
    std::reverse(f.records.begin(), f.records.end());
    auto bundles = lens::cosine_bundles(v, f, 3);
    ASSERT_EQ(bundles.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
        auto direct = lens::cosine_trajectory(v.records[i], f.records[5 - i]);
        EXPECT_EQ(bundles[i].values, direct);
        EXPECT_EQ(bundles[i].success, v.records[i].correctness_label);
    }
    f.records.pop_back();
    f.header.num_records = 5;
    EXPECT_THROW(lens::cosine_bundles(v, f), PairingError);
}

TEST(Aggregate, Examples) {
    std::vector<TrajectoryBundle> same{{"a", {0.2, 0.4}, true}, {"b", {0.2, 0.4}, true}, {"c", {1, 0}, false}};
    auto agg = lens::aggregate_by_label(same);
    EXPECT_EQ(agg.success_mean, (std::vector<double>{0.2, 0.4}));
    EXPECT_EQ(agg.success_se, (std::vector<double>{0.0, 0.0}));

    std::vector<TrajectoryBundle> two{{"s", {0, 1}, true}, {"f", {1, 0}, false}};
    agg = lens::aggregate_by_label(two);
    EXPECT_EQ(agg.success_mean, (std::vector<double>{0, 1}));
    EXPECT_EQ(agg.failure_mean, (std::vector<double>{1, 0}));
    EXPECT_EQ(agg.success_count, 1u);
}

TEST(Aggregate, MatchesBruteForceAndIsPermutationInvariant) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> normal;
    for (int c = 0; c < 20; ++c) {
        const std::size_t layers = 1 + rng() % 8, n = 2 + rng() % 40;
        std::vector<TrajectoryBundle> bundles;
        for (std::size_t i = 0; i < n; ++i) {
            TrajectoryBundle b{"b" + std::to_string(i), std::vector<double>(layers), i < 2 ? i == 0 : rng() % 2 == 0};
            for (auto& x : b.values) x = normal(rng) * 1e3;
            bundles.push_back(b);
        }
        auto agg = lens::aggregate_by_label(bundles);
        for (bool cls : {true, false}) {
            const auto& mean = cls ? agg.success_mean : agg.failure_mean;
            const auto& se = cls ? agg.success_se : agg.failure_se;
            for (std::size_t l = 0; l < layers; ++l) {
                long double s = 0, ss = 0;
                std::size_t k = 0;
                for (const auto& b : bundles)
                    if (*b.success == cls) {
                        s += b.values[l];
                        ++k;
                    }
                const long double mu = s / k;
                for (const auto& b : bundles)
                    if (*b.success == cls) ss += (b.values[l] - mu) * (b.values[l] - mu);
                const double expected_se = k > 1 ? double(std::sqrt(ss / (k - 1)) / std::sqrt((long double)k)) : 0.0;
                EXPECT_NEAR(mean[l], double(mu), 1e-9 * (1 + std::abs(double(mu))));
                EXPECT_NEAR(se[l], expected_se, 1e-9 * (1 + expected_se));
            }
        }
        auto shuffled = bundles;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        auto again = lens::aggregate_by_label(shuffled);
        EXPECT_EQ(agg.success_mean, again.success_mean);
        EXPECT_EQ(agg.failure_mean, again.failure_mean);
        EXPECT_EQ(agg.success_se, again.success_se);
        EXPECT_EQ(agg.failure_se, again.failure_se);
    }
}

TEST(Aggregate, Errors) {
    std::vector<TrajectoryBundle> only_success{{"a", {1}, true}};
    EXPECT_THROW(lens::aggregate_by_label(only_success), DataError);
    std::vector<TrajectoryBundle> unlabeled{{"a", {1}, true}, {"b", {1}, std::nullopt}};
    EXPECT_THROW(lens::aggregate_by_label(unlabeled), DataError);
    EXPECT_THROW(lens::aggregate_by_label({}), PreconditionError);
}

TEST(ProbabilityBundles, ParallelEqualsSerialAndGoldMode) {
    auto set = random_trace(4, 6, 9, 25, 10);
    std::mt19937_64 rng(11);
    auto u = random_unembedding(9, 6, rng);
    auto serial = lens::probability_bundles(set, u, lens::TargetMode::FirstGenerated, {}, {}, 1);
    auto parallel = lens::probability_bundles(set, u, lens::TargetMode::FirstGenerated, {}, {}, 4);
    ASSERT_EQ(serial.size(), parallel.size());
    for (std::size_t i = 0; i < serial.size(); ++i) EXPECT_EQ(serial[i].values, parallel[i].values);

    std::map<std::string, std::uint32_t> gold;
    for (const auto& r : set.records) gold[r.datapoint_id] = 2;
    auto g = lens::probability_bundles(set, u, lens::TargetMode::Gold, gold);
    EXPECT_EQ(g[0].values, lens::token_probability_trajectory(set.records[0], u, 2));
    gold.erase(set.records[3].datapoint_id);
    EXPECT_THROW(lens::probability_bundles(set, u, lens::TargetMode::Gold, gold), DataError);
}

TEST(FirstCrossing, StrictThreshold) {
    std::vector<double> c{0.1, 0.5, 0.51, 0.9};
    EXPECT_EQ(lens::first_crossing_layer(c), 3u);
    EXPECT_FALSE(lens::first_crossing_layer(std::vector<double>{0.1, 0.5}).has_value());
}

TEST(Reports, CsvAndSvgShapes) {
    std::vector<TrajectoryBundle> b{{"s", {0.1, 0.9}, true}, {"f", {0.2, 0.3}, false}};
    auto rows = csv::parse(lens::trajectories_to_csv(b));
    ASSERT_EQ(rows.size(), 5u);
    EXPECT_EQ(rows[0], (csv::Row{"datapoint_id", "label", "layer", "value"}));
    EXPECT_EQ(rows[2], (csv::Row{"s", "success", "2", "0.9"}));
    auto agg = lens::aggregate_by_label(b);
    EXPECT_EQ(csv::parse(lens::aggregate_to_csv(agg)).size(), 3u);
    auto svg = lens::aggregate_to_svg(agg, "t", "p", 0, 1);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
}
