#include "groundprobe/lens_analysis.hpp"
#include "groundprobe/synth.hpp"
#include "support.hpp"

using namespace gp_test;

namespace {

synth::SynthConfig small_config() {
    synth::SynthConfig cfg;
    cfg.per_class = 20;
    return cfg;
}

}  // namespace

TEST(Synth, OutputsAreValidTraces) {
    auto out = synth::generate(small_config());
    EXPECT_TRUE(trace::validate_trace(out.visual).empty());
    EXPECT_TRUE(trace::validate_trace(out.fullinfo).empty());
    EXPECT_EQ(out.visual.records.size(), 40u);
    EXPECT_EQ(out.plans.size(), 40u);
    EXPECT_EQ(out.visual.header.setting, trace::Setting::Visual);
    EXPECT_EQ(out.fullinfo.header.setting, trace::Setting::FullInfo);
    EXPECT_EQ(trace::pair_records(out.visual, out.fullinfo).size(), 40u);
    std::size_t successes = 0;
    for (std::size_t i = 0; i < out.plans.size(); ++i) {
        EXPECT_EQ(out.visual.records[i].correctness_label, out.plans[i].success);
        successes += out.plans[i].success;
    }
    EXPECT_EQ(successes, 20u);
}

TEST(Synth, NoiselessStatesFollowTheDesignedCurve) {
    auto cfg = small_config();
    cfg.noise = 0.0;
    auto out = synth::generate(cfg);
    for (std::size_t i = 0; i < out.plans.size(); ++i) {
        const auto& plan = out.plans[i];
        auto traj = lens::token_probability_trajectory(out.visual.records[i], out.unembedding, plan.target_token);
        ASSERT_EQ(traj.size(), plan.designed_curve.size());
        for (std::size_t l = 0; l < traj.size(); ++l)
            EXPECT_NEAR(traj[l], plan.designed_curve[l], 1e-5) << plan.datapoint_id << " layer " << l + 1;
        const auto range = plan.success ? cfg.success_rise : cfg.failure_rise;
        EXPECT_GE(plan.rise_layer, range.first);
        EXPECT_LE(plan.rise_layer, range.last);
    }
}

TEST(Synth, SameSeedIsByteIdentical) {
    auto a = synth::generate(small_config());
    auto b = synth::generate(small_config());
    EXPECT_EQ(trace::encode_trace(a.visual.header, a.visual.records),
              trace::encode_trace(b.visual.header, b.visual.records));
    EXPECT_EQ(trace::encode_trace(a.fullinfo.header, a.fullinfo.records),
              trace::encode_trace(b.fullinfo.header, b.fullinfo.records));
    EXPECT_EQ(trace::encode_unembedding(a.unembedding), trace::encode_unembedding(b.unembedding));
    auto cfg = small_config();
    cfg.seed += 1;
    auto c = synth::generate(cfg);
    EXPECT_NE(trace::encode_trace(a.visual.header, a.visual.records),
              trace::encode_trace(c.visual.header, c.visual.records));
    EXPECT_EQ(trace::encode_unembedding(a.unembedding), trace::encode_unembedding(c.unembedding));
}

TEST(Synth, InfeasibleConfigurationsAreRejected) {
    auto cfg = small_config();
    cfg.success_rise = {20, 10};
    EXPECT_THROW(synth::generate(cfg), PreconditionError);
    cfg = small_config();
    cfg.failure_rise = {30, 40};
    EXPECT_THROW(synth::generate(cfg), PreconditionError);
    cfg = small_config();
    cfg.noise = -1;
    EXPECT_THROW(synth::generate(cfg), PreconditionError);
    cfg = small_config();
    cfg.option_tokens = cfg.vocab_size + 1;
    EXPECT_THROW(synth::generate(cfg), PreconditionError);
}

TEST(Synth, SuccessCrossesBeforeFailure) {
    auto cfg = small_config();
    cfg.per_class = 50;
    auto out = synth::generate(cfg);
    auto bundles = lens::probability_bundles(out.visual, out.unembedding);
    auto agg = lens::aggregate_by_label(bundles);
    auto s = lens::first_crossing_layer(agg.success_mean);
    auto f = lens::first_crossing_layer(agg.failure_mean);
    ASSERT_TRUE(s);
    ASSERT_TRUE(f);
    EXPECT_LT(*s, *f);
}
