#pragma once

// Synthetic Visual/FullInfo traces whose logit-lens trajectories rise toward a
// designated option token at a chosen layer: early (mid layers) for linking
// success, late for linking failure.
//
// For record i with target token t, layer l:
//   h(l) = a(l) * v_t + background(l) + noise
// where v_t is the unit direction of U's row t, background(l) mixes a
// per-record random offset with a "grounding" direction scaled by how well the
// record is linked, and a(l) is solved by bisection so that the noiseless
// logit-lens probability of t follows a logistic curve crossing 0.5 exactly at
// the record's rise layer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "groundprobe/error.hpp"
#include "groundprobe/lens_analysis.hpp"
#include "groundprobe/trace_store.hpp"

namespace groundprobe::synth {

struct LayerRange {
    std::uint32_t first = 1;
    std::uint32_t last = 1;
};

struct SynthConfig {
    std::uint32_t per_class = 200;
    std::uint32_t layers = 32;
    std::uint32_t hidden_dim = 64;
    std::uint32_t vocab_size = 128;
    std::uint32_t option_tokens = 4;  // targets are drawn from token ids [0, option_tokens)
    std::uint32_t answer_steps = 3;
    std::uint64_t seed = 20240917;
    std::uint64_t model_seed = 7;  // unembedding; share it across datasets of one "model"
    double noise = 0.1;            // std-dev of additive Gaussian noise per hidden coordinate
    LayerRange success_rise{15, 25};
    LayerRange failure_rise{26, 32};
    std::string model_id = "synthetic-vlm";
    std::string id_prefix = "syn";
};

struct RecordPlan {
    std::string datapoint_id;
    bool success = false;
    std::uint32_t target_token = 0;
    std::uint32_t rise_layer = 0;
    std::vector<double> designed_curve;  // noiseless probability of the target, layers 1..L
};

struct SynthOutput {
    trace::Unembedding unembedding;
    trace::TraceSet visual;
    trace::TraceSet fullinfo;
    std::vector<RecordPlan> plans;  // parallel to visual.records
};

namespace detail {

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Logistic curve from lo to hi that passes 0.5 halfway between rise-1 and rise.
inline std::vector<double> designed_curve(std::uint32_t layers, std::uint32_t rise, double lo, double hi, double slope) {
    const double q = (0.5 - lo) / (hi - lo);
    const double centre = static_cast<double>(rise) - 0.5 - std::log(q / (1.0 - q)) / slope;
    std::vector<double> curve(layers);
    for (std::uint32_t l = 1; l <= layers; ++l)
        curve[l - 1] = lo + (hi - lo) * logistic(slope * (static_cast<double>(l) - centre));
    return curve;
}

inline std::vector<double> project(const trace::Unembedding& u, const std::vector<double>& h) {
    std::vector<double> logits(u.vocab_size);
    for (std::uint32_t k = 0; k < u.vocab_size; ++k) {
        auto row = u.row(k);
        double acc = 0.0;
        for (std::size_t j = 0; j < h.size(); ++j) acc += row[j] * h[j];
        logits[k] = acc;
    }
    return logits;
}

/// Scale a so that softmax(base_logits + a * dir_logits)[target] == p. Monotone
/// in a because dir gives the target the strictly largest logit increment.
inline double solve_scale(const std::vector<double>& base_logits, const std::vector<double>& dir_logits,
                          std::uint32_t target, double p) {
    std::vector<double> z(base_logits.size());
    auto eval = [&](double a) {
        for (std::size_t k = 0; k < z.size(); ++k) z[k] = base_logits[k] + a * dir_logits[k];
        return lens::softmax(z)[target];
    };
    double lo = -1.0, hi = 1.0;
    while (eval(lo) > p) lo *= 2.0;
    while (eval(hi) < p) hi *= 2.0;
    for (int it = 0; it < 200 && hi - lo > 1e-12 * std::max(1.0, std::abs(hi)); ++it) {
        const double mid = 0.5 * (lo + hi);
        (eval(mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

inline void check_range(const LayerRange& r, std::uint32_t layers, const char* what) {
    if (r.first < 1 || r.first > r.last || r.last > layers)
        throw PreconditionError(std::string("infeasible ") + what + " rise-layer range [" + std::to_string(r.first) +
                                ", " + std::to_string(r.last) + "] for " + std::to_string(layers) + " layers");
}

}  // namespace detail

/// Random Gaussian unembedding whose option-token rows dominate their own direction.
inline trace::Unembedding make_unembedding(const SynthConfig& cfg) {
    std::mt19937_64 rng(cfg.model_seed);
    std::normal_distribution<double> normal;
    trace::Unembedding u;
    u.model_id = cfg.model_id;
    u.vocab_size = cfg.vocab_size;
    u.hidden_dim = cfg.hidden_dim;
    u.matrix.resize(static_cast<std::size_t>(cfg.vocab_size) * cfg.hidden_dim);
    for (auto& v : u.matrix) v = static_cast<float>(normal(rng));
    return u;
}

inline std::vector<double> option_direction(const trace::Unembedding& u, std::uint32_t token) {
    auto row = u.row(token);
    std::vector<double> dir(row.begin(), row.end());
    double norm = 0.0;
    for (double v : dir) norm += v * v;
    norm = std::sqrt(norm);
    for (auto& v : dir) v /= norm;
    double own = 0.0, best_other = -1e300;
    for (std::uint32_t k = 0; k < u.vocab_size; ++k) {
        auto r = u.row(k);
        double acc = 0.0;
        for (std::size_t j = 0; j < dir.size(); ++j) acc += r[j] * dir[j];
        if (k == token) own = acc;
        else best_other = std::max(best_other, acc);
    }
    if (own <= best_other)
        throw PreconditionError("unembedding row " + std::to_string(token) +
                                " does not dominate its own direction; choose another model seed");
    return dir;
}

inline SynthOutput generate(const SynthConfig& cfg) {
    if (cfg.layers < 2 || cfg.hidden_dim < 2) throw PreconditionError("synthetic traces need L >= 2 and d >= 2");
    if (cfg.option_tokens < 1 || cfg.option_tokens > cfg.vocab_size)
        throw PreconditionError("option token count must lie in [1, |V|]");
    if (cfg.answer_steps < 1) throw PreconditionError("answers need at least one generated token");
    if (cfg.noise < 0.0) throw PreconditionError("noise must be non-negative");
    detail::check_range(cfg.success_rise, cfg.layers, "success");
    detail::check_range(cfg.failure_rise, cfg.layers, "failure");

    SynthOutput out;
    out.unembedding = make_unembedding(cfg);
    const auto& u = out.unembedding;
    const std::size_t d = cfg.hidden_dim;
    const double lo = 1.0 / cfg.vocab_size;

    std::vector<std::vector<double>> directions, direction_logits;
    for (std::uint32_t t = 0; t < cfg.option_tokens; ++t) {
        directions.push_back(option_direction(u, t));
        direction_logits.push_back(detail::project(u, directions.back()));
    }

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unit;
    auto uniform = [&](double a, double b) { return a + (b - a) * unit(rng); };
    auto uniform_layer = [&](const LayerRange& r) {
        return std::uniform_int_distribution<std::uint32_t>(r.first, r.last)(rng);
    };

    // Fixed "grounding" direction shared by all records of the model.
    std::vector<double> grounding(d);
    {
        std::mt19937_64 grng(cfg.model_seed ^ 0x9E3779B97F4A7C15ull);
        std::normal_distribution<double> gnormal;
        double norm = 0.0;
        for (auto& g : grounding) {
            g = gnormal(grng);
            norm += g * g;
        }
        for (auto& g : grounding) g /= std::sqrt(norm);
    }

    auto make_header = [&](trace::Setting s) {
        trace::TraceHeader h;
        h.model_id = cfg.model_id;
        h.setting = s;
        h.num_layers = cfg.layers;
        h.hidden_dim = cfg.hidden_dim;
        h.vocab_size = cfg.vocab_size;
        h.num_records = 2ull * cfg.per_class;
        return h;
    };
    out.visual.header = make_header(trace::Setting::Visual);
    out.fullinfo.header = make_header(trace::Setting::FullInfo);

    // Hidden states along a designed curve, plus greedy answer logits.
    auto build = [&](const std::vector<double>& curve, std::uint32_t target, const std::vector<double>& offset,
                     double grounding_level, bool confident, trace::TraceRecord& rec) {
        rec.hidden_states.assign(cfg.layers, std::vector<float>(d));
        for (std::uint32_t l = 1; l <= cfg.layers; ++l) {
            std::vector<double> base(offset);
            const double g = grounding_level * detail::logistic((static_cast<double>(l) - 12.0) / 2.0);
            for (std::size_t j = 0; j < d; ++j) base[j] += 1.5 * g * grounding[j];
            const double a =
                detail::solve_scale(detail::project(u, base), direction_logits[target], target, curve[l - 1]);
            for (std::size_t j = 0; j < d; ++j) {
                const double v = a * directions[target][j] + base[j] + cfg.noise * normal(rng);
                rec.hidden_states[l - 1][j] = static_cast<float>(v);
            }
        }
        // First answer step: the final layer's own projection, decoded greedily.
        const auto& last = rec.hidden_states.back();
        auto first = lens::lens_logits(last, u);
        std::vector<float> step(first.begin(), first.end());
        rec.generated_token_ids.push_back(
            static_cast<std::uint32_t>(std::max_element(step.begin(), step.end()) - step.begin()));
        rec.step_logits.push_back(std::move(step));
        for (std::uint32_t s = 1; s < cfg.answer_steps; ++s) {
            std::vector<float> logits(cfg.vocab_size);
            for (auto& v : logits) v = static_cast<float>(normal(rng));
            const auto chosen = std::uniform_int_distribution<std::uint32_t>(0, cfg.vocab_size - 1)(rng);
            const double gap = (confident ? 7.0 : 6.0) + 1.5 * normal(rng);
            logits[chosen] += static_cast<float>(gap);
            rec.generated_token_ids.push_back(
                static_cast<std::uint32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin()));
            rec.step_logits.push_back(std::move(logits));
        }
    };

    const std::uint32_t total = 2 * cfg.per_class;
    for (std::uint32_t i = 0; i < total; ++i) {
        // Alternate classes so any prefix is balanced.
        const bool success = (i % 2) == 0;
        RecordPlan plan;
        plan.datapoint_id = cfg.id_prefix + "-" + std::to_string(i);
        plan.success = success;
        plan.target_token = std::uniform_int_distribution<std::uint32_t>(0, cfg.option_tokens - 1)(rng);
        plan.rise_layer = uniform_layer(success ? cfg.success_rise : cfg.failure_rise);
        const double hi = success ? uniform(0.85, 0.98) : uniform(0.6, 0.9);
        const double slope = uniform(0.8, 1.5);
        plan.designed_curve = detail::designed_curve(cfg.layers, plan.rise_layer, lo, hi, slope);

        std::vector<double> offset(d);
        for (auto& v : offset) v = 0.25 * normal(rng);
        const double link = success ? uniform(0.8, 1.2) : uniform(0.0, 0.4);

        trace::TraceRecord vis;
        vis.datapoint_id = plan.datapoint_id;
        vis.correctness_label = success;
        build(plan.designed_curve, plan.target_token, offset, link, success, vis);

        // Full-info run: entity named in text, so the record behaves like a success.
        const auto full_rise = uniform_layer(cfg.success_rise);
        const auto full_curve =
            detail::designed_curve(cfg.layers, full_rise, lo, uniform(0.85, 0.98), uniform(0.8, 1.5));
        trace::TraceRecord full;
        full.datapoint_id = plan.datapoint_id;
        full.correctness_label = true;
        build(full_curve, plan.target_token, offset, uniform(0.8, 1.2), true, full);

        out.visual.records.push_back(std::move(vis));
        out.fullinfo.records.push_back(std::move(full));
        out.plans.push_back(std::move(plan));
    }
    return out;
}

}  // namespace groundprobe::synth
