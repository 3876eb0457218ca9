#pragma once

// Logit-lens trajectories, Visual vs FullInfo cosine trajectories, and
// per-class aggregation of layerwise curves.
//
// Layers are numbered 1..L; index 0 (embedding output) is never stored.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "groundprobe/csv.hpp"
#include "groundprobe/error.hpp"
#include "groundprobe/parallel.hpp"
#include "groundprobe/trace_store.hpp"

namespace groundprobe::lens {

using trace::TraceRecord;
using trace::TraceSet;
using trace::Unembedding;

struct LensOptions {
    /// Apply the unembedding file's final normalization before projecting.
    bool apply_final_norm = false;
};

/// Which token a probability trajectory follows.
enum class TargetMode { FirstGenerated, Gold };

struct TrajectoryBundle {
    std::string datapoint_id;
    std::vector<double> values;
    std::optional<bool> success;
};

struct LabelAggregate {
    std::vector<double> success_mean, success_se;
    std::vector<double> failure_mean, failure_se;
    std::size_t success_count = 0, failure_count = 0;
};

namespace detail {

inline std::vector<double> apply_norm(std::span<const float> h, const trace::FinalNorm& norm) {
    const auto d = h.size();
    std::vector<double> x(h.begin(), h.end());
    if (norm.kind == trace::FinalNorm::Kind::LayerNorm) {
        double mean = 0.0;
        for (double v : x) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : x) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + norm.eps);
        for (std::size_t i = 0; i < d; ++i) x[i] = (x[i] - mean) * inv * norm.gain[i] + norm.bias[i];
    } else {
        double ms = 0.0;
        for (double v : x) ms += v * v;
        ms /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(ms + norm.eps);
        for (std::size_t i = 0; i < d; ++i) x[i] = x[i] * inv * norm.gain[i];
    }
    return x;
}

}  // namespace detail

/// Raw logits U·h (optionally normalized first), in double precision.
inline std::vector<double> lens_logits(std::span<const float> h, const Unembedding& u, const LensOptions& opts = {}) {
    if (h.size() != u.hidden_dim)
        throw DimensionError("logit lens: hidden state has " + std::to_string(h.size()) +
                             " values, unembedding expects " + std::to_string(u.hidden_dim));
    std::vector<double> x;
    if (opts.apply_final_norm) {
        if (!u.final_norm) throw PreconditionError("logit lens: final norm requested but unembedding carries none");
        x = detail::apply_norm(h, *u.final_norm);
    } else {
        x.assign(h.begin(), h.end());
    }
    for (double v : x)
        if (!std::isfinite(v)) throw DataError("logit lens: non-finite hidden value");

    std::vector<double> logits(u.vocab_size);
    for (std::size_t t = 0; t < u.vocab_size; ++t) {
        auto row = u.row(t);
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(row[i]) * x[i];
        logits[t] = acc;
    }
    return logits;
}

/// Max-subtracted softmax.
inline std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.begin(), logits.end());
    if (p.empty()) return p;
    const double m = *std::max_element(p.begin(), p.end());
    double sum = 0.0;
    for (auto& v : p) {
        v = std::exp(v - m);
        sum += v;
    }
    for (auto& v : p) v /= sum;
    return p;
}

/// softmax(U·h): the layer's approximate next-token distribution.
inline std::vector<double> logit_lens(std::span<const float> h, const Unembedding& u, const LensOptions& opts = {}) {
    auto logits = lens_logits(h, u, opts);
    return softmax(logits);
}

inline std::uint32_t first_generated_token(const TraceRecord& r) {
    if (r.generated_token_ids.empty())
        throw DataError("record '" + r.datapoint_id + "' has no generated tokens to follow");
    return r.generated_token_ids.front();
}

/// Probability of target_token under the logit lens at each layer 1..L.
inline std::vector<double> token_probability_trajectory(const TraceRecord& r, const Unembedding& u,
                                                        std::uint32_t target_token, const LensOptions& opts = {}) {
    if (target_token >= u.vocab_size)
        throw PreconditionError("target token " + std::to_string(target_token) + " outside vocabulary");
    std::vector<double> out;
    out.reserve(r.hidden_states.size());
    for (const auto& h : r.hidden_states) out.push_back(logit_lens(h, u, opts)[target_token]);
    return out;
}

/// Layerwise cosine similarity between a Visual record and its FullInfo counterpart.
inline std::vector<double> cosine_trajectory(const TraceRecord& visual, const TraceRecord& fullinfo) {
    if (visual.datapoint_id != fullinfo.datapoint_id)
        throw PairingError("cosine trajectory: datapoint ids differ ('" + visual.datapoint_id + "' vs '" +
                           fullinfo.datapoint_id + "')");
    if (visual.hidden_states.size() != fullinfo.hidden_states.size())
        throw DimensionError("cosine trajectory: layer counts differ for '" + visual.datapoint_id + "'");
    std::vector<double> out;
    out.reserve(visual.hidden_states.size());
    for (std::size_t l = 0; l < visual.hidden_states.size(); ++l) {
        const auto& a = visual.hidden_states[l];
        const auto& b = fullinfo.hidden_states[l];
        if (a.size() != b.size())
            throw DimensionError("cosine trajectory: hidden sizes differ at layer " + std::to_string(l + 1));
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            dot += static_cast<double>(a[i]) * b[i];
            na += static_cast<double>(a[i]) * a[i];
            nb += static_cast<double>(b[i]) * b[i];
        }
        if (na == 0.0 || nb == 0.0)
            throw DataError("cosine similarity undefined for '" + visual.datapoint_id + "': zero-norm state at layer " +
                            std::to_string(l + 1));
        out.push_back(std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0));
    }
    return out;
}

/// Per-record probability trajectories. With TargetMode::Gold, gold_tokens maps
/// datapoint id to the gold option's token id.
inline std::vector<TrajectoryBundle> probability_bundles(const TraceSet& set, const Unembedding& u,
                                                         TargetMode mode = TargetMode::FirstGenerated,
                                                         const std::map<std::string, std::uint32_t>& gold_tokens = {},
                                                         const LensOptions& opts = {},
                                                         unsigned threads = 1) {
    if (set.header.hidden_dim != u.hidden_dim || set.header.vocab_size != u.vocab_size)
        throw DimensionError("unembedding shape does not match trace header");
    std::vector<TrajectoryBundle> out(set.records.size());
    parallel_for(set.records.size(), threads, [&](std::size_t i) {
        const auto& r = set.records[i];
        std::uint32_t target;
        if (mode == TargetMode::FirstGenerated) {
            target = first_generated_token(r);
        } else {
            auto it = gold_tokens.find(r.datapoint_id);
            if (it == gold_tokens.end()) throw DataError("no gold token for '" + r.datapoint_id + "'");
            target = it->second;
        }
        out[i] = {r.datapoint_id, token_probability_trajectory(r, u, target, opts), r.correctness_label};
    });
    return out;
}

inline std::vector<TrajectoryBundle> cosine_bundles(const TraceSet& visual, const TraceSet& fullinfo,
                                                    unsigned threads = 1) {
    auto match = trace::pair_records(visual, fullinfo);
    std::vector<TrajectoryBundle> out(visual.records.size());
    parallel_for(visual.records.size(), threads, [&](std::size_t i) {
        const auto& r = visual.records[i];
        out[i] = {r.datapoint_id, cosine_trajectory(r, fullinfo.records[match[i]]), r.correctness_label};
    });
    return out;
}

/// Mean and standard error per layer for each class. Values are summed in sorted
/// order, so the result does not depend on bundle order.
inline LabelAggregate aggregate_by_label(std::span<const TrajectoryBundle> bundles) {
    if (bundles.empty()) throw PreconditionError("aggregate_by_label: no bundles");
    const auto layers = bundles.front().values.size();
    std::vector<std::vector<double>> success(layers), failure(layers);
    LabelAggregate agg;
    for (const auto& b : bundles) {
        if (!b.success) throw DataError("aggregate_by_label: '" + b.datapoint_id + "' has no label");
        if (b.values.size() != layers) throw DimensionError("aggregate_by_label: trajectories differ in length");
        auto& dst = *b.success ? success : failure;
        (*b.success ? agg.success_count : agg.failure_count)++;
        for (std::size_t l = 0; l < layers; ++l) {
            if (!std::isfinite(b.values[l]))
                throw DataError("aggregate_by_label: non-finite value in '" + b.datapoint_id + "'");
            dst[l].push_back(b.values[l]);
        }
    }
    if (agg.success_count == 0) throw DataError("aggregate_by_label: no linking-success bundles");
    if (agg.failure_count == 0) throw DataError("aggregate_by_label: no linking-failure bundles");

    auto reduce = [layers](std::vector<std::vector<double>>& cols, std::vector<double>& mean, std::vector<double>& se) {
        mean.assign(layers, 0.0);
        se.assign(layers, 0.0);
        for (std::size_t l = 0; l < layers; ++l) {
            auto& v = cols[l];
            std::sort(v.begin(), v.end());
            const double n = static_cast<double>(v.size());
            double sum = 0.0;
            for (double x : v) sum += x;
            const double m = sum / n;
            mean[l] = m;
            if (v.size() > 1) {
                std::vector<double> sq;
                sq.reserve(v.size());
                for (double x : v) sq.push_back((x - m) * (x - m));
                std::sort(sq.begin(), sq.end());
                double ss = 0.0;
                for (double x : sq) ss += x;
                se[l] = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
            }
        }
    };
    reduce(success, agg.success_mean, agg.success_se);
    reduce(failure, agg.failure_mean, agg.failure_se);
    return agg;
}

/// First layer (1-based) whose value strictly exceeds threshold.
inline std::optional<std::uint32_t> first_crossing_layer(std::span<const double> curve, double threshold = 0.5) {
    for (std::size_t l = 0; l < curve.size(); ++l)
        if (curve[l] > threshold) return static_cast<std::uint32_t>(l + 1);
    return std::nullopt;
}

inline std::string label_name(std::optional<bool> success) {
    if (!success) return "";
    return *success ? "success" : "failure";
}

inline std::string trajectories_to_csv(std::span<const TrajectoryBundle> bundles) {
    std::ostringstream out;
    csv::write_row(out, {"datapoint_id", "label", "layer", "value"});
    for (const auto& b : bundles)
        for (std::size_t l = 0; l < b.values.size(); ++l)
            csv::write_row(out, {b.datapoint_id, label_name(b.success), std::to_string(l + 1),
                                 csv::format_double(b.values[l])});
    return out.str();
}

inline std::string aggregate_to_csv(const LabelAggregate& agg) {
    std::ostringstream out;
    csv::write_row(out, {"layer", "success_mean", "success_se", "failure_mean", "failure_se"});
    for (std::size_t l = 0; l < agg.success_mean.size(); ++l)
        csv::write_row(out, {std::to_string(l + 1), csv::format_double(agg.success_mean[l]),
                             csv::format_double(agg.success_se[l]), csv::format_double(agg.failure_mean[l]),
                             csv::format_double(agg.failure_se[l])});
    return out.str();
}

/// Static line plot of the two mean curves with +-1 SE bands.
inline std::string aggregate_to_svg(const LabelAggregate& agg, const std::string& title, const std::string& y_label,
                                    double y_min, double y_max) {
    constexpr double W = 640, H = 400, left = 60, right = 20, top = 40, bottom = 50;
    const auto layers = agg.success_mean.size();
    const double pw = W - left - right, ph = H - top - bottom;
    auto x_of = [&](std::size_t l) {
        return left + (layers <= 1 ? 0.0 : pw * static_cast<double>(l) / static_cast<double>(layers - 1));
    };
    auto y_of = [&](double v) { return top + ph * (1.0 - (std::clamp(v, y_min, y_max) - y_min) / (y_max - y_min)); };

    std::ostringstream svg;
    svg << std::fixed << std::setprecision(2);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 "
        << W << ' ' << H << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
        << title << "</text>\n";
    svg << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
        << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        double v = y_min + (y_max - y_min) * k / 4.0;
        svg << "<text x=\"" << left - 6 << "\" y=\"" << y_of(v) + 4
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << v << "</text>\n";
    }
    for (std::size_t l = 0; l < layers; l += std::max<std::size_t>(1, layers / 8))
        svg << "<text x=\"" << x_of(l) << "\" y=\"" << top + ph + 16
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << l + 1 << "</text>\n";
    svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 10
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">layer</text>\n";
    svg << "<text x=\"16\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 16 " << top + ph / 2
        << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << y_label << "</text>\n";

    auto curve = [&](const std::vector<double>& mean, const std::vector<double>& se, const char* color,
                     const char* name, int legend_row) {
        svg << "<polygon fill=\"" << color << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
        for (std::size_t l = 0; l < layers; ++l) svg << x_of(l) << ',' << y_of(mean[l] + se[l]) << ' ';
        for (std::size_t l = layers; l-- > 0;) svg << x_of(l) << ',' << y_of(mean[l] - se[l]) << ' ';
        svg << "\"/>\n<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t l = 0; l < layers; ++l) svg << x_of(l) << ',' << y_of(mean[l]) << ' ';
        svg << "\"/>\n";
        const double ly = top + 12 + 16.0 * legend_row;
        svg << "<line x1=\"" << left + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + 32 << "\" y2=\"" << ly
            << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        svg << "<text x=\"" << left + 38 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
            << name << "</text>\n";
    };
    curve(agg.success_mean, agg.success_se, "#1f77b4", "linking success", 0);
    curve(agg.failure_mean, agg.failure_se, "#d62728", "linking failure", 1);
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace groundprobe::lens
