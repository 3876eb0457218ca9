#pragma once

// Answer/abstain decisions from failure scores, coverage and risk, and the
// train-on-three, apply-to-a-fourth out-of-distribution protocol.

#include <cstdint>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "groundprobe/csv.hpp"
#include "groundprobe/error.hpp"
#include "groundprobe/failure_probe.hpp"

namespace groundprobe::selective {

enum class Action { Answer, Abstain };

struct Decision {
    std::string datapoint_id;
    Action action = Action::Answer;
    double score = 0.0;
    std::optional<bool> correctness;  // required when action == Answer
};

/// Percentages are stored as exact hundredths, rounded half-up from the counts.
struct SelectiveReport {
    std::size_t answered = 0;
    std::size_t correct = 0;
    std::size_t total = 0;
    std::int64_t coverage_centi = 0;
    std::optional<std::int64_t> risk_centi;  // nullopt when nothing was answered

    double coverage() const { return static_cast<double>(coverage_centi) / 100.0; }
    std::optional<double> risk() const {
        if (!risk_centi) return std::nullopt;
        return static_cast<double>(*risk_centi) / 100.0;
    }
    bool operator==(const SelectiveReport&) const = default;
};

/// num/den as a percentage in hundredths, half-up.
inline std::int64_t percent_centi(std::size_t num, std::size_t den) {
    const auto n = static_cast<unsigned __int128>(num) * 20000u + den;
    return static_cast<std::int64_t>(n / (2u * static_cast<unsigned __int128>(den)));
}

inline std::string format_centi(std::int64_t centi) {
    std::ostringstream s;
    s << centi / 100 << '.' << std::setw(2) << std::setfill('0') << centi % 100;
    return s.str();
}

/// Abstain iff the failure score is strictly above the threshold.
inline Action decide(double score, double threshold = 0.5) { return score > threshold ? Action::Abstain : Action::Answer; }

inline SelectiveReport coverage_risk(std::span<const Decision> decisions) {
    if (decisions.empty()) throw PreconditionError("coverage_risk: no decisions");
    SelectiveReport r;
    r.total = decisions.size();
    for (const auto& d : decisions) {
        if (d.action != Action::Answer) continue;
        if (!d.correctness)
            throw DataError("answered decision '" + d.datapoint_id + "' carries no correctness");
        ++r.answered;
        r.correct += *d.correctness;
    }
    r.coverage_centi = percent_centi(r.answered, r.total);
    if (r.answered > 0) r.risk_centi = percent_centi(r.answered - r.correct, r.answered);
    return r;
}

/// Detector inputs without labels. Scoring only ever sees this type.
struct DetectorInputs {
    std::vector<std::string> datapoint_ids;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> features;  // row-major
    std::vector<double> perplexities;

    std::span<const double> row(std::size_t i) const {
        return std::span<const double>(features).subspan(i * cols, cols);
    }
};

struct LabeledSet {
    std::string name;
    DetectorInputs inputs;
    std::vector<bool> failure;
};

struct FittedDetectors {
    probe::Probe probe;
    probe::PerplexityThreshold threshold;
};

struct MethodScores {
    std::vector<double> probe;
    std::vector<double> perplexity;
    std::vector<double> ensemble;
};

enum class Method { Perplexity, Probe, Ensemble };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::Perplexity: return "perplexity";
        case Method::Probe: return "probe";
        case Method::Ensemble: return "ensemble";
    }
    return "?";
}

inline LabeledSet labeled_set_from_trace(const trace::TraceSet& set, std::uint32_t layer, std::string name = {}) {
    auto m = probe::extract_features(set, layer);
    LabeledSet out;
    out.name = std::move(name);
    out.inputs.datapoint_ids = m.datapoint_ids;
    out.inputs.rows = m.rows;
    out.inputs.cols = m.cols;
    out.inputs.features = std::move(m.values);
    out.inputs.perplexities = probe::record_perplexities(set);
    out.failure = std::move(m.failure);
    return out;
}

/// Unlabelled inputs straight from a trace (labels, if any, are ignored).
inline DetectorInputs inputs_from_trace(const trace::TraceSet& set, std::uint32_t layer) {
    if (layer < 1 || layer > set.header.num_layers)
        throw PreconditionError("layer " + std::to_string(layer) + " outside [1, " +
                                std::to_string(set.header.num_layers) + "]");
    DetectorInputs in;
    in.rows = set.records.size();
    in.cols = set.header.hidden_dim;
    for (const auto& r : set.records) {
        in.datapoint_ids.push_back(r.datapoint_id);
        const auto& h = r.hidden_states.at(layer - 1);
        in.features.insert(in.features.end(), h.begin(), h.end());
    }
    in.perplexities = probe::record_perplexities(set);
    return in;
}

inline probe::FeatureMatrix to_feature_matrix(const LabeledSet& s, std::uint32_t layer) {
    probe::FeatureMatrix m;
    m.rows = s.inputs.rows;
    m.cols = s.inputs.cols;
    m.values = s.inputs.features;
    m.failure = s.failure;
    m.datapoint_ids = s.inputs.datapoint_ids;
    m.layer = layer;
    probe::refresh_stats(m);
    return m;
}

/// Fits the probe and the perplexity threshold on the concatenation of `train`.
inline FittedDetectors fit_detectors(std::span<const LabeledSet> train, std::uint32_t layer,
                                     const probe::ProbeConfig& config = {}) {
    if (train.empty()) throw PreconditionError("fit_detectors: no training sets");
    std::vector<probe::FeatureMatrix> parts;
    std::vector<double> perplexities;
    std::vector<bool> failure;
    for (const auto& s : train) {
        if (s.inputs.cols != train.front().inputs.cols)
            throw DimensionError("training set '" + s.name + "' has feature dimension " + std::to_string(s.inputs.cols) +
                                 ", expected " + std::to_string(train.front().inputs.cols));
        parts.push_back(to_feature_matrix(s, layer));
        perplexities.insert(perplexities.end(), s.inputs.perplexities.begin(), s.inputs.perplexities.end());
        failure.insert(failure.end(), s.failure.begin(), s.failure.end());
    }
    auto all = probe::concat(parts);
    return {probe::train_probe(all, config), probe::learn_perplexity_threshold(perplexities, failure)};
}

inline MethodScores score(const FittedDetectors& detectors, const DetectorInputs& inputs) {
    if (inputs.cols != detectors.probe.weights.size())
        throw DimensionError("inputs have " + std::to_string(inputs.cols) + " features, probe expects " +
                             std::to_string(detectors.probe.weights.size()));
    MethodScores s;
    for (std::size_t i = 0; i < inputs.rows; ++i) {
        const double p = probe::probe_predict(detectors.probe, inputs.row(i));
        const double q = probe::perplexity_score(inputs.perplexities[i], detectors.threshold.tau);
        s.probe.push_back(p);
        s.perplexity.push_back(q);
        s.ensemble.push_back(probe::ensemble_predict(p, q));
    }
    return s;
}

/// Correct answer == linking success == !failure.
inline std::vector<Decision> make_decisions(const std::vector<std::string>& ids, std::span<const double> scores,
                                            const std::vector<bool>& failure, double threshold) {
    if (ids.size() != scores.size() || ids.size() != failure.size())
        throw DimensionError("make_decisions: length mismatch");
    std::vector<Decision> out;
    out.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto a = decide(scores[i], threshold);
        out.push_back({ids[i], a, scores[i], !failure[i]});
    }
    return out;
}

struct MethodResult {
    Method method;
    SelectiveReport report;
    probe::ClassifierEval heldout_eval;
    probe::ClassifierEval train_eval;
};

struct OodReport {
    std::string heldout_name;
    double threshold = 0.5;
    FittedDetectors detectors;
    std::vector<MethodResult> methods;  // perplexity, probe, ensemble

    const MethodResult& get(Method m) const {
        for (const auto& r : methods)
            if (r.method == m) return r;
        throw PreconditionError("method missing from report");
    }
};

inline std::span<const double> pick(const MethodScores& s, Method m) {
    switch (m) {
        case Method::Perplexity: return s.perplexity;
        case Method::Probe: return s.probe;
        case Method::Ensemble: return s.ensemble;
    }
    return {};
}

inline probe::ClassifierEval eval_scores(std::span<const double> scores, const std::vector<bool>& failure) {
    std::vector<bool> predicted;
    predicted.reserve(scores.size());
    for (double v : scores) predicted.push_back(probe::flags_failure(v));
    return probe::evaluate_classifier(predicted, failure);
}

/// Scores frozen detectors on unlabelled inputs, then grades the decisions
/// against `failure`. Labels never reach the scoring step.
inline std::vector<MethodResult> evaluate_methods(const FittedDetectors& detectors, const DetectorInputs& inputs,
                                                  const std::vector<bool>& failure, double threshold = 0.5) {
    if (failure.size() != inputs.rows) throw DimensionError("label count does not match input rows");
    const MethodScores scores = score(detectors, inputs);
    std::vector<MethodResult> out;
    for (Method m : {Method::Perplexity, Method::Probe, Method::Ensemble}) {
        auto decisions = make_decisions(inputs.datapoint_ids, pick(scores, m), failure, threshold);
        out.push_back({m, coverage_risk(decisions), eval_scores(pick(scores, m), failure), {}});
    }
    return out;
}

/// Detectors are fitted on `train` only, frozen, and scored on the held-out
/// inputs; held-out labels are consulted only afterwards to grade decisions.
inline OodReport ood_protocol(std::span<const LabeledSet> train, const LabeledSet& heldout, std::uint32_t layer,
                              const probe::ProbeConfig& config = {}, double threshold = 0.5) {
    for (const auto& s : train)
        if (s.inputs.cols != heldout.inputs.cols)
            throw DimensionError("held-out feature dimension " + std::to_string(heldout.inputs.cols) +
                                 " differs from training set '" + s.name + "'");
    OodReport out;
    out.heldout_name = heldout.name;
    out.threshold = threshold;
    out.detectors = fit_detectors(train, layer, config);
    out.methods = evaluate_methods(out.detectors, heldout.inputs, heldout.failure, threshold);

    DetectorInputs train_inputs;
    std::vector<bool> train_failure;
    train_inputs.cols = heldout.inputs.cols;
    for (const auto& s : train) {
        train_inputs.rows += s.inputs.rows;
        train_inputs.datapoint_ids.insert(train_inputs.datapoint_ids.end(), s.inputs.datapoint_ids.begin(),
                                          s.inputs.datapoint_ids.end());
        train_inputs.features.insert(train_inputs.features.end(), s.inputs.features.begin(), s.inputs.features.end());
        train_inputs.perplexities.insert(train_inputs.perplexities.end(), s.inputs.perplexities.begin(),
                                         s.inputs.perplexities.end());
        train_failure.insert(train_failure.end(), s.failure.begin(), s.failure.end());
    }
    const MethodScores train_scores = score(out.detectors, train_inputs);
    for (auto& r : out.methods) r.train_eval = eval_scores(pick(train_scores, r.method), train_failure);
    return out;
}

inline std::string risk_text(const SelectiveReport& r) { return r.risk_centi ? format_centi(*r.risk_centi) : ""; }

inline nlohmann::json to_json(const SelectiveReport& r) {
    nlohmann::json j{{"coverage", r.coverage()},
                     {"answered", r.answered},
                     {"correct", r.correct},
                     {"total", r.total}};
    j["risk"] = r.risk() ? nlohmann::json(*r.risk()) : nlohmann::json(nullptr);
    return j;
}

struct NamedReport {
    std::string method;
    SelectiveReport report;
};

inline std::string reports_to_csv(std::span<const NamedReport> rows) {
    std::ostringstream out;
    csv::write_row(out, {"method", "coverage", "risk", "answered", "correct", "total"});
    for (const auto& r : rows)
        csv::write_row(out, {r.method, format_centi(r.report.coverage_centi), risk_text(r.report),
                             std::to_string(r.report.answered), std::to_string(r.report.correct),
                             std::to_string(r.report.total)});
    return out.str();
}

inline nlohmann::json reports_to_json(std::span<const NamedReport> rows, double threshold) {
    nlohmann::json j;
    j["threshold"] = threshold;
    j["methods"] = nlohmann::json::array();
    for (const auto& r : rows) {
        auto m = to_json(r.report);
        m["method"] = r.method;
        j["methods"].push_back(std::move(m));
    }
    return j;
}

inline std::string decisions_to_csv(std::span<const Decision> ds) {
    std::ostringstream out;
    csv::write_row(out, {"datapoint_id", "action", "score", "correct"});
    for (const auto& d : ds)
        csv::write_row(out, {d.datapoint_id, d.action == Action::Answer ? "answer" : "abstain",
                             csv::format_double(d.score),
                             d.correctness ? (*d.correctness ? "1" : "0") : ""});
    return out.str();
}

inline std::vector<NamedReport> named_reports(const OodReport& r) {
    std::vector<NamedReport> out;
    for (const auto& m : r.methods) out.push_back({method_name(m.method), m.report});
    return out;
}

/// Dataset x (method coverage/risk) table, plus the perplexity-to-ensemble delta.
inline std::string table_summary(std::span<const std::pair<std::string, std::vector<NamedReport>>> rows) {
    std::ostringstream out;
    out << std::left << std::setw(14) << "dataset" << std::right;
    for (const char* m : {"perplexity", "probe", "ensemble"})
        out << std::setw(16) << (std::string(m) + " cov") << std::setw(16) << (std::string(m) + " risk");
    out << std::setw(12) << "d cov" << std::setw(12) << "d risk" << '\n';
    for (const auto& [name, reports] : rows) {
        auto find = [&](std::string_view m) -> const SelectiveReport* {
            for (const auto& r : reports)
                if (r.method == m) return &r.report;
            return nullptr;
        };
        out << std::left << std::setw(14) << name << std::right;
        for (const char* m : {"perplexity", "probe", "ensemble"}) {
            const auto* r = find(m);
            out << std::setw(16) << (r ? format_centi(r->coverage_centi) : "-") << std::setw(16)
                << (r && r->risk_centi ? format_centi(*r->risk_centi) : "-");
        }
        const auto* p = find("perplexity");
        const auto* e = find("ensemble");
        if (p && e) {
            auto signed_centi = [](std::int64_t c) { return (c >= 0 ? "+" : "-") + format_centi(c >= 0 ? c : -c); };
            out << std::setw(12) << signed_centi(e->coverage_centi - p->coverage_centi);
            out << std::setw(12)
                << (p->risk_centi && e->risk_centi ? signed_centi(*e->risk_centi - *p->risk_centi) : "-");
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace groundprobe::selective
