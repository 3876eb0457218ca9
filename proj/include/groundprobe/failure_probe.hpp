#pragma once

// Linking-failure detectors: an L2-regularized logistic probe on one layer's
// hidden states, a perplexity threshold, and their average.
//
// Positive class everywhere in this header is "linking failure".

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "groundprobe/answer_metrics.hpp"
#include "groundprobe/error.hpp"
#include "groundprobe/trace_store.hpp"

namespace groundprobe::probe {

inline constexpr std::uint32_t kDefaultLayer = 20;

struct Standardization {
    std::vector<double> mean;
    std::vector<double> stddev;  // constant columns get 1 so they pass through centred

    bool operator==(const Standardization&) const = default;
};

/// N x d row-major features with failure labels.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
    std::vector<bool> failure;
    std::vector<std::string> datapoint_ids;
    Standardization stats;
    std::uint32_t layer = 0;

    std::span<const double> row(std::size_t i) const {
        return std::span<const double>(values).subspan(i * cols, cols);
    }
};

struct ProbeConfig {
    double lambda = 1e-2;
    int max_iterations = 5000;
    double tolerance = 1e-6;
    std::uint64_t seed = 20240917;
    bool standardize = true;
};

struct ProbeMetadata {
    std::uint64_t seed = 0;
    double lambda = 0.0;
    int iterations = 0;
    double final_loss = 0.0;
    double final_gradient_norm = 0.0;
    bool converged = false;
    std::string warning;
};

struct Probe {
    std::vector<double> weights;
    double bias = 0.0;
    std::uint32_t layer = 0;
    Standardization stats;
    ProbeMetadata metadata;
};

struct PerplexityThreshold {
    double tau = std::numeric_limits<double>::infinity();
    double training_accuracy = 0.0;
    std::string warning;
};

struct ClassifierEval {
    double accuracy = 0.0;
    double base_rate = 0.0;
    std::size_t count = 0;
};

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline Standardization compute_standardization(std::span<const double> values, std::size_t rows, std::size_t cols) {
    Standardization s;
    s.mean.assign(cols, 0.0);
    s.stddev.assign(cols, 1.0);
    if (rows == 0) return s;
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) s.mean[j] += values[i * cols + j];
    for (auto& m : s.mean) m /= static_cast<double>(rows);
    std::vector<double> var(cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            const double c = values[i * cols + j] - s.mean[j];
            var[j] += c * c;
        }
    for (std::size_t j = 0; j < cols; ++j) {
        const double sd = std::sqrt(var[j] / static_cast<double>(rows));
        s.stddev[j] = sd > 0.0 ? sd : 1.0;
    }
    return s;
}

inline void refresh_stats(FeatureMatrix& m) { m.stats = compute_standardization(m.values, m.rows, m.cols); }

/// Rows are each record's hidden state at `layer` (1-based). Every record must be labelled.
inline FeatureMatrix extract_features(const trace::TraceSet& set, std::uint32_t layer = kDefaultLayer) {
    if (layer < 1 || layer > set.header.num_layers)
        throw PreconditionError("layer " + std::to_string(layer) + " outside [1, " +
                                std::to_string(set.header.num_layers) + "]");
    std::string missing;
    for (const auto& r : set.records)
        if (!r.correctness_label) missing += (missing.empty() ? "" : ", ") + r.datapoint_id;
    if (!missing.empty()) throw DataError("records without correctness labels: " + missing);

    FeatureMatrix m;
    m.rows = set.records.size();
    m.cols = set.header.hidden_dim;
    m.layer = layer;
    m.values.reserve(m.rows * m.cols);
    for (const auto& r : set.records) {
        const auto& h = r.hidden_states.at(layer - 1);
        if (h.size() != m.cols) throw DimensionError("record '" + r.datapoint_id + "' has wrong hidden size");
        for (float v : h) {
            if (!std::isfinite(v)) throw DataError("non-finite feature in '" + r.datapoint_id + "'");
            m.values.push_back(v);
        }
        m.failure.push_back(!*r.correctness_label);
        m.datapoint_ids.push_back(r.datapoint_id);
    }
    refresh_stats(m);
    return m;
}

inline FeatureMatrix select_rows(const FeatureMatrix& m, std::span<const std::size_t> idx) {
    FeatureMatrix out;
    out.cols = m.cols;
    out.rows = idx.size();
    out.layer = m.layer;
    for (auto i : idx) {
        auto r = m.row(i);
        out.values.insert(out.values.end(), r.begin(), r.end());
        out.failure.push_back(m.failure[i]);
        out.datapoint_ids.push_back(m.datapoint_ids[i]);
    }
    refresh_stats(out);
    return out;
}

inline FeatureMatrix concat(std::span<const FeatureMatrix> parts) {
    if (parts.empty()) throw PreconditionError("concat: no feature matrices");
    FeatureMatrix out;
    out.cols = parts.front().cols;
    out.layer = parts.front().layer;
    for (const auto& p : parts) {
        if (p.cols != out.cols)
            throw DimensionError("feature dimension mismatch: " + std::to_string(p.cols) + " vs " +
                                 std::to_string(out.cols));
        out.rows += p.rows;
        out.values.insert(out.values.end(), p.values.begin(), p.values.end());
        out.failure.insert(out.failure.end(), p.failure.begin(), p.failure.end());
        out.datapoint_ids.insert(out.datapoint_ids.end(), p.datapoint_ids.begin(), p.datapoint_ids.end());
    }
    refresh_stats(out);
    return out;
}

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Stratified split: each class contributes round(fraction * class size) rows to train.
inline Split stratified_split(const std::vector<bool>& labels, double train_fraction, std::uint64_t seed) {
    if (train_fraction <= 0.0 || train_fraction > 1.0) throw PreconditionError("train fraction must be in (0, 1]");
    std::mt19937_64 rng(seed);
    Split s;
    for (bool cls : {false, true}) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == cls) members.push_back(i);
        std::shuffle(members.begin(), members.end(), rng);
        auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(members.size())));
        s.train.insert(s.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
        s.test.insert(s.test.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

/// Mean logistic NLL + lambda/2 |w|^2 over standardized rows. Parameters are
/// packed as [w_0 .. w_{d-1}, b].
class ProbeObjective {
public:
    ProbeObjective(const FeatureMatrix& m, const Standardization& stats, double lambda)
        : n_(m.rows), d_(m.cols), lambda_(lambda), x_(m.values.size()), y_(m.rows) {
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = 0; j < d_; ++j)
                x_[i * d_ + j] = (m.values[i * d_ + j] - stats.mean[j]) / stats.stddev[j];
            y_[i] = m.failure[i] ? 1.0 : 0.0;
        }
    }

    std::size_t dim() const { return d_ + 1; }
    std::size_t rows() const { return n_; }
    std::span<const double> row(std::size_t i) const { return std::span<const double>(x_).subspan(i * d_, d_); }

    double loss(std::span<const double> params) const {
        double total = 0.0;
        for (std::size_t i = 0; i < n_; ++i) {
            const double z = margin(params, i);
            total += softplus(z) - y_[i] * z;
        }
        double reg = 0.0;
        for (std::size_t j = 0; j < d_; ++j) reg += params[j] * params[j];
        return total / static_cast<double>(n_) + 0.5 * lambda_ * reg;
    }

    std::vector<double> gradient(std::span<const double> params) const {
        std::vector<double> g(d_ + 1, 0.0);
        for (std::size_t i = 0; i < n_; ++i) {
            const double r = sigmoid(margin(params, i)) - y_[i];
            const auto* x = &x_[i * d_];
            for (std::size_t j = 0; j < d_; ++j) g[j] += r * x[j];
            g[d_] += r;
        }
        for (std::size_t j = 0; j <= d_; ++j) g[j] /= static_cast<double>(n_);
        for (std::size_t j = 0; j < d_; ++j) g[j] += lambda_ * params[j];
        return g;
    }

    /// Largest eigenvalue of X^T X / N by power iteration from a seeded start.
    double gram_top_eigenvalue(std::uint64_t seed, int iterations = 100) const {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal;
        std::vector<double> v(d_), xv(n_);
        for (auto& e : v) e = normal(rng);
        double eig = 0.0;
        for (int it = 0; it < iterations; ++it) {
            double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
            if (norm == 0.0) return 0.0;
            for (auto& e : v) e /= norm;
            for (std::size_t i = 0; i < n_; ++i)
                xv[i] = std::inner_product(v.begin(), v.end(), x_.begin() + static_cast<std::ptrdiff_t>(i * d_), 0.0);
            std::vector<double> next(d_, 0.0);
            for (std::size_t i = 0; i < n_; ++i)
                for (std::size_t j = 0; j < d_; ++j) next[j] += xv[i] * x_[i * d_ + j];
            for (auto& e : next) e /= static_cast<double>(n_);
            eig = std::inner_product(v.begin(), v.end(), next.begin(), 0.0);
            v = std::move(next);
        }
        return eig;
    }

private:
    double margin(std::span<const double> params, std::size_t i) const {
        const auto* x = &x_[i * d_];
        double z = params[d_];
        for (std::size_t j = 0; j < d_; ++j) z += params[j] * x[j];
        return z;
    }

    std::size_t n_, d_;
    double lambda_;
    std::vector<double> x_;
    std::vector<double> y_;
};

/// Full-batch gradient descent with a diagonal (weights vs bias) step scaling
/// and Armijo backtracking, so the loss never increases between iterations.
/// Stops when |grad|_inf < tolerance or after max_iterations.
inline Probe train_probe(const FeatureMatrix& features, const ProbeConfig& config = {},
                         std::vector<double>* loss_history = nullptr) {
    if (features.rows < 2) throw PreconditionError("train_probe needs at least 2 rows");
    const auto positives = std::count(features.failure.begin(), features.failure.end(), true);
    if (positives == 0 || positives == static_cast<std::ptrdiff_t>(features.rows))
        throw DataError("train_probe needs both linking-success and linking-failure examples");
    if (config.lambda < 0.0) throw PreconditionError("regularization strength must be non-negative");
    for (double v : features.values)
        if (!std::isfinite(v)) throw DataError("train_probe: non-finite feature");

    Standardization stats = config.standardize ? compute_standardization(features.values, features.rows, features.cols)
                                               : Standardization{std::vector<double>(features.cols, 0.0),
                                                                 std::vector<double>(features.cols, 1.0)};
    ProbeObjective objective(features, stats, config.lambda);
    const std::size_t d = features.cols;

    const double lip_w = 0.25 * objective.gram_top_eigenvalue(config.seed) + config.lambda;
    const double lip_b = 0.25;
    std::vector<double> scale(d + 1, 1.0 / std::max(lip_w, 1e-12));
    scale[d] = 1.0 / lip_b;

    std::vector<double> params(d + 1, 0.0);
    double loss = objective.loss(params);
    auto grad = objective.gradient(params);
    double step = 1.0;
    auto inf_norm = [](const std::vector<double>& g) {
        double m = 0.0;
        for (double v : g) m = std::max(m, std::abs(v));
        return m;
    };
    if (loss_history) loss_history->assign(1, loss);

    ProbeMetadata meta;
    meta.seed = config.seed;
    meta.lambda = config.lambda;
    int it = 0;
    std::vector<double> trial(d + 1);
    for (; it < config.max_iterations && inf_norm(grad) >= config.tolerance; ++it) {
        double scaled_sq = 0.0;
        for (std::size_t j = 0; j <= d; ++j) scaled_sq += scale[j] * grad[j] * grad[j];
        double trial_loss;
        for (;;) {
            for (std::size_t j = 0; j <= d; ++j) trial[j] = params[j] - step * scale[j] * grad[j];
            trial_loss = objective.loss(trial);
            if (trial_loss <= loss - 0.5 * step * scaled_sq) break;
            step *= 0.5;
            if (step < 1e-20) break;
        }
        if (step < 1e-20 || trial_loss > loss) {
            meta.warning = "line search stalled";
            break;
        }
        params = trial;
        loss = trial_loss;
        grad = objective.gradient(params);
        if (loss_history) loss_history->push_back(loss);
        step = std::min(step * 2.0, 64.0);
    }

    meta.iterations = it;
    meta.final_loss = loss;
    meta.final_gradient_norm = inf_norm(grad);
    meta.converged = meta.final_gradient_norm < config.tolerance;
    if (!meta.converged && meta.warning.empty())
        meta.warning = "not converged after " + std::to_string(it) + " iterations (|grad|_inf = " +
                       std::to_string(meta.final_gradient_norm) + ")";

    Probe p;
    p.weights.assign(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(d));
    p.bias = params[d];
    p.layer = features.layer;
    p.stats = std::move(stats);
    p.metadata = std::move(meta);
    for (double w : p.weights)
        if (!std::isfinite(w)) throw DataError("train_probe produced non-finite weights");
    return p;
}

/// w·standardize(x) + b.
template <typename T>
double probe_logit(const Probe& p, std::span<const T> x) {
    if (x.size() != p.weights.size())
        throw DimensionError("probe expects " + std::to_string(p.weights.size()) + " features, got " +
                             std::to_string(x.size()));
    double z = p.bias;
    for (std::size_t j = 0; j < x.size(); ++j)
        z += p.weights[j] * ((static_cast<double>(x[j]) - p.stats.mean[j]) / p.stats.stddev[j]);
    return z;
}

/// Probability of linking failure.
template <typename T>
double probe_predict(const Probe& p, std::span<const T> x) {
    return sigmoid(probe_logit(p, x));
}

inline double probe_predict(const Probe& p, const std::vector<double>& x) {
    return probe_predict(p, std::span<const double>(x));
}

inline double probe_predict(const Probe& p, const std::vector<float>& x) {
    return probe_predict(p, std::span<const float>(x));
}

/// Accuracy of "flag failure iff value > tau" on the given data.
inline double threshold_accuracy(std::span<const double> values, const std::vector<bool>& failure, double tau) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < values.size(); ++i) correct += ((values[i] > tau) == failure[i]);
    return static_cast<double>(correct) / static_cast<double>(values.size());
}

/// Sweeps -inf, midpoints of sorted unique values, and +inf; keeps the most
/// accurate threshold, preferring the smallest on ties.
inline PerplexityThreshold learn_perplexity_threshold(std::span<const double> perplexities,
                                                      const std::vector<bool>& failure) {
    const auto n = perplexities.size();
    if (n < 2) throw PreconditionError("threshold learning needs at least 2 values");
    if (failure.size() != n) throw DimensionError("perplexities and labels differ in length");
    for (double v : perplexities)
        if (std::isnan(v)) throw DataError("threshold learning: NaN perplexity");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return perplexities[a] < perplexities[b]; });

    const auto failures = static_cast<std::size_t>(std::count(failure.begin(), failure.end(), true));
    // At tau = -inf everything is flagged: exactly the failures are right.
    std::size_t correct = failures;
    std::size_t best_correct = correct;
    double best_tau = -std::numeric_limits<double>::infinity();

    std::size_t i = 0;
    while (i < n) {
        const double v = perplexities[order[i]];
        std::size_t j = i;
        for (; j < n && perplexities[order[j]] == v; ++j) {
            // Moving tau past v unflags this item.
            if (failure[order[j]]) --correct;
            else ++correct;
        }
        const double tau = j < n ? 0.5 * (v + perplexities[order[j]]) : std::numeric_limits<double>::infinity();
        if (correct > best_correct) {
            best_correct = correct;
            best_tau = tau;
        }
        i = j;
    }

    PerplexityThreshold t;
    t.tau = best_tau;
    t.training_accuracy = static_cast<double>(best_correct) / static_cast<double>(n);
    if (failures == 0 || failures == n)
        t.warning = "single-class training labels; threshold is degenerate";
    return t;
}

/// Logistic squash of (perplexity - tau) with unit scale.
inline double perplexity_score(double perplexity, double tau) {
    if (std::isinf(tau)) return tau > 0 ? 0.0 : 1.0;
    return sigmoid(perplexity - tau);
}

inline double ensemble_predict(double probe_probability, double perplexity_probability) {
    if (!(probe_probability >= 0.0 && probe_probability <= 1.0))
        throw PreconditionError("probe probability must lie in [0, 1]");
    return 0.5 * (probe_probability + perplexity_probability);
}

inline double ensemble_predict(double probe_probability, double perplexity, const PerplexityThreshold& t) {
    return ensemble_predict(probe_probability, perplexity_score(perplexity, t.tau));
}

inline bool flags_failure(double score) { return score > 0.5; }

inline ClassifierEval evaluate_classifier(const std::vector<bool>& predicted, const std::vector<bool>& labels) {
    if (predicted.empty()) throw PreconditionError("evaluate_classifier: no predictions");
    if (predicted.size() != labels.size()) throw DimensionError("evaluate_classifier: length mismatch");
    std::size_t correct = 0, positives = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        correct += predicted[i] == labels[i];
        positives += labels[i];
    }
    const double n = static_cast<double>(labels.size());
    return {static_cast<double>(correct) / n,
            static_cast<double>(std::max(positives, labels.size() - positives)) / n, labels.size()};
}

/// Answer-token perplexity of every record, in record order.
inline std::vector<double> record_perplexities(const trace::TraceSet& set) {
    std::vector<double> out;
    out.reserve(set.records.size());
    for (const auto& r : set.records) out.push_back(metrics::per_token_perplexity(r.step_logits, r.generated_token_ids));
    return out;
}

inline nlohmann::json to_json(const Standardization& s) { return {{"mean", s.mean}, {"stddev", s.stddev}}; }

inline nlohmann::json to_json(const PerplexityThreshold& t) {
    nlohmann::json j;
    // JSON has no infinities; encode the sentinels as strings.
    if (std::isinf(t.tau)) j["tau"] = t.tau > 0 ? "inf" : "-inf";
    else j["tau"] = t.tau;
    j["orientation"] = "flag_above";
    j["training_accuracy"] = t.training_accuracy;
    j["warning"] = t.warning;
    return j;
}

inline PerplexityThreshold threshold_from_json(const nlohmann::json& j) {
    PerplexityThreshold t;
    const auto& tau = j.at("tau");
    if (tau.is_string()) {
        auto s = tau.get<std::string>();
        if (s == "inf") t.tau = std::numeric_limits<double>::infinity();
        else if (s == "-inf") t.tau = -std::numeric_limits<double>::infinity();
        else throw FormatError("bad threshold value '" + s + "'");
    } else {
        t.tau = tau.get<double>();
    }
    t.training_accuracy = j.value("training_accuracy", 0.0);
    t.warning = j.value("warning", "");
    return t;
}

inline nlohmann::json to_json(const Probe& p) {
    return {{"weights", p.weights},
            {"bias", p.bias},
            {"layer", p.layer},
            {"standardization", to_json(p.stats)},
            {"metadata",
             {{"seed", p.metadata.seed},
              {"lambda", p.metadata.lambda},
              {"iterations", p.metadata.iterations},
              {"final_loss", p.metadata.final_loss},
              {"final_gradient_norm", p.metadata.final_gradient_norm},
              {"converged", p.metadata.converged},
              {"warning", p.metadata.warning}}}};
}

inline Probe probe_from_json(const nlohmann::json& j) {
    Probe p;
    try {
        p.weights = j.at("weights").get<std::vector<double>>();
        p.bias = j.at("bias").get<double>();
        p.layer = j.at("layer").get<std::uint32_t>();
        p.stats.mean = j.at("standardization").at("mean").get<std::vector<double>>();
        p.stats.stddev = j.at("standardization").at("stddev").get<std::vector<double>>();
        const auto& m = j.at("metadata");
        p.metadata.seed = m.at("seed").get<std::uint64_t>();
        p.metadata.lambda = m.at("lambda").get<double>();
        p.metadata.iterations = m.at("iterations").get<int>();
        p.metadata.final_loss = m.at("final_loss").get<double>();
        p.metadata.final_gradient_norm = m.value("final_gradient_norm", 0.0);
        p.metadata.converged = m.at("converged").get<bool>();
        p.metadata.warning = m.value("warning", "");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed probe JSON: ") + e.what());
    }
    if (p.stats.mean.size() != p.weights.size() || p.stats.stddev.size() != p.weights.size())
        throw FormatError("probe standardization size does not match weights");
    return p;
}

}  // namespace groundprobe::probe
