#pragma once

// Response grading (two-way inclusion, exact match, sentence BLEU) and
// per-token perplexity of generated answers.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "groundprobe/csv.hpp"
#include "groundprobe/error.hpp"
#include "groundprobe/text.hpp"

namespace groundprobe::metrics {

using text::NormalizeOptions;

struct MetricResult {
    bool two_way_inclusion = false;
    bool exact_match = false;
    double bleu = 0.0;
};

inline std::string normalize(std::string_view s, const NormalizeOptions& opts = {}) {
    return text::normalize(s, opts);
}

/// Correct if either normalized string contains the other. Empty strings are never correct.
inline bool two_way_inclusion(std::string_view response, std::string_view answer, const NormalizeOptions& opts = {}) {
    auto r = text::normalize(response, opts);
    auto a = text::normalize(answer, opts);
    if (r.empty() || a.empty()) return false;
    return a.find(r) != std::string::npos || r.find(a) != std::string::npos;
}

inline bool exact_match(std::string_view response, std::string_view answer, const NormalizeOptions& opts = {}) {
    auto r = text::normalize(response, opts);
    return !r.empty() && r == text::normalize(answer, opts);
}

namespace detail {

inline std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& tokens, std::size_t n) {
    std::map<std::vector<std::string>, int> counts;
    if (tokens.size() < n) return counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i)
        ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                          tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
    return counts;
}

}  // namespace detail

/// Sentence BLEU against a single reference. Orders 1..min(4, |reference|),
/// uniform weights, add-one smoothing for orders >= 2, standard brevity penalty.
inline double bleu(std::string_view response, std::string_view answer, const NormalizeOptions& opts = {}) {
    auto hyp = text::split_whitespace(text::normalize(response, opts));
    auto ref = text::split_whitespace(text::normalize(answer, opts));
    if (hyp.empty() || ref.empty()) return 0.0;

    const std::size_t max_order = std::min<std::size_t>(4, ref.size());
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= max_order; ++n) {
        auto hyp_counts = detail::ngram_counts(hyp, n);
        auto ref_counts = detail::ngram_counts(ref, n);
        long matched = 0, total = 0;
        for (const auto& [gram, count] : hyp_counts) {
            total += count;
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end()) matched += std::min(count, it->second);
        }
        double precision;
        if (n == 1) {
            if (matched == 0) return 0.0;
            precision = static_cast<double>(matched) / static_cast<double>(total);
        } else {
            precision = static_cast<double>(matched + 1) / static_cast<double>(total + 1);
        }
        log_sum += std::log(precision);
    }
    const double c = static_cast<double>(hyp.size());
    const double r = static_cast<double>(ref.size());
    const double brevity = c > r ? 1.0 : std::exp(1.0 - r / c);
    return std::clamp(brevity * std::exp(log_sum / static_cast<double>(max_order)), 0.0, 1.0);
}

inline MetricResult grade(std::string_view response, std::string_view answer, const NormalizeOptions& opts = {}) {
    return {two_way_inclusion(response, answer, opts), exact_match(response, answer, opts),
            bleu(response, answer, opts)};
}

/// exp of the mean negative log-probability of each generated token under its step's softmax.
template <typename Logits>
double per_token_perplexity(std::span<const Logits> step_logits, std::span<const std::uint32_t> token_ids) {
    if (step_logits.empty()) throw PreconditionError("perplexity needs at least one generated token");
    if (step_logits.size() != token_ids.size())
        throw PreconditionError("perplexity: " + std::to_string(step_logits.size()) + " logit steps for " +
                                std::to_string(token_ids.size()) + " tokens");
    double nll = 0.0;
    for (std::size_t t = 0; t < step_logits.size(); ++t) {
        const auto& logits = step_logits[t];
        if (logits.empty()) throw PreconditionError("perplexity: empty logit vector");
        if (token_ids[t] >= logits.size())
            throw PreconditionError("perplexity: token id " + std::to_string(token_ids[t]) + " out of range");
        double max_logit = -std::numeric_limits<double>::infinity();
        for (auto v : logits) {
            if (!std::isfinite(v)) throw DataError("perplexity: non-finite logit at step " + std::to_string(t));
            max_logit = std::max(max_logit, static_cast<double>(v));
        }
        double denom = 0.0;
        for (auto v : logits) denom += std::exp(static_cast<double>(v) - max_logit);
        nll -= static_cast<double>(logits[token_ids[t]]) - max_logit - std::log(denom);
    }
    // Rounding can push a near-certain sequence a hair below 1.
    return std::max(1.0, std::exp(nll / static_cast<double>(step_logits.size())));
}

inline double per_token_perplexity(const std::vector<std::vector<float>>& step_logits,
                                   const std::vector<std::uint32_t>& token_ids) {
    return per_token_perplexity<std::vector<float>>(step_logits, token_ids);
}

inline double per_token_perplexity(const std::vector<std::vector<double>>& step_logits,
                                   const std::vector<std::uint32_t>& token_ids) {
    return per_token_perplexity<std::vector<double>>(step_logits, token_ids);
}

struct GradedRow {
    std::string datapoint_id;
    std::string response;
    std::string answer;
    MetricResult result;
};

/// Batch grading: CSV with header (datapoint_id, response, answer) in, graded CSV out.
inline std::vector<GradedRow> grade_csv(std::string_view csv_text, const NormalizeOptions& opts = {}) {
    auto rows = csv::parse(csv_text);
    if (rows.empty()) throw DataError("grading CSV is empty");
    const auto& head = rows.front();
    auto col = [&](std::string_view name) {
        auto it = std::find(head.begin(), head.end(), name);
        if (it == head.end()) throw DataError("grading CSV lacks column '" + std::string(name) + "'");
        return static_cast<std::size_t>(it - head.begin());
    };
    auto id_col = col("datapoint_id"), r_col = col("response"), a_col = col("answer");
    std::vector<GradedRow> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (row.size() != head.size())
            throw DataError("grading CSV row " + std::to_string(i) + " has " + std::to_string(row.size()) +
                            " fields, expected " + std::to_string(head.size()));
        out.push_back({row[id_col], row[r_col], row[a_col], grade(row[r_col], row[a_col], opts)});
    }
    return out;
}

inline std::string graded_to_csv(const std::vector<GradedRow>& rows) {
    std::ostringstream out;
    csv::write_row(out, {"datapoint_id", "response", "answer", "inclusion", "exact", "bleu"});
    for (const auto& r : rows)
        csv::write_row(out, {r.datapoint_id, r.response, r.answer, r.result.two_way_inclusion ? "1" : "0",
                             r.result.exact_match ? "1" : "0", csv::format_double(r.result.bleu)});
    return out.str();
}

}  // namespace groundprobe::metrics
