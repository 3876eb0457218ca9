#pragma once

// Benchmark construction: article splitting, the QA filter cascade, LM-judged
// deduplication, visual-reference rewriting, MNIST arithmetic items, MCQA
// conversion, trivial-image majority voting and the per-VLM filter protocol.
//
// Every LM/VLM call goes through an abstract client. Wrapping a client in
// RecordingLmClient captures a transcript that ReplayLmClient can serve back,
// which reproduces a build byte-for-byte without a live model.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <unicode/uchar.h>

#include <nlohmann/json.hpp>

#include "groundprobe/answer_metrics.hpp"
#include "groundprobe/csv.hpp"
#include "groundprobe/error.hpp"
#include "groundprobe/text.hpp"

namespace groundprobe::bench {

inline constexpr std::size_t kMaxAnswerWords = 7;
inline constexpr int kClientAttempts = 3;

enum class Source { WikiExtract, DirectGen, MnistArithmetic };

inline std::string to_string(Source s) {
    switch (s) {
        case Source::WikiExtract: return "WikiExtract";
        case Source::DirectGen: return "DirectGen";
        case Source::MnistArithmetic: return "MnistArithmetic";
    }
    return "?";
}

inline Source source_from_string(std::string_view s) {
    if (s == "WikiExtract") return Source::WikiExtract;
    if (s == "DirectGen") return Source::DirectGen;
    if (s == "MnistArithmetic") return Source::MnistArithmetic;
    throw FormatError("unknown datapoint source '" + std::string(s) + "'");
}

struct FilterStep {
    std::string rule;
    bool passed = false;

    bool operator==(const FilterStep&) const = default;
};

struct QADatapoint {
    std::string id;
    std::string entity;
    std::string image_id;
    std::string textual_question;
    std::string visual_question;
    std::string answer;
    Source source = Source::WikiExtract;
    std::vector<FilterStep> filter_log;

    bool operator==(const QADatapoint&) const = default;
};

struct QaPair {
    std::string question;
    std::string answer;
};

struct McqaDatapoint {
    std::string question;
    std::array<std::string, 4> options;
    int correct_index = 0;
};

// ---------------------------------------------------------------------------
// Prompt templates

struct PromptTemplates {
    std::string qa_extraction;
    std::string ambiguity;
    std::string question_answering;
    std::string duplicate;
    std::string mcqa_distractors;
};

inline PromptTemplates load_prompts(const std::filesystem::path& dir) {
    auto read = [&](const char* name) {
        auto path = dir / (std::string(name) + ".txt");
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read prompt template '" + path.string() + "'");
        std::ostringstream s;
        s << in.rdbuf();
        return s.str();
    };
    return {read("qa_extraction"), read("ambiguity"), read("question_answering"), read("duplicate"),
            read("mcqa_distractors")};
}

inline std::string fill(std::string tmpl, std::initializer_list<std::pair<std::string_view, std::string_view>> slots) {
    for (const auto& [key, value] : slots) {
        std::size_t pos = 0;
        bool found = false;
        while ((pos = tmpl.find(key, pos)) != std::string::npos) {
            tmpl.replace(pos, key.size(), value);
            pos += value.size();
            found = true;
        }
        if (!found) throw FormatError("prompt template lacks placeholder " + std::string(key));
    }
    return tmpl;
}

// ---------------------------------------------------------------------------
// Clients

class LmClient {
public:
    virtual ~LmClient() = default;
    /// Completion for a filled prompt. Throws ClientError on failure.
    virtual std::string complete(const std::string& template_id, const std::string& prompt) = 0;
};

struct TranscriptEntry {
    std::string template_id;
    std::string prompt;
    std::string response;
};

inline std::string transcript_to_jsonl(std::span<const TranscriptEntry> entries) {
    std::string out;
    for (const auto& e : entries)
        out += nlohmann::json{{"template_id", e.template_id}, {"prompt", e.prompt}, {"response", e.response}}.dump() +
               "\n";
    return out;
}

inline std::vector<TranscriptEntry> transcript_from_jsonl(std::string_view text) {
    std::vector<TranscriptEntry> out;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            out.push_back({j.at("template_id").get<std::string>(), j.at("prompt").get<std::string>(),
                           j.at("response").get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("transcript line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

/// Forwards to another client and logs every call and response.
class RecordingLmClient : public LmClient {
public:
    explicit RecordingLmClient(LmClient& inner) : inner_(inner) {}

    std::string complete(const std::string& template_id, const std::string& prompt) override {
        auto response = inner_.complete(template_id, prompt);
        entries_.push_back({template_id, prompt, response});
        return response;
    }

    const std::vector<TranscriptEntry>& entries() const { return entries_; }

private:
    LmClient& inner_;
    std::vector<TranscriptEntry> entries_;
};

/// Serves logged responses. Repeated identical requests are answered in log order.
class ReplayLmClient : public LmClient {
public:
    explicit ReplayLmClient(std::span<const TranscriptEntry> entries) {
        for (const auto& e : entries) queue_[{e.template_id, e.prompt}].push_back(e.response);
    }

    std::string complete(const std::string& template_id, const std::string& prompt) override {
        auto it = queue_.find({template_id, prompt});
        if (it == queue_.end() || cursor_[it->first] >= it->second.size())
            throw ClientError("no logged response for " + template_id + " prompt");
        return it->second[cursor_[it->first]++];
    }

private:
    std::map<std::pair<std::string, std::string>, std::vector<std::string>> queue_;
    std::map<std::pair<std::string, std::string>, std::size_t> cursor_;
};

enum class TrivialImage { Black, White, Noise, None };

inline constexpr std::array<TrivialImage, 4> kTrivialImages{TrivialImage::Black, TrivialImage::White,
                                                             TrivialImage::Noise, TrivialImage::None};

inline std::string to_string(TrivialImage t) {
    switch (t) {
        case TrivialImage::Black: return "black";
        case TrivialImage::White: return "white";
        case TrivialImage::Noise: return "noise";
        case TrivialImage::None: return "none";
    }
    return "?";
}

/// Either an entity image id or one of the trivial images.
using ImageRef = std::variant<std::string, TrivialImage>;

inline std::string describe(const ImageRef& img) {
    if (const auto* id = std::get_if<std::string>(&img)) return *id;
    return "trivial:" + to_string(std::get<TrivialImage>(img));
}

class VlmClient {
public:
    virtual ~VlmClient() = default;
    /// Name of the object shown in the image.
    virtual std::string identify(const std::string& image_id) = 0;
    virtual std::string answer(const ImageRef& image, const std::string& question) = 0;
};

/// VLM responses keyed by (kind, image, question), loaded from JSON lines
/// {"kind": "identify"|"answer", "image": ..., "question": ..., "response": ...}.
class ReplayVlmClient : public VlmClient {
public:
    static ReplayVlmClient from_jsonl(std::string_view text) {
        ReplayVlmClient c;
        std::istringstream in{std::string(text)};
        std::size_t line_no = 0;
        for (std::string line; std::getline(in, line);) {
            ++line_no;
            if (text::trim(line).empty()) continue;
            try {
                auto j = nlohmann::json::parse(line);
                c.responses_[{j.at("kind").get<std::string>(), j.at("image").get<std::string>(),
                              j.value("question", std::string())}] = j.at("response").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                throw FormatError("VLM transcript line " + std::to_string(line_no) + ": " + e.what());
            }
        }
        return c;
    }

    std::string identify(const std::string& image_id) override { return lookup("identify", image_id, ""); }
    std::string answer(const ImageRef& image, const std::string& question) override {
        return lookup("answer", describe(image), question);
    }

private:
    std::string lookup(const std::string& kind, const std::string& image, const std::string& question) {
        auto it = responses_.find({kind, image, question});
        if (it == responses_.end()) throw ClientError("no logged VLM response for " + kind + " on " + image);
        return it->second;
    }
    std::map<std::tuple<std::string, std::string, std::string>, std::string> responses_;
};

// ---------------------------------------------------------------------------
// Text rules

/// Sentences end at . ? or ! followed by whitespace and then an uppercase letter or digit.
inline std::vector<std::string> split_sentences(std::string_view article) {
    auto u = text::to_u32(article);
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        if (u[i] != U'.' && u[i] != U'?' && u[i] != U'!') continue;
        std::size_t j = i + 1;
        if (j >= u.size() || !text::is_space(u[j])) continue;
        while (j < u.size() && text::is_space(u[j])) ++j;
        if (j < u.size() && (u_isupper(static_cast<UChar32>(u[j])) || u_isdigit(static_cast<UChar32>(u[j])))) {
            auto s = text::collapse_whitespace(text::to_utf8(std::u32string_view(u).substr(start, i + 1 - start)));
            if (!s.empty()) out.push_back(std::move(s));
            start = j;
            i = j - 1;
        }
    }
    auto tail = text::collapse_whitespace(text::to_utf8(std::u32string_view(u).substr(std::min(start, u.size()))));
    if (!tail.empty()) out.push_back(std::move(tail));
    return out;
}

inline bool mentions(std::string_view haystack, std::string_view entity) {
    return text::contains_normalized(haystack, entity);
}

/// Groups of at most two consecutive sentences, keeping only groups that name the entity.
inline std::vector<std::string> split_article(std::string_view article, std::string_view entity) {
    auto sentences = split_sentences(article);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < sentences.size(); i += 2) {
        std::string split = sentences[i];
        if (i + 1 < sentences.size()) split += " " + sentences[i + 1];
        if (mentions(split, entity)) out.push_back(std::move(split));
    }
    return out;
}

enum class FilterVerdict { Keep, WordLimit, AnswerContainsEntity, QuestionLacksEntity };

inline std::string to_string(FilterVerdict v) {
    switch (v) {
        case FilterVerdict::Keep: return "keep";
        case FilterVerdict::WordLimit: return "word-limit";
        case FilterVerdict::AnswerContainsEntity: return "answer-contains-entity";
        case FilterVerdict::QuestionLacksEntity: return "question-lacks-entity";
    }
    return "?";
}

inline std::size_t word_count(std::string_view s) { return text::split_whitespace(text::normalize(s)).size(); }

/// Rule-based filters in order; returns the first failing rule.
inline FilterVerdict filter_qa(const QaPair& pair, std::string_view entity) {
    if (word_count(pair.answer) > kMaxAnswerWords) return FilterVerdict::WordLimit;
    if (mentions(pair.answer, entity)) return FilterVerdict::AnswerContainsEntity;
    if (!mentions(pair.question, entity)) return FilterVerdict::QuestionLacksEntity;
    return FilterVerdict::Keep;
}

namespace detail {

inline bool is_word_char(char32_t c) { return u_isalnum(static_cast<UChar32>(c)) || c == U'_'; }

/// Case-insensitive, word-bounded occurrences of needle as [begin, end) code-point spans.
inline std::vector<std::pair<std::size_t, std::size_t>> find_mentions(const std::u32string& folded_text,
                                                                      const std::u32string& folded_needle) {
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    if (folded_needle.empty()) return spans;
    std::size_t pos = 0;
    while ((pos = folded_text.find(folded_needle, pos)) != std::u32string::npos) {
        const auto end = pos + folded_needle.size();
        const bool left_ok = pos == 0 || !is_word_char(folded_text[pos - 1]) || !is_word_char(folded_needle.front());
        const bool right_ok =
            end == folded_text.size() || !is_word_char(folded_text[end]) || !is_word_char(folded_needle.back());
        if (left_ok && right_ok) {
            spans.emplace_back(pos, end);
            pos = end;
        } else {
            ++pos;
        }
    }
    return spans;
}

}  // namespace detail

/// Replaces every mention of the entity (with a directly preceding article)
/// by "the <category noun> in the image".
inline std::string make_visual_reference(std::string_view textual_question, std::string_view entity,
                                         std::string_view category_noun = "object") {
    const auto original = text::to_u32(textual_question);
    const auto folded = text::fold_simple(original);
    const auto needle = text::fold_simple(text::to_u32(text::trim(entity)));
    auto spans = detail::find_mentions(folded, needle);
    if (spans.empty())
        throw PreconditionError("entity '" + std::string(entity) + "' not found in question '" +
                                std::string(textual_question) + "'");

    const std::u32string replacement = text::to_u32("the " + std::string(category_noun) + " in the image");
    std::u32string out;
    std::size_t cursor = 0;
    for (auto [begin, end] : spans) {
        std::size_t start = begin;
        for (std::u32string_view article : {U"the ", U"a ", U"an "}) {
            if (begin >= cursor + article.size() &&
                std::u32string_view(folded).substr(begin - article.size(), article.size()) == article &&
                (begin - article.size() == 0 || !detail::is_word_char(folded[begin - article.size() - 1]))) {
                start = begin - article.size();
                break;
            }
        }
        out.append(original, cursor, start - cursor);
        out += replacement;
        cursor = end;
    }
    out.append(original, cursor, std::u32string::npos);

    if (!detail::find_mentions(text::fold_simple(out), needle).empty())
        throw DataError("visual reference for '" + std::string(entity) + "' still names the entity");
    return text::to_utf8(out);
}

/// Invariant violations of an emitted datapoint. MNIST arithmetic items are
/// exempt from the entity-exclusion rules: the entity is a digit and digits
/// legitimately recur in operands and results.
inline std::vector<std::string> check_datapoint(const QADatapoint& dp) {
    std::vector<std::string> v;
    if (text::normalize(dp.answer).empty()) v.push_back("empty answer");
    if (word_count(dp.answer) > kMaxAnswerWords) v.push_back("answer longer than 7 words");
    if (!mentions(dp.textual_question, dp.entity)) v.push_back("textual question does not name the entity");
    if (dp.source != Source::MnistArithmetic) {
        if (mentions(dp.visual_question, dp.entity)) v.push_back("visual question names the entity");
        if (mentions(dp.answer, dp.entity)) v.push_back("answer contains the entity");
    }
    return v;
}

// ---------------------------------------------------------------------------
// MNIST arithmetic

struct ArithmeticItem {
    int digit = 0;
    char op = '+';  // '+' or '*'
    int operand = 0;
    long answer = 0;
};

inline std::string op_symbol(char op) { return op == '+' ? "+" : "×"; }

inline ArithmeticItem draw_arithmetic(int digit, std::uint64_t seed) {
    if (digit < 0 || digit > 9) throw PreconditionError("MNIST digit must be in 0..9");
    std::mt19937_64 rng(seed);
    ArithmeticItem item;
    item.digit = digit;
    item.op = std::uniform_int_distribution<int>(0, 1)(rng) == 0 ? '+' : '*';
    item.operand = std::uniform_int_distribution<int>(0, 99)(rng);
    item.answer = item.op == '+' ? digit + item.operand : static_cast<long>(digit) * item.operand;
    return item;
}

/// Addition or multiplication question with one operand of at most two digits.
inline QADatapoint gen_mnist_arithmetic(int digit, std::uint64_t seed) {
    const auto item = draw_arithmetic(digit, seed);
    QADatapoint dp;
    dp.id = "mnist-" + std::to_string(digit) + "-" + std::to_string(seed);
    dp.entity = std::to_string(digit);
    dp.textual_question = dp.entity + " " + op_symbol(item.op) + " " + std::to_string(item.operand) + " =";
    dp.visual_question = "the digit in the image " + op_symbol(item.op) + " " + std::to_string(item.operand) + " =";
    dp.answer = std::to_string(item.answer);
    dp.source = Source::MnistArithmetic;
    dp.filter_log.push_back({"generated", true});
    return dp;
}

/// Per-item seed for the i-th item of a batch (splitmix64 of seed + i).
inline std::uint64_t item_seed(std::uint64_t seed, std::uint64_t i) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (i + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// `count` items cycling through digits 0..9.
inline std::vector<QADatapoint> mnist_batch(std::size_t count, std::uint64_t seed) {
    std::vector<QADatapoint> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto dp = gen_mnist_arithmetic(static_cast<int>(i % 10), item_seed(seed, i));
        dp.id = "mnist-" + std::to_string(i);
        out.push_back(std::move(dp));
    }
    return out;
}

// ---------------------------------------------------------------------------
// MCQA

inline char option_letter(int i) { return static_cast<char>('A' + i); }

/// Four shuffled options, exactly one correct.
inline McqaDatapoint to_mcqa(const QaPair& pair, const std::array<std::string, 3>& distractors, std::uint64_t seed) {
    std::vector<std::string> options{pair.answer, distractors[0], distractors[1], distractors[2]};
    for (std::size_t i = 0; i < options.size(); ++i) {
        if (text::normalize(options[i]).empty()) throw PreconditionError("MCQA option " + std::to_string(i) + " is empty");
        for (std::size_t j = 0; j < i; ++j)
            if (text::normalize(options[i]) == text::normalize(options[j]))
                throw PreconditionError("duplicate MCQA option '" + options[i] + "'");
    }
    std::array<int, 4> order{0, 1, 2, 3};
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    McqaDatapoint m;
    m.question = pair.question;
    for (int i = 0; i < 4; ++i) {
        m.options[i] = options[order[i]];
        if (order[i] == 0) m.correct_index = i;
    }
    return m;
}

inline std::string format_mcqa(const McqaDatapoint& m) {
    std::string s = m.question;
    for (int i = 0; i < 4; ++i) s += "\n" + std::string(1, option_letter(i)) + ". " + m.options[i];
    return s;
}

/// Parses "Incorrect Option k: ..." lines from an MCQA-distractor completion.
inline std::array<std::string, 3> parse_distractors(std::string_view response) {
    std::array<std::string, 3> out;
    std::array<bool, 3> seen{};
    std::istringstream in{std::string(response)};
    for (std::string line; std::getline(in, line);) {
        auto t = text::trim(line);
        for (int k = 0; k < 3; ++k) {
            auto key = "Incorrect Option " + std::to_string(k + 1) + ":";
            if (t.rfind(key, 0) == 0) {
                out[k] = text::trim(std::string_view(t).substr(key.size()));
                seen[k] = true;
            }
        }
    }
    if (!seen[0] || !seen[1] || !seen[2]) throw ClientError("MCQA completion lacks three incorrect options");
    return out;
}

// ---------------------------------------------------------------------------
// Trivial images and the VLM filter

/// Mode of the outputs after normalization; ties are broken uniformly at random.
/// Returns the first original spelling of the winning output.
inline std::string majority_vote(std::span<const std::string> outputs, std::mt19937_64& rng) {
    if (outputs.size() != kTrivialImages.size())
        throw PreconditionError("majority vote expects one output per trivial image (4)");
    std::vector<std::string> keys;
    std::vector<int> counts;
    std::vector<std::size_t> first;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        auto key = text::normalize(outputs[i]);
        auto it = std::find(keys.begin(), keys.end(), key);
        if (it == keys.end()) {
            keys.push_back(key);
            counts.push_back(1);
            first.push_back(i);
        } else {
            ++counts[static_cast<std::size_t>(it - keys.begin())];
        }
    }
    const int best = *std::max_element(counts.begin(), counts.end());
    std::vector<std::size_t> tied;
    for (std::size_t k = 0; k < keys.size(); ++k)
        if (counts[k] == best) tied.push_back(k);
    const auto pick = tied.size() == 1 ? tied[0] : tied[std::uniform_int_distribution<std::size_t>(0, tied.size() - 1)(rng)];
    return outputs[first[pick]];
}

enum class VlmVerdict { Keep, RejectIdentification, RejectKnowledge, RejectLanguagePrior, Unresolved };

inline std::string to_string(VlmVerdict v) {
    switch (v) {
        case VlmVerdict::Keep: return "keep";
        case VlmVerdict::RejectIdentification: return "identification";
        case VlmVerdict::RejectKnowledge: return "knowledge";
        case VlmVerdict::RejectLanguagePrior: return "language-prior";
        case VlmVerdict::Unresolved: return "unresolved";
    }
    return "?";
}

struct VlmFilterOutcome {
    VlmVerdict verdict = VlmVerdict::Unresolved;
    std::string detail;
    std::optional<std::string> trivial_answer;
};

namespace detail {

template <typename Fn>
std::optional<std::string> with_retries(Fn&& call, int attempts, std::string& last_error) {
    for (int a = 0; a < attempts; ++a) {
        try {
            return call();
        } catch (const ClientError& e) {
            last_error = e.what();
        }
    }
    return std::nullopt;
}

}  // namespace detail

/// Keep iff the VLM identifies the entity, answers the textual-reference
/// question with the entity image, and its trivial-image majority answer to
/// the visual-reference question is wrong.
inline VlmFilterOutcome vlm_filter_protocol(const QADatapoint& dp, VlmClient& vlm, std::uint64_t seed,
                                            int attempts = kClientAttempts) {
    std::string err;
    auto unresolved = [&](const char* stage) {
        return VlmFilterOutcome{VlmVerdict::Unresolved, std::string(stage) + ": " + err, std::nullopt};
    };

    auto id = detail::with_retries([&] { return vlm.identify(dp.image_id); }, attempts, err);
    if (!id) return unresolved("identification");
    if (!metrics::two_way_inclusion(*id, dp.entity))
        return {VlmVerdict::RejectIdentification, "identified as '" + *id + "'", std::nullopt};

    auto full = detail::with_retries([&] { return vlm.answer(ImageRef{dp.image_id}, dp.textual_question); }, attempts, err);
    if (!full) return unresolved("full-info answer");
    if (!metrics::two_way_inclusion(*full, dp.answer))
        return {VlmVerdict::RejectKnowledge, "full-info answer '" + *full + "'", std::nullopt};

    std::vector<std::string> outputs;
    for (auto kind : kTrivialImages) {
        auto out = detail::with_retries([&] { return vlm.answer(ImageRef{kind}, dp.visual_question); }, attempts, err);
        if (!out) return unresolved("trivial-image answer");
        outputs.push_back(std::move(*out));
    }
    std::mt19937_64 rng(seed);
    auto vote = majority_vote(outputs, rng);
    if (metrics::two_way_inclusion(vote, dp.answer))
        return {VlmVerdict::RejectLanguagePrior, "trivial-image answer '" + vote + "'", vote};
    return {VlmVerdict::Keep, "", vote};
}

// ---------------------------------------------------------------------------
// LM-backed steps

struct QaCandidate {
    std::string entity;
    std::string question;
    std::string answer;
    std::string context;  // the article split the pair came from
    Source source = Source::WikiExtract;
    std::vector<FilterStep> log;
};

inline std::string completion_body(std::string_view response) {
    auto stop = response.find("[STOP]");
    return std::string(response.substr(0, stop));
}

/// Question/answer pairs from a QA-extraction completion (blocks split by [SEP]).
inline std::vector<QaPair> parse_qa_pairs(std::string_view response) {
    auto body = completion_body(response);
    std::vector<QaPair> out;
    std::size_t pos = 0;
    while (pos <= body.size()) {
        auto sep = body.find("[SEP]", pos);
        auto block = body.substr(pos, sep == std::string::npos ? std::string::npos : sep - pos);
        auto q = block.find("Question:");
        auto a = block.find("Answer:", q == std::string::npos ? 0 : q);
        if (q != std::string::npos && a != std::string::npos) {
            auto question = text::collapse_whitespace(block.substr(q + 9, a - q - 9));
            auto rest = block.substr(a + 7);
            auto answer = text::trim(rest.substr(0, rest.find('\n')));
            if (!question.empty() && !answer.empty()) out.push_back({question, answer});
        }
        if (sep == std::string::npos) break;
        pos = sep + 5;
    }
    return out;
}

/// First judgment word after "Judgment:" (or anywhere, failing that).
inline std::optional<std::string> parse_judgment(std::string_view response) {
    auto body = completion_body(response);
    auto at = body.find("Judgment:");
    std::string_view scan = at == std::string::npos ? std::string_view(body) : std::string_view(body).substr(at + 9);
    for (const char* word : {"Duplicate", "Unique", "Multiple"}) {
        auto p = scan.find(word);
        if (p != std::string_view::npos && text::trim(scan.substr(0, p)).empty()) return std::string(word);
    }
    std::optional<std::string> best;
    std::size_t best_pos = std::string_view::npos;
    for (const char* word : {"Duplicate", "Unique", "Multiple"}) {
        auto p = scan.find(word);
        if (p < best_pos) {
            best_pos = p;
            best = word;
        }
    }
    return best;
}

inline std::string parse_short_answer(std::string_view response) {
    auto body = text::trim(completion_body(response));
    if (body.rfind("Answer:", 0) == 0) body = text::trim(std::string_view(body).substr(7));
    return text::trim(std::string_view(body).substr(0, body.find('\n')));
}

struct DedupResult {
    std::vector<QaCandidate> kept;
    std::vector<std::string> warnings;
    std::vector<std::pair<QaCandidate, std::string>> removed;  // candidate, reason
};

/// Exact (normalized) dedup, then LM-judged dedup within each entity's pairs.
/// The first pair of each duplicate set survives. An LM failure falls back to
/// the exact-match result.
inline DedupResult dedup(const std::vector<QaCandidate>& pairs, LmClient* lm, const PromptTemplates* prompts) {
    DedupResult exact;
    std::vector<std::string> seen;
    for (const auto& p : pairs) {
        auto key = text::normalize(p.entity) + '\x1f' + text::normalize(p.question) + '\x1f' + text::normalize(p.answer);
        if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
            exact.removed.push_back({p, "exact-duplicate"});
            continue;
        }
        seen.push_back(std::move(key));
        exact.kept.push_back(p);
        exact.kept.back().log.push_back({"exact-dedup", true});
    }
    if (!lm || !prompts) return exact;

    DedupResult judged;
    judged.removed = exact.removed;
    try {
        for (const auto& cand : exact.kept) {
            bool duplicate = false;
            for (const auto& kept : judged.kept) {
                if (text::normalize(kept.entity) != text::normalize(cand.entity)) continue;
                auto prompt = fill(prompts->duplicate, {{"<GENERATED Q1>", kept.question},
                                                        {"<GENERATED A1>", kept.answer},
                                                        {"<GENERATED Q2>", cand.question},
                                                        {"<GENERATED A2>", cand.answer}});
                auto judgment = parse_judgment(lm->complete("duplicate", prompt));
                if (!judgment) throw ClientError("unparseable duplicate judgment");
                if (*judgment == "Duplicate") {
                    duplicate = true;
                    break;
                }
            }
            if (duplicate) {
                judged.removed.push_back({cand, "lm-duplicate"});
            } else {
                judged.kept.push_back(cand);
                judged.kept.back().log.push_back({"lm-dedup", true});
            }
        }
    } catch (const ClientError& e) {
        exact.warnings.push_back(std::string("LM deduplication failed, using exact-match only: ") + e.what());
        return exact;
    }
    return judged;
}

// ---------------------------------------------------------------------------
// Pipeline

struct Article {
    std::string entity;
    std::string text;
};

struct AuditRow {
    std::string entity;
    std::string question;
    std::string answer;
    std::string rule;
    bool passed = false;
    std::string detail;
};

struct BuildConfig {
    std::string category_noun = "object";
    std::uint64_t seed = 20240917;
    std::size_t images_per_pair = 5;
};

struct BuildResult {
    std::vector<QADatapoint> datapoints;
    std::vector<AuditRow> audit;
    std::vector<std::string> warnings;
};

inline std::vector<Article> articles_from_jsonl(std::string_view text) {
    std::vector<Article> out;
    std::istringstream in{std::string(text)};
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            out.push_back({j.at("entity").get<std::string>(), j.at("text").get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("article dump line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline std::vector<std::string> entities_from_text(std::string_view text) {
    std::vector<std::string> out;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
        auto t = text::trim(line);
        if (!t.empty() && t[0] != '#') out.push_back(std::move(t));
    }
    return out;
}

/// Extraction, rule filters, LM ambiguity and answerability checks, dedup,
/// visual rewriting and image pairing, in stable input order.
/// `images` maps an entity to its candidate image ids; without an entry the
/// datapoint keeps an empty image id for the extractor to fill.
inline BuildResult build_dataset(const std::vector<std::string>& entities, const std::vector<Article>& articles,
                                 LmClient& lm, const PromptTemplates& prompts, const BuildConfig& config = {},
                                 const std::map<std::string, std::vector<std::string>>& images = {}) {
    BuildResult result;
    auto audit = [&](const QaCandidate& c, std::string rule, bool passed, std::string detail = {}) {
        result.audit.push_back({c.entity, c.question, c.answer, std::move(rule), passed, std::move(detail)});
    };

    std::vector<QaCandidate> candidates;
    for (const auto& entity : entities) {
        auto art = std::find_if(articles.begin(), articles.end(), [&](const Article& a) { return a.entity == entity; });
        if (art == articles.end()) {
            result.warnings.push_back("no article for entity '" + entity + "'");
            continue;
        }
        for (const auto& split : split_article(art->text, entity)) {
            std::vector<QaPair> pairs;
            try {
                pairs = parse_qa_pairs(lm.complete(
                    "qa_extraction",
                    fill(prompts.qa_extraction, {{"<NEW ENTITY>", entity}, {"<SPLIT FROM WIKIPEDIA>", split}})));
            } catch (const ClientError& e) {
                result.warnings.push_back("QA extraction failed for '" + entity + "': " + e.what());
                continue;
            }
            for (auto& pair : pairs) {
                QaCandidate c{entity, pair.question, pair.answer, split, Source::WikiExtract, {}};
                auto verdict = filter_qa(pair, entity);
                for (auto rule : {FilterVerdict::WordLimit, FilterVerdict::AnswerContainsEntity,
                                  FilterVerdict::QuestionLacksEntity}) {
                    const bool failed = verdict == rule;
                    c.log.push_back({to_string(rule), !failed});
                    audit(c, to_string(rule), !failed);
                    if (failed) break;
                }
                if (verdict != FilterVerdict::Keep) continue;

                try {
                    auto judgment = parse_judgment(lm.complete(
                        "ambiguity",
                        fill(prompts.ambiguity, {{"<SPLIT FROM WIKIPEDIA>", split}, {"<GENERATED QUESTION>", c.question}})));
                    const bool unique = judgment && *judgment == "Unique";
                    c.log.push_back({"unique-answer", unique});
                    audit(c, "unique-answer", unique, judgment.value_or("unparseable"));
                    if (!unique) continue;

                    auto reply = parse_short_answer(lm.complete(
                        "question_answering", fill(prompts.question_answering, {{"<GENERATED QUESTION>", c.question}})));
                    const bool correct = metrics::two_way_inclusion(reply, c.answer);
                    c.log.push_back({"lm-answers-correctly", correct});
                    audit(c, "lm-answers-correctly", correct, reply);
                    if (!correct) continue;
                } catch (const ClientError& e) {
                    audit(c, "lm-call", false, e.what());
                    continue;
                }
                candidates.push_back(std::move(c));
            }
        }
    }

    auto deduped = dedup(candidates, &lm, &prompts);
    result.warnings.insert(result.warnings.end(), deduped.warnings.begin(), deduped.warnings.end());
    for (const auto& [c, reason] : deduped.removed) audit(c, "dedup", false, reason);

    std::mt19937_64 rng(config.seed);
    std::map<std::string, int> per_entity;
    for (auto& c : deduped.kept) {
        audit(c, "dedup", true);
        QADatapoint dp;
        dp.entity = c.entity;
        dp.textual_question = c.question;
        dp.answer = c.answer;
        dp.source = c.source;
        try {
            dp.visual_question = make_visual_reference(c.question, c.entity, config.category_noun);
        } catch (const Error& e) {
            audit(c, "visual-rewrite", false, e.what());
            continue;
        }
        c.log.push_back({"visual-rewrite", true});
        dp.filter_log = c.log;
        if (auto bad = check_datapoint(dp); !bad.empty()) {
            audit(c, "invariants", false, bad.front());
            continue;
        }
        audit(c, "visual-rewrite", true);

        std::vector<std::string> chosen{""};
        if (auto it = images.find(c.entity); it != images.end() && !it->second.empty()) {
            chosen = it->second;
            std::shuffle(chosen.begin(), chosen.end(), rng);
            if (chosen.size() > config.images_per_pair) chosen.resize(config.images_per_pair);
        }
        const int pair_index = per_entity[c.entity]++;
        for (std::size_t k = 0; k < chosen.size(); ++k) {
            QADatapoint out = dp;
            out.image_id = chosen[k];
            out.id = text::normalize(c.entity) + "-q" + std::to_string(pair_index) + "-i" + std::to_string(k);
            std::replace(out.id.begin(), out.id.end(), ' ', '_');
            result.datapoints.push_back(std::move(out));
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const QADatapoint& dp) {
    nlohmann::json log = nlohmann::json::array();
    for (const auto& s : dp.filter_log) log.push_back({{"rule", s.rule}, {"passed", s.passed}});
    return {{"id", dp.id},
            {"entity", dp.entity},
            {"image_id", dp.image_id},
            {"textual_question", dp.textual_question},
            {"visual_question", dp.visual_question},
            {"answer", dp.answer},
            {"source", to_string(dp.source)},
            {"filter_log", log}};
}

inline QADatapoint datapoint_from_json(const nlohmann::json& j) {
    QADatapoint dp;
    try {
        dp.id = j.value("id", "");
        dp.entity = j.at("entity").get<std::string>();
        dp.image_id = j.value("image_id", "");
        dp.textual_question = j.at("textual_question").get<std::string>();
        dp.visual_question = j.at("visual_question").get<std::string>();
        dp.answer = j.at("answer").get<std::string>();
        dp.source = source_from_string(j.value("source", "WikiExtract"));
        for (const auto& s : j.value("filter_log", nlohmann::json::array()))
            dp.filter_log.push_back({s.at("rule").get<std::string>(), s.at("passed").get<bool>()});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed datapoint: ") + e.what());
    }
    return dp;
}

inline std::string datapoints_to_jsonl(std::span<const QADatapoint> dps) {
    std::string out;
    for (const auto& dp : dps) out += to_json(dp).dump() + "\n";
    return out;
}

inline std::vector<QADatapoint> datapoints_from_jsonl(std::string_view text) {
    std::vector<QADatapoint> out;
    std::istringstream in{std::string(text)};
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        try {
            out.push_back(datapoint_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("dataset line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline std::string audit_to_csv(std::span<const AuditRow> rows) {
    std::ostringstream out;
    csv::write_row(out, {"entity", "question", "answer", "rule", "outcome", "detail"});
    for (const auto& r : rows)
        csv::write_row(out, {r.entity, r.question, r.answer, r.rule, r.passed ? "pass" : "fail", r.detail});
    return out.str();
}

}  // namespace groundprobe::bench
