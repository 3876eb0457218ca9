#pragma once

// Scripted LM stand-in, fuzzed article corpus and a plain invariant check for
// the benchmark pipeline.

#include <cctype>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "groundprobe/bench_builder.hpp"

namespace gp_fakes {

using namespace groundprobe;
namespace b = groundprobe::bench;

// Text between a marker line and the next newline inside a filled prompt.
inline std::string after_last(const std::string& prompt, const std::string& marker) {
    auto p = prompt.rfind(marker);
    if (p == std::string::npos) return {};
    auto rest = prompt.substr(p + marker.size());
    return text::trim(rest.substr(0, rest.find('\n')));
}

// Deterministic LM stand-in whose answers depend only on the prompt text.
class ScriptedLm : public b::LmClient {
public:
    explicit ScriptedLm(std::uint64_t salt) : salt_(salt) {}
    int calls = 0;

    std::string complete(const std::string& template_id, const std::string& prompt) override {
        ++calls;
        std::mt19937_64 rng(std::hash<std::string>{}(template_id + prompt) ^ salt_);
        if (template_id == "qa_extraction") return extraction(after_last(prompt, "Entity: "), rng);
        if (template_id == "ambiguity") return rng() % 4 ? "Rationale: fine.\nJudgment: Unique [STOP]" : "Judgment: Multiple [STOP]";
        if (template_id == "question_answering") {
            auto q = after_last(prompt, "Question: ");
            auto it = answers_.find(q);
            if (it != answers_.end() && rng() % 5) return it->second + " [STOP]";
            return "no idea [STOP]";
        }
        if (template_id == "duplicate") return rng() % 6 ? "Judgment: Unique [STOP]" : "Judgment: Duplicate [STOP]";
        throw ClientError("unexpected template " + template_id);
    }

private:
    std::string extraction(const std::string& entity, std::mt19937_64& rng) {
        static const std::vector<std::string> words{"river", "order", "colour", "Europe", "pastry", "doctor", "fish",
                                                    "the",   "of",    "name",   "kind",   "lake",   "city",   "honey"};
        auto phrase = [&](std::size_t n) {
            std::string s;
            for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + words[rng() % words.size()];
            return s;
        };
        std::string out;
        const int pairs = 1 + static_cast<int>(rng() % 4);
        for (int k = 0; k < pairs; ++k) {
            std::string q, a;
            switch (rng() % 5) {
                case 0: q = "What is the " + phrase(2) + " of " + phrase(1) + "?"; break;       // lacks entity
                case 1: q = "Which " + phrase(1) + " does the " + entity + " prefer?"; break;
                case 2: q = "Is " + entity + " related to " + entity + "s or " + phrase(1) + "?"; break;
                default: q = "What " + phrase(1) + " is " + (rng() % 2 ? "the " : "an ") + entity + " " + phrase(1) + "?";
            }
            switch (rng() % 4) {
                case 0: a = phrase(3 + rng() % 8); break;         // sometimes too long
                case 1: a = "a " + entity + " " + phrase(1); break;  // names the entity
                default: a = phrase(1 + rng() % 3);
            }
            if (rng() % 7 == 0 && k > 0) {
                q = last_q_;
                a = last_a_;
            }
            last_q_ = q;
            last_a_ = a;
            answers_[q] = a;
            out += "Rationale: r.\nQuestion: " + q + "\nAnswer: " + a + "\n" + (k + 1 < pairs ? "[SEP]\n" : "");
        }
        return out + "[STOP]";
    }

    std::uint64_t salt_;
    std::map<std::string, std::string> answers_;
    std::string last_q_, last_a_;
};

// Invariant check written against the plain definitions.
inline bool oracle_ok(const b::QADatapoint& dp) {
    auto lower = [](std::string s) {
        for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return s;
    };
    const auto e = lower(dp.entity);
    const std::size_t words = text::split_whitespace(dp.answer).size();
    return words >= 1 && words <= 7 && lower(dp.textual_question).find(e) != std::string::npos &&
           lower(dp.visual_question).find(e) == std::string::npos && lower(dp.answer).find(e) == std::string::npos;
}

inline std::vector<b::Article> fuzz_articles(const std::vector<std::string>& entities, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    static const std::vector<std::string> filler{"It lives in lakes.", "Some say otherwise!", "Records date to 1850.",
                                                 "Is it common? Yes.", "Many variants exist."};
    std::vector<b::Article> out;
    for (const auto& e : entities) {
        std::string text;
        const int sentences = 2 + static_cast<int>(rng() % 7);
        for (int s = 0; s < sentences; ++s) {
            if (rng() % 2) text += "The " + e + " is notable for reason " + std::to_string(s) + ". ";
            else text += filler[rng() % filler.size()] + " ";
        }
        out.push_back({e, text});
    }
    return out;
}

}  // namespace gp_fakes
