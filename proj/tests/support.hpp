#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "groundprobe/trace_store.hpp"

namespace gp_test {

namespace fs = std::filesystem;
using namespace groundprobe;

/// Fresh scratch directory per test, removed afterwards.
class TempDir {
public:
    TempDir() {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        std::string name = info ? std::string(info->test_suite_name()) + "_" + info->name() : "groundprobe";
        for (auto& c : name)
            if (c == '/') c = '_';
        path_ = fs::temp_directory_path() / ("gp_" + name + "_" + std::to_string(::getpid()));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

/// Random structurally valid trace.
inline trace::TraceSet random_trace(std::uint32_t layers, std::uint32_t d, std::uint32_t vocab, std::size_t n,
                                    std::uint64_t seed, trace::Setting setting = trace::Setting::Visual) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal;
    std::uniform_int_distribution<std::uint32_t> token(0, vocab - 1);
    std::uniform_int_distribution<int> steps(1, 4);
    trace::TraceSet set;
    set.header = {"test-model", setting, layers, d, vocab, n, trace::kFormatVersion};
    for (std::size_t i = 0; i < n; ++i) {
        trace::TraceRecord r;
        r.datapoint_id = "dp-" + std::to_string(i);
        r.hidden_states.assign(layers, std::vector<float>(d));
        for (auto& h : r.hidden_states)
            for (auto& v : h) v = normal(rng);
        const int t = steps(rng);
        for (int s = 0; s < t; ++s) {
            std::vector<float> logits(vocab);
            for (auto& v : logits) v = normal(rng);
            r.step_logits.push_back(std::move(logits));
            r.generated_token_ids.push_back(token(rng));
        }
        if (i % 3 != 2) r.correctness_label = (i % 2) == 0;
        set.records.push_back(std::move(r));
    }
    return set;
}

}  // namespace gp_test
