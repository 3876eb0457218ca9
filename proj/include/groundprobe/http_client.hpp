#pragma once

// LM client for an OpenAI-compatible completions server over plain HTTP.
// Requires cpp-httplib (httplib.h) on the include path.

#include <string>
#include <utility>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "groundprobe/bench_builder.hpp"

namespace groundprobe::bench {

struct HttpLmConfig {
    std::string base_url;  // e.g. http://localhost:8000
    std::string model;
    int max_tokens = 256;
    int timeout_seconds = 120;
};

/// Greedy completions via POST /v1/completions.
class HttpLmClient : public LmClient {
public:
    explicit HttpLmClient(HttpLmConfig cfg) : cfg_(std::move(cfg)), http_(cfg_.base_url) {
        http_.set_read_timeout(cfg_.timeout_seconds, 0);
        http_.set_connection_timeout(cfg_.timeout_seconds, 0);
    }

    std::string complete(const std::string& template_id, const std::string& prompt) override {
        nlohmann::json body{{"model", cfg_.model},
                            {"prompt", prompt},
                            {"max_tokens", cfg_.max_tokens},
                            {"temperature", 0},
                            {"stop", {"[STOP]"}}};
        auto res = http_.Post("/v1/completions", body.dump(), "application/json");
        if (!res) throw ClientError(template_id + ": " + httplib::to_string(res.error()));
        if (res->status != 200) throw ClientError(template_id + ": HTTP " + std::to_string(res->status));
        try {
            return nlohmann::json::parse(res->body).at("choices").at(0).at("text").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ClientError(template_id + ": malformed completion response: " + e.what());
        }
    }

private:
    HttpLmConfig cfg_;
    httplib::Client http_;
};

}  // namespace groundprobe::bench
