#pragma once

// Command-line front end. run() is callable in-process so the CLI can be
// tested against the library directly. Requires CLI11 on the include path.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "groundprobe/answer_metrics.hpp"
#include "groundprobe/bench_builder.hpp"
#include "groundprobe/error.hpp"
#include "groundprobe/failure_probe.hpp"
#include "groundprobe/http_client.hpp"
#include "groundprobe/lens_analysis.hpp"
#include "groundprobe/parallel.hpp"
#include "groundprobe/selective_prediction.hpp"
#include "groundprobe/synth.hpp"
#include "groundprobe/trace_store.hpp"

#ifndef GROUNDPROBE_PROMPTS_DIR
#define GROUNDPROBE_PROMPTS_DIR "prompts"
#endif

namespace groundprobe::cli {

inline constexpr std::uint64_t kDefaultSeed = 20240917;
inline constexpr const char* kSeedEnv = "GROUNDPROBE_SEED";

enum ExitCode : int { kOk = 0, kDataError = 1, kUsageError = 2 };

/// Options shared by every subcommand.
struct RunConfig {
    std::string subcommand;
    std::vector<std::string> inputs;
    std::uint64_t seed = kDefaultSeed;
    std::uint32_t layer = probe::kDefaultLayer;
    double threshold = 0.5;
    std::string out_dir = ".";
    unsigned threads = default_threads();
    std::string format = "csv";
};

/// Seed from the environment when set, else the documented constant.
inline std::uint64_t default_seed() {
    if (const char* env = std::getenv(kSeedEnv); env && *env) {
        try {
            std::size_t used = 0;
            auto v = std::stoull(env, &used, 0);
            if (used == std::string_view(env).size()) return v;
        } catch (const std::exception&) {
        }
        throw CLI::ValidationError(kSeedEnv, std::string("not an unsigned integer: '") + env + "'");
    }
    return kDefaultSeed;
}

namespace detail {

inline std::filesystem::path output_path(const RunConfig& rc, const std::string& name) {
    std::filesystem::path dir(rc.out_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
    return dir / name;
}

inline void write_text(const RunConfig& rc, const std::string& name, std::string_view data) {
    trace::detail::write_file(output_path(rc, name), data);
}

inline std::string read_text(const std::string& path) { return trace::detail::read_file(path); }

inline nlohmann::json read_json(const std::string& path) {
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

inline std::string ext(const RunConfig& rc) { return rc.format == "json" ? ".json" : ".csv"; }

inline std::string stem(const std::string& path) { return std::filesystem::path(path).stem().string(); }

/// Probe file: the probe plus the perplexity threshold fitted on the same rows.
inline nlohmann::json detectors_to_json(const selective::FittedDetectors& d) {
    auto j = probe::to_json(d.probe);
    j["perplexity_threshold"] = probe::to_json(d.threshold);
    return j;
}

inline selective::FittedDetectors detectors_from_json(const nlohmann::json& j) {
    selective::FittedDetectors d;
    d.probe = probe::probe_from_json(j);
    if (!j.contains("perplexity_threshold")) throw FormatError("probe file lacks perplexity_threshold");
    d.threshold = probe::threshold_from_json(j.at("perplexity_threshold"));
    return d;
}

inline nlohmann::json eval_json(const probe::ClassifierEval& e) {
    return {{"accuracy", e.accuracy}, {"base_rate", e.base_rate}, {"count", e.count}};
}

inline std::string reports_output(const RunConfig& rc, const std::string& dataset,
                                  std::span<const selective::NamedReport> reports) {
    if (rc.format == "json") {
        auto j = selective::reports_to_json(reports, rc.threshold);
        j["dataset"] = dataset;
        return j.dump(2) + "\n";
    }
    return selective::reports_to_csv(reports);
}

// ---------------------------------------------------------------------------

struct GradeArgs {
    std::string input;
    bool case_sensitive = false;
};

inline int cmd_grade(const RunConfig& rc, const GradeArgs& a, std::ostream& out) {
    metrics::NormalizeOptions opts{a.case_sensitive};
    auto rows = metrics::grade_csv(read_text(a.input), opts);
    if (rc.format == "json") {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : rows)
            j.push_back({{"datapoint_id", r.datapoint_id},
                         {"response", r.response},
                         {"answer", r.answer},
                         {"inclusion", r.result.two_way_inclusion},
                         {"exact", r.result.exact_match},
                         {"bleu", r.result.bleu}});
        write_text(rc, "graded.json", j.dump(2) + "\n");
    } else {
        write_text(rc, "graded.csv", metrics::graded_to_csv(rows));
    }
    std::size_t inc = 0, exact = 0;
    for (const auto& r : rows) {
        inc += r.result.two_way_inclusion;
        exact += r.result.exact_match;
    }
    out << "graded " << rows.size() << " rows: inclusion " << inc << ", exact " << exact << "\n";
    return kOk;
}

struct LensArgs {
    std::string trace;
    std::string fullinfo;
    std::string unembedding;
    std::string target = "first";
    std::string gold;
    bool final_norm = false;
};

inline int cmd_lens(const RunConfig& rc, const LensArgs& a, std::ostream& out) {
    if (a.trace.empty() && a.fullinfo.empty()) throw PreconditionError("lens needs --trace/--visual");
    nlohmann::json summary;
    std::optional<trace::TraceSet> visual;
    if (!a.trace.empty()) visual = trace::read_trace(a.trace);

    if (!a.unembedding.empty()) {
        if (!visual) throw PreconditionError("--unembedding needs --trace");
        auto u = trace::read_unembedding(a.unembedding);
        lens::LensOptions opts{a.final_norm};
        std::map<std::string, std::uint32_t> gold;
        auto mode = lens::TargetMode::FirstGenerated;
        if (a.target == "gold") {
            if (a.gold.empty()) throw PreconditionError("--target gold needs --gold <json map id->token>");
            mode = lens::TargetMode::Gold;
            for (const auto& [k, v] : read_json(a.gold).items()) gold[k] = v.get<std::uint32_t>();
        }
        auto bundles = lens::probability_bundles(*visual, u, mode, gold, opts, rc.threads);
        auto agg = lens::aggregate_by_label(bundles);
        write_text(rc, "lens_trajectories.csv", lens::trajectories_to_csv(bundles));
        write_text(rc, "lens_aggregate.csv", lens::aggregate_to_csv(agg));
        write_text(rc, "lens.svg", lens::aggregate_to_svg(agg, "Logit-lens probability of the answer token",
                                                         "probability", 0.0, 1.0));
        auto cs = lens::first_crossing_layer(agg.success_mean);
        auto cf = lens::first_crossing_layer(agg.failure_mean);
        summary["probability"] = {{"success_count", agg.success_count},
                                  {"failure_count", agg.failure_count},
                                  {"success_crossing_layer", cs ? nlohmann::json(*cs) : nlohmann::json(nullptr)},
                                  {"failure_crossing_layer", cf ? nlohmann::json(*cf) : nlohmann::json(nullptr)}};
        out << "probability crossing 0.5: success layer " << (cs ? std::to_string(*cs) : "none") << ", failure layer "
            << (cf ? std::to_string(*cf) : "none") << "\n";
    }
    if (!a.fullinfo.empty()) {
        if (!visual) throw PreconditionError("--fullinfo needs --trace/--visual");
        auto full = trace::read_trace(a.fullinfo);
        auto bundles = lens::cosine_bundles(*visual, full, rc.threads);
        auto agg = lens::aggregate_by_label(bundles);
        write_text(rc, "cosine_trajectories.csv", lens::trajectories_to_csv(bundles));
        write_text(rc, "cosine_aggregate.csv", lens::aggregate_to_csv(agg));
        write_text(rc, "cosine.svg", lens::aggregate_to_svg(agg, "Visual vs full-information hidden states",
                                                           "cosine similarity", -1.0, 1.0));
        summary["cosine"] = {{"success_count", agg.success_count}, {"failure_count", agg.failure_count}};
        out << "cosine trajectories: " << bundles.size() << " pairs\n";
    }
    if (summary.is_null()) throw PreconditionError("lens needs --unembedding and/or --fullinfo");
    write_text(rc, "lens_summary.json", summary.dump(2) + "\n");
    return kOk;
}

struct ProbeArgs {
    std::vector<std::string> traces;
    std::string probe_file;
    double lambda = 1e-2;
    int max_iterations = 5000;
    bool no_standardize = false;
    double holdout = 0.0;
};

inline probe::ProbeConfig probe_config(const RunConfig& rc, const ProbeArgs& a) {
    probe::ProbeConfig c;
    c.lambda = a.lambda;
    c.max_iterations = a.max_iterations;
    c.seed = rc.seed;
    c.standardize = !a.no_standardize;
    return c;
}

inline selective::LabeledSet subset(const selective::LabeledSet& s, std::span<const std::size_t> idx) {
    selective::LabeledSet out;
    out.name = s.name;
    out.inputs.cols = s.inputs.cols;
    for (auto i : idx) {
        ++out.inputs.rows;
        out.inputs.datapoint_ids.push_back(s.inputs.datapoint_ids[i]);
        auto row = s.inputs.row(i);
        out.inputs.features.insert(out.inputs.features.end(), row.begin(), row.end());
        out.inputs.perplexities.push_back(s.inputs.perplexities[i]);
        out.failure.push_back(s.failure[i]);
    }
    return out;
}

inline int cmd_probe_train(const RunConfig& rc, const ProbeArgs& a, std::ostream& out) {
    if (a.traces.empty()) throw PreconditionError("probe train needs --trace");
    if (a.holdout < 0.0 || a.holdout >= 1.0) throw PreconditionError("--holdout must lie in [0, 1)");
    std::vector<selective::LabeledSet> train;
    std::vector<selective::LabeledSet> held;
    for (const auto& path : a.traces) {
        auto set = selective::labeled_set_from_trace(trace::read_trace(path), rc.layer, stem(path));
        if (a.holdout > 0.0) {
            auto split = probe::stratified_split(set.failure, 1.0 - a.holdout, rc.seed);
            train.push_back(subset(set, split.train));
            held.push_back(subset(set, split.test));
        } else {
            train.push_back(std::move(set));
        }
    }
    auto detectors = selective::fit_detectors(train, rc.layer, probe_config(rc, a));
    auto j = detectors_to_json(detectors);
    const auto& meta = detectors.probe.metadata;
    out << "probe at layer " << rc.layer << ": " << meta.iterations << " iterations, loss "
        << csv::format_double(meta.final_loss) << (meta.converged ? "" : " (not converged)") << "\n";
    if (!meta.warning.empty()) out << "warning: " << meta.warning << "\n";
    if (!detectors.threshold.warning.empty()) out << "warning: " << detectors.threshold.warning << "\n";
    if (!held.empty()) {
        nlohmann::json hj = nlohmann::json::array();
        for (const auto& h : held) {
            auto results = selective::evaluate_methods(detectors, h.inputs, h.failure, rc.threshold);
            for (const auto& r : results) {
                hj.push_back({{"dataset", h.name}, {"method", selective::method_name(r.method)},
                              {"heldout", eval_json(r.heldout_eval)}});
                out << h.name << " held-out " << selective::method_name(r.method) << " accuracy "
                    << csv::format_double(r.heldout_eval.accuracy) << "\n";
            }
        }
        j["holdout_evaluation"] = hj;
    }
    write_text(rc, "probe.json", j.dump(2) + "\n");
    return kOk;
}

inline int cmd_probe_eval(const RunConfig& rc, const ProbeArgs& a, std::ostream& out) {
    if (a.probe_file.empty() || a.traces.size() != 1) throw PreconditionError("probe eval needs --probe and one --trace");
    auto detectors = detectors_from_json(read_json(a.probe_file));
    auto set = trace::read_trace(a.traces.front());
    auto inputs = selective::inputs_from_trace(set, detectors.probe.layer);
    auto scores = selective::score(detectors, inputs);

    std::ostringstream csv_out;
    nlohmann::json rows = nlohmann::json::array();
    csv::write_row(csv_out, {"datapoint_id", "probe", "perplexity", "perplexity_score", "ensemble", "label"});
    std::vector<bool> predicted, failure;
    bool labelled = true;
    for (std::size_t i = 0; i < inputs.rows; ++i) {
        const auto& label = set.records[i].correctness_label;
        labelled = labelled && label.has_value();
        csv::write_row(csv_out, {inputs.datapoint_ids[i], csv::format_double(scores.probe[i]),
                                 csv::format_double(inputs.perplexities[i]), csv::format_double(scores.perplexity[i]),
                                 csv::format_double(scores.ensemble[i]), lens::label_name(label)});
        rows.push_back({{"datapoint_id", inputs.datapoint_ids[i]},
                        {"probe", scores.probe[i]},
                        {"perplexity", inputs.perplexities[i]},
                        {"perplexity_score", scores.perplexity[i]},
                        {"ensemble", scores.ensemble[i]},
                        {"label", lens::label_name(label)}});
        predicted.push_back(probe::flags_failure(scores.probe[i]));
        failure.push_back(label && !*label);
    }
    if (rc.format == "json") write_text(rc, "probe_eval.json", rows.dump(2) + "\n");
    else write_text(rc, "probe_eval.csv", csv_out.str());
    if (labelled && inputs.rows > 0) {
        auto e = probe::evaluate_classifier(predicted, failure);
        out << "probe accuracy " << csv::format_double(e.accuracy) << " (failure base rate "
            << csv::format_double(e.base_rate) << ", n=" << e.count << ")\n";
    } else {
        out << "scored " << inputs.rows << " records\n";
    }
    return kOk;
}

struct SelectArgs {
    std::string probe_file;
    std::vector<std::string> train;
    std::string trace;
    std::string name;
    double lambda = 1e-2;
};

inline int cmd_select(const RunConfig& rc, const SelectArgs& a, std::ostream& out) {
    if (a.trace.empty()) throw PreconditionError("select needs --trace (held-out set)");
    if (a.probe_file.empty() == a.train.empty())
        throw PreconditionError("select needs exactly one of --probe or --train");
    const auto name = a.name.empty() ? stem(a.trace) : a.name;

    selective::FittedDetectors detectors;
    std::uint32_t layer = rc.layer;
    if (!a.probe_file.empty()) {
        detectors = detectors_from_json(read_json(a.probe_file));
        layer = detectors.probe.layer;
    } else {
        std::vector<selective::LabeledSet> train;
        for (const auto& path : a.train)
            train.push_back(selective::labeled_set_from_trace(trace::read_trace(path), layer, stem(path)));
        probe::ProbeConfig cfg;
        cfg.lambda = a.lambda;
        cfg.seed = rc.seed;
        detectors = selective::fit_detectors(train, layer, cfg);
        write_text(rc, "probe.json", detectors_to_json(detectors).dump(2) + "\n");
    }

    // Scores come from unlabelled inputs; labels are attached afterwards for grading.
    auto set = trace::read_trace(a.trace);
    auto inputs = selective::inputs_from_trace(set, layer);
    std::vector<bool> failure;
    std::vector<std::string> missing;
    for (const auto& r : set.records) {
        if (!r.correctness_label) missing.push_back(r.datapoint_id);
        failure.push_back(r.correctness_label && !*r.correctness_label);
    }
    if (!missing.empty())
        throw DataError("held-out trace lacks correctness labels for " + std::to_string(missing.size()) +
                        " records (first: '" + missing.front() + "')");

    auto results = selective::evaluate_methods(detectors, inputs, failure, rc.threshold);
    auto scores = selective::score(detectors, inputs);
    std::vector<selective::NamedReport> reports;
    for (const auto& r : results) {
        reports.push_back({selective::method_name(r.method), r.report});
        auto ds = selective::make_decisions(inputs.datapoint_ids, selective::pick(scores, r.method), failure,
                                            rc.threshold);
        write_text(rc, std::string("decisions_") + selective::method_name(r.method) + ".csv",
                   selective::decisions_to_csv(ds));
    }
    write_text(rc, "selective" + ext(rc), reports_output(rc, name, reports));
    std::vector<std::pair<std::string, std::vector<selective::NamedReport>>> table{{name, reports}};
    out << selective::table_summary(table);
    return kOk;
}

struct SynthArgs {
    synth::SynthConfig cfg;
};

inline int cmd_synth(const RunConfig& rc, SynthArgs a, std::ostream& out) {
    a.cfg.seed = rc.seed;
    auto gen = synth::generate(a.cfg);
    trace::write_trace(gen.visual, output_path(rc, "visual.vlt"));
    trace::write_trace(gen.fullinfo, output_path(rc, "fullinfo.vlt"));
    trace::write_unembedding(gen.unembedding, output_path(rc, "unembedding.vlu"));
    std::ostringstream plans;
    csv::write_row(plans, {"datapoint_id", "label", "target_token", "rise_layer"});
    for (const auto& p : gen.plans)
        csv::write_row(plans, {p.datapoint_id, p.success ? "success" : "failure", std::to_string(p.target_token),
                               std::to_string(p.rise_layer)});
    write_text(rc, "plans.csv", plans.str());
    out << "wrote " << gen.visual.records.size() << " records (" << a.cfg.layers << " layers, d=" << a.cfg.hidden_dim
        << ", |V|=" << a.cfg.vocab_size << ") to " << rc.out_dir << "\n";
    return kOk;
}

struct ReportArgs {
    std::vector<std::string> inputs;
};

/// Collects selective.json files into one dataset x method table.
inline int cmd_report(const RunConfig& rc, const ReportArgs& a, std::ostream& out) {
    if (a.inputs.empty()) throw PreconditionError("report needs at least one --input selective.json");
    std::vector<std::pair<std::string, std::vector<selective::NamedReport>>> rows;
    std::ostringstream table;
    csv::write_row(table, {"dataset", "method", "coverage", "risk", "answered", "correct", "total"});
    for (const auto& path : a.inputs) {
        auto j = read_json(path);
        std::vector<selective::NamedReport> reports;
        const auto dataset = j.value("dataset", stem(path));
        try {
            for (const auto& m : j.at("methods")) {
                selective::SelectiveReport r;
                r.answered = m.at("answered").get<std::size_t>();
                r.correct = m.at("correct").get<std::size_t>();
                r.total = m.at("total").get<std::size_t>();
                if (r.total == 0 || r.correct > r.answered || r.answered > r.total)
                    throw DataError(path + ": inconsistent counts");
                r.coverage_centi = selective::percent_centi(r.answered, r.total);
                if (r.answered > 0) r.risk_centi = selective::percent_centi(r.answered - r.correct, r.answered);
                reports.push_back({m.at("method").get<std::string>(), r});
                csv::write_row(table, {dataset, reports.back().method, selective::format_centi(r.coverage_centi),
                                       selective::risk_text(r), std::to_string(r.answered), std::to_string(r.correct),
                                       std::to_string(r.total)});
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ": " + e.what());
        }
        rows.emplace_back(dataset, std::move(reports));
    }
    write_text(rc, "table.csv", table.str());
    auto text = selective::table_summary(rows);
    write_text(rc, "table.txt", text);
    out << text;
    return kOk;
}

struct BenchArgs {
    std::string entities;
    std::string articles;
    std::string transcript;
    std::string lm_url;
    std::string lm_model;
    std::string prompts = GROUNDPROBE_PROMPTS_DIR;
    std::string images;
    std::string category_noun = "object";
    std::size_t count = 1000;
    std::string dataset;
    std::string vlm_transcript;
};

inline int cmd_bench_build(const RunConfig& rc, const BenchArgs& a, std::ostream& out) {
    if (a.entities.empty() || a.articles.empty()) throw PreconditionError("bench build needs --entities and --articles");
    if (a.transcript.empty() == a.lm_url.empty())
        throw PreconditionError("bench build needs exactly one of --transcript (replay) or --lm-url (live)");
    auto prompts = bench::load_prompts(a.prompts);
    auto entities = bench::entities_from_text(read_text(a.entities));
    auto articles = bench::articles_from_jsonl(read_text(a.articles));
    std::map<std::string, std::vector<std::string>> images;
    if (!a.images.empty())
        for (const auto& [k, v] : read_json(a.images).items()) images[k] = v.get<std::vector<std::string>>();
    bench::BuildConfig cfg;
    cfg.category_noun = a.category_noun;
    cfg.seed = rc.seed;

    bench::BuildResult result;
    if (!a.transcript.empty()) {
        auto log = bench::transcript_from_jsonl(read_text(a.transcript));
        bench::ReplayLmClient replay(log);
        result = bench::build_dataset(entities, articles, replay, prompts, cfg, images);
    } else {
        bench::HttpLmClient live({a.lm_url, a.lm_model});
        bench::RecordingLmClient recorder(live);
        result = bench::build_dataset(entities, articles, recorder, prompts, cfg, images);
        write_text(rc, "lm_transcript.jsonl", bench::transcript_to_jsonl(recorder.entries()));
    }
    write_text(rc, "dataset.jsonl", bench::datapoints_to_jsonl(result.datapoints));
    write_text(rc, "audit.csv", bench::audit_to_csv(result.audit));
    for (const auto& w : result.warnings) out << "warning: " << w << "\n";
    out << "emitted " << result.datapoints.size() << " datapoints\n";
    return kOk;
}

inline int cmd_bench_mnist(const RunConfig& rc, const BenchArgs& a, std::ostream& out) {
    auto items = bench::mnist_batch(a.count, rc.seed);
    write_text(rc, "mnist.jsonl", bench::datapoints_to_jsonl(items));
    out << "emitted " << items.size() << " arithmetic datapoints\n";
    return kOk;
}

inline int cmd_bench_vlm_filter(const RunConfig& rc, const BenchArgs& a, std::ostream& out) {
    if (a.dataset.empty() || a.vlm_transcript.empty())
        throw PreconditionError("bench vlm-filter needs --dataset and --vlm-transcript");
    auto dps = bench::datapoints_from_jsonl(read_text(a.dataset));
    auto vlm = bench::ReplayVlmClient::from_jsonl(read_text(a.vlm_transcript));
    std::vector<bench::QADatapoint> kept;
    std::ostringstream audit;
    csv::write_row(audit, {"id", "verdict", "detail"});
    for (std::size_t i = 0; i < dps.size(); ++i) {
        auto outcome = bench::vlm_filter_protocol(dps[i], vlm, bench::item_seed(rc.seed, i));
        csv::write_row(audit, {dps[i].id, to_string(outcome.verdict), outcome.detail});
        if (outcome.verdict == bench::VlmVerdict::Keep) kept.push_back(dps[i]);
    }
    write_text(rc, "filtered.jsonl", bench::datapoints_to_jsonl(kept));
    write_text(rc, "vlm_audit.csv", audit.str());
    out << "kept " << kept.size() << " of " << dps.size() << " datapoints\n";
    return kOk;
}

inline std::string deepest_help(const CLI::App& app) {
    const CLI::App* cur = &app;
    for (;;) {
        auto subs = cur->get_subcommands();
        if (subs.empty()) break;
        cur = subs.front();
    }
    return cur->help();
}

}  // namespace detail

/// Parses argv (argv[0] is the program name) and runs one subcommand.
/// Returns 0 on success, 1 on a data error, 2 on a usage error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Detect visual entity-linking failures from recorded VLM traces", "groundprobe"};
    app.require_subcommand(1, 1);
    app.fallthrough();
    app.set_config("--config", "", "TOML config file (flags take precedence)");

    RunConfig rc;
    try {
        rc.seed = default_seed();
    } catch (const CLI::Error& e) {
        err << e.what() << "\n";
        return kUsageError;
    }
    app.add_option("--seed", rc.seed, "Random seed (env " + std::string(kSeedEnv) + ")")->capture_default_str();
    app.add_option("--layer", rc.layer, "Probe layer, 1-based")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--threshold", rc.threshold, "Abstention threshold on failure scores")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    app.add_option("--out-dir", rc.out_dir, "Output directory")->capture_default_str();
    app.add_option("--threads", rc.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--format", rc.format, "Tabular output format")
        ->capture_default_str()
        ->check(CLI::IsMember({"csv", "json"}));

    // bench
    detail::BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench", "Benchmark construction");
    bench->require_subcommand(1, 1);
    auto* bench_build = bench->add_subcommand("build", "Build a QA dataset from article dumps");
    bench_build->add_option("--entities", bench_args.entities, "Entity list, one per line")->check(CLI::ExistingFile);
    bench_build->add_option("--articles", bench_args.articles, "Article dump (JSON lines: entity, text)")
        ->check(CLI::ExistingFile);
    bench_build->add_option("--transcript", bench_args.transcript, "Replay LM responses from this log")
        ->check(CLI::ExistingFile);
    bench_build->add_option("--lm-url", bench_args.lm_url, "Live completions server (records a transcript)");
    bench_build->add_option("--lm-model", bench_args.lm_model, "Model name sent to the live server");
    bench_build->add_option("--prompts", bench_args.prompts, "Prompt template directory")
        ->capture_default_str()
        ->check(CLI::ExistingDirectory);
    bench_build->add_option("--images", bench_args.images, "JSON map entity -> image ids")->check(CLI::ExistingFile);
    bench_build->add_option("--category-noun", bench_args.category_noun, "Noun for 'the <noun> in the image'")
        ->capture_default_str();
    auto* bench_mnist = bench->add_subcommand("mnist", "Generate MNIST arithmetic items");
    bench_mnist->add_option("--count", bench_args.count, "Number of items")->capture_default_str();
    auto* bench_vlm = bench->add_subcommand("vlm-filter", "Apply the per-VLM filter from a VLM response log");
    bench_vlm->add_option("--dataset", bench_args.dataset, "Dataset JSON lines")->check(CLI::ExistingFile);
    bench_vlm->add_option("--vlm-transcript", bench_args.vlm_transcript, "VLM response log (JSON lines)")
        ->check(CLI::ExistingFile);

    // grade
    detail::GradeArgs grade_args;
    auto* grade = app.add_subcommand("grade", "Grade responses against gold answers");
    grade->add_option("--input", grade_args.input, "CSV with datapoint_id, response, answer")
        ->required()
        ->check(CLI::ExistingFile);
    grade->add_flag("--case-sensitive", grade_args.case_sensitive, "Do not lowercase before matching");

    // lens
    detail::LensArgs lens_args;
    auto* lens = app.add_subcommand("lens", "Logit-lens and cosine trajectories");
    lens->add_option("--trace,--visual", lens_args.trace, "Visual-setting trace")->check(CLI::ExistingFile);
    lens->add_option("--fullinfo", lens_args.fullinfo, "Full-information trace for cosine similarity")
        ->check(CLI::ExistingFile);
    lens->add_option("--unembedding", lens_args.unembedding, "Unembedding matrix (.vlu)")->check(CLI::ExistingFile);
    lens->add_option("--target", lens_args.target, "Target token: first generated or gold")
        ->capture_default_str()
        ->check(CLI::IsMember({"first", "gold"}));
    lens->add_option("--gold", lens_args.gold, "JSON map datapoint id -> gold token id")->check(CLI::ExistingFile);
    lens->add_flag("--final-norm", lens_args.final_norm, "Apply the model's final norm before unembedding");

    // probe
    detail::ProbeArgs probe_args;
    auto* probe_cmd = app.add_subcommand("probe", "Linear failure probe");
    probe_cmd->require_subcommand(1, 1);
    auto* probe_train = probe_cmd->add_subcommand("train", "Train a probe and perplexity threshold");
    probe_train->add_option("--trace", probe_args.traces, "Labelled trace(s)")->required()->check(CLI::ExistingFile);
    probe_train->add_option("--lambda", probe_args.lambda, "L2 strength")->capture_default_str()->check(
        CLI::NonNegativeNumber);
    probe_train->add_option("--max-iter", probe_args.max_iterations, "Iteration cap")->capture_default_str();
    probe_train->add_flag("--no-standardize", probe_args.no_standardize, "Use raw features");
    probe_train->add_option("--holdout", probe_args.holdout, "Stratified held-out fraction to report")
        ->capture_default_str();
    auto* probe_eval = probe_cmd->add_subcommand("eval", "Score a trace with a trained probe");
    probe_eval->add_option("--probe", probe_args.probe_file, "probe.json")->required()->check(CLI::ExistingFile);
    probe_eval->add_option("--trace", probe_args.traces, "Trace to score")->required()->check(CLI::ExistingFile);

    // select
    detail::SelectArgs select_args;
    auto* select = app.add_subcommand("select", "Selective prediction: coverage and risk");
    select->add_option("--probe", select_args.probe_file, "Trained probe.json")->check(CLI::ExistingFile);
    select->add_option("--train", select_args.train, "Training trace (repeat for out-of-distribution runs)")
        ->check(CLI::ExistingFile);
    select->add_option("--trace", select_args.trace, "Held-out trace")->required()->check(CLI::ExistingFile);
    select->add_option("--name", select_args.name, "Dataset name in the report");
    select->add_option("--lambda", select_args.lambda, "L2 strength when training")->capture_default_str();

    // synth
    detail::SynthArgs synth_args;
    auto& sc = synth_args.cfg;
    auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic traces");
    synth_cmd->add_option("--per-class", sc.per_class, "Records per class")->capture_default_str();
    synth_cmd->add_option("--layers", sc.layers, "Number of layers")->capture_default_str();
    synth_cmd->add_option("--hidden-dim", sc.hidden_dim, "Hidden size")->capture_default_str();
    synth_cmd->add_option("--vocab", sc.vocab_size, "Vocabulary size")->capture_default_str();
    synth_cmd->add_option("--noise", sc.noise, "Gaussian noise std-dev")->capture_default_str();
    synth_cmd->add_option("--model-seed", sc.model_seed, "Unembedding seed")->capture_default_str();
    std::vector<std::uint32_t> success_rise, failure_rise;
    synth_cmd->add_option("--success-rise", success_rise, "Rise-layer range for successes (first last)")
        ->expected(2);
    synth_cmd->add_option("--failure-rise", failure_rise, "Rise-layer range for failures (first last)")
        ->expected(2);
    synth_cmd->add_option("--id-prefix", sc.id_prefix, "Datapoint id prefix")->capture_default_str();

    // report
    detail::ReportArgs report_args;
    auto* report = app.add_subcommand("report", "Combine selective.json files into one table");
    report->add_option("--input", report_args.inputs, "selective.json (repeatable)")
        ->required()
        ->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << detail::deepest_help(app);
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << detail::deepest_help(app);
        return kUsageError;
    }

    if (success_rise.size() == 2) sc.success_rise = {success_rise[0], success_rise[1]};
    if (failure_rise.size() == 2) sc.failure_rise = {failure_rise[0], failure_rise[1]};

    try {
        if (bench_build->parsed()) return detail::cmd_bench_build(rc, bench_args, out);
        if (bench_mnist->parsed()) return detail::cmd_bench_mnist(rc, bench_args, out);
        if (bench_vlm->parsed()) return detail::cmd_bench_vlm_filter(rc, bench_args, out);
        if (grade->parsed()) return detail::cmd_grade(rc, grade_args, out);
        if (lens->parsed()) return detail::cmd_lens(rc, lens_args, out);
        if (probe_train->parsed()) return detail::cmd_probe_train(rc, probe_args, out);
        if (probe_eval->parsed()) return detail::cmd_probe_eval(rc, probe_args, out);
        if (select->parsed()) return detail::cmd_select(rc, select_args, out);
        if (synth_cmd->parsed()) return detail::cmd_synth(rc, synth_args, out);
        if (report->parsed()) return detail::cmd_report(rc, report_args, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kDataError;
    }
    err << app.help();
    return kUsageError;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<const char*> argv{"groundprobe"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace groundprobe::cli
