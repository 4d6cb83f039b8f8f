#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmtm/analysis.hpp"
#include "fmtm/inference.hpp"

namespace fmtm {

struct CommandResult {
    int exit_code = 0;
    std::vector<std::filesystem::path> artifacts;
    nlohmann::json summary = nlohmann::json::object();
};

struct GlobalOptions {
    std::optional<std::uint64_t> seed;  // overrides the seed in --config
    std::size_t workers = 1;
    std::filesystem::path config;  // scenario (generate) or training (train) JSON
};

struct GenerateOptions {
    std::filesystem::path out_dir;
    double split = 0.5;  // train fraction for the train/test corpora; 0 disables
};

struct TrainOptions {
    std::filesystem::path corpus;  // manifest
    std::filesystem::path model_out;
    std::filesystem::path trace;  // defaults to <model_out>.trace.csv
    bool tied_xi = false;
    bool check_invariants = false;
};

struct PredictOptions {
    std::filesystem::path model;
    std::filesystem::path corpus;
    std::vector<std::string> observed;
    std::string target;
    std::filesystem::path out;
    std::size_t top_n = 10;
};

struct EvaluateOptions {
    std::vector<std::filesystem::path> models;
    std::filesystem::path corpus;
    std::filesystem::path out;         // JSON list of reports
    std::filesystem::path comparison;  // CSV; defaults to <out> with .csv
    bool prior_mean_baseline = false;  // also score the first model's prior-mean predictor
};

struct AnalyzeOptions {
    std::filesystem::path model;
    std::filesystem::path out_dir;
    double threshold = kDefaultThreshold;
    Relevance relevance = Relevance::Mean;
    std::string source;  // defaults to the first modality
    std::string target;  // defaults to the second modality
    std::size_t top_n = 10;
};

/// Each command throws fmtm::Error on failure; the executable maps that to a
/// nonzero exit code.
CommandResult cmd_generate(const GlobalOptions& global, const GenerateOptions& opts);
CommandResult cmd_train(const GlobalOptions& global, const TrainOptions& opts);
CommandResult cmd_predict(const GlobalOptions& global, const PredictOptions& opts);
CommandResult cmd_evaluate(const GlobalOptions& global, const EvaluateOptions& opts);
CommandResult cmd_analyze(const GlobalOptions& global, const AnalyzeOptions& opts);

/// Writes the sweep trace: sweep,elbo,relative_change,wall_seconds,train_perplexity_<m>...
void write_trace_csv(const std::vector<std::string>& modalities, const std::vector<SweepRecord>& trace,
                     const std::filesystem::path& path);

}  // namespace fmtm
