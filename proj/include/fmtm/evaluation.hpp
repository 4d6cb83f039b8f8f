#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fmtm/corpus.hpp"
#include "fmtm/generative.hpp"
#include "fmtm/inference.hpp"

namespace fmtm {

/// sum_w count_w log(sum_k theta_k eta_kw) over one modality's counts.
double doc_log_likelihood(const SparseCounts& counts, const Eigen::VectorXd& theta, const TopicDictionary& dict);
double doc_log_likelihood(const Document& doc, const Eigen::VectorXd& theta, const ModelParams& model,
                          std::size_t modality);

/// exp(-sum_d loglik_d / sum_d N_d) given one theta per document.
double perplexity_from_thetas(const MultiModalCorpus& corpus, const std::vector<Eigen::VectorXd>& thetas,
                              const ModelParams& model, std::size_t modality, std::size_t workers = 1);

/// Plug-in training perplexity from each document's fitted E[Y] / sum E[Y].
double train_perplexity(const ModelParams& model, const TrainState& state, const MultiModalCorpus& corpus,
                        std::size_t modality);

enum class Predictor { Conditional, PriorMean };

struct ConditionalResult {
    double perplexity = 0.0;
    double log_likelihood = 0.0;
    std::uint64_t tokens = 0;
    std::size_t documents = 0;  // documents scored (non-empty target and observed)
};

/// Target-modality perplexity of the test corpus given the observed modality.
ConditionalResult conditional_perplexity(const ModelParams& model, const MultiModalCorpus& test,
                                         const std::string& target, const std::string& observed,
                                         const TrainConfig& config, Predictor predictor = Predictor::Conditional);

struct DirectionResult {
    std::string target;
    std::string observed;
    ConditionalResult result;
};

struct EvalReport {
    std::string model_id;
    std::string config_hash;
    std::string corpus_hash;  // test corpus
    std::vector<std::string> modalities;
    std::vector<double> train_perplexity;  // per modality, from training provenance (may be empty)
    std::vector<DirectionResult> conditional;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

/// Every ordered (target, observed) pair of distinct modalities.
EvalReport evaluate_model(const ModelParams& model, const MultiModalCorpus& test, const std::string& model_id,
                          const std::string& config_hash, const std::vector<double>& train_perplexity,
                          const TrainConfig& config, Predictor predictor = Predictor::Conditional);

struct ComparisonTable {
    std::vector<std::string> columns;
    std::vector<std::string> models;
    std::vector<std::vector<double>> values;  // [model][column], lower is better
    std::vector<std::vector<bool>> best;      // strict unique minimum per column

    void write_csv(const std::filesystem::path& path) const;
};

ComparisonTable compare_models(const std::vector<EvalReport>& reports);

}  // namespace fmtm
