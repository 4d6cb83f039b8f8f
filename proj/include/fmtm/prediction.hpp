#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fmtm/corpus.hpp"
#include "fmtm/generative.hpp"
#include "fmtm/inference.hpp"

namespace fmtm {

struct PredictionResult {
    Eigen::VectorXd xi_observed;      // over the observed modalities' topics
    Eigen::VectorXd xi_predicted;     // over the target modality's topics
    Eigen::VectorXd theta_predicted;  // simplex over target topics
    Eigen::VectorXd word_dist;        // simplex over the target vocabulary
};

struct ObservedInference {
    Eigen::VectorXd xi;
    std::vector<Eigen::VectorXd> theta;  // one per observed modality
};

/// Sub-model holding only the listed modalities (in that order), with the
/// matching blocks of mu and Sigma. With tied xi the whole prior is kept.
ModelParams restrict_model(const ModelParams& model, const std::vector<std::size_t>& modalities);

/// Local updates with frozen globals over the observed modalities only.
ObservedInference infer_observed_xi(const Document& doc, const ModelParams& model,
                                    const std::vector<std::string>& observed, const TrainConfig& config);
ObservedInference infer_observed_xi(const Document& doc, const ModelParams& model, const std::string& observed,
                                    const TrainConfig& config);

/// mu_i + Sigma_ij Sigma_jj^{-1} (xi_j - mu_j), with j the concatenated observed blocks.
Eigen::VectorXd conditional_xi(const Eigen::VectorXd& xi_observed, const ModelParams& model,
                               const std::string& target, const std::vector<std::string>& observed);
Eigen::VectorXd conditional_xi(const Eigen::VectorXd& xi_observed, const ModelParams& model,
                               const std::string& target, const std::string& observed);

/// The matrix Sigma_ij Sigma_jj^{-1} mapping observed deviations to the target block.
Eigen::MatrixXd transfer_matrix(const ModelParams& model, const std::string& target,
                                const std::vector<std::string>& observed);

Eigen::VectorXd predict_theta(const Eigen::VectorXd& xi_predicted, const ModelParams& model, const std::string& target);

/// sum_k theta_k eta_k over the target dictionary.
Eigen::VectorXd predict_word_dist(const Eigen::VectorXd& theta, const ModelParams& model, const std::string& target);

PredictionResult predict(const Document& doc, const ModelParams& model, const std::string& target,
                         const std::vector<std::string>& observed, const TrainConfig& config);
PredictionResult predict(const Document& doc, const ModelParams& model, const std::string& target,
                         const std::string& observed, const TrainConfig& config);

/// Prediction that ignores every observation: xi at the prior mean of the target block.
PredictionResult predict_prior_mean(const ModelParams& model, const std::string& target);

/// True when the document has at least one token in every observed modality.
bool has_observations(const Document& doc, const ModelParams& model, const std::vector<std::string>& observed);

struct BatchPrediction {
    std::string id;
    PredictionResult result;
};

/// Predictions for every document with observations, in corpus order.
std::vector<BatchPrediction> predict_batch(const MultiModalCorpus& corpus, const ModelParams& model,
                                           const std::string& target, const std::vector<std::string>& observed,
                                           const TrainConfig& config);

/// One JSON line per prediction: {id, target_modality, theta, top_words}.
void write_predictions_jsonl(const std::vector<BatchPrediction>& preds, const Vocabulary& target_vocab,
                             const std::string& target, std::size_t top_n, const std::filesystem::path& path);

}  // namespace fmtm
