#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fmtm/corpus.hpp"
#include "fmtm/generative.hpp"

namespace fmtm {

inline constexpr double kDefaultThreshold = 0.2;
/// Stick weights above this count as effective topics in stick reports.
inline constexpr double kEffectiveTopicWeight = 1e-3;

enum class Relevance { Mean, Max };

struct TopicAnalysis {
    std::string source;
    std::string target;
    Eigen::MatrixXd omega;        // total_topics x total_topics
    Eigen::MatrixXd cross_block;  // source topics x target topics, thresholded
    Eigen::VectorXd rho;
    std::vector<std::size_t> ranking;
    double threshold = kDefaultThreshold;
    Relevance relevance = Relevance::Mean;

    /// rho_k == 0: no cross-modal correlation survives the threshold.
    bool is_private(std::size_t k) const { return rho[static_cast<Eigen::Index>(k)] == 0.0; }
};

Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& sigma);

/// Source-rows x target-columns block of omega with |x| < tau set to 0.
Eigen::MatrixXd cross_block(const Eigen::MatrixXd& omega, const ModalityLayout& layout, const std::string& source,
                            const std::string& target, double tau = kDefaultThreshold);

/// rho_k = (1/T) sum_l |cross_kl|, T = number of columns.
Eigen::VectorXd visual_relevance(const Eigen::MatrixXd& cross);
/// rho_k = max_l |cross_kl|.
Eigen::VectorXd alt_relevance_max(const Eigen::MatrixXd& cross);

/// Descending rho; ties by ascending index.
std::vector<std::size_t> rank_topics(const Eigen::VectorXd& rho);

/// Indices of the n largest entries, descending; ties by ascending index.
std::vector<std::size_t> top_indices(const Eigen::VectorXd& values, std::size_t n);

/// Full analysis between two modalities of an untied model.
TopicAnalysis analyze_topics(const ModelParams& model, const std::string& source, const std::string& target,
                             double tau = kDefaultThreshold, Relevance relevance = Relevance::Mean);

struct StickReport {
    std::string modality;
    Eigen::VectorXd p;
    double alpha = 0.0;
    double beta = 0.0;
    std::size_t effective_topics = 0;  // count of p_k > 1e-3
};

std::vector<StickReport> stick_report(const ModelParams& model);

std::vector<std::pair<std::string, double>> top_words(const ModelParams& model, const Vocabulary& vocab,
                                                      const std::string& modality, std::size_t topic, std::size_t n);

/// modality,topic,p,alpha,beta,effective_topics
void write_stick_report_csv(const std::vector<StickReport>& report, const std::filesystem::path& path);
/// Header row of target topic labels, one row per source topic.
void write_cross_block_csv(const TopicAnalysis& analysis, const std::filesystem::path& path);
/// rank,topic,rho,private_flag,top_words
void write_ranking_csv(const TopicAnalysis& analysis, const ModelParams& model, const Vocabulary& source_vocab,
                       std::size_t n_words, const std::filesystem::path& path);

}  // namespace fmtm
