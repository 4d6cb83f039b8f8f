#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fmtm/corpus.hpp"

namespace fmtm {

using Rng = std::mt19937_64;

/// Topics whose stick weight falls below this are treated as switched off.
inline constexpr double kTopicOffThreshold = 1e-10;

/// Truncated stick-breaking weights for one modality.
/// p_k = v_k * prod_{i<k} (1 - v_i), with v_{T-1} = 1 so that sum(p) = 1.
struct StickWeights {
    Eigen::VectorXd v;
    Eigen::VectorXd p;
    double alpha = 1.0;  // first-level concentration
    double beta = 1.0;   // second-level concentration

    /// Forces the last fraction to 1 and derives p.
    static StickWeights from_fractions(Eigen::VectorXd v, double alpha, double beta);
    static Eigen::VectorXd weights_from_fractions(const Eigen::VectorXd& v);
    /// Inverse of weights_from_fractions for a weight vector summing to 1.
    static Eigen::VectorXd fractions_from_weights(const Eigen::VectorXd& p);

    std::size_t size() const noexcept { return static_cast<std::size_t>(v.size()); }
    /// Mask of topics with p_k >= kTopicOffThreshold.
    std::vector<bool> active() const;
    void validate(const std::string& modality) const;
};

/// Per-modality topic-word distributions. `topics` holds point estimates
/// (rows on the simplex). `dirichlet` holds the variational Dirichlet
/// parameters when the dictionary was learned, and is empty for sampled truth.
struct TopicDictionary {
    std::string modality;
    Eigen::MatrixXd topics;     // T x W
    Eigen::MatrixXd dirichlet;  // T x W or 0 x 0
    double gamma = 0.1;

    std::size_t num_topics() const noexcept { return static_cast<std::size_t>(topics.rows()); }
    std::size_t vocab_size() const noexcept { return static_cast<std::size_t>(topics.cols()); }
    /// E[log eta] under the Dirichlet factor, or log(topics) for point dictionaries.
    Eigen::MatrixXd expected_log() const;
    void validate() const;
};

struct GaussianPrior {
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;

    std::size_t dim() const noexcept { return static_cast<std::size_t>(mu.size()); }
    void validate() const;
};

/// Global parameters of the factorized multi-modal topic model. With
/// `tied_xi` every modality reads the same xi block (the mmDILN baseline).
struct ModelParams {
    ModalityLayout layout;
    std::vector<StickWeights> sticks;
    std::vector<TopicDictionary> dictionaries;
    GaussianPrior prior;
    bool tied_xi = false;

    std::size_t num_modalities() const noexcept { return layout.size(); }
    std::size_t xi_dim() const noexcept { return tied_xi ? layout.topic_counts.front() : layout.total_topics; }
    std::size_t xi_offset(std::size_t m) const noexcept { return tied_xi ? 0 : layout.offsets[m]; }
    std::size_t topic_count(std::size_t m) const noexcept { return layout.topic_counts[m]; }

    /// Re-checks every invariant of the parameter types; throws ValidationError.
    void validate() const;
};

/// Ground truth behind one sampled document.
struct LatentRecord {
    std::string id;
    Eigen::VectorXd xi;
    std::vector<Eigen::VectorXd> theta;                    // per modality
    std::vector<std::vector<std::uint32_t>> assignments;  // per modality, per token: topic index

    nlohmann::json to_json() const;
};

/// normalize(beta * p .* exp(xi)); xi covers one modality's topics.
Eigen::VectorXd expected_theta(const Eigen::Ref<const Eigen::VectorXd>& xi, const StickWeights& sticks);

StickWeights sample_sticks(double alpha, std::size_t t, Rng& rng, double beta = 1.0);

std::pair<Document, LatentRecord> sample_document(const ModelParams& params,
                                                  const std::vector<std::size_t>& lengths, Rng& rng,
                                                  std::string id = {});

struct SharedPair {
    std::size_t first_topic = 0;   // topic in modality 0
    std::size_t second_topic = 0;  // topic in modality 1
    double correlation = 0.0;
};

/// Synthetic corpus recipe. Shared pairs link modality 0 with modality 1;
/// every other topic listed in `private_topics` is active in its own modality
/// only. Active topics of a modality get equal stick weight, the rest zero.
struct ScenarioConfig {
    std::vector<std::string> modalities{"text", "image"};
    std::vector<std::size_t> topic_counts{7, 7};
    std::vector<SharedPair> shared_pairs;
    std::vector<std::vector<std::size_t>> private_topics{{}, {}};
    std::vector<std::size_t> vocab_sizes{200, 200};
    std::size_t num_docs = 500;
    std::vector<std::size_t> doc_lengths{100, 100};
    std::uint64_t seed = 1;
    double alpha = 1.0;
    double beta = 200.0;
    double gamma = 0.1;

    /// 3 shared pairs at 0.9, 2 private topics per modality, W=200, D=500,
    /// 100 tokens per modality.
    static ScenarioConfig acceptance();
    static ScenarioConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    /// Per-modality sorted list of topics with nonzero weight.
    std::vector<std::vector<std::size_t>> active_topics() const;
    void validate() const;
};

struct Scenario {
    ModelParams truth;
    MultiModalCorpus corpus;
    std::vector<LatentRecord> latents;
};

/// Unit-diagonal correlation matrix with the requested cross entries,
/// projected to positive definite by eigenvalue clipping when needed.
Eigen::MatrixXd scenario_correlation(const ScenarioConfig& cfg);

Scenario make_synthetic_scenario(const ScenarioConfig& cfg, Rng& rng);

}  // namespace fmtm
