#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fmtm/corpus.hpp"
#include "fmtm/generative.hpp"

namespace fmtm {

struct TrainConfig {
    std::size_t max_sweeps = 100;
    double tolerance = 1e-5;  // relative ELBO change that stops training

    // q(xi) gradient ascent with backtracking line search
    std::size_t max_inner_steps = 50;
    std::size_t max_backtracks = 30;
    double backtrack_shrink = 0.5;
    double armijo = 1e-4;

    double jitter = 1e-8;  // Sigma floor, relative to trace(Sigma) / dim
    std::uint64_t seed = 1;
    bool tied_xi = false;
    std::vector<std::size_t> truncation;  // per modality; empty = corpus layout
    std::size_t local_iterations = 5;     // local passes per document per sweep

    double gamma = 0.1;
    double alpha = 1.0;
    double beta = 1.0;
    double init_noise = 0.5;  // weight of the random component in initial topics
    double stick_floor = 1e-9;  // smallest stick weight the optimizer may reach
    bool sort_topics = true;
    // Free mean per xi coordinate, or one shared level per modality block.
    bool mu_per_topic = false;
    bool learn_beta = true;  // false keeps beta at its initial value

    std::size_t workers = 1;
    bool check_invariants = false;

    static TrainConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    void validate() const;
    /// Content hash over every field that affects the fitted model.
    std::string hash() const;
};

/// Per-document variational factors q(xi), q(Y), q(z).
struct DocVariational {
    Eigen::VectorXd xi_mean;
    Eigen::VectorXd xi_var;
    std::vector<Eigen::VectorXd> y_shape;  // per modality; 0 for switched-off topics
    std::vector<Eigen::VectorXd> y_rate;
    std::vector<Eigen::MatrixXd> resp;  // per modality: distinct tokens x topics
    bool xi_stalled = false;            // last q(xi) update found no ascent step

    /// E[Y] for modality m (zero where the shape is zero).
    Eigen::VectorXd expected_y(std::size_t m) const;
    /// Plug-in topic proportions E[Y] / sum E[Y].
    Eigen::VectorXd theta(std::size_t m) const;
};

struct SweepRecord {
    std::size_t sweep = 0;
    double elbo = 0.0;
    double relative_change = 0.0;
    double wall_seconds = 0.0;
    std::vector<double> train_perplexity;  // per modality
};

struct TrainState {
    ModelParams params;
    std::vector<DocVariational> docs;
    std::vector<SweepRecord> trace;
    TrainConfig config;
    double initial_elbo = 0.0;

    std::vector<double> elbo_trace() const;
};

/// Everything a sweep needs from the globals, computed once per sweep.
struct GlobalCache {
    std::vector<Eigen::MatrixXd> expected_log_eta;  // per modality, T x W
    Eigen::MatrixXd precision;                       // Sigma^{-1}
    double log_det_sigma = 0.0;

    static GlobalCache build(const ModelParams& params);
};

/// Lower-bound terms, grouped by factor.
struct ElboBreakdown {
    double words = 0.0;        // E[log p(x | z, eta)]
    double assignments = 0.0;  // E[log p(z | Y)] (normalizer bound) + H[q(z)]
    double y = 0.0;            // E[log p(Y | xi, p, beta)] + H[q(Y)]
    double xi = 0.0;           // E[log N(xi | mu, Sigma)] + H[q(xi)]
    double eta = 0.0;          // E[log Dir(eta | gamma)] + H[q(eta)]
    double sticks = 0.0;       // log Beta(V | 1, alpha)

    double total() const noexcept { return words + assignments + y + xi + eta + sticks; }
};

struct XiGradient {
    Eigen::VectorXd mean;  // d/d xi_mean
    Eigen::VectorXd var;   // d/d xi_var
};

TrainState init_state(const MultiModalCorpus& corpus, const TrainConfig& config, Rng& rng);

/// The xi-dependent part of the lower bound for one document.
double elbo_xi(const DocVariational& doc, const ModelParams& params);
XiGradient grad_xi(const DocVariational& doc, const ModelParams& params);
DocVariational update_xi(const DocVariational& doc, const ModelParams& params, const TrainConfig& config);
DocVariational update_xi(const DocVariational& doc, const ModelParams& params, const GlobalCache& cache,
                         const TrainConfig& config);

/// q(z) then q(Y) with xi held fixed.
DocVariational update_local(const Document& doc, const DocVariational& var, const ModelParams& params);
DocVariational update_local(const Document& doc, const DocVariational& var, const ModelParams& params,
                            const GlobalCache& cache);

/// Closed-form moments plus jitter when the smallest eigenvalue is below the floor.
/// With `fixed_mu` the mean is held and Sigma is the second moment around it.
GaussianPrior update_mu_sigma(const std::vector<DocVariational>& docs, double jitter,
                              const Eigen::VectorXd* fixed_mu = nullptr);

/// Mean restricted to one level per modality (one overall when tied), fitted by
/// generalized least squares against the current Sigma.
Eigen::VectorXd modality_mean(const std::vector<DocVariational>& docs, const ModelParams& params);
std::vector<TopicDictionary> update_topics(const MultiModalCorpus& corpus, const std::vector<DocVariational>& docs,
                                           const ModelParams& params);

/// Joint ascent over stick fractions, alpha, beta and q(Y) for modality m.
/// May relabel the topics of m (decreasing weight); mutates `state`.
StickWeights update_sticks(const MultiModalCorpus& corpus, TrainState& state, std::size_t m);

ElboBreakdown elbo_breakdown(const MultiModalCorpus& corpus, const TrainState& state);
double elbo_total(const MultiModalCorpus& corpus, const TrainState& state);

/// Throws ValidationError when any type invariant of the state is broken.
void check_state_invariants(const TrainState& state);

/// One full sweep: local updates for every document, mu/Sigma, topics, sticks.
void run_sweep(const MultiModalCorpus& corpus, TrainState& state);

using SweepCallback = std::function<void(const TrainState&, const SweepRecord&)>;

TrainState fit(const MultiModalCorpus& corpus, const TrainConfig& config, Rng& rng,
               const SweepCallback& on_sweep = {});

/// Fresh variational factors for an unseen document (xi at the prior mean).
DocVariational initial_doc_variational(const Document& doc, const ModelParams& params);

/// Local coordinate ascent for one document with frozen globals.
DocVariational infer_document(const Document& doc, const ModelParams& params, const TrainConfig& config,
                              std::size_t max_iterations = 500, double tolerance = 1e-9);

}  // namespace fmtm
