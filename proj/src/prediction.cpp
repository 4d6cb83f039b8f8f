#include "fmtm/prediction.hpp"

#include <fstream>
#include <set>

#include "fmtm/analysis.hpp"
#include "fmtm/error.hpp"
#include "parallel.hpp"

namespace fmtm {

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

std::vector<std::size_t> modality_indices(const ModelParams& model, const std::vector<std::string>& names) {
    if (names.empty()) throw ValidationError("prediction: no observed modality given");
    std::vector<std::size_t> out;
    std::set<std::string> seen;
    for (const auto& n : names) {
        if (!model.layout.contains(n)) throw ValidationError("prediction: unknown modality '" + n + "'");
        if (!seen.insert(n).second) throw ValidationError("prediction: modality '" + n + "' listed twice");
        out.push_back(model.layout.index_of(n));
    }
    return out;
}

/// Positions on the xi axis covered by the listed modalities, in list order.
std::vector<Eigen::Index> xi_positions(const ModelParams& model, const std::vector<std::size_t>& mods) {
    std::vector<Eigen::Index> pos;
    for (auto m : mods)
        for (std::size_t k = 0; k < model.topic_count(m); ++k) pos.push_back(idx(model.xi_offset(m) + k));
    return pos;
}

std::size_t target_index(const ModelParams& model, const std::string& target) {
    if (!model.layout.contains(target)) throw ValidationError("prediction: unknown modality '" + target + "'");
    return model.layout.index_of(target);
}

}  // namespace

ModelParams restrict_model(const ModelParams& model, const std::vector<std::size_t>& modalities) {
    ModelParams sub;
    std::vector<std::string> names;
    std::vector<std::size_t> counts;
    for (auto m : modalities) {
        if (m >= model.num_modalities()) throw ValidationError("restrict_model: modality index out of range");
        names.push_back(model.layout.names[m]);
        counts.push_back(model.topic_count(m));
        sub.sticks.push_back(model.sticks[m]);
        sub.dictionaries.push_back(model.dictionaries[m]);
    }
    sub.layout = ModalityLayout::make(std::move(names), std::move(counts));
    sub.tied_xi = model.tied_xi;
    if (model.tied_xi) {
        sub.prior = model.prior;
        return sub;
    }
    const auto pos = xi_positions(model, modalities);
    const auto n = idx(pos.size());
    sub.prior.mu.resize(n);
    sub.prior.sigma.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        sub.prior.mu[i] = model.prior.mu[pos[static_cast<std::size_t>(i)]];
        for (Eigen::Index j = 0; j < n; ++j)
            sub.prior.sigma(i, j) = model.prior.sigma(pos[static_cast<std::size_t>(i)], pos[static_cast<std::size_t>(j)]);
    }
    return sub;
}

ObservedInference infer_observed_xi(const Document& doc, const ModelParams& model,
                                    const std::vector<std::string>& observed, const TrainConfig& config) {
    const auto mods = modality_indices(model, observed);
    if (doc.counts.size() != model.num_modalities())
        throw ValidationError("prediction: document '" + doc.id + "' does not match the model's modalities");
    Document sub_doc;
    sub_doc.id = doc.id;
    for (auto m : mods) {
        if (doc.counts[m].empty())
            throw ValidationError("prediction: document '" + doc.id + "' has no tokens in observed modality '" +
                                  model.layout.names[m] + "'");
        sub_doc.counts.push_back(doc.counts[m]);
    }
    const ModelParams sub = restrict_model(model, mods);
    const DocVariational var = infer_document(sub_doc, sub, config);
    ObservedInference out;
    out.xi = var.xi_mean;
    for (std::size_t m = 0; m < mods.size(); ++m) out.theta.push_back(var.theta(m));
    return out;
}

ObservedInference infer_observed_xi(const Document& doc, const ModelParams& model, const std::string& observed,
                                    const TrainConfig& config) {
    return infer_observed_xi(doc, model, std::vector<std::string>{observed}, config);
}

Eigen::MatrixXd transfer_matrix(const ModelParams& model, const std::string& target,
                                const std::vector<std::string>& observed) {
    const auto obs = modality_indices(model, observed);
    const std::size_t t = target_index(model, target);
    const auto J = xi_positions(model, obs);
    const auto I = xi_positions(model, {t});
    if (model.tied_xi || I == J) return Eigen::MatrixXd::Identity(idx(I.size()), idx(I.size()));
    const Eigen::MatrixXd s_jj = model.prior.sigma(J, J);
    const Eigen::MatrixXd s_ij = model.prior.sigma(I, J);
    Eigen::LLT<Eigen::MatrixXd> llt(s_jj);
    if (llt.info() != Eigen::Success) throw NumericalError("prediction: observed covariance block is not positive definite");
    // W = S_ij S_jj^{-1}  <=>  W^T = S_jj^{-1} S_ji
    return llt.solve(s_ij.transpose()).transpose();
}

Eigen::VectorXd conditional_xi(const Eigen::VectorXd& xi_observed, const ModelParams& model,
                               const std::string& target, const std::vector<std::string>& observed) {
    const auto obs = modality_indices(model, observed);
    const std::size_t t = target_index(model, target);
    if (model.tied_xi) {
        if (static_cast<std::size_t>(xi_observed.size()) != model.xi_dim())
            throw ValidationError("conditional_xi: observed xi has the wrong dimension");
        return xi_observed;  // one shared xi: nothing to transfer
    }
    const auto J = xi_positions(model, obs);
    const auto I = xi_positions(model, {t});
    if (static_cast<std::size_t>(xi_observed.size()) != J.size())
        throw ValidationError("conditional_xi: observed xi has the wrong dimension");
    if (I == J) return xi_observed;
    const Eigen::MatrixXd s_jj = model.prior.sigma(J, J);
    Eigen::LLT<Eigen::MatrixXd> llt(s_jj);
    if (llt.info() != Eigen::Success) throw NumericalError("conditional_xi: observed covariance block is not positive definite");
    const Eigen::VectorXd dev = xi_observed - model.prior.mu(J);
    const Eigen::VectorXd solved = llt.solve(dev);
    return model.prior.mu(I) + model.prior.sigma(I, J) * solved;
}

Eigen::VectorXd conditional_xi(const Eigen::VectorXd& xi_observed, const ModelParams& model,
                               const std::string& target, const std::string& observed) {
    return conditional_xi(xi_observed, model, target, std::vector<std::string>{observed});
}

Eigen::VectorXd predict_theta(const Eigen::VectorXd& xi_predicted, const ModelParams& model, const std::string& target) {
    const std::size_t t = target_index(model, target);
    if (static_cast<std::size_t>(xi_predicted.size()) != model.topic_count(t))
        throw ValidationError("predict_theta: xi has the wrong dimension for modality '" + target + "'");
    return expected_theta(xi_predicted, model.sticks[t]);
}

Eigen::VectorXd predict_word_dist(const Eigen::VectorXd& theta, const ModelParams& model, const std::string& target) {
    const std::size_t t = target_index(model, target);
    const auto& topics = model.dictionaries[t].topics;
    if (theta.size() != topics.rows())
        throw ValidationError("predict_word_dist: theta has the wrong dimension for modality '" + target + "'");
    return topics.transpose() * theta;
}

PredictionResult predict(const Document& doc, const ModelParams& model, const std::string& target,
                         const std::vector<std::string>& observed, const TrainConfig& config) {
    target_index(model, target);
    PredictionResult r;
    r.xi_observed = infer_observed_xi(doc, model, observed, config).xi;
    r.xi_predicted = conditional_xi(r.xi_observed, model, target, observed);
    r.theta_predicted = predict_theta(r.xi_predicted, model, target);
    r.word_dist = predict_word_dist(r.theta_predicted, model, target);
    return r;
}

PredictionResult predict(const Document& doc, const ModelParams& model, const std::string& target,
                         const std::string& observed, const TrainConfig& config) {
    return predict(doc, model, target, std::vector<std::string>{observed}, config);
}

PredictionResult predict_prior_mean(const ModelParams& model, const std::string& target) {
    const std::size_t t = target_index(model, target);
    PredictionResult r;
    r.xi_predicted = model.prior.mu.segment(idx(model.xi_offset(t)), idx(model.topic_count(t)));
    r.theta_predicted = predict_theta(r.xi_predicted, model, target);
    r.word_dist = predict_word_dist(r.theta_predicted, model, target);
    return r;
}

bool has_observations(const Document& doc, const ModelParams& model, const std::vector<std::string>& observed) {
    for (auto m : modality_indices(model, observed))
        if (m >= doc.counts.size() || doc.counts[m].empty()) return false;
    return true;
}

std::vector<BatchPrediction> predict_batch(const MultiModalCorpus& corpus, const ModelParams& model,
                                           const std::string& target, const std::vector<std::string>& observed,
                                           const TrainConfig& config) {
    if (corpus.layout.names != model.layout.names)
        throw ValidationError("prediction: corpus modalities do not match the model");
    target_index(model, target);
    std::vector<std::size_t> eligible;
    for (std::size_t d = 0; d < corpus.num_docs(); ++d)
        if (has_observations(corpus.documents[d], model, observed)) eligible.push_back(d);
    std::vector<BatchPrediction> out(eligible.size());
    detail::parallel_for(eligible.size(), config.workers, [&](std::size_t i) {
        const auto& doc = corpus.documents[eligible[i]];
        out[i] = {doc.id, predict(doc, model, target, observed, config)};
    });
    return out;
}

void write_predictions_jsonl(const std::vector<BatchPrediction>& preds, const Vocabulary& target_vocab,
                             const std::string& target, std::size_t top_n, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& p : preds) {
        nlohmann::json j;
        j["id"] = p.id;
        j["target_modality"] = target;
        j["theta"] = std::vector<double>(p.result.theta_predicted.data(),
                                         p.result.theta_predicted.data() + p.result.theta_predicted.size());
        auto words = nlohmann::json::array();
        for (auto w : top_indices(p.result.word_dist, std::min(top_n, target_vocab.size())))
            words.push_back({target_vocab.terms[w], p.result.word_dist[idx(w)]});
        j["top_words"] = std::move(words);
        out << j.dump() << '\n';
    }
    if (!out) throw Error("failed writing " + path.string());
}

}  // namespace fmtm
