#include "fmtm/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "fmtm/error.hpp"
#include "fmtm/prediction.hpp"
#include "parallel.hpp"

namespace fmtm {

using nlohmann::json;

namespace {

double perplexity(double loglik, std::uint64_t tokens) {
    return std::exp(-loglik / static_cast<double>(tokens));
}

}  // namespace

double doc_log_likelihood(const SparseCounts& counts, const Eigen::VectorXd& theta, const TopicDictionary& dict) {
    const auto& eta = dict.topics;
    if (theta.size() != eta.rows()) throw ValidationError("doc_log_likelihood: theta does not match the dictionary");
    double ll = 0.0;
    for (const auto& tc : counts) {
        if (tc.index >= eta.cols()) throw ValidationError("doc_log_likelihood: token index out of range");
        const double q = theta.dot(eta.col(tc.index));
        if (!(q > 0.0))
            throw NumericalError("doc_log_likelihood: token " + std::to_string(tc.index) + " of modality '" +
                                 dict.modality + "' has zero probability");
        ll += tc.count * std::log(q);
    }
    return ll;
}

double doc_log_likelihood(const Document& doc, const Eigen::VectorXd& theta, const ModelParams& model,
                          std::size_t modality) {
    return doc_log_likelihood(doc.counts.at(modality), theta, model.dictionaries.at(modality));
}

double perplexity_from_thetas(const MultiModalCorpus& corpus, const std::vector<Eigen::VectorXd>& thetas,
                              const ModelParams& model, std::size_t modality, std::size_t workers) {
    if (thetas.size() != corpus.num_docs()) throw ValidationError("perplexity: one theta per document required");
    std::vector<double> ll(corpus.num_docs(), 0.0);
    detail::parallel_for(corpus.num_docs(), workers, [&](std::size_t d) {
        ll[d] = doc_log_likelihood(corpus.documents[d], thetas[d], model, modality);
    });
    double total = 0.0;
    std::uint64_t tokens = 0;
    for (std::size_t d = 0; d < corpus.num_docs(); ++d) {
        total += ll[d];
        tokens += corpus.documents[d].length(modality);
    }
    if (tokens == 0) throw ValidationError("perplexity: no tokens in modality '" + model.layout.names[modality] + "'");
    return perplexity(total, tokens);
}

double train_perplexity(const ModelParams& model, const TrainState& state, const MultiModalCorpus& corpus,
                        std::size_t modality) {
    if (state.docs.size() != corpus.num_docs()) throw ValidationError("train_perplexity: state and corpus differ in size");
    std::vector<Eigen::VectorXd> thetas;
    thetas.reserve(corpus.num_docs());
    for (const auto& d : state.docs) thetas.push_back(d.theta(modality));
    return perplexity_from_thetas(corpus, thetas, model, modality, state.config.workers);
}

ConditionalResult conditional_perplexity(const ModelParams& model, const MultiModalCorpus& test,
                                         const std::string& target, const std::string& observed,
                                         const TrainConfig& config, Predictor predictor) {
    if (test.layout.names != model.layout.names)
        throw ValidationError("conditional_perplexity: test corpus modalities do not match the model");
    const std::size_t t = model.layout.index_of(target);
    const std::size_t o = model.layout.index_of(observed);
    std::vector<std::size_t> eligible;
    for (std::size_t d = 0; d < test.num_docs(); ++d)
        if (!test.documents[d].counts[t].empty() && !test.documents[d].counts[o].empty()) eligible.push_back(d);
    if (eligible.empty()) throw ValidationError("conditional_perplexity: every test document was skipped");

    PredictionResult prior;
    if (predictor == Predictor::PriorMean) prior = predict_prior_mean(model, target);
    std::vector<double> ll(eligible.size(), 0.0);
    detail::parallel_for(eligible.size(), config.workers, [&](std::size_t i) {
        const auto& doc = test.documents[eligible[i]];
        const Eigen::VectorXd theta = predictor == Predictor::PriorMean
                                          ? prior.theta_predicted
                                          : predict(doc, model, target, observed, config).theta_predicted;
        ll[i] = doc_log_likelihood(doc, theta, model, t);
    });
    ConditionalResult r;
    for (std::size_t i = 0; i < eligible.size(); ++i) {
        r.log_likelihood += ll[i];
        r.tokens += test.documents[eligible[i]].length(t);
    }
    r.documents = eligible.size();
    r.perplexity = perplexity(r.log_likelihood, r.tokens);
    return r;
}

json EvalReport::to_json() const {
    json dirs = json::array();
    for (const auto& d : conditional)
        dirs.push_back({{"target", d.target},
                        {"observed", d.observed},
                        {"perplexity", d.result.perplexity},
                        {"log_likelihood", d.result.log_likelihood},
                        {"tokens", d.result.tokens},
                        {"documents", d.result.documents}});
    return {{"model_id", model_id},       {"config_hash", config_hash}, {"corpus_hash", corpus_hash},
            {"modalities", modalities},   {"train_perplexity", train_perplexity},
            {"conditional", std::move(dirs)}};
}

EvalReport EvalReport::from_json(const json& j) {
    EvalReport r;
    try {
        r.model_id = j.at("model_id").get<std::string>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.corpus_hash = j.at("corpus_hash").get<std::string>();
        r.modalities = j.at("modalities").get<std::vector<std::string>>();
        r.train_perplexity = j.at("train_perplexity").get<std::vector<double>>();
        for (const auto& d : j.at("conditional")) {
            DirectionResult dr;
            dr.target = d.at("target").get<std::string>();
            dr.observed = d.at("observed").get<std::string>();
            dr.result.perplexity = d.at("perplexity").get<double>();
            dr.result.log_likelihood = d.at("log_likelihood").get<double>();
            dr.result.tokens = d.at("tokens").get<std::uint64_t>();
            dr.result.documents = d.at("documents").get<std::size_t>();
            r.conditional.push_back(dr);
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("eval report: ") + e.what());
    }
    return r;
}

EvalReport evaluate_model(const ModelParams& model, const MultiModalCorpus& test, const std::string& model_id,
                          const std::string& config_hash, const std::vector<double>& train_perplexity,
                          const TrainConfig& config, Predictor predictor) {
    EvalReport r;
    r.model_id = model_id;
    r.config_hash = config_hash;
    r.corpus_hash = corpus_hash(test);
    r.modalities = model.layout.names;
    r.train_perplexity = train_perplexity;
    for (const auto& target : model.layout.names)
        for (const auto& observed : model.layout.names)
            if (target != observed)
                r.conditional.push_back(
                    {target, observed, conditional_perplexity(model, test, target, observed, config, predictor)});
    return r;
}

ComparisonTable compare_models(const std::vector<EvalReport>& reports) {
    if (reports.size() < 2) throw ValidationError("compare_models: at least two reports required");
    const auto& first = reports.front();
    for (const auto& r : reports) {
        if (r.corpus_hash != first.corpus_hash)
            throw ValidationError("compare_models: report '" + r.model_id + "' was evaluated on a different corpus");
        if (r.modalities != first.modalities || r.conditional.size() != first.conditional.size())
            throw ValidationError("compare_models: report '" + r.model_id + "' has different metrics");
    }
    bool with_train = true;
    for (const auto& r : reports) with_train = with_train && r.train_perplexity.size() == r.modalities.size();

    ComparisonTable t;
    if (with_train)
        for (const auto& m : first.modalities) t.columns.push_back("train_" + m);
    for (const auto& d : first.conditional) t.columns.push_back("cond_" + d.target + "|" + d.observed);
    for (const auto& r : reports) {
        std::vector<double> row;
        if (with_train) row = r.train_perplexity;
        for (std::size_t i = 0; i < r.conditional.size(); ++i) {
            const auto& d = r.conditional[i];
            if (d.target != first.conditional[i].target || d.observed != first.conditional[i].observed)
                throw ValidationError("compare_models: report '" + r.model_id + "' has different metrics");
            row.push_back(d.result.perplexity);
        }
        t.models.push_back(r.model_id);
        t.values.push_back(std::move(row));
    }
    t.best.assign(reports.size(), std::vector<bool>(t.columns.size(), false));
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
        std::size_t arg = 0;
        std::size_t ties = 0;
        for (std::size_t r = 0; r < reports.size(); ++r) {
            if (t.values[r][c] < t.values[arg][c]) {
                arg = r;
                ties = 0;
            } else if (r != arg && t.values[r][c] == t.values[arg][c]) {
                ++ties;
            }
        }
        if (ties == 0) t.best[arg][c] = true;
    }
    return t;
}

void ComparisonTable::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "model";
    for (const auto& c : columns) out << ',' << c << ',' << c << "_best";
    out << '\n';
    for (std::size_t r = 0; r < models.size(); ++r) {
        out << models[r];
        for (std::size_t c = 0; c < columns.size(); ++c) {
            std::ostringstream v;
            v.precision(17);
            v << values[r][c];
            out << ',' << v.str() << ',' << (best[r][c] ? 1 : 0);
        }
        out << '\n';
    }
}

}  // namespace fmtm
