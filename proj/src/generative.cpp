#include "fmtm/generative.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include <boost/math/special_functions/digamma.hpp>

#include "fmtm/error.hpp"

namespace fmtm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// StickWeights

Eigen::VectorXd StickWeights::weights_from_fractions(const Eigen::VectorXd& v) {
    Eigen::VectorXd p(v.size());
    double remaining = 1.0;
    for (Eigen::Index k = 0; k < v.size(); ++k) {
        p[k] = v[k] * remaining;
        remaining *= 1.0 - v[k];
    }
    return p;
}

Eigen::VectorXd StickWeights::fractions_from_weights(const Eigen::VectorXd& p) {
    const Eigen::Index t = p.size();
    Eigen::VectorXd v = Eigen::VectorXd::Zero(t);
    // Suffix sums keep exact zeros for switched-off tails.
    double remaining = 0.0;
    std::vector<double> suffix(static_cast<std::size_t>(t));
    for (Eigen::Index k = t - 1; k >= 0; --k) {
        remaining += p[k];
        suffix[static_cast<std::size_t>(k)] = remaining;
    }
    for (Eigen::Index k = 0; k < t; ++k) {
        const double r = suffix[static_cast<std::size_t>(k)];
        v[k] = r > 0.0 ? std::min(1.0, p[k] / r) : 0.0;
    }
    if (t > 0) v[t - 1] = 1.0;
    return v;
}

StickWeights StickWeights::from_fractions(Eigen::VectorXd v, double alpha, double beta) {
    if (v.size() == 0) throw ValidationError("stick weights need at least one topic");
    v[v.size() - 1] = 1.0;
    StickWeights s;
    s.p = weights_from_fractions(v);
    s.v = std::move(v);
    s.alpha = alpha;
    s.beta = beta;
    return s;
}

std::vector<bool> StickWeights::active() const {
    std::vector<bool> a(size());
    for (std::size_t k = 0; k < size(); ++k) a[k] = p[static_cast<Eigen::Index>(k)] >= kTopicOffThreshold;
    return a;
}

void StickWeights::validate(const std::string& modality) const {
    const std::string where = "sticks of modality '" + modality + "': ";
    if (v.size() == 0 || v.size() != p.size()) throw ValidationError(where + "inconsistent lengths");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ValidationError(where + "alpha must be positive");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ValidationError(where + "beta must be positive");
    for (Eigen::Index k = 0; k < v.size(); ++k)
        if (!(v[k] >= 0.0 && v[k] <= 1.0)) throw ValidationError(where + "fraction outside [0,1] at topic " + std::to_string(k));
    if (v[v.size() - 1] != 1.0) throw ValidationError(where + "last fraction must be 1");
    const Eigen::VectorXd re = weights_from_fractions(v);
    for (Eigen::Index k = 0; k < p.size(); ++k) {
        if (!(p[k] >= 0.0 && p[k] <= 1.0)) throw ValidationError(where + "weight outside [0,1] at topic " + std::to_string(k));
        if (std::abs(re[k] - p[k]) > 1e-12) throw ValidationError(where + "weights disagree with fractions at topic " + std::to_string(k));
    }
    if (std::abs(p.sum() - 1.0) > 1e-12) throw ValidationError(where + "weights do not sum to 1");
}

// ---------------------------------------------------------------------------
// TopicDictionary / GaussianPrior / ModelParams

Eigen::MatrixXd TopicDictionary::expected_log() const {
    if (dirichlet.size() == 0) return topics.array().log().matrix();
    Eigen::MatrixXd out(dirichlet.rows(), dirichlet.cols());
    for (Eigen::Index k = 0; k < dirichlet.rows(); ++k) {
        const double total = boost::math::digamma(dirichlet.row(k).sum());
        for (Eigen::Index w = 0; w < dirichlet.cols(); ++w) out(k, w) = boost::math::digamma(dirichlet(k, w)) - total;
    }
    return out;
}

void TopicDictionary::validate() const {
    const std::string where = "dictionary of modality '" + modality + "'";
    if (!(gamma > 0.0)) throw ValidationError(where + ": gamma must be positive");
    if (topics.rows() == 0 || topics.cols() < 2) throw ValidationError(where + ": empty dictionary");
    for (Eigen::Index k = 0; k < topics.rows(); ++k) {
        const std::string topic = where + ", topic " + std::to_string(k);
        if (!topics.row(k).allFinite() || topics.row(k).minCoeff() < 0.0)
            throw ValidationError(topic + ": negative or non-finite probability");
        if (std::abs(topics.row(k).sum() - 1.0) > 1e-10) throw ValidationError(topic + ": row does not sum to 1");
    }
    if (dirichlet.size() != 0) {
        if (dirichlet.rows() != topics.rows() || dirichlet.cols() != topics.cols())
            throw ValidationError(where + ": Dirichlet parameters have the wrong shape");
        if (!dirichlet.allFinite() || dirichlet.minCoeff() <= 0.0)
            throw ValidationError(where + ": Dirichlet parameters must be positive");
    }
}

void GaussianPrior::validate() const {
    if (sigma.rows() != mu.size() || sigma.cols() != mu.size())
        throw ValidationError("Gaussian prior: covariance shape does not match mean");
    if (!mu.allFinite() || !sigma.allFinite()) throw ValidationError("Gaussian prior: non-finite entries");
    if (sigma.size() && (sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 0.0)
        throw ValidationError("Gaussian prior: covariance is not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sigma, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() <= 0.0)
        throw ValidationError("Gaussian prior: covariance is not positive definite");
}

void ModelParams::validate() const {
    const std::size_t M = layout.size();
    if (M == 0) throw ValidationError("model has no modalities");
    if (sticks.size() != M || dictionaries.size() != M)
        throw ValidationError("model: sticks/dictionaries do not match the modality count");
    if (layout.offsets.size() != M) throw ValidationError("model: layout offsets missing");
    for (std::size_t m = 0; m < M; ++m) {
        const auto& name = layout.names[m];
        if (dictionaries[m].modality != name)
            throw ValidationError("model: dictionary " + std::to_string(m) + " is for '" + dictionaries[m].modality + "'");
        if (sticks[m].size() != layout.topic_counts[m] || dictionaries[m].num_topics() != layout.topic_counts[m])
            throw ValidationError("model: topic count mismatch in modality '" + name + "'");
        sticks[m].validate(name);
        dictionaries[m].validate();
        if (tied_xi && layout.topic_counts[m] != layout.topic_counts.front())
            throw ValidationError("model: tied xi requires equal topic counts");
    }
    if (prior.dim() != xi_dim())
        throw ValidationError("model: prior dimension " + std::to_string(prior.dim()) + " but xi has " +
                              std::to_string(xi_dim()) + " coordinates");
    prior.validate();
}

// ---------------------------------------------------------------------------
// LatentRecord

json LatentRecord::to_json() const {
    json j;
    j["id"] = id;
    j["xi"] = std::vector<double>(xi.data(), xi.data() + xi.size());
    j["theta"] = json::array();
    for (const auto& t : theta) j["theta"].push_back(std::vector<double>(t.data(), t.data() + t.size()));
    j["assignments"] = assignments;
    return j;
}

// ---------------------------------------------------------------------------
// Sampling

Eigen::VectorXd expected_theta(const Eigen::Ref<const Eigen::VectorXd>& xi, const StickWeights& sticks) {
    if (static_cast<std::size_t>(xi.size()) != sticks.size())
        throw ValidationError("expected_theta: xi has " + std::to_string(xi.size()) + " entries, sticks " +
                              std::to_string(sticks.size()));
    const auto active = sticks.active();
    double shift = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < active.size(); ++k)
        if (active[k]) shift = std::max(shift, xi[static_cast<Eigen::Index>(k)]);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(xi.size());
    for (std::size_t k = 0; k < active.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        if (active[k]) w[i] = sticks.beta * sticks.p[i] * std::exp(xi[i] - shift);
    }
    const double total = w.sum();
    if (!(total > 0.0) || !std::isfinite(total)) throw NumericalError("expected_theta: every topic is switched off");
    return w / total;
}

StickWeights sample_sticks(double alpha, std::size_t t, Rng& rng, double beta) {
    if (!(alpha > 0.0)) throw ValidationError("sample_sticks: alpha must be positive");
    if (t == 0) throw ValidationError("sample_sticks: truncation must be at least 1");
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Eigen::VectorXd v(static_cast<Eigen::Index>(t));
    // Beta(1, alpha) by inversion.
    for (std::size_t k = 0; k < t; ++k) v[static_cast<Eigen::Index>(k)] = 1.0 - std::pow(1.0 - unif(rng), 1.0 / alpha);
    return StickWeights::from_fractions(std::move(v), alpha, beta);
}

namespace {

std::size_t draw_categorical(const Eigen::Ref<const Eigen::VectorXd>& probs, double u) {
    double acc = 0.0;
    const Eigen::Index n = probs.size();
    for (Eigen::Index i = 0; i < n; ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<std::size_t>(i);
    }
    // Rounding left u beyond the total: return the last positive entry.
    for (Eigen::Index i = n - 1; i >= 0; --i)
        if (probs[i] > 0.0) return static_cast<std::size_t>(i);
    return 0;
}

}  // namespace

std::pair<Document, LatentRecord> sample_document(const ModelParams& params, const std::vector<std::size_t>& lengths,
                                                  Rng& rng, std::string id) {
    const std::size_t M = params.num_modalities();
    if (lengths.size() != M) throw ValidationError("sample_document: need one length per modality");

    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    const Eigen::Index dim = static_cast<Eigen::Index>(params.xi_dim());
    Eigen::LLT<Eigen::MatrixXd> llt(params.prior.sigma);
    if (llt.info() != Eigen::Success) throw NumericalError("sample_document: prior covariance is not positive definite");
    Eigen::VectorXd z(dim);
    for (Eigen::Index i = 0; i < dim; ++i) z[i] = normal(rng);

    LatentRecord rec;
    rec.id = id;
    rec.xi = params.prior.mu + llt.matrixL() * z;

    Document doc;
    doc.id = std::move(id);
    doc.counts.resize(M);
    for (std::size_t m = 0; m < M; ++m) {
        const auto& st = params.sticks[m];
        const Eigen::Index T = static_cast<Eigen::Index>(params.topic_count(m));
        const auto off = static_cast<Eigen::Index>(params.xi_offset(m));
        const auto active = st.active();

        // Y_k ~ Gamma(shape = beta p_k, rate = exp(-xi_k)); zero shape is the point mass at 0.
        Eigen::VectorXd y = Eigen::VectorXd::Zero(T);
        for (Eigen::Index k = 0; k < T; ++k) {
            if (!active[static_cast<std::size_t>(k)]) continue;
            std::gamma_distribution<double> g(st.beta * st.p[k], std::exp(rec.xi[off + k]));
            y[k] = g(rng);
        }
        const double total = y.sum();
        if (!(total > 0.0) || !std::isfinite(total))
            throw NumericalError("sample_document: degenerate topic proportions in modality '" + params.layout.names[m] + "'");
        rec.theta.push_back(y / total);

        const auto& topics = params.dictionaries[m].topics;
        std::vector<std::uint32_t> counts(static_cast<std::size_t>(topics.cols()), 0);
        std::vector<std::uint32_t> assign;
        assign.reserve(lengths[m]);
        for (std::size_t n = 0; n < lengths[m]; ++n) {
            const auto k = draw_categorical(rec.theta.back(), unif(rng));
            const auto w = draw_categorical(topics.row(static_cast<Eigen::Index>(k)).transpose(), unif(rng));
            assign.push_back(static_cast<std::uint32_t>(k));
            ++counts[w];
        }
        rec.assignments.push_back(std::move(assign));
        for (std::size_t w = 0; w < counts.size(); ++w)
            if (counts[w]) doc.counts[m].push_back({static_cast<std::uint32_t>(w), counts[w]});
    }
    return {std::move(doc), std::move(rec)};
}

// ---------------------------------------------------------------------------
// Synthetic scenarios

ScenarioConfig ScenarioConfig::acceptance() {
    ScenarioConfig c;
    c.modalities = {"text", "image"};
    c.topic_counts = {7, 7};
    c.shared_pairs = {{0, 0, 0.9}, {1, 1, 0.9}, {2, 2, 0.9}};
    c.private_topics = {{3, 4}, {5, 6}};
    c.vocab_sizes = {200, 200};
    c.num_docs = 500;
    c.doc_lengths = {100, 100};
    c.seed = 20120401;
    c.alpha = 1.0;
    c.beta = 200.0;
    c.gamma = 0.1;
    return c;
}

ScenarioConfig ScenarioConfig::from_json(const json& j) {
    ScenarioConfig c;
    try {
        if (j.contains("modalities")) c.modalities = j["modalities"].get<std::vector<std::string>>();
        if (j.contains("topic_counts")) c.topic_counts = j["topic_counts"].get<std::vector<std::size_t>>();
        if (j.contains("shared_pairs")) {
            c.shared_pairs.clear();
            for (const auto& p : j["shared_pairs"]) {
                if (!p.is_array() || p.size() != 3) throw ValidationError("scenario: shared pair must be [k_first, k_second, corr]");
                c.shared_pairs.push_back({p[0].get<std::size_t>(), p[1].get<std::size_t>(), p[2].get<double>()});
            }
        }
        if (j.contains("private_topics")) c.private_topics = j["private_topics"].get<std::vector<std::vector<std::size_t>>>();
        else c.private_topics.assign(c.modalities.size(), {});
        if (j.contains("vocab_sizes")) c.vocab_sizes = j["vocab_sizes"].get<std::vector<std::size_t>>();
        if (j.contains("num_docs")) c.num_docs = j["num_docs"].get<std::size_t>();
        if (j.contains("doc_lengths")) c.doc_lengths = j["doc_lengths"].get<std::vector<std::size_t>>();
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("alpha")) c.alpha = j["alpha"].get<double>();
        if (j.contains("beta")) c.beta = j["beta"].get<double>();
        if (j.contains("gamma")) c.gamma = j["gamma"].get<double>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("scenario config: ") + e.what());
    }
    c.validate();
    return c;
}

json ScenarioConfig::to_json() const {
    json pairs = json::array();
    for (const auto& p : shared_pairs) pairs.push_back({p.first_topic, p.second_topic, p.correlation});
    return {{"modalities", modalities},   {"topic_counts", topic_counts}, {"shared_pairs", pairs},
            {"private_topics", private_topics}, {"vocab_sizes", vocab_sizes}, {"num_docs", num_docs},
            {"doc_lengths", doc_lengths}, {"seed", seed}, {"alpha", alpha}, {"beta", beta}, {"gamma", gamma}};
}

std::vector<std::vector<std::size_t>> ScenarioConfig::active_topics() const {
    std::vector<std::set<std::size_t>> act(modalities.size());
    for (const auto& p : shared_pairs) {
        act[0].insert(p.first_topic);
        act[1].insert(p.second_topic);
    }
    for (std::size_t m = 0; m < private_topics.size() && m < act.size(); ++m)
        act[m].insert(private_topics[m].begin(), private_topics[m].end());
    std::vector<std::vector<std::size_t>> out;
    for (const auto& s : act) out.emplace_back(s.begin(), s.end());
    return out;
}

void ScenarioConfig::validate() const {
    const std::size_t M = modalities.size();
    ModalityLayout::make(modalities, topic_counts);
    if (vocab_sizes.size() != M || doc_lengths.size() != M || private_topics.size() != M)
        throw ValidationError("scenario: vocab_sizes, doc_lengths and private_topics need one entry per modality");
    if (!shared_pairs.empty() && M < 2) throw ValidationError("scenario: shared pairs need two modalities");
    for (auto w : vocab_sizes)
        if (w < 2) throw ValidationError("scenario: vocabulary size must be at least 2");
    if (!(alpha > 0.0) || !(beta > 0.0) || !(gamma > 0.0))
        throw ValidationError("scenario: alpha, beta and gamma must be positive");
    std::set<std::pair<std::size_t, std::size_t>> seen;
    std::set<std::size_t> first_used, second_used;
    for (const auto& p : shared_pairs) {
        if (p.first_topic >= topic_counts[0] || p.second_topic >= topic_counts[1])
            throw ValidationError("scenario: shared pair topic out of range");
        if (!(std::abs(p.correlation) < 1.0))
            throw ValidationError("scenario: shared pair correlation must lie strictly inside (-1, 1)");
        if (!seen.insert({p.first_topic, p.second_topic}).second)
            throw ValidationError("scenario: duplicate shared pair");
        first_used.insert(p.first_topic);
        second_used.insert(p.second_topic);
    }
    for (std::size_t m = 0; m < M; ++m)
        for (auto k : private_topics[m]) {
            if (k >= topic_counts[m]) throw ValidationError("scenario: private topic out of range");
            if ((m == 0 && first_used.count(k)) || (m == 1 && second_used.count(k)))
                throw ValidationError("scenario: topic " + std::to_string(k) + " is both shared and private");
        }
    const auto act = active_topics();
    for (std::size_t m = 0; m < M; ++m)
        if (act[m].empty()) throw ValidationError("scenario: modality '" + modalities[m] + "' has no active topic");
}

Eigen::MatrixXd scenario_correlation(const ScenarioConfig& cfg) {
    const auto layout = ModalityLayout::make(cfg.modalities, cfg.topic_counts);
    const auto n = static_cast<Eigen::Index>(layout.total_topics);
    Eigen::MatrixXd c = Eigen::MatrixXd::Identity(n, n);
    for (const auto& p : cfg.shared_pairs) {
        const auto a = static_cast<Eigen::Index>(layout.offsets[0] + p.first_topic);
        const auto b = static_cast<Eigen::Index>(layout.offsets[1] + p.second_topic);
        c(a, b) = c(b, a) = p.correlation;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c);
    constexpr double floor = 1e-6;
    if (eig.eigenvalues().minCoeff() >= floor) return c;
    const Eigen::VectorXd clipped = eig.eigenvalues().cwiseMax(floor);
    Eigen::MatrixXd pd = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
    const Eigen::VectorXd inv_sd = pd.diagonal().cwiseSqrt().cwiseInverse();
    pd = inv_sd.asDiagonal() * pd * inv_sd.asDiagonal();
    pd = (0.5 * (pd + pd.transpose())).eval();
    pd.diagonal().setOnes();
    return pd;
}

Scenario make_synthetic_scenario(const ScenarioConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t M = cfg.modalities.size();
    Scenario sc;
    auto& truth = sc.truth;
    truth.layout = ModalityLayout::make(cfg.modalities, cfg.topic_counts);
    const auto active = cfg.active_topics();

    for (std::size_t m = 0; m < M; ++m) {
        const auto T = static_cast<Eigen::Index>(cfg.topic_counts[m]);
        Eigen::VectorXd p = Eigen::VectorXd::Zero(T);
        for (auto k : active[m]) p[static_cast<Eigen::Index>(k)] = 1.0 / static_cast<double>(active[m].size());
        auto st = StickWeights::from_fractions(StickWeights::fractions_from_weights(p), cfg.alpha, cfg.beta);
        truth.sticks.push_back(std::move(st));

        TopicDictionary dict;
        dict.modality = cfg.modalities[m];
        dict.gamma = cfg.gamma;
        const auto W = static_cast<Eigen::Index>(cfg.vocab_sizes[m]);
        dict.topics.resize(T, W);
        std::gamma_distribution<double> g(cfg.gamma, 1.0);
        for (Eigen::Index k = 0; k < T; ++k) {
            for (Eigen::Index w = 0; w < W; ++w) dict.topics(k, w) = g(rng);
            const double s = dict.topics.row(k).sum();
            if (!(s > 0.0)) throw NumericalError("make_synthetic_scenario: degenerate Dirichlet draw");
            dict.topics.row(k) /= s;
        }
        truth.dictionaries.push_back(std::move(dict));
    }
    truth.prior.sigma = scenario_correlation(cfg);
    truth.prior.mu = Eigen::VectorXd::Zero(truth.prior.sigma.rows());
    truth.validate();

    auto& corpus = sc.corpus;
    corpus.layout = truth.layout;
    for (std::size_t m = 0; m < M; ++m) {
        Vocabulary v;
        v.modality = cfg.modalities[m];
        char buf[64];
        for (std::size_t w = 0; w < cfg.vocab_sizes[m]; ++w) {
            std::snprintf(buf, sizeof buf, "%s_w%03zu", cfg.modalities[m].c_str(), w);
            v.terms.emplace_back(buf);
        }
        corpus.vocabularies.push_back(std::move(v));
    }
    for (std::size_t d = 0; d < cfg.num_docs; ++d) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "doc%05zu", d);
        auto [doc, rec] = sample_document(truth, cfg.doc_lengths, rng, buf);
        corpus.documents.push_back(std::move(doc));
        sc.latents.push_back(std::move(rec));
    }
    corpus.validate();
    return sc;
}

}  // namespace fmtm
