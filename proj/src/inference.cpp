#include "fmtm/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/tools/minima.hpp>

#include "fmtm/error.hpp"
#include "fmtm/evaluation.hpp"
#include "parallel.hpp"

namespace fmtm {

using nlohmann::json;
using boost::math::digamma;

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kAlphaMin = 1e-3, kAlphaMax = 1e3;
constexpr double kBetaMin = 1e-3, kBetaMax = 1e4;

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

/// E[exp(-xi)] = exp(-xi_mean + xi_var / 2) over one block.
Eigen::VectorXd expected_exp_neg_xi(const DocVariational& d, std::size_t off, std::size_t T) {
    return (-d.xi_mean.segment(idx(off), idx(T)) + 0.5 * d.xi_var.segment(idx(off), idx(T))).array().exp().matrix();
}

Eigen::VectorXd expected_log_y(const DocVariational& d, std::size_t m) {
    const auto& a = d.y_shape[m];
    const auto& b = d.y_rate[m];
    Eigen::VectorXd out(a.size());
    for (Eigen::Index k = 0; k < a.size(); ++k)
        out[k] = a[k] > 0.0 ? digamma(a[k]) - std::log(b[k]) : -std::numeric_limits<double>::infinity();
    return out;
}

/// Gamma(a, rate b) entropy.
double gamma_entropy(double a, double b) {
    return a - std::log(b) + std::lgamma(a) + (1.0 - a) * digamma(a);
}

/// The xi objective reduced to coefficients:
///   -b'x - sum_k a_k exp(-x_k + v_k/2) - (x-mu)'P(x-mu)/2 - diag(P)'v/2 + sum(log v)/2
/// With tied xi the per-modality coefficients add up on shared coordinates.
struct XiProblem {
    Eigen::VectorXd b;  // sum_m beta p
    Eigen::VectorXd a;  // sum_m E[Y]
    const Eigen::VectorXd* mu = nullptr;
    const Eigen::MatrixXd* precision = nullptr;

    XiProblem(const DocVariational& doc, const ModelParams& params, const Eigen::MatrixXd& prec)
        : b(Eigen::VectorXd::Zero(idx(params.xi_dim()))), a(Eigen::VectorXd::Zero(idx(params.xi_dim()))),
          mu(&params.prior.mu), precision(&prec) {
        for (std::size_t m = 0; m < params.num_modalities(); ++m) {
            const auto& st = params.sticks[m];
            const auto off = idx(params.xi_offset(m));
            const auto active = st.active();
            const Eigen::VectorXd ey = doc.expected_y(m);
            for (std::size_t k = 0; k < active.size(); ++k) {
                if (!active[k]) continue;
                b[off + idx(k)] += st.beta * st.p[idx(k)];
                a[off + idx(k)] += ey[idx(k)];
            }
        }
    }

    double value(const Eigen::VectorXd& x, const Eigen::VectorXd& v) const {
        const Eigen::VectorXd r = x - *mu;
        double f = -b.dot(x);
        f -= (a.array() * (-x.array() + 0.5 * v.array()).exp()).sum();
        f -= 0.5 * r.dot(*precision * r);
        f -= 0.5 * precision->diagonal().dot(v);
        f += 0.5 * v.array().log().sum();
        return f;
    }

    XiGradient gradient(const Eigen::VectorXd& x, const Eigen::VectorXd& v) const {
        const Eigen::VectorXd ae = (a.array() * (-x.array() + 0.5 * v.array()).exp()).matrix();
        XiGradient g;
        g.mean = -b + ae - *precision * (x - *mu);
        g.var = (-0.5 * ae.array() - 0.5 * precision->diagonal().array() + 0.5 / v.array()).matrix();
        return g;
    }
};

Eigen::MatrixXd precision_of(const ModelParams& params, double* log_det = nullptr) {
    Eigen::LLT<Eigen::MatrixXd> llt(params.prior.sigma);
    if (llt.info() != Eigen::Success) throw NumericalError("prior covariance is singular or indefinite");
    const auto n = params.prior.sigma.rows();
    Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(n, n));
    inv = (0.5 * (inv + inv.transpose())).eval();
    if (log_det) *log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return inv;
}

void check_positive_var(const DocVariational& doc) {
    if (!(doc.xi_var.array() > 0.0).all()) throw NumericalError("xi variance must be positive");
}

/// Initial q(z), q(Y) for a document given its q(xi): uniform responsibilities,
/// Y at the matching Gamma update against the prior-mean normalizer.
void init_local_factors(const Document& doc, DocVariational& var, const ModelParams& params) {
    const std::size_t M = params.num_modalities();
    var.y_shape.assign(M, {});
    var.y_rate.assign(M, {});
    var.resp.assign(M, {});
    for (std::size_t m = 0; m < M; ++m) {
        const auto& st = params.sticks[m];
        const std::size_t T = params.topic_count(m);
        const auto active = st.active();
        const auto n_active = static_cast<double>(std::count(active.begin(), active.end(), true));
        const Eigen::VectorXd rexp = expected_exp_neg_xi(var, params.xi_offset(m), T);
        const auto& bag = doc.counts[m];
        var.resp[m] = Eigen::MatrixXd::Zero(idx(bag.size()), idx(T));
        double t0 = 0.0;
        for (std::size_t k = 0; k < T; ++k)
            if (active[k]) t0 += st.beta * st.p[idx(k)] / rexp[idx(k)];
        const double N = static_cast<double>(doc.length(m));
        var.y_shape[m] = Eigen::VectorXd::Zero(idx(T));
        var.y_rate[m] = Eigen::VectorXd::Ones(idx(T));
        for (std::size_t k = 0; k < T; ++k) {
            if (!active[k]) continue;
            for (std::size_t i = 0; i < bag.size(); ++i) var.resp[m](idx(i), idx(k)) = 1.0 / n_active;
            var.y_shape[m][idx(k)] = st.beta * st.p[idx(k)] + N / n_active;
            var.y_rate[m][idx(k)] = rexp[idx(k)] + (N > 0.0 ? N / t0 : 0.0);
        }
    }
}

void permute_state(TrainState& state, std::size_t m, const std::vector<std::size_t>& order);

struct DocTerms {
    double words = 0.0, assignments = 0.0, y = 0.0, xi = 0.0;
};

DocTerms doc_elbo(const Document& doc, const DocVariational& var, const ModelParams& params, const GlobalCache& cache) {
    DocTerms out;
    const auto K = params.xi_dim();
    const Eigen::VectorXd r = var.xi_mean - params.prior.mu;
    out.xi = -0.5 * (static_cast<double>(K) * kLog2Pi + cache.log_det_sigma + r.dot(cache.precision * r) +
                     cache.precision.diagonal().dot(var.xi_var));
    out.xi += 0.5 * ((var.xi_var.array() * (2.0 * M_PI)).log() + 1.0).sum();

    for (std::size_t m = 0; m < params.num_modalities(); ++m) {
        const auto& st = params.sticks[m];
        const std::size_t T = params.topic_count(m);
        const std::size_t off = params.xi_offset(m);
        const auto active = st.active();
        const Eigen::VectorXd rexp = expected_exp_neg_xi(var, off, T);
        const Eigen::VectorXd ey = var.expected_y(m);
        const Eigen::VectorXd elogy = expected_log_y(var, m);
        for (std::size_t k = 0; k < T; ++k) {
            if (!active[k]) continue;
            const auto kk = idx(k);
            const double bp = st.beta * st.p[kk];
            const double a = var.y_shape[m][kk], b = var.y_rate[m][kk];
            out.y += -bp * var.xi_mean[idx(off) + kk] - std::lgamma(bp) + (bp - 1.0) * elogy[kk] - rexp[kk] * ey[kk];
            out.y += gamma_entropy(a, b);
        }
        const auto& bag = doc.counts[m];
        if (bag.empty()) continue;
        const auto& elog_eta = cache.expected_log_eta[m];
        const auto& R = var.resp[m];
        double N = 0.0;
        for (std::size_t i = 0; i < bag.size(); ++i) {
            const double c = bag[i].count;
            N += c;
            for (std::size_t k = 0; k < T; ++k) {
                const double rik = R(idx(i), idx(k));
                if (rik <= 0.0) continue;
                out.words += c * rik * elog_eta(idx(k), bag[i].index);
                out.assignments += c * rik * (elogy[idx(k)] - std::log(rik));
            }
        }
        out.assignments -= N * std::log(ey.sum());
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
        };
        get("max_sweeps", c.max_sweeps);
        get("tolerance", c.tolerance);
        get("max_inner_steps", c.max_inner_steps);
        get("max_backtracks", c.max_backtracks);
        get("backtrack_shrink", c.backtrack_shrink);
        get("armijo", c.armijo);
        get("jitter", c.jitter);
        get("seed", c.seed);
        get("tied_xi", c.tied_xi);
        get("truncation", c.truncation);
        get("local_iterations", c.local_iterations);
        get("gamma", c.gamma);
        get("alpha", c.alpha);
        get("beta", c.beta);
        get("init_noise", c.init_noise);
        get("stick_floor", c.stick_floor);
        get("sort_topics", c.sort_topics);
        get("workers", c.workers);
        get("check_invariants", c.check_invariants);
        get("mu_per_topic", c.mu_per_topic);
        get("learn_beta", c.learn_beta);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("train config: ") + e.what());
    }
    return c;
}

json TrainConfig::to_json() const {
    return {{"max_sweeps", max_sweeps},
            {"tolerance", tolerance},
            {"max_inner_steps", max_inner_steps},
            {"max_backtracks", max_backtracks},
            {"backtrack_shrink", backtrack_shrink},
            {"armijo", armijo},
            {"jitter", jitter},
            {"seed", seed},
            {"tied_xi", tied_xi},
            {"truncation", truncation},
            {"local_iterations", local_iterations},
            {"gamma", gamma},
            {"alpha", alpha},
            {"beta", beta},
            {"init_noise", init_noise},
            {"stick_floor", stick_floor},
            {"sort_topics", sort_topics},
            {"workers", workers},
            {"check_invariants", check_invariants},
            {"mu_per_topic", mu_per_topic},
            {"learn_beta", learn_beta}};
}

void TrainConfig::validate() const {
    if (max_sweeps == 0) throw ValidationError("train config: max_sweeps must be at least 1");
    if (!(tolerance > 0.0 && tolerance < 1.0)) throw ValidationError("train config: tolerance must lie in (0, 1)");
    if (max_inner_steps == 0 || max_backtracks == 0) throw ValidationError("train config: line-search limits must be positive");
    if (!(backtrack_shrink > 0.0 && backtrack_shrink < 1.0)) throw ValidationError("train config: backtrack_shrink must lie in (0, 1)");
    if (!(armijo > 0.0 && armijo < 1.0)) throw ValidationError("train config: armijo must lie in (0, 1)");
    if (!(jitter > 0.0)) throw ValidationError("train config: jitter must be positive");
    if (local_iterations == 0) throw ValidationError("train config: local_iterations must be positive");
    if (!(gamma > 0.0) || !(alpha > 0.0) || !(beta > 0.0)) throw ValidationError("train config: gamma, alpha, beta must be positive");
    if (!(init_noise >= 0.0 && init_noise <= 1.0)) throw ValidationError("train config: init_noise must lie in [0, 1]");
    if (!(stick_floor >= kTopicOffThreshold && stick_floor < 0.01))
        throw ValidationError("train config: stick_floor must lie in [1e-10, 0.01)");
    if (workers == 0) throw ValidationError("train config: workers must be positive");
    for (auto t : truncation)
        if (t < 2) throw ValidationError("train config: truncation levels must be at least 2");
}

std::string TrainConfig::hash() const {
    json j = to_json();
    j.erase("workers");  // any worker count gives the same model
    j.erase("check_invariants");
    Fnv1a h;
    h.update(j.dump());
    return h.hex();
}

// ---------------------------------------------------------------------------
// DocVariational / TrainState / GlobalCache

Eigen::VectorXd DocVariational::expected_y(std::size_t m) const {
    const auto& a = y_shape[m];
    const auto& b = y_rate[m];
    Eigen::VectorXd out(a.size());
    for (Eigen::Index k = 0; k < a.size(); ++k) out[k] = a[k] > 0.0 ? a[k] / b[k] : 0.0;
    return out;
}

Eigen::VectorXd DocVariational::theta(std::size_t m) const {
    Eigen::VectorXd ey = expected_y(m);
    const double s = ey.sum();
    if (!(s > 0.0)) throw NumericalError("document has no active topic");
    return ey / s;
}

std::vector<double> TrainState::elbo_trace() const {
    std::vector<double> out;
    out.reserve(trace.size());
    for (const auto& r : trace) out.push_back(r.elbo);
    return out;
}

GlobalCache GlobalCache::build(const ModelParams& params) {
    GlobalCache c;
    for (const auto& d : params.dictionaries) c.expected_log_eta.push_back(d.expected_log());
    c.precision = precision_of(params, &c.log_det_sigma);
    return c;
}

// ---------------------------------------------------------------------------
// Initialization

DocVariational initial_doc_variational(const Document& doc, const ModelParams& params) {
    DocVariational var;
    var.xi_mean = params.prior.mu;
    var.xi_var = Eigen::VectorXd::Ones(idx(params.xi_dim()));
    init_local_factors(doc, var, params);
    return var;
}

TrainState init_state(const MultiModalCorpus& corpus, const TrainConfig& config, Rng& rng) {
    config.validate();
    if (corpus.num_docs() == 0) throw ValidationError("init_state: corpus has no documents");
    const std::size_t M = corpus.layout.size();
    std::vector<std::size_t> counts = config.truncation.empty() ? corpus.layout.topic_counts : config.truncation;
    if (counts.size() == 1 && M > 1) counts.assign(M, counts.front());
    if (counts.size() != M) throw ValidationError("init_state: truncation needs one level per modality");
    for (auto t : counts)
        if (t < 2) throw ValidationError("init_state: truncation levels must be at least 2");
    if (config.tied_xi && std::adjacent_find(counts.begin(), counts.end(), std::not_equal_to<>()) != counts.end())
        throw ValidationError("init_state: tied xi requires equal truncation levels");

    TrainState state;
    state.config = config;
    auto& params = state.params;
    params.layout = ModalityLayout::make(corpus.layout.names, counts);
    params.tied_xi = config.tied_xi;

    std::gamma_distribution<double> unit_gamma(1.0, 1.0);
    for (std::size_t m = 0; m < M; ++m) {
        const std::size_t T = counts[m];
        Eigen::VectorXd v = Eigen::VectorXd::Constant(idx(T), 1.0 / (1.0 + config.alpha));
        params.sticks.push_back(StickWeights::from_fractions(std::move(v), config.alpha, config.beta));

        const std::size_t W = corpus.vocabularies[m].size();
        Eigen::VectorXd freq = Eigen::VectorXd::Ones(idx(W));  // add-one smoothing
        for (const auto& d : corpus.documents)
            for (const auto& tc : d.counts[m]) freq[tc.index] += tc.count;
        const double total_tokens = freq.sum() - static_cast<double>(W);
        freq /= freq.sum();
        const double mass = std::max(1.0, total_tokens / static_cast<double>(T));

        TopicDictionary dict;
        dict.modality = corpus.layout.names[m];
        dict.gamma = config.gamma;
        dict.dirichlet.resize(idx(T), idx(W));
        for (std::size_t k = 0; k < T; ++k) {
            Eigen::VectorXd noise(idx(W));
            for (std::size_t w = 0; w < W; ++w) noise[idx(w)] = unit_gamma(rng);
            noise /= noise.sum();
            const Eigen::VectorXd row = (1.0 - config.init_noise) * freq + config.init_noise * noise;
            dict.dirichlet.row(idx(k)) = (config.gamma + mass * row.array()).matrix().transpose();
        }
        dict.topics = dict.dirichlet.array().colwise() / dict.dirichlet.rowwise().sum().array();
        params.dictionaries.push_back(std::move(dict));
    }
    const auto K = idx(params.xi_dim());
    params.prior.mu = Eigen::VectorXd::Zero(K);
    params.prior.sigma = Eigen::MatrixXd::Identity(K, K);

    std::normal_distribution<double> normal(0.0, std::sqrt(0.1));
    state.docs.reserve(corpus.num_docs());
    for (const auto& doc : corpus.documents) {
        DocVariational var;
        var.xi_mean.resize(K);
        for (Eigen::Index i = 0; i < K; ++i) var.xi_mean[i] = normal(rng);
        var.xi_var = Eigen::VectorXd::Ones(K);
        init_local_factors(doc, var, params);
        state.docs.push_back(std::move(var));
    }
    return state;
}

// ---------------------------------------------------------------------------
// q(xi)

double elbo_xi(const DocVariational& doc, const ModelParams& params) {
    check_positive_var(doc);
    const Eigen::MatrixXd prec = precision_of(params);
    return XiProblem(doc, params, prec).value(doc.xi_mean, doc.xi_var);
}

XiGradient grad_xi(const DocVariational& doc, const ModelParams& params) {
    check_positive_var(doc);
    const Eigen::MatrixXd prec = precision_of(params);
    return XiProblem(doc, params, prec).gradient(doc.xi_mean, doc.xi_var);
}

DocVariational update_xi(const DocVariational& doc, const ModelParams& params, const TrainConfig& config) {
    return update_xi(doc, params, GlobalCache::build(params), config);
}

DocVariational update_xi(const DocVariational& doc, const ModelParams& params, const GlobalCache& cache,
                         const TrainConfig& config) {
    check_positive_var(doc);
    const XiProblem prob(doc, params, cache.precision);
    const Eigen::VectorXd diag_prec = cache.precision.diagonal();

    DocVariational out = doc;
    out.xi_stalled = false;
    Eigen::VectorXd x = doc.xi_mean;
    Eigen::VectorXd s = doc.xi_var.array().log().matrix();  // log-variance keeps v > 0
    Eigen::VectorXd v = doc.xi_var;
    double f = prob.value(x, v);
    if (!std::isfinite(f)) throw NumericalError("xi objective is not finite");

    for (std::size_t step = 0; step < config.max_inner_steps; ++step) {
        const XiGradient g = prob.gradient(x, v);
        const Eigen::VectorXd gs = g.var.cwiseProduct(v);  // chain rule through v = exp(s)
        if (std::max(g.mean.cwiseAbs().maxCoeff(), gs.cwiseAbs().maxCoeff()) < 1e-12) break;

        // Diagonal curvature of the negated objective as a preconditioner.
        const Eigen::ArrayXd ae = prob.a.array() * (-x.array() + 0.5 * v.array()).exp();
        const Eigen::ArrayXd hx = ae + diag_prec.array();
        const Eigen::ArrayXd hs =
            (ae * (0.25 * v.array().square() + 0.5 * v.array()) + 0.5 * diag_prec.array() * v.array()).max(1e-2);
        const Eigen::VectorXd dx = (g.mean.array() / hx).matrix();
        const Eigen::VectorXd ds = (gs.array() / hs).matrix();
        const double slope = g.mean.dot(dx) + gs.dot(ds);

        double t = 1.0;
        bool accepted = false;
        for (std::size_t bt = 0; bt < config.max_backtracks; ++bt, t *= config.backtrack_shrink) {
            const Eigen::VectorXd x_new = x + t * dx;
            const Eigen::VectorXd s_new = s + t * ds;
            const Eigen::VectorXd v_new = s_new.array().exp().matrix();
            const double f_new = prob.value(x_new, v_new);
            if (std::isfinite(f_new) && (v_new.array() > 0.0).all() && f_new >= f + config.armijo * t * slope) {
                const double gain = f_new - f;
                x = x_new;
                s = s_new;
                v = v_new;
                f = f_new;
                accepted = true;
                if (gain <= 1e-15 * std::abs(f)) step = config.max_inner_steps;  // converged
                break;
            }
        }
        if (!accepted) {
            if (step == 0) out.xi_stalled = true;
            break;
        }
    }
    out.xi_mean = x;
    out.xi_var = v;
    return out;
}

// ---------------------------------------------------------------------------
// q(z), q(Y)

DocVariational update_local(const Document& doc, const DocVariational& var, const ModelParams& params) {
    return update_local(doc, var, params, GlobalCache::build(params));
}

DocVariational update_local(const Document& doc, const DocVariational& var, const ModelParams& params,
                            const GlobalCache& cache) {
    const std::size_t M = params.num_modalities();
    if (doc.counts.size() != M || var.y_shape.size() != M || var.resp.size() != M)
        throw ValidationError("update_local: document and factors do not match the model's modalities");
    DocVariational out = var;
    for (std::size_t m = 0; m < M; ++m) {
        const auto& st = params.sticks[m];
        const std::size_t T = params.topic_count(m);
        const auto active = st.active();
        const auto& bag = doc.counts[m];
        if (static_cast<std::size_t>(var.resp[m].rows()) != bag.size() ||
            static_cast<std::size_t>(var.resp[m].cols()) != T)
            throw ValidationError("update_local: responsibility shape mismatch in modality '" + params.layout.names[m] + "'");

        const Eigen::VectorXd rexp = expected_exp_neg_xi(var, params.xi_offset(m), T);
        const Eigen::VectorXd ey = var.expected_y(m);
        const Eigen::VectorXd elogy = expected_log_y(var, m);
        const double t = ey.sum();  // normalizer bound point, from the current q(Y)
        const auto& elog_eta = cache.expected_log_eta[m];

        Eigen::VectorXd n = Eigen::VectorXd::Zero(idx(T));
        double N = 0.0;
        auto& R = out.resp[m];
        Eigen::VectorXd logits(idx(T));
        for (std::size_t i = 0; i < bag.size(); ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < T; ++k) {
                logits[idx(k)] = active[k] ? elog_eta(idx(k), bag[i].index) + elogy[idx(k)]
                                           : -std::numeric_limits<double>::infinity();
                mx = std::max(mx, logits[idx(k)]);
            }
            double z = 0.0;
            for (std::size_t k = 0; k < T; ++k) {
                const double e = active[k] ? std::exp(logits[idx(k)] - mx) : 0.0;
                R(idx(i), idx(k)) = e;
                z += e;
            }
            R.row(idx(i)) /= z;
            n += static_cast<double>(bag[i].count) * R.row(idx(i)).transpose();
            N += bag[i].count;
        }
        if (N > 0.0 && !(t > 0.0)) throw NumericalError("update_local: empty normalizer");
        for (std::size_t k = 0; k < T; ++k) {
            const auto kk = idx(k);
            if (!active[k]) {
                out.y_shape[m][kk] = 0.0;
                out.y_rate[m][kk] = 1.0;
                continue;
            }
            out.y_shape[m][kk] = st.beta * st.p[kk] + n[kk];
            out.y_rate[m][kk] = rexp[kk] + (N > 0.0 ? N / t : 0.0);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Globals

GaussianPrior update_mu_sigma(const std::vector<DocVariational>& docs, double jitter, const Eigen::VectorXd* fixed_mu) {
    if (docs.empty()) throw ValidationError("update_mu_sigma: no documents");
    const auto K = docs.front().xi_mean.size();
    const double D = static_cast<double>(docs.size());
    GaussianPrior g;
    if (fixed_mu) {
        if (fixed_mu->size() != K) throw ValidationError("update_mu_sigma: fixed mean has the wrong dimension");
        g.mu = *fixed_mu;
    } else {
        g.mu = Eigen::VectorXd::Zero(K);
        for (const auto& d : docs) g.mu += d.xi_mean;
        g.mu /= D;
    }
    g.sigma = Eigen::MatrixXd::Zero(K, K);
    for (const auto& d : docs) {
        const Eigen::VectorXd r = d.xi_mean - g.mu;
        g.sigma.noalias() += r * r.transpose();
        g.sigma.diagonal() += d.xi_var;
    }
    g.sigma /= D;
    g.sigma = (0.5 * (g.sigma + g.sigma.transpose())).eval();
    const double floor = jitter * g.sigma.trace() / static_cast<double>(K);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g.sigma, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < floor) g.sigma.diagonal().array() += floor;
    return g;
}

Eigen::VectorXd modality_mean(const std::vector<DocVariational>& docs, const ModelParams& params) {
    if (docs.empty()) throw ValidationError("modality_mean: no documents");
    const auto K = idx(params.xi_dim());
    const auto G = params.tied_xi ? Eigen::Index{1} : idx(params.num_modalities());
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(K, G);
    for (Eigen::Index g = 0; g < G; ++g) {
        const auto m = static_cast<std::size_t>(g);
        const auto T = params.tied_xi ? params.xi_dim() : params.layout.topic_counts[m];
        A.block(idx(params.xi_offset(m)), g, idx(T), 1).setOnes();
    }
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(K);
    for (const auto& d : docs) mean += d.xi_mean;
    mean /= static_cast<double>(docs.size());
    // Generalized least squares under the current Sigma.
    const Eigen::LLT<Eigen::MatrixXd> llt(params.prior.sigma);
    const Eigen::MatrixXd PA = llt.solve(A);
    const Eigen::VectorXd c = (A.transpose() * PA).ldlt().solve(PA.transpose() * mean);
    return A * c;
}

std::vector<TopicDictionary> update_topics(const MultiModalCorpus& corpus, const std::vector<DocVariational>& docs,
                                           const ModelParams& params) {
    std::vector<TopicDictionary> out;
    for (std::size_t m = 0; m < params.num_modalities(); ++m) {
        const auto& old = params.dictionaries[m];
        TopicDictionary dict;
        dict.modality = old.modality;
        dict.gamma = old.gamma;
        dict.dirichlet = Eigen::MatrixXd::Constant(old.topics.rows(), old.topics.cols(), old.gamma);
        for (std::size_t d = 0; d < corpus.num_docs(); ++d) {
            const auto& bag = corpus.documents[d].counts[m];
            const auto& R = docs[d].resp[m];
            for (std::size_t i = 0; i < bag.size(); ++i)
                dict.dirichlet.col(bag[i].index) += static_cast<double>(bag[i].count) * R.row(idx(i)).transpose();
        }
        dict.topics = dict.dirichlet.array().colwise() / dict.dirichlet.rowwise().sum().array();
        out.push_back(std::move(dict));
    }
    return out;
}

namespace {

/// Collapsed stick objective for one modality: q(Y) re-optimized for every
/// candidate (p, beta) with q(xi), q(z) and the normalizer points held fixed.
///   sum_{d,k} lgamma(beta p_k + n_dk) - lgamma(beta p_k) - beta p_k L_dk
///   + (T-1) log alpha + (alpha - 1) sum_{k<T-1} log(1 - V_k)
struct StickProblem {
    Eigen::MatrixXd n;  // D x T expected counts
    Eigen::MatrixXd L;  // D x T, log(rate of the optimal q(Y)) + xi_mean
    Eigen::MatrixXd rate;

    double data(const Eigen::VectorXd& p, double beta) const {
        double f = 0.0;
        for (Eigen::Index k = 0; k < p.size(); ++k) {
            const double bp = beta * p[k];
            const double lg = std::lgamma(bp);
            for (Eigen::Index d = 0; d < n.rows(); ++d) f += std::lgamma(bp + n(d, k)) - lg - bp * L(d, k);
        }
        return f;
    }

    static double prior(const Eigen::VectorXd& v, double alpha) {
        const Eigen::Index T = v.size();
        double f = static_cast<double>(T - 1) * std::log(alpha);
        for (Eigen::Index k = 0; k + 1 < T; ++k) f += (alpha - 1.0) * std::log1p(-v[k]);
        return f;
    }

    static double best_alpha(const Eigen::VectorXd& v) {
        const Eigen::Index T = v.size();
        double s = 0.0;
        for (Eigen::Index k = 0; k + 1 < T; ++k) s += std::log1p(-v[k]);
        if (T < 2) return 1.0;
        if (!(s < 0.0)) return kAlphaMax;
        return std::clamp(-static_cast<double>(T - 1) / s, kAlphaMin, kAlphaMax);
    }
};

StickProblem build_stick_problem(const MultiModalCorpus& corpus, const TrainState& state, std::size_t m) {
    const auto& params = state.params;
    const std::size_t T = params.topic_count(m);
    const std::size_t off = params.xi_offset(m);
    const auto D = idx(corpus.num_docs());
    StickProblem sp;
    sp.n = Eigen::MatrixXd::Zero(D, idx(T));
    sp.L = Eigen::MatrixXd::Zero(D, idx(T));
    sp.rate = Eigen::MatrixXd::Zero(D, idx(T));
    for (Eigen::Index d = 0; d < D; ++d) {
        const auto& var = state.docs[static_cast<std::size_t>(d)];
        const auto& bag = corpus.documents[static_cast<std::size_t>(d)].counts[m];
        double N = 0.0;
        for (std::size_t i = 0; i < bag.size(); ++i) {
            sp.n.row(d) += static_cast<double>(bag[i].count) * var.resp[m].row(idx(i));
            N += bag[i].count;
        }
        const double t = var.expected_y(m).sum();
        const Eigen::VectorXd rexp = expected_exp_neg_xi(var, off, T);
        for (std::size_t k = 0; k < T; ++k) {
            const double r = rexp[idx(k)] + (N > 0.0 ? N / t : 0.0);
            sp.rate(d, idx(k)) = r;
            sp.L(d, idx(k)) = std::log(r) + var.xi_mean[idx(off + k)];
        }
    }
    return sp;
}

/// Feasible interval for v_k keeping every weight >= floor.
std::pair<double, double> fraction_bounds(const Eigen::VectorXd& v, Eigen::Index k, double floor) {
    double before = 1.0;
    for (Eigen::Index i = 0; i < k; ++i) before *= 1.0 - v[i];
    double lo = floor / before;
    double min_tail = std::numeric_limits<double>::infinity();
    double run = before;  // remaining stick after k, excluding the (1 - v_k) factor
    for (Eigen::Index j = k + 1; j < v.size(); ++j) {
        min_tail = std::min(min_tail, run * v[j]);
        run *= 1.0 - v[j];
    }
    constexpr double margin = 1.0 + 1e-6;
    lo *= margin;
    const double hi = 1.0 - margin * floor / min_tail;
    return {lo, hi};
}

double logit(double x) { return std::log(x) - std::log1p(-x); }
double inv_logit(double u) { return u >= 0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u)); }

}  // namespace

StickWeights update_sticks(const MultiModalCorpus& corpus, TrainState& state, std::size_t m) {
    auto& params = state.params;
    const auto& config = state.config;
    const std::size_t T = params.topic_count(m);
    const double floor = config.stick_floor;

    // Relabel by decreasing weight when that improves the stick prior. All
    // other terms are invariant under a joint permutation of topic labels.
    if (config.sort_topics && !params.tied_xi && T > 1) {
        const auto& st = params.sticks[m];
        std::vector<std::size_t> order(T);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return st.p[idx(a)] > st.p[idx(b)]; });
        bool identity = true;
        for (std::size_t k = 0; k < T; ++k) identity = identity && order[k] == k;
        if (!identity) {
            Eigen::VectorXd p_new(idx(T));
            for (std::size_t k = 0; k < T; ++k) p_new[idx(k)] = st.p[idx(order[k])];
            const Eigen::VectorXd v_new = StickWeights::fractions_from_weights(p_new);
            const Eigen::VectorXd p_re = StickWeights::weights_from_fractions(v_new);
            bool feasible = p_re.minCoeff() >= floor;
            for (Eigen::Index k = 0; k + 1 < v_new.size(); ++k) feasible = feasible && v_new[k] < 1.0;
            if (feasible) {
                const StickProblem sp_old = build_stick_problem(corpus, state, m);
                StickProblem sp_new = sp_old;
                for (std::size_t k = 0; k < T; ++k) {
                    sp_new.n.col(idx(k)) = sp_old.n.col(idx(order[k]));
                    sp_new.L.col(idx(k)) = sp_old.L.col(idx(order[k]));
                }
                const double f_old = sp_old.data(st.p, st.beta) + StickProblem::prior(st.v, StickProblem::best_alpha(st.v));
                const double f_new = sp_new.data(p_re, st.beta) + StickProblem::prior(v_new, StickProblem::best_alpha(v_new));
                if (f_new > f_old) permute_state(state, m, order);
            }
        }
    }

    const StickProblem sp = build_stick_problem(corpus, state, m);
    StickWeights st = params.sticks[m];
    auto objective = [&](const Eigen::VectorXd& v, const Eigen::VectorXd& p, double beta, double alpha) {
        return sp.data(p, beta) + StickProblem::prior(v, alpha);
    };
    double current = objective(st.v, st.p, st.beta, st.alpha);

    for (int round = 0; round < 3; ++round) {
        for (Eigen::Index k = 0; k + 1 < idx(T); ++k) {
            auto [lo, hi] = fraction_bounds(st.v, k, floor);
            if (!(lo < hi) || !(lo > 0.0) || !(hi < 1.0)) continue;
            Eigen::VectorXd v = st.v;
            auto neg = [&](double u) {
                v[k] = inv_logit(u);
                const Eigen::VectorXd p = StickWeights::weights_from_fractions(v);
                if (p.minCoeff() < floor) return std::numeric_limits<double>::infinity();
                return -objective(v, p, st.beta, st.alpha);
            };
            const auto [u_best, f_neg] =
                boost::math::tools::brent_find_minima(neg, logit(lo), logit(hi), 40);
            if (-f_neg > current) {
                v[k] = inv_logit(u_best);
                const Eigen::VectorXd p = StickWeights::weights_from_fractions(v);
                if (p.minCoeff() >= floor) {
                    st.v = v;
                    st.p = p;
                    current = -f_neg;
                }
            }
        }
        if (T > 1) {
            const double a = StickProblem::best_alpha(st.v);
            const double f = objective(st.v, st.p, st.beta, a);
            if (f >= current) {
                st.alpha = a;
                current = f;
            }
        }
        if (!config.learn_beta) continue;
        auto neg_beta = [&](double lb) { return -objective(st.v, st.p, std::exp(lb), st.alpha); };
        const auto [lb_best, fb_neg] =
            boost::math::tools::brent_find_minima(neg_beta, std::log(kBetaMin), std::log(kBetaMax), 40);
        if (-fb_neg > current) {
            st.beta = std::exp(lb_best);
            current = -fb_neg;
        }
    }
    st.v[idx(T) - 1] = 1.0;
    params.sticks[m] = st;

    // q(Y) at its optimum for the new sticks (part of the same block).
    const auto active = st.active();
    for (std::size_t d = 0; d < state.docs.size(); ++d) {
        auto& var = state.docs[d];
        for (std::size_t k = 0; k < T; ++k) {
            const auto kk = idx(k);
            if (!active[k]) {
                var.y_shape[m][kk] = 0.0;
                var.y_rate[m][kk] = 1.0;
                continue;
            }
            var.y_shape[m][kk] = st.beta * st.p[kk] + sp.n(idx(d), kk);
            var.y_rate[m][kk] = sp.rate(idx(d), kk);
        }
    }
    return st;
}

namespace {

void permute_state(TrainState& state, std::size_t m, const std::vector<std::size_t>& order) {
    auto& params = state.params;
    const std::size_t T = order.size();
    const std::size_t off = params.xi_offset(m);

    auto permute_vec = [&](Eigen::VectorXd& x, std::size_t base) {
        Eigen::VectorXd seg = x.segment(idx(base), idx(T));
        for (std::size_t k = 0; k < T; ++k) x[idx(base + k)] = seg[idx(order[k])];
    };

    auto& st = params.sticks[m];
    Eigen::VectorXd p(idx(T));
    for (std::size_t k = 0; k < T; ++k) p[idx(k)] = st.p[idx(order[k])];
    st.v = StickWeights::fractions_from_weights(p);
    st.p = StickWeights::weights_from_fractions(st.v);

    auto& dict = params.dictionaries[m];
    const Eigen::MatrixXd topics = dict.topics, lambda = dict.dirichlet;
    for (std::size_t k = 0; k < T; ++k) {
        dict.topics.row(idx(k)) = topics.row(idx(order[k]));
        if (lambda.size()) dict.dirichlet.row(idx(k)) = lambda.row(idx(order[k]));
    }

    // Full index map over the xi axis, identity outside this modality's block.
    const auto K = idx(params.xi_dim());
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(K));
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    for (std::size_t k = 0; k < T; ++k) perm[off + k] = idx(off + order[k]);
    Eigen::VectorXd mu(K);
    Eigen::MatrixXd sigma(K, K);
    for (Eigen::Index i = 0; i < K; ++i) {
        mu[i] = params.prior.mu[perm[static_cast<std::size_t>(i)]];
        for (Eigen::Index j = 0; j < K; ++j)
            sigma(i, j) = params.prior.sigma(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    params.prior.mu = mu;
    params.prior.sigma = sigma;

    for (auto& var : state.docs) {
        permute_vec(var.xi_mean, off);
        permute_vec(var.xi_var, off);
        permute_vec(var.y_shape[m], 0);
        permute_vec(var.y_rate[m], 0);
        const Eigen::MatrixXd R = var.resp[m];
        for (std::size_t k = 0; k < T; ++k) var.resp[m].col(idx(k)) = R.col(idx(order[k]));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Lower bound

ElboBreakdown elbo_breakdown(const MultiModalCorpus& corpus, const TrainState& state) {
    const auto& params = state.params;
    if (state.docs.size() != corpus.num_docs()) throw ValidationError("elbo: state and corpus differ in size");
    const GlobalCache cache = GlobalCache::build(params);

    std::vector<DocTerms> terms(corpus.num_docs());
    detail::parallel_for(corpus.num_docs(), state.config.workers, [&](std::size_t d) {
        terms[d] = doc_elbo(corpus.documents[d], state.docs[d], params, cache);
    });
    ElboBreakdown out;
    for (const auto& t : terms) {
        out.words += t.words;
        out.assignments += t.assignments;
        out.y += t.y;
        out.xi += t.xi;
    }

    for (std::size_t m = 0; m < params.num_modalities(); ++m) {
        const auto& dict = params.dictionaries[m];
        if (dict.dirichlet.size() == 0) throw ValidationError("elbo: dictionary has no variational parameters");
        const auto& E = cache.expected_log_eta[m];
        const double W = static_cast<double>(dict.vocab_size());
        const double g = dict.gamma;
        for (Eigen::Index k = 0; k < dict.dirichlet.rows(); ++k) {
            const auto lam = dict.dirichlet.row(k).array();
            const auto e = E.row(k).array();
            out.eta += std::lgamma(W * g) - W * std::lgamma(g) + (g - 1.0) * e.sum();
            double lg = 0.0;
            for (Eigen::Index w = 0; w < lam.size(); ++w) lg += std::lgamma(lam[w]);
            out.eta -= std::lgamma(lam.sum()) - lg + ((lam - 1.0) * e).sum();
        }
        const auto& st = params.sticks[m];
        out.sticks += StickProblem::prior(st.v, st.alpha);
    }
    return out;
}

double elbo_total(const MultiModalCorpus& corpus, const TrainState& state) {
    const double v = elbo_breakdown(corpus, state).total();
    if (!std::isfinite(v)) throw NumericalError("lower bound is not finite");
    return v;
}

void check_state_invariants(const TrainState& state) {
    const auto& params = state.params;
    params.validate();
    const auto K = params.xi_dim();
    const double floor = state.config.jitter * params.prior.sigma.trace() / static_cast<double>(K);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(params.prior.sigma, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < floor) throw ValidationError("invariant: Sigma below the jitter floor");
    for (std::size_t d = 0; d < state.docs.size(); ++d) {
        const auto& var = state.docs[d];
        const std::string where = "invariant (document " + std::to_string(d) + "): ";
        if (static_cast<std::size_t>(var.xi_mean.size()) != K || static_cast<std::size_t>(var.xi_var.size()) != K)
            throw ValidationError(where + "xi has the wrong dimension");
        if (!var.xi_mean.allFinite() || !(var.xi_var.array() > 0.0).all() || !var.xi_var.allFinite())
            throw ValidationError(where + "xi variance must be positive and finite");
        for (std::size_t m = 0; m < params.num_modalities(); ++m) {
            const auto active = params.sticks[m].active();
            for (std::size_t k = 0; k < active.size(); ++k)
                if (active[k] && !(var.y_shape[m][idx(k)] > 0.0 && var.y_rate[m][idx(k)] > 0.0))
                    throw ValidationError(where + "Gamma factor not positive");
            const auto& R = var.resp[m];
            for (Eigen::Index i = 0; i < R.rows(); ++i)
                if (std::abs(R.row(i).sum() - 1.0) > 1e-10 || R.row(i).minCoeff() < 0.0)
                    throw ValidationError(where + "responsibility row off the simplex");
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

void run_sweep(const MultiModalCorpus& corpus, TrainState& state) {
    const auto& config = state.config;
    const GlobalCache cache = GlobalCache::build(state.params);
    detail::parallel_for(corpus.num_docs(), config.workers, [&](std::size_t d) {
        auto& var = state.docs[d];
        for (std::size_t it = 0; it < config.local_iterations; ++it) {
            var = update_local(corpus.documents[d], var, state.params, cache);
            var = update_xi(var, state.params, cache, config);
        }
    });
    if (config.mu_per_topic) {
        state.params.prior = update_mu_sigma(state.docs, config.jitter);
    } else {
        const Eigen::VectorXd mu = modality_mean(state.docs, state.params);
        state.params.prior = update_mu_sigma(state.docs, config.jitter, &mu);
    }
    state.params.dictionaries = update_topics(corpus, state.docs, state.params);
    for (std::size_t m = 0; m < state.params.num_modalities(); ++m) update_sticks(corpus, state, m);
}

TrainState fit(const MultiModalCorpus& corpus, const TrainConfig& config, Rng& rng, const SweepCallback& on_sweep) {
    TrainState state = init_state(corpus, config, rng);
    state.initial_elbo = elbo_total(corpus, state);
    double prev = state.initial_elbo;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t sweep = 1; sweep <= config.max_sweeps; ++sweep) {
        run_sweep(corpus, state);
        const double elbo = elbo_total(corpus, state);
        if (elbo < prev - (1e-9 + 1e-6 * std::abs(prev))) throw ElboDecreaseError(sweep, prev, elbo);
        SweepRecord rec;
        rec.sweep = sweep;
        rec.elbo = elbo;
        rec.relative_change = (elbo - prev) / std::abs(prev);
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        for (std::size_t m = 0; m < state.params.num_modalities(); ++m) {
            bool any = false;
            for (const auto& d : corpus.documents) any = any || !d.counts[m].empty();
            rec.train_perplexity.push_back(any ? train_perplexity(state.params, state, corpus, m)
                                               : std::numeric_limits<double>::quiet_NaN());
        }
        state.trace.push_back(rec);
        if (config.check_invariants) check_state_invariants(state);
        if (on_sweep) on_sweep(state, rec);
        if (std::abs(rec.relative_change) < config.tolerance) break;
        prev = elbo;
    }
    return state;
}

DocVariational infer_document(const Document& doc, const ModelParams& params, const TrainConfig& config,
                              std::size_t max_iterations, double tolerance) {
    if (doc.counts.size() != params.num_modalities())
        throw ValidationError("infer_document: document does not match the model's modalities");
    const GlobalCache cache = GlobalCache::build(params);
    DocVariational var = initial_doc_variational(doc, params);
    for (std::size_t it = 0; it < max_iterations; ++it) {
        const Eigen::VectorXd before = var.xi_mean;
        var = update_local(doc, var, params, cache);
        var = update_xi(var, params, cache, config);
        if ((var.xi_mean - before).cwiseAbs().maxCoeff() < tolerance) break;
    }
    return var;
}

}  // namespace fmtm
