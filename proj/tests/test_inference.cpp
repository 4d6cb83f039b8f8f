#include <doctest.h>

#include <algorithm>
#include <cmath>

#include <boost/math/special_functions/digamma.hpp>

#include "fmtm/analysis.hpp"
#include "fmtm/error.hpp"
#include "fmtm/inference.hpp"
#include "helpers.hpp"

using namespace fmtm;
using boost::math::digamma;

namespace {

struct Toy {
    ModelParams truth;
    MultiModalCorpus corpus;
};

Toy toy(std::uint64_t seed, std::size_t docs = 12, std::vector<std::size_t> topics = {3, 2},
        std::vector<std::size_t> vocab = {9, 7}, std::vector<std::size_t> lengths = {15, 10}) {
    std::mt19937_64 r(seed);
    Toy t;
    t.truth = fmtm::test::random_model(topics, vocab, r);
    Rng rng(seed + 100);
    t.corpus = fmtm::test::sample_corpus(t.truth, docs, lengths, rng);
    return t;
}

TrainConfig small_config(std::vector<std::size_t> truncation = {3, 3}) {
    TrainConfig c;
    c.truncation = std::move(truncation);
    c.max_sweeps = 20;
    c.local_iterations = 2;
    return c;
}

/// Random q(xi) and q(Y) for a model.
DocVariational random_doc(const ModelParams& model, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 0.7);
    std::uniform_real_distribution<double> u(0.2, 2.0);
    DocVariational d;
    const auto K = static_cast<Eigen::Index>(model.xi_dim());
    d.xi_mean.resize(K);
    d.xi_var.resize(K);
    for (Eigen::Index i = 0; i < K; ++i) {
        d.xi_mean[i] = g(rng);
        d.xi_var[i] = u(rng);
    }
    for (std::size_t m = 0; m < model.num_modalities(); ++m) {
        const auto T = static_cast<Eigen::Index>(model.topic_count(m));
        Eigen::VectorXd a(T), b(T);
        for (Eigen::Index k = 0; k < T; ++k) {
            a[k] = 5.0 * u(rng);
            b[k] = u(rng);
        }
        d.y_shape.push_back(a);
        d.y_rate.push_back(b);
        d.resp.emplace_back();
    }
    return d;
}

/// Term-by-term xi objective written out per coordinate.
double xi_oracle(const DocVariational& d, const ModelParams& model) {
    const Eigen::MatrixXd P = model.prior.sigma.inverse();
    const auto K = d.xi_mean.size();
    double f = 0.0;
    for (std::size_t m = 0; m < model.num_modalities(); ++m) {
        const auto& st = model.sticks[m];
        for (Eigen::Index k = 0; k < st.p.size(); ++k) {
            const Eigen::Index i = static_cast<Eigen::Index>(model.xi_offset(m)) + k;
            const double ey = d.y_shape[m][k] > 0.0 ? d.y_shape[m][k] / d.y_rate[m][k] : 0.0;
            f -= st.beta * st.p[k] * d.xi_mean[i];
            f -= ey * std::exp(-d.xi_mean[i] + 0.5 * d.xi_var[i]);
        }
    }
    for (Eigen::Index i = 0; i < K; ++i) {
        for (Eigen::Index j = 0; j < K; ++j)
            f -= 0.5 * (d.xi_mean[i] - model.prior.mu[i]) * P(i, j) * (d.xi_mean[j] - model.prior.mu[j]);
        f -= 0.5 * P(i, i) * d.xi_var[i];
        f += 0.5 * std::log(d.xi_var[i]);
    }
    return f;
}

double dirichlet_kl_free_elbo(const Eigen::MatrixXd& lam, double gamma) {
    // E_q[log Dir(eta | gamma)] + H[q(eta)] summed over rows.
    double f = 0.0;
    const double W = static_cast<double>(lam.cols());
    for (Eigen::Index k = 0; k < lam.rows(); ++k) {
        const double total = lam.row(k).sum();
        double lgsum = 0.0;
        for (Eigen::Index w = 0; w < lam.cols(); ++w) {
            const double e = digamma(lam(k, w)) - digamma(total);
            f += (gamma - 1.0) * e - (lam(k, w) - 1.0) * e;
            lgsum += std::lgamma(lam(k, w));
        }
        f += std::lgamma(W * gamma) - W * std::lgamma(gamma);
        f -= std::lgamma(total) - lgsum;
    }
    return f;
}

/// Full lower bound written independently from the library.
double elbo_oracle(const MultiModalCorpus& corpus, const TrainState& s) {
    const auto& P = s.params;
    const Eigen::MatrixXd prec = P.prior.sigma.inverse();
    const double logdet = std::log(P.prior.sigma.determinant());
    const auto K = static_cast<double>(P.xi_dim());
    double f = 0.0;
    for (std::size_t d = 0; d < corpus.num_docs(); ++d) {
        const auto& q = s.docs[d];
        const Eigen::VectorXd r = q.xi_mean - P.prior.mu;
        f += -0.5 * (K * std::log(2.0 * M_PI) + logdet + r.dot(prec * r) + prec.diagonal().dot(q.xi_var));
        for (Eigen::Index i = 0; i < q.xi_var.size(); ++i) f += 0.5 * (std::log(2.0 * M_PI * q.xi_var[i]) + 1.0);
        for (std::size_t m = 0; m < P.num_modalities(); ++m) {
            const auto& st = P.sticks[m];
            const auto off = static_cast<Eigen::Index>(P.xi_offset(m));
            double sum_ey = 0.0;
            std::vector<double> elogy(static_cast<std::size_t>(st.p.size()));
            for (Eigen::Index k = 0; k < st.p.size(); ++k) {
                if (st.p[k] < kTopicOffThreshold) continue;
                const double a = q.y_shape[m][k], b = q.y_rate[m][k];
                const double bp = st.beta * st.p[k];
                const double ey = a / b;
                elogy[static_cast<std::size_t>(k)] = digamma(a) - std::log(b);
                sum_ey += ey;
                const double e_negxi = std::exp(-q.xi_mean[off + k] + 0.5 * q.xi_var[off + k]);
                f += bp * (-q.xi_mean[off + k]) - std::lgamma(bp) + (bp - 1.0) * elogy[static_cast<std::size_t>(k)] -
                     e_negxi * ey;
                f += a - std::log(b) + std::lgamma(a) + (1.0 - a) * digamma(a);
            }
            const auto& bag = corpus.documents[d].counts[m];
            const auto& lam = P.dictionaries[m].dirichlet;
            double N = 0.0;
            for (std::size_t i = 0; i < bag.size(); ++i) {
                N += bag[i].count;
                for (Eigen::Index k = 0; k < st.p.size(); ++k) {
                    const double rik = q.resp[m](static_cast<Eigen::Index>(i), k);
                    if (rik <= 0.0) continue;
                    const double elog_eta = digamma(lam(k, bag[i].index)) - digamma(lam.row(k).sum());
                    f += bag[i].count * rik * (elog_eta + elogy[static_cast<std::size_t>(k)] - std::log(rik));
                }
            }
            if (N > 0.0) f -= N * std::log(sum_ey);
        }
    }
    for (std::size_t m = 0; m < P.num_modalities(); ++m) {
        f += dirichlet_kl_free_elbo(P.dictionaries[m].dirichlet, P.dictionaries[m].gamma);
        const auto& st = P.sticks[m];
        for (Eigen::Index k = 0; k + 1 < st.v.size(); ++k)
            f += std::log(st.alpha) + (st.alpha - 1.0) * std::log(1.0 - st.v[k]);
    }
    return f;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-6); }

}  // namespace

TEST_SUITE("train config") {
    TEST_CASE("defaults, json round trip and validation") {
        const TrainConfig d = TrainConfig::from_json(nlohmann::json::object());
        CHECK(d.to_json() == TrainConfig{}.to_json());
        CHECK(d.gamma == 0.1);
        CHECK(d.alpha == 1.0);
        CHECK(d.beta == 1.0);
        CHECK(d.backtrack_shrink == 0.5);
        CHECK(d.armijo == 1e-4);
        CHECK(d.max_backtracks == 30);
        CHECK(d.max_inner_steps == 50);
        CHECK(d.jitter == 1e-8);

        TrainConfig c;
        c.seed = 99;
        c.truncation = {4, 5};
        c.tied_xi = true;
        CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());

        TrainConfig bad;
        bad.tolerance = 1.0;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = {};
        bad.max_sweeps = 0;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = {};
        bad.truncation = {1, 3};
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        CHECK_THROWS_AS(TrainConfig::from_json({{"tolerance", "x"}}), ValidationError);
    }

    TEST_CASE("hash tracks model-relevant fields only") {
        TrainConfig a, b;
        b.workers = 4;
        b.check_invariants = true;
        CHECK(a.hash() == b.hash());
        b.seed = 2;
        CHECK(a.hash() != b.hash());
    }
}

TEST_SUITE("init_state") {
    TEST_CASE("deterministic and matches the initialization contract") {
        const auto t = toy(1);
        TrainConfig cfg = small_config({4, 3});
        cfg.alpha = 2.0;
        Rng r1(5), r2(5);
        const auto a = init_state(t.corpus, cfg, r1);
        const auto b = init_state(t.corpus, cfg, r2);
        for (std::size_t d = 0; d < a.docs.size(); ++d) CHECK(a.docs[d].xi_mean == b.docs[d].xi_mean);
        CHECK(a.params.dictionaries[0].dirichlet == b.params.dictionaries[0].dirichlet);

        CHECK(a.params.prior.mu.isZero(0.0));
        CHECK(a.params.prior.sigma.isIdentity(0.0));
        const Eigen::MatrixXd omega = correlation_matrix(a.params.prior.sigma);
        CHECK(omega.isIdentity(0.0));
        const auto rho = visual_relevance(cross_block(omega, a.params.layout, "m0", "m1"));
        CHECK(rho.isZero(0.0));

        for (std::size_t m = 0; m < 2; ++m) {
            const auto& st = a.params.sticks[m];
            for (Eigen::Index k = 0; k + 1 < st.v.size(); ++k) CHECK(st.v[k] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
            CHECK(st.v[st.v.size() - 1] == 1.0);
            CHECK(std::abs(st.p.sum() - 1.0) <= 1e-12);
        }
        for (const auto& d : a.docs) {
            CHECK(d.xi_var.isOnes(0.0));
            for (const auto& R : d.resp)
                for (Eigen::Index i = 0; i < R.rows(); ++i) CHECK(std::abs(R.row(i).sum() - 1.0) <= 1e-10);
        }
        CHECK_NOTHROW(check_state_invariants(a));
    }

    TEST_CASE("initial xi has variance 0.1") {
        const auto t = toy(2, 400, {2, 2}, {5, 5}, {3, 3});
        Rng rng(8);
        const auto s = init_state(t.corpus, small_config({2, 2}), rng);
        double sum = 0.0, sq = 0.0, n = 0.0;
        for (const auto& d : s.docs)
            for (Eigen::Index i = 0; i < d.xi_mean.size(); ++i) {
                sum += d.xi_mean[i];
                sq += d.xi_mean[i] * d.xi_mean[i];
                n += 1.0;
            }
        CHECK(std::abs(sum / n) < 0.03);
        CHECK(sq / n == doctest::Approx(0.1).epsilon(0.1));
    }

    TEST_CASE("rejects an empty corpus") {
        auto t = toy(3);
        t.corpus.documents.clear();
        Rng rng(1);
        CHECK_THROWS_AS(init_state(t.corpus, small_config(), rng), ValidationError);
    }
}

TEST_SUITE("xi objective") {
    TEST_CASE("hand evaluation at the origin") {
        std::mt19937_64 r(1);
        auto model = fmtm::test::random_model({3, 2}, {4, 4}, r);
        model.prior.mu.setZero();
        model.prior.sigma.setIdentity();
        DocVariational d = random_doc(model, r);
        d.xi_mean.setZero();
        d.xi_var.setOnes();
        for (auto& a : d.y_shape) a.setZero();
        CHECK(elbo_xi(d, model) == -2.5);
    }

    TEST_CASE("linear in E[Y]") {
        std::mt19937_64 r(2);
        const auto model = fmtm::test::random_model({3, 2}, {4, 4}, r);
        DocVariational d = random_doc(model, r);
        const double f1 = elbo_xi(d, model);
        double extra = 0.0;
        for (std::size_t m = 0; m < 2; ++m) {
            const auto off = static_cast<Eigen::Index>(model.xi_offset(m));
            const auto T = d.y_shape[m].size();
            const Eigen::VectorXd ey = d.expected_y(m);
            const Eigen::VectorXd en =
                (-d.xi_mean.segment(off, T) + 0.5 * d.xi_var.segment(off, T)).array().exp().matrix();
            extra += ey.dot(en);
            d.y_shape[m] *= 2.0;
        }
        CHECK(elbo_xi(d, model) == doctest::Approx(f1 - extra).epsilon(1e-13));
    }

    TEST_CASE("matches the term-by-term oracle") {
        std::mt19937_64 r(3);
        for (int i = 0; i < 50; ++i) {
            const auto model = fmtm::test::random_model({3, 3}, {4, 4}, r);
            const DocVariational d = random_doc(model, r);
            CHECK(std::abs(elbo_xi(d, model) - xi_oracle(d, model)) <= 1e-10 * std::max(1.0, std::abs(xi_oracle(d, model))));
        }
        const auto tied = fmtm::test::random_model({3, 3}, {4, 4}, r, true);
        const DocVariational d = random_doc(tied, r);
        CHECK(std::abs(elbo_xi(d, tied) - xi_oracle(d, tied)) <= 1e-10 * std::max(1.0, std::abs(xi_oracle(d, tied))));
    }

    TEST_CASE("nonpositive variance is an error") {
        std::mt19937_64 r(4);
        const auto model = fmtm::test::random_model({2, 2}, {4, 4}, r);
        DocVariational d = random_doc(model, r);
        d.xi_var[1] = 0.0;
        CHECK_THROWS_AS(elbo_xi(d, model), NumericalError);
        CHECK_THROWS_AS(grad_xi(d, model), NumericalError);
    }
}

TEST_SUITE("xi gradient") {
    TEST_CASE("central finite differences over random instances") {
        std::mt19937_64 r(11);
        std::uniform_int_distribution<std::size_t> tdist(1, 4);
        double worst = 0.0;
        for (int inst = 0; inst < 100; ++inst) {
            const auto model = fmtm::test::random_model({tdist(r), tdist(r)}, {4, 4}, r);
            DocVariational d = random_doc(model, r);
            const XiGradient g = grad_xi(d, model);
            constexpr double h = 1e-5;
            for (Eigen::Index i = 0; i < d.xi_mean.size(); ++i) {
                DocVariational up = d, dn = d;
                up.xi_mean[i] += h;
                dn.xi_mean[i] -= h;
                const double fd = (elbo_xi(up, model) - elbo_xi(dn, model)) / (2 * h);
                worst = std::max(worst, rel_err(g.mean[i], fd));
                up = d;
                dn = d;
                up.xi_var[i] += h;
                dn.xi_var[i] -= h;
                const double fdv = (elbo_xi(up, model) - elbo_xi(dn, model)) / (2 * h);
                worst = std::max(worst, rel_err(g.var[i], fdv));
            }
        }
        CHECK(worst <= 1e-4);
    }

    TEST_CASE("identity covariance decouples the modalities") {
        std::mt19937_64 r(12);
        auto model = fmtm::test::random_model({3, 2}, {4, 4}, r);
        model.prior.sigma.setIdentity();
        DocVariational d = random_doc(model, r);
        const XiGradient g0 = grad_xi(d, model);
        d.xi_mean.tail(2) *= -3.0;
        d.xi_var.tail(2) *= 2.0;
        const XiGradient g1 = grad_xi(d, model);
        CHECK(g1.mean.head(3) == g0.mean.head(3));
        CHECK(g1.var.head(3) == g0.var.head(3));
    }

    TEST_CASE("pure Gaussian pull without stick or Y terms") {
        std::mt19937_64 r(13);
        auto model = fmtm::test::random_model({3, 2}, {4, 4}, r);
        for (auto& st : model.sticks) st.beta = 0.0;
        DocVariational d = random_doc(model, r);
        for (auto& a : d.y_shape) a.setZero();
        const XiGradient g = grad_xi(d, model);
        const Eigen::VectorXd want = -model.prior.sigma.inverse() * (d.xi_mean - model.prior.mu);
        CHECK((g.mean - want).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_SUITE("update_xi") {
    TEST_CASE("never decreases the objective") {
        std::mt19937_64 r(21);
        const TrainConfig cfg;
        for (int i = 0; i < 50; ++i) {
            const auto model = fmtm::test::random_model({3, 2}, {4, 4}, r, false);
            const DocVariational d = random_doc(model, r);
            const DocVariational out = update_xi(d, model, cfg);
            CHECK(elbo_xi(out, model) >= elbo_xi(d, model) - 1e-12);
            CHECK((out.xi_var.array() > 0.0).all());
        }
    }

    TEST_CASE("stationary point is a fixed point") {
        std::mt19937_64 r(22);
        auto model = fmtm::test::random_model({2, 2}, {4, 4}, r);
        for (auto& st : model.sticks) st.beta = 0.0;
        model.prior.sigma = Eigen::Vector4d(0.5, 1.0, 2.0, 4.0).asDiagonal();
        DocVariational d = random_doc(model, r);
        for (auto& a : d.y_shape) a.setZero();
        d.xi_mean = model.prior.mu;
        d.xi_var = model.prior.sigma.diagonal();
        const DocVariational out = update_xi(d, model, TrainConfig{});
        CHECK(out.xi_mean == d.xi_mean);
        CHECK(out.xi_var == d.xi_var);
        CHECK_FALSE(out.xi_stalled);
    }

    TEST_CASE("prior-only document matches a block Newton oracle") {
        std::mt19937_64 r(23);
        const auto model = fmtm::test::random_model({2, 2}, {4, 4}, r);
        Document empty{"e", {{}, {}}};
        DocVariational d = initial_doc_variational(empty, model);
        TrainConfig cfg;
        cfg.max_inner_steps = 5000;
        DocVariational out = d;
        for (int i = 0; i < 50; ++i) out = update_xi(out, model, cfg);

        // Oracle: alternate a Newton solve for the mean and per-coordinate
        // Newton steps for log v, with the Y factors held fixed.
        Eigen::VectorXd b(4), a(4);
        for (std::size_t m = 0; m < 2; ++m)
            for (Eigen::Index k = 0; k < 2; ++k) {
                b[2 * static_cast<Eigen::Index>(m) + k] = model.sticks[m].beta * model.sticks[m].p[k];
                a[2 * static_cast<Eigen::Index>(m) + k] = d.expected_y(m)[k];
            }
        const Eigen::MatrixXd P = model.prior.sigma.inverse();
        Eigen::VectorXd x = model.prior.mu, v = Eigen::VectorXd::Ones(4);
        for (int outer = 0; outer < 200; ++outer) {
            for (int it = 0; it < 50; ++it) {
                const Eigen::ArrayXd e = a.array() * (-x.array() + 0.5 * v.array()).exp();
                const Eigen::VectorXd g = -b + e.matrix() - P * (x - model.prior.mu);
                Eigen::MatrixXd H = -P;
                H.diagonal() -= e.matrix();
                x -= H.ldlt().solve(g);
            }
            for (Eigen::Index i = 0; i < 4; ++i)
                for (int it = 0; it < 50; ++it) {
                    const double s = std::log(v[i]);
                    const double e = a[i] * std::exp(-x[i] + 0.5 * v[i]);
                    const double gs = v[i] * (-0.5 * e - 0.5 * P(i, i)) + 0.5;
                    const double hs = v[i] * (-0.5 * e - 0.5 * P(i, i)) - 0.25 * v[i] * v[i] * e;
                    v[i] = std::exp(s - gs / hs);
                }
        }
        CHECK((out.xi_mean - x).cwiseAbs().maxCoeff() <= 1e-4);
        CHECK((out.xi_var - v).cwiseAbs().maxCoeff() <= 1e-4);
    }
}

TEST_SUITE("update_local") {
    TEST_CASE("single topic takes every token") {
        ModelParams m;
        m.layout = ModalityLayout::make({"text"}, {1});
        m.sticks = {StickWeights::from_fractions(Eigen::VectorXd::Ones(1), 1.0, 2.0)};
        TopicDictionary dict;
        dict.modality = "text";
        dict.topics = Eigen::RowVector4d(0.1, 0.2, 0.3, 0.4);
        m.dictionaries = {dict};
        m.prior.mu = Eigen::VectorXd::Zero(1);
        m.prior.sigma = Eigen::MatrixXd::Identity(1, 1);
        const Document doc{"d", {{{0, 2}, {3, 5}}}};
        const auto out = update_local(doc, initial_doc_variational(doc, m), m);
        CHECK(out.resp[0].isOnes(0.0));
        CHECK(out.y_shape[0][0] == doctest::Approx(2.0 + 7.0).epsilon(1e-15));
    }

    TEST_CASE("identical topics split tokens evenly") {
        ModelParams m;
        m.layout = ModalityLayout::make({"text"}, {2});
        m.sticks = {StickWeights::from_fractions(Eigen::Vector2d(0.5, 1.0), 1.0, 3.0)};
        TopicDictionary dict;
        dict.modality = "text";
        dict.topics.resize(2, 3);
        dict.topics.row(0) << 0.2, 0.3, 0.5;
        dict.topics.row(1) = dict.topics.row(0);
        m.dictionaries = {dict};
        m.prior.mu = Eigen::VectorXd::Zero(2);
        m.prior.sigma = Eigen::MatrixXd::Identity(2, 2);
        const Document doc{"d", {{{0, 1}, {1, 4}, {2, 2}}}};
        const auto out = update_local(doc, initial_doc_variational(doc, m), m);
        for (Eigen::Index i = 0; i < 3; ++i) {
            CHECK(out.resp[0](i, 0) == doctest::Approx(0.5).epsilon(1e-15));
            CHECK(out.resp[0](i, 1) == doctest::Approx(0.5).epsilon(1e-15));
        }
    }

    TEST_CASE("never decreases the full lower bound") {
        const auto t = toy(31, 6, {3, 2}, {6, 5}, {5, 5});
        Rng rng(3);
        TrainState s = init_state(t.corpus, small_config({3, 3}), rng);
        for (int sweep = 0; sweep < 5; ++sweep) {
            for (std::size_t d = 0; d < s.docs.size(); ++d) {
                const double before = elbo_total(t.corpus, s);
                s.docs[d] = update_local(t.corpus.documents[d], s.docs[d], s.params);
                CHECK(elbo_total(t.corpus, s) >= before - 1e-9);
                s.docs[d] = update_xi(s.docs[d], s.params, s.config);
            }
            run_sweep(t.corpus, s);
        }
    }

    TEST_CASE("responsibility rows stay normalized") {
        const auto t = toy(32);
        Rng rng(4);
        TrainState s = init_state(t.corpus, small_config(), rng);
        for (int i = 0; i < 3; ++i) run_sweep(t.corpus, s);
        for (const auto& d : s.docs)
            for (const auto& R : d.resp)
                for (Eigen::Index i = 0; i < R.rows(); ++i) CHECK(std::abs(R.row(i).sum() - 1.0) <= 1e-10);
    }
}

TEST_SUITE("update_mu_sigma") {
    TEST_CASE("equal means and unit variances") {
        std::vector<DocVariational> docs(5);
        for (auto& d : docs) {
            d.xi_mean = Eigen::Vector3d(0.3, -1.0, 2.0);
            d.xi_var = Eigen::Vector3d::Ones();
        }
        const auto g = update_mu_sigma(docs, 1e-8);
        CHECK(g.mu == Eigen::Vector3d(0.3, -1.0, 2.0));
        CHECK(g.sigma.isIdentity(0.0));
    }

    TEST_CASE("hand-computed two-document moments") {
        std::vector<DocVariational> docs(2);
        docs[0].xi_mean = Eigen::Vector3d(1.0, 0.0, 0.0);
        docs[1].xi_mean = Eigen::Vector3d(-1.0, 0.0, 0.0);
        for (auto& d : docs) d.xi_var = Eigen::Vector3d::Constant(0.5);
        const auto g = update_mu_sigma(docs, 1e-8);
        CHECK(g.mu.isZero(0.0));
        const Eigen::Matrix3d want = Eigen::Vector3d(1.5, 0.5, 0.5).asDiagonal();
        CHECK(g.sigma == want);
    }

    TEST_CASE("matches a naive double loop") {
        std::mt19937_64 r(41);
        std::normal_distribution<double> n(0.0, 1.0);
        std::vector<DocVariational> docs(37);
        for (auto& d : docs) {
            d.xi_mean.resize(6);
            d.xi_var.resize(6);
            for (int i = 0; i < 6; ++i) {
                d.xi_mean[i] = n(r);
                d.xi_var[i] = 0.1 + std::abs(n(r));
            }
        }
        const auto g = update_mu_sigma(docs, 1e-8);
        for (int i = 0; i < 6; ++i) {
            double mu = 0.0;
            for (const auto& d : docs) mu += d.xi_mean[i] / 37.0;
            CHECK(std::abs(g.mu[i] - mu) <= 1e-12);
        }
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) {
                double s = 0.0;
                for (const auto& d : docs)
                    s += (d.xi_mean[i] - g.mu[i]) * (d.xi_mean[j] - g.mu[j]) + (i == j ? d.xi_var[i] : 0.0);
                CHECK(std::abs(g.sigma(i, j) - s / 37.0) <= 1e-12);
            }
        CHECK(g.sigma == g.sigma.transpose());
    }

    TEST_CASE("jitter keeps a degenerate covariance positive definite") {
        std::vector<DocVariational> docs(1);
        docs[0].xi_mean = Eigen::Vector3d(1.0, 2.0, 3.0);
        docs[0].xi_var = Eigen::Vector3d(1e-30, 1.0, 1.0);
        const double jitter = 1e-8;
        const auto g = update_mu_sigma(docs, jitter);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g.sigma);
        CHECK(eig.eigenvalues().minCoeff() >= jitter * g.sigma.trace() / 3.0 * (1.0 - 1e-6));
    }

    TEST_CASE("modality-level mean satisfies the weighted normal equations") {
        std::mt19937_64 r(42);
        auto model = fmtm::test::random_model({3, 4}, {4, 4}, r);
        std::vector<DocVariational> docs;
        for (int i = 0; i < 20; ++i) docs.push_back(random_doc(model, r));
        const Eigen::VectorXd mu = modality_mean(docs, model);
        // One level per block.
        for (int k = 1; k < 3; ++k) CHECK(mu[k] == mu[0]);
        for (int k = 4; k < 7; ++k) CHECK(mu[k] == mu[3]);
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(7);
        for (const auto& d : docs) mean += d.xi_mean / 20.0;
        const Eigen::VectorXd resid = model.prior.sigma.inverse() * (mean - mu);
        CHECK(std::abs(resid.head(3).sum()) <= 1e-10);
        CHECK(std::abs(resid.tail(4).sum()) <= 1e-10);

        auto tied = fmtm::test::random_model({3, 3}, {4, 4}, r, true);
        const std::vector<DocVariational> tied_docs{random_doc(tied, r), random_doc(tied, r)};
        const Eigen::VectorXd mt = modality_mean(tied_docs, tied);
        CHECK(mt[1] == mt[0]);
        CHECK(mt[2] == mt[0]);
    }
}

TEST_SUITE("update_topics") {
    TEST_CASE("unused topic falls back to the prior and counts add up") {
        const auto t = toy(51, 8, {3, 2}, {6, 5}, {7, 4});
        Rng rng(2);
        TrainState s = init_state(t.corpus, small_config({3, 3}), rng);
        for (auto& d : s.docs) {
            d.resp[0].col(2).setZero();
            d.resp[0].col(0) = Eigen::VectorXd::Ones(d.resp[0].rows()) - d.resp[0].col(1);
        }
        const auto dicts = update_topics(t.corpus, s.docs, s.params);
        const double g = s.params.dictionaries[0].gamma;
        CHECK(dicts[0].dirichlet.row(2).isConstant(g, 0.0));
        CHECK((dicts[0].topics.row(2).array() - 1.0 / 6.0).abs().maxCoeff() <= 1e-15);

        for (std::size_t m = 0; m < 2; ++m) {
            Eigen::MatrixXd want = Eigen::MatrixXd::Constant(3, t.corpus.vocabularies[m].size(), g);
            for (std::size_t d = 0; d < t.corpus.num_docs(); ++d) {
                const auto& bag = t.corpus.documents[d].counts[m];
                for (std::size_t i = 0; i < bag.size(); ++i)
                    for (Eigen::Index k = 0; k < 3; ++k)
                        want(k, bag[i].index) += bag[i].count * s.docs[d].resp[m](static_cast<Eigen::Index>(i), k);
            }
            CHECK((dicts[m].dirichlet - want).cwiseAbs().maxCoeff() <= 1e-12);
            for (Eigen::Index k = 0; k < 3; ++k) CHECK(std::abs(dicts[m].topics.row(k).sum() - 1.0) <= 1e-12);
        }
    }
}

TEST_SUITE("update_sticks") {
    TEST_CASE("single topic keeps p = 1") {
        MultiModalCorpus c;
        c.layout = ModalityLayout::make({"text"}, {1});
        c.vocabularies = {fmtm::test::make_vocab("text", 3)};
        c.documents = {{"a", {{{0, 2}, {2, 1}}}}, {"b", {{{1, 3}}}}};
        TrainState s;
        s.params.layout = c.layout;
        s.params.sticks = {StickWeights::from_fractions(Eigen::VectorXd::Ones(1), 1.0, 1.0)};
        TopicDictionary dict;
        dict.modality = "text";
        dict.dirichlet = Eigen::RowVector3d(1.0, 2.0, 3.0);
        dict.topics = dict.dirichlet / 6.0;
        s.params.dictionaries = {dict};
        s.params.prior.mu = Eigen::VectorXd::Zero(1);
        s.params.prior.sigma = Eigen::MatrixXd::Identity(1, 1);
        for (const auto& d : c.documents) s.docs.push_back(initial_doc_variational(d, s.params));
        const auto st = update_sticks(c, s, 0);
        CHECK(st.p.size() == 1);
        CHECK(st.p[0] == 1.0);
    }

    TEST_CASE("never decreases the full lower bound") {
        const auto t = toy(61, 15, {3, 2}, {8, 6}, {12, 8});
        Rng rng(6);
        TrainState s = init_state(t.corpus, small_config({4, 4}), rng);
        for (int sweep = 0; sweep < 6; ++sweep) {
            run_sweep(t.corpus, s);
            for (std::size_t m = 0; m < 2; ++m) {
                const double before = elbo_total(t.corpus, s);
                update_sticks(t.corpus, s, m);
                CHECK(elbo_total(t.corpus, s) >= before - 1e-9);
                CHECK(std::abs(s.params.sticks[m].p.sum() - 1.0) <= 1e-12);
                CHECK(s.params.sticks[m].v[3] == 1.0);
            }
        }
    }
}

TEST_SUITE("elbo") {
    TEST_CASE("finite on the acceptance initialization") {
        const ScenarioConfig cfg = ScenarioConfig::acceptance();
        Rng rng(cfg.seed);
        auto sc = make_synthetic_scenario(cfg, rng);
        TrainConfig tc;
        tc.truncation = {8, 8};
        Rng r2(1);
        const auto s = init_state(sc.corpus, tc, r2);
        CHECK(std::isfinite(elbo_total(sc.corpus, s)));
    }

    TEST_CASE("two-document instance matches the independent evaluation") {
        const auto t = toy(71, 2, {3, 2}, {6, 5}, {9, 6});
        Rng rng(9);
        TrainState s = init_state(t.corpus, small_config({3, 3}), rng);
        for (int i = 0; i < 3; ++i) run_sweep(t.corpus, s);
        std::mt19937_64 sr(3);
        s.params.prior.sigma = fmtm::test::random_spd(6, sr);
        const double lib = elbo_total(t.corpus, s);
        const double want = elbo_oracle(t.corpus, s);
        CHECK(std::abs(lib - want) <= 1e-8 * std::max(1.0, std::abs(want)));
    }

    TEST_CASE("a switched-off topic leaves the document likelihood untouched") {
        MultiModalCorpus c;
        c.layout = ModalityLayout::make({"text"}, {2});
        c.vocabularies = {fmtm::test::make_vocab("text", 4)};
        c.documents = {{"a", {{{0, 3}, {1, 1}}}}, {"b", {{{2, 2}, {3, 4}}}}};
        Rng rng(1);
        TrainConfig cfg = small_config({2});
        TrainState two = init_state(c, cfg, rng);
        for (int i = 0; i < 2; ++i) run_sweep(c, two);

        TrainState three = two;
        auto& P = three.params;
        P.layout = ModalityLayout::make({"text"}, {3});
        const Eigen::VectorXd v2 = two.params.sticks[0].v;
        P.sticks[0] = StickWeights::from_fractions(Eigen::Vector3d(v2[0], 1.0, 1.0), two.params.sticks[0].alpha,
                                                   two.params.sticks[0].beta);
        auto& dict = P.dictionaries[0];
        dict.dirichlet.conservativeResize(3, Eigen::NoChange);
        dict.dirichlet.row(2).setConstant(dict.gamma);
        dict.topics.conservativeResize(3, Eigen::NoChange);
        dict.topics.row(2).setConstant(0.25);
        P.prior.mu.conservativeResize(3);
        P.prior.mu[2] = 0.0;
        Eigen::MatrixXd sig = Eigen::MatrixXd::Identity(3, 3);
        sig.topLeftCorner(2, 2) = two.params.prior.sigma;
        P.prior.sigma = sig;
        for (auto& d : three.docs) {
            d.xi_mean.conservativeResize(3);
            d.xi_mean[2] = 0.0;
            d.xi_var.conservativeResize(3);
            d.xi_var[2] = 1.0;
            d.y_shape[0].conservativeResize(3);
            d.y_shape[0][2] = 0.0;
            d.y_rate[0].conservativeResize(3);
            d.y_rate[0][2] = 1.0;
            d.resp[0].conservativeResize(Eigen::NoChange, 3);
            d.resp[0].col(2).setZero();
        }
        const auto a = elbo_breakdown(c, two);
        const auto b = elbo_breakdown(c, three);
        CHECK(a.words == doctest::Approx(b.words).epsilon(1e-14));
        CHECK(a.assignments == doctest::Approx(b.assignments).epsilon(1e-14));
        CHECK(a.y == doctest::Approx(b.y).epsilon(1e-14));
        // q(eta) equal to its prior has zero divergence.
        CHECK(a.eta == doctest::Approx(b.eta).epsilon(1e-14));
        CHECK(b.xi != a.xi);
    }
}

TEST_SUITE("fit") {
    TEST_CASE("loop contract and monotone trace") {
        const auto t = toy(81, 30);
        TrainConfig cfg = small_config({4, 4});
        cfg.max_sweeps = 200;
        cfg.tolerance = 1e-4;
        cfg.check_invariants = true;
        Rng rng(1);
        const auto s = fit(t.corpus, cfg, rng);
        REQUIRE(!s.trace.empty());
        CHECK(s.trace.size() <= cfg.max_sweeps);
        CHECK(std::abs(s.trace.back().relative_change) < cfg.tolerance);
        double prev = s.initial_elbo;
        for (const auto& r : s.trace) {
            CHECK(r.elbo >= prev - (1e-9 + 1e-6 * std::abs(prev)));
            prev = r.elbo;
        }
        CHECK(s.trace.back().train_perplexity.size() == 2);
    }

    TEST_CASE("bit-reproducible for a fixed seed and worker count") {
        const auto t = toy(82, 25);
        TrainConfig cfg = small_config({4, 4});
        cfg.max_sweeps = 8;
        Rng r1(3), r2(3);
        const auto a = fit(t.corpus, cfg, r1);
        const auto b = fit(t.corpus, cfg, r2);
        CHECK(a.elbo_trace() == b.elbo_trace());
        CHECK(a.params.prior.sigma == b.params.prior.sigma);
        CHECK(a.params.dictionaries[1].dirichlet == b.params.dictionaries[1].dirichlet);

        cfg.workers = 3;
        Rng r3(3), r4(3);
        const auto c = fit(t.corpus, cfg, r3);
        const auto d = fit(t.corpus, cfg, r4);
        CHECK(c.elbo_trace() == d.elbo_trace());
        CHECK(c.elbo_trace() == a.elbo_trace());
    }

    TEST_CASE("tied xi trains one shared block") {
        const auto t = toy(83, 30);
        TrainConfig cfg = small_config({4, 4});
        cfg.tied_xi = true;
        cfg.max_sweeps = 40;
        cfg.check_invariants = true;
        Rng rng(4);
        const auto s = fit(t.corpus, cfg, rng);
        CHECK(s.params.tied_xi);
        CHECK(s.params.xi_dim() == 4);
        CHECK(s.params.prior.sigma.rows() == 4);
        CHECK(s.docs.front().xi_mean.size() == 4);

        cfg.truncation = {4, 3};
        Rng r2(4);
        CHECK_THROWS_AS(fit(t.corpus, cfg, r2), ValidationError);
    }

    TEST_CASE("callback sees every sweep") {
        const auto t = toy(84, 10);
        TrainConfig cfg = small_config({3, 3});
        cfg.max_sweeps = 5;
        cfg.tolerance = 1e-12;
        std::vector<std::size_t> seen;
        Rng rng(5);
        fit(t.corpus, cfg, rng, [&](const TrainState&, const SweepRecord& r) { seen.push_back(r.sweep); });
        CHECK(seen == std::vector<std::size_t>{1, 2, 3, 4, 5});
    }

    TEST_CASE("decrease error carries the sweep index") {
        const ElboDecreaseError e(7, -10.0, -11.0);
        CHECK(e.sweep() == 7);
        CHECK(std::string(e.what()).find("sweep 7") != std::string::npos);
    }
}
