#include "fmtm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fmtm/error.hpp"

namespace fmtm {

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

std::string fmt(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    return out;
}

}  // namespace

Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& sigma) {
    if (sigma.rows() != sigma.cols()) throw ValidationError("correlation_matrix: matrix is not square");
    const Eigen::Index n = sigma.rows();
    Eigen::VectorXd sd(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        if (!(sigma(k, k) > 0.0)) throw ValidationError("correlation_matrix: nonpositive diagonal entry " + std::to_string(k));
        sd[k] = std::sqrt(sigma(k, k));
    }
    Eigen::MatrixXd omega(n, n);
    for (Eigen::Index k = 0; k < n; ++k)
        for (Eigen::Index l = 0; l < n; ++l)
            omega(k, l) = k == l ? 1.0 : std::clamp(sigma(k, l) / (sd[k] * sd[l]), -1.0, 1.0);
    return omega;
}

Eigen::MatrixXd cross_block(const Eigen::MatrixXd& omega, const ModalityLayout& layout, const std::string& source,
                            const std::string& target, double tau) {
    if (!(tau >= 0.0 && tau < 1.0)) throw ValidationError("cross_block: threshold must lie in [0, 1)");
    const std::size_t s = layout.index_of(source);
    const std::size_t t = layout.index_of(target);
    if (omega.rows() != idx(layout.total_topics) || omega.cols() != idx(layout.total_topics))
        throw ValidationError("cross_block: matrix does not match the layout");
    Eigen::MatrixXd block =
        omega.block(idx(layout.offsets[s]), idx(layout.offsets[t]), idx(layout.topic_counts[s]), idx(layout.topic_counts[t]));
    for (Eigen::Index i = 0; i < block.rows(); ++i)
        for (Eigen::Index j = 0; j < block.cols(); ++j)
            if (std::abs(block(i, j)) < tau) block(i, j) = 0.0;
    return block;
}

Eigen::VectorXd visual_relevance(const Eigen::MatrixXd& cross) {
    if (cross.size() == 0) throw ValidationError("visual_relevance: empty matrix");
    return cross.cwiseAbs().rowwise().sum() / static_cast<double>(cross.cols());
}

Eigen::VectorXd alt_relevance_max(const Eigen::MatrixXd& cross) {
    if (cross.size() == 0) throw ValidationError("alt_relevance_max: empty matrix");
    return cross.cwiseAbs().rowwise().maxCoeff();
}

std::vector<std::size_t> top_indices(const Eigen::VectorXd& values, std::size_t n) {
    std::vector<std::size_t> order(static_cast<std::size_t>(values.size()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[idx(a)] > values[idx(b)]; });
    order.resize(std::min(n, order.size()));
    return order;
}

std::vector<std::size_t> rank_topics(const Eigen::VectorXd& rho) {
    return top_indices(rho, static_cast<std::size_t>(rho.size()));
}

TopicAnalysis analyze_topics(const ModelParams& model, const std::string& source, const std::string& target,
                             double tau, Relevance relevance) {
    if (model.tied_xi) throw ValidationError("analysis: a tied-xi model has no cross-modality covariance blocks");
    TopicAnalysis a;
    a.source = source;
    a.target = target;
    a.threshold = tau;
    a.relevance = relevance;
    a.omega = correlation_matrix(model.prior.sigma);
    a.cross_block = cross_block(a.omega, model.layout, source, target, tau);
    a.rho = relevance == Relevance::Mean ? visual_relevance(a.cross_block) : alt_relevance_max(a.cross_block);
    a.ranking = rank_topics(a.rho);
    return a;
}

std::vector<StickReport> stick_report(const ModelParams& model) {
    std::vector<StickReport> out;
    for (std::size_t m = 0; m < model.num_modalities(); ++m) {
        const auto& st = model.sticks[m];
        StickReport r;
        r.modality = model.layout.names[m];
        r.p = st.p;
        r.alpha = st.alpha;
        r.beta = st.beta;
        r.effective_topics = static_cast<std::size_t>((st.p.array() > kEffectiveTopicWeight).count());
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<std::pair<std::string, double>> top_words(const ModelParams& model, const Vocabulary& vocab,
                                                      const std::string& modality, std::size_t topic, std::size_t n) {
    const std::size_t m = model.layout.index_of(modality);
    const auto& topics = model.dictionaries[m].topics;
    if (topic >= static_cast<std::size_t>(topics.rows())) throw ValidationError("top_words: topic index out of range");
    if (vocab.size() != static_cast<std::size_t>(topics.cols()))
        throw ValidationError("top_words: vocabulary size does not match modality '" + modality + "'");
    if (n > vocab.size()) throw ValidationError("top_words: n exceeds the vocabulary size");
    const Eigen::VectorXd row = topics.row(idx(topic)).transpose();
    std::vector<std::pair<std::string, double>> out;
    for (auto w : top_indices(row, n)) out.emplace_back(vocab.terms[w], row[idx(w)]);
    return out;
}

void write_stick_report_csv(const std::vector<StickReport>& report, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "modality,topic,p,alpha,beta,effective_topics\n";
    for (const auto& r : report)
        for (Eigen::Index k = 0; k < r.p.size(); ++k)
            out << r.modality << ',' << k << ',' << fmt(r.p[k]) << ',' << fmt(r.alpha) << ',' << fmt(r.beta) << ','
                << r.effective_topics << '\n';
}

void write_cross_block_csv(const TopicAnalysis& analysis, const std::filesystem::path& path) {
    auto out = open_out(path);
    const auto& c = analysis.cross_block;
    out << analysis.source << "\\" << analysis.target;
    for (Eigen::Index j = 0; j < c.cols(); ++j) out << ',' << analysis.target << '_' << j;
    out << '\n';
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
        out << analysis.source << '_' << i;
        for (Eigen::Index j = 0; j < c.cols(); ++j) out << ',' << fmt(c(i, j));
        out << '\n';
    }
}

void write_ranking_csv(const TopicAnalysis& analysis, const ModelParams& model, const Vocabulary& source_vocab,
                       std::size_t n_words, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "rank,topic,rho,private_flag,top_words\n";
    n_words = std::min(n_words, source_vocab.size());
    for (std::size_t r = 0; r < analysis.ranking.size(); ++r) {
        const std::size_t k = analysis.ranking[r];
        std::string words;
        for (const auto& [term, prob] : top_words(model, source_vocab, analysis.source, k, n_words)) {
            if (!words.empty()) words += ' ';
            words += term;
        }
        out << r << ',' << k << ',' << fmt(analysis.rho[idx(k)]) << ',' << (analysis.is_private(k) ? 1 : 0) << ",\""
            << words << "\"\n";
    }
}

}  // namespace fmtm
