#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <unistd.h>

#include <Eigen/Dense>

#include "fmtm/corpus.hpp"
#include "fmtm/generative.hpp"

namespace fmtm::test {

namespace fs = std::filesystem;

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                ("fmtm_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Vocabulary make_vocab(const std::string& modality, std::size_t w) {
    Vocabulary v{modality, {}};
    for (std::size_t i = 0; i < w; ++i) v.terms.push_back(modality + "_" + std::to_string(i));
    return v;
}

inline Eigen::MatrixXd random_spd(Eigen::Index n, std::mt19937_64& rng, double ridge = 0.5) {
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::MatrixXd a(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) a(i, j) = g(rng);
    Eigen::MatrixXd s = a * a.transpose() / static_cast<double>(n);
    s.diagonal().array() += ridge;
    return 0.5 * (s + s.transpose());
}

inline Eigen::VectorXd random_simplex(Eigen::Index n, std::mt19937_64& rng) {
    std::gamma_distribution<double> g(1.0, 1.0);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = g(rng) + 1e-3;
    return v / v.sum();
}

/// Small random untied model over the given modalities.
inline ModelParams random_model(const std::vector<std::size_t>& topics, const std::vector<std::size_t>& vocab,
                                std::mt19937_64& rng, bool tied = false) {
    ModelParams m;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < topics.size(); ++i) names.push_back("m" + std::to_string(i));
    m.layout = ModalityLayout::make(names, topics);
    m.tied_xi = tied;
    std::uniform_real_distribution<double> u(0.1, 0.9);
    for (std::size_t i = 0; i < topics.size(); ++i) {
        Eigen::VectorXd v(static_cast<Eigen::Index>(topics[i]));
        for (auto& x : v) x = u(rng);
        m.sticks.push_back(StickWeights::from_fractions(v, 1.0 + u(rng), 2.0 + 5.0 * u(rng)));
        TopicDictionary d;
        d.modality = names[i];
        d.topics.resize(static_cast<Eigen::Index>(topics[i]), static_cast<Eigen::Index>(vocab[i]));
        for (Eigen::Index k = 0; k < d.topics.rows(); ++k)
            d.topics.row(k) = random_simplex(d.topics.cols(), rng).transpose();
        m.dictionaries.push_back(std::move(d));
    }
    const auto K = static_cast<Eigen::Index>(m.xi_dim());
    m.prior.sigma = random_spd(K, rng);
    std::normal_distribution<double> g(0.0, 0.3);
    m.prior.mu.resize(K);
    for (auto& x : m.prior.mu) x = g(rng);
    return m;
}

/// A corpus sampled from `model`.
inline MultiModalCorpus sample_corpus(const ModelParams& model, std::size_t docs, const std::vector<std::size_t>& lengths,
                                      Rng& rng) {
    MultiModalCorpus c;
    c.layout = model.layout;
    for (std::size_t m = 0; m < model.num_modalities(); ++m)
        c.vocabularies.push_back(make_vocab(model.layout.names[m], model.dictionaries[m].vocab_size()));
    for (std::size_t d = 0; d < docs; ++d)
        c.documents.push_back(sample_document(model, lengths, rng, "d" + std::to_string(d)).first);
    return c;
}

}  // namespace fmtm::test
