#include "fmtm/persistence.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <system_error>
#include <unistd.h>

#include "fmtm/error.hpp"

namespace fmtm {

using nlohmann::json;

namespace {

template <typename T>
T to_le(T v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
        return v;
    }
}

template <typename T>
void put(std::string& buf, T v) {
    v = to_le(v);
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(const std::string& buf, std::size_t pos) {
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    return to_le(v);
}

/// Row-major float64 arrays with their declared shapes.
class ArrayWriter {
public:
    void add(const std::string& name, const Eigen::MatrixXd& m) {
        entries_.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", data_.size()}});
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(data_, m(i, j));
    }
    void add(const std::string& name, const Eigen::VectorXd& v) {
        entries_.push_back({{"name", name}, {"shape", {v.size()}}, {"offset", data_.size()}});
        for (Eigen::Index i = 0; i < v.size(); ++i) put<double>(data_, v[i]);
    }
    void add(const std::string& name, const std::vector<double>& v) {
        add(name, Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()))));
    }
    const json& entries() const { return entries_; }
    const std::string& data() const { return data_; }

private:
    json entries_ = json::array();
    std::string data_;
};

class ArrayReader {
public:
    ArrayReader(const json& entries, const std::string& buf, std::size_t data_start, const std::string& file)
        : buf_(buf), start_(data_start), file_(file) {
        for (const auto& e : entries) {
            Entry en;
            en.shape = e.at("shape").get<std::vector<std::size_t>>();
            en.offset = e.at("offset").get<std::size_t>();
            if (en.shape.empty() || en.shape.size() > 2) fail("array '" + e.at("name").get<std::string>() + "' has a bad shape");
            std::size_t n = 1;
            for (auto s : en.shape) n *= s;
            if (start_ + en.offset + n * 8 > buf_.size())
                fail("array '" + e.at("name").get<std::string>() + "' runs past the end of the file");
            map_[e.at("name").get<std::string>()] = en;
        }
    }

    bool has(const std::string& name) const { return map_.count(name) > 0; }

    Eigen::MatrixXd matrix(const std::string& name) const {
        const auto& e = find(name);
        if (e.shape.size() != 2) fail("array '" + name + "' is not a matrix");
        Eigen::MatrixXd m(static_cast<Eigen::Index>(e.shape[0]), static_cast<Eigen::Index>(e.shape[1]));
        std::size_t pos = start_ + e.offset;
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j, pos += 8) m(i, j) = get<double>(buf_, pos);
        return m;
    }

    Eigen::VectorXd vector(const std::string& name) const {
        const auto& e = find(name);
        if (e.shape.size() != 1) fail("array '" + name + "' is not a vector");
        Eigen::VectorXd v(static_cast<Eigen::Index>(e.shape[0]));
        std::size_t pos = start_ + e.offset;
        for (Eigen::Index i = 0; i < v.size(); ++i, pos += 8) v[i] = get<double>(buf_, pos);
        return v;
    }

private:
    struct Entry {
        std::vector<std::size_t> shape;
        std::size_t offset = 0;
    };
    const Entry& find(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) fail("missing array '" + name + "'");
        return it->second;
    }
    [[noreturn]] void fail(const std::string& what) const { throw ValidationError(file_ + ": " + what); }

    const std::string& buf_;
    std::size_t start_;
    std::string file_;
    std::map<std::string, Entry> map_;
};

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Provenance make_provenance(const TrainState& state, const MultiModalCorpus& corpus) {
    Provenance p;
    p.config_hash = state.config.hash();
    p.corpus_hash = corpus_hash(corpus);
    p.seed = state.config.seed;
    p.sweeps = state.trace.size();
    p.final_elbo = state.trace.empty() ? state.initial_elbo : state.trace.back().elbo;
    if (!state.trace.empty()) p.train_perplexity = state.trace.back().train_perplexity;
    p.config = state.config.to_json();
    return p;
}

void save_model(const ModelParams& model, const Provenance& provenance, const std::filesystem::path& path,
                const std::vector<Vocabulary>& vocabularies) {
    model.validate();
    if (!vocabularies.empty()) {
        if (vocabularies.size() != model.num_modalities())
            throw ValidationError("save_model: one vocabulary per modality required");
        for (std::size_t m = 0; m < vocabularies.size(); ++m)
            if (vocabularies[m].size() != model.dictionaries[m].vocab_size())
                throw ValidationError("save_model: vocabulary size mismatch in modality '" + model.layout.names[m] + "'");
    }

    ArrayWriter arrays;
    json mods = json::array();
    for (std::size_t m = 0; m < model.num_modalities(); ++m) {
        const std::string& name = model.layout.names[m];
        const auto& st = model.sticks[m];
        const auto& dict = model.dictionaries[m];
        json jm = {{"name", name}, {"topics", model.topic_count(m)}, {"vocabulary_size", dict.vocab_size()},
                   {"has_dirichlet", dict.dirichlet.size() != 0}};
        if (!vocabularies.empty()) jm["terms"] = vocabularies[m].terms;
        mods.push_back(std::move(jm));
        arrays.add("sticks/" + std::to_string(m) + "/v", st.v);
        arrays.add("sticks/" + std::to_string(m) + "/p", st.p);
        arrays.add("hyper/" + std::to_string(m), std::vector<double>{st.alpha, st.beta, dict.gamma});
        arrays.add("topics/" + std::to_string(m), dict.topics);
        if (dict.dirichlet.size() != 0) arrays.add("dirichlet/" + std::to_string(m), dict.dirichlet);
    }
    arrays.add("prior/mu", model.prior.mu);
    arrays.add("prior/sigma", model.prior.sigma);
    arrays.add("provenance/final_elbo", std::vector<double>{provenance.final_elbo});
    arrays.add("provenance/train_perplexity", provenance.train_perplexity);

    json header = {{"format_version", kArchiveFormatVersion},
                   {"tied_xi", model.tied_xi},
                   {"modalities", std::move(mods)},
                   {"provenance",
                    {{"config_hash", provenance.config_hash},
                     {"corpus_hash", provenance.corpus_hash},
                     {"seed", provenance.seed},
                     {"sweeps", provenance.sweeps},
                     {"final_elbo", provenance.final_elbo},
                     {"train_perplexity", provenance.train_perplexity},
                     {"config", provenance.config}}},
                   {"arrays", arrays.entries()}};
    const std::string text = header.dump();

    std::string buf(kArchiveMagic, sizeof(kArchiveMagic));
    put<std::uint32_t>(buf, kArchiveFormatVersion);
    put<std::uint64_t>(buf, text.size());
    buf += text;
    buf += arrays.data();

    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw Error("failed writing " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw Error("cannot move archive into place at " + path.string() + ": " + ec.message());
    }
}

ModelArchive load_model(const std::filesystem::path& path) {
    const std::string file = path.string();
    const std::string buf = read_file(path);
    constexpr std::size_t prefix = sizeof(kArchiveMagic) + 4 + 8;
    if (buf.size() < prefix || std::memcmp(buf.data(), kArchiveMagic, sizeof(kArchiveMagic)) != 0)
        throw ValidationError(file + ": not a model archive");
    const auto version = get<std::uint32_t>(buf, sizeof(kArchiveMagic));
    if (version != kArchiveFormatVersion)
        throw VersionError(file + ": archive format version " + std::to_string(version) + ", expected " +
                           std::to_string(kArchiveFormatVersion));
    const auto header_len = get<std::uint64_t>(buf, sizeof(kArchiveMagic) + 4);
    if (header_len > buf.size() - prefix) throw ValidationError(file + ": header runs past the end of the file");

    ModelArchive out;
    try {
        const json header = json::parse(buf.begin() + prefix, buf.begin() + static_cast<std::ptrdiff_t>(prefix + header_len));
        if (header.at("format_version").get<std::uint32_t>() != version)
            throw ValidationError(file + ": header version disagrees with the file prefix");
        const ArrayReader arrays(header.at("arrays"), buf, prefix + header_len, file);

        auto& model = out.model;
        model.tied_xi = header.at("tied_xi").get<bool>();
        std::vector<std::string> names;
        std::vector<std::size_t> counts;
        const auto& mods = header.at("modalities");
        for (std::size_t m = 0; m < mods.size(); ++m) {
            const auto& jm = mods[m];
            const std::string key = std::to_string(m);
            names.push_back(jm.at("name").get<std::string>());
            counts.push_back(jm.at("topics").get<std::size_t>());
            const Eigen::VectorXd hyper = arrays.vector("hyper/" + key);
            if (hyper.size() != 3) throw ValidationError(file + ": hyperparameter array of modality " + key + " has the wrong size");
            StickWeights st;
            st.v = arrays.vector("sticks/" + key + "/v");
            st.p = arrays.vector("sticks/" + key + "/p");
            st.alpha = hyper[0];
            st.beta = hyper[1];
            model.sticks.push_back(std::move(st));
            TopicDictionary dict;
            dict.modality = names.back();
            dict.topics = arrays.matrix("topics/" + key);
            dict.gamma = hyper[2];
            if (jm.at("has_dirichlet").get<bool>()) dict.dirichlet = arrays.matrix("dirichlet/" + key);
            if (dict.vocab_size() != jm.at("vocabulary_size").get<std::size_t>())
                throw ValidationError(file + ": dictionary of modality '" + names.back() + "' has the wrong width");
            model.dictionaries.push_back(std::move(dict));
            if (jm.contains("terms")) {
                Vocabulary v{names.back(), jm["terms"].get<std::vector<std::string>>()};
                if (v.size() != model.dictionaries.back().vocab_size())
                    throw ValidationError(file + ": vocabulary of modality '" + v.modality + "' has the wrong size");
                out.vocabularies.push_back(std::move(v));
            }
        }
        if (!out.vocabularies.empty() && out.vocabularies.size() != mods.size())
            throw ValidationError(file + ": vocabularies stored for some modalities only");
        model.layout = ModalityLayout::make(std::move(names), std::move(counts));
        model.prior.mu = arrays.vector("prior/mu");
        model.prior.sigma = arrays.matrix("prior/sigma");

        const auto& jp = header.at("provenance");
        auto& prov = out.provenance;
        prov.config_hash = jp.at("config_hash").get<std::string>();
        prov.corpus_hash = jp.at("corpus_hash").get<std::string>();
        prov.seed = jp.at("seed").get<std::uint64_t>();
        prov.sweeps = jp.at("sweeps").get<std::size_t>();
        prov.config = jp.at("config");
        prov.final_elbo = arrays.vector("provenance/final_elbo")[0];
        const Eigen::VectorXd tp = arrays.vector("provenance/train_perplexity");
        prov.train_perplexity.assign(tp.data(), tp.data() + tp.size());
    } catch (const json::exception& e) {
        throw ValidationError(file + ": malformed header: " + e.what());
    }
    out.model.validate();
    return out;
}

}  // namespace fmtm
