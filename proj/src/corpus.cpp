#include "fmtm/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "fmtm/error.hpp"

namespace fmtm {

namespace fs = std::filesystem;
using nlohmann::json;

ModalityLayout ModalityLayout::make(std::vector<std::string> names, std::vector<std::size_t> topic_counts) {
    if (names.empty()) throw ValidationError("layout: no modalities");
    if (names.size() != topic_counts.size())
        throw ValidationError("layout: " + std::to_string(names.size()) + " names but " +
                              std::to_string(topic_counts.size()) + " topic counts");
    std::set<std::string> seen;
    for (const auto& n : names) {
        if (n.empty()) throw ValidationError("layout: empty modality name");
        if (!seen.insert(n).second) throw ValidationError("layout: duplicate modality '" + n + "'");
    }
    ModalityLayout l;
    l.names = std::move(names);
    l.topic_counts = std::move(topic_counts);
    l.offsets.resize(l.names.size());
    std::size_t off = 0;
    for (std::size_t m = 0; m < l.names.size(); ++m) {
        if (l.topic_counts[m] == 0)
            throw ValidationError("layout: modality '" + l.names[m] + "' has zero topics");
        l.offsets[m] = off;
        off += l.topic_counts[m];
    }
    l.total_topics = off;
    return l;
}

std::size_t ModalityLayout::index_of(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ValidationError("unknown modality '" + name + "'");
    return static_cast<std::size_t>(it - names.begin());
}

bool ModalityLayout::contains(const std::string& name) const noexcept {
    return std::find(names.begin(), names.end(), name) != names.end();
}

std::size_t Document::length(std::size_t modality) const {
    std::size_t n = 0;
    for (const auto& tc : counts.at(modality)) n += tc.count;
    return n;
}

void MultiModalCorpus::validate() const {
    if (vocabularies.size() != layout.size())
        throw ValidationError("corpus: vocabulary count does not match modality count");
    for (std::size_t m = 0; m < layout.size(); ++m) {
        const auto& v = vocabularies[m];
        if (v.modality != layout.names[m])
            throw ValidationError("corpus: vocabulary " + std::to_string(m) + " belongs to '" +
                                  v.modality + "', expected '" + layout.names[m] + "'");
        if (v.size() < 2) throw ValidationError("vocabulary '" + v.modality + "' has fewer than 2 terms");
        std::unordered_set<std::string> terms(v.terms.begin(), v.terms.end());
        if (terms.size() != v.terms.size())
            throw ValidationError("vocabulary '" + v.modality + "' has duplicate terms");
    }
    std::unordered_set<std::string> ids;
    for (const auto& d : documents) {
        if (!ids.insert(d.id).second) throw ValidationError("duplicate document id '" + d.id + "'");
        if (d.counts.size() != layout.size())
            throw ValidationError("document '" + d.id + "' does not cover every modality");
        for (std::size_t m = 0; m < layout.size(); ++m) {
            std::int64_t prev = -1;
            for (const auto& tc : d.counts[m]) {
                if (tc.index >= vocabularies[m].size())
                    throw ValidationError("document '" + d.id + "', modality '" + layout.names[m] +
                                          "': token index " + std::to_string(tc.index) +
                                          " out of vocabulary range " +
                                          std::to_string(vocabularies[m].size()));
                if (tc.count == 0)
                    throw ValidationError("document '" + d.id + "', modality '" + layout.names[m] +
                                          "': zero count");
                if (static_cast<std::int64_t>(tc.index) <= prev)
                    throw ValidationError("document '" + d.id + "', modality '" + layout.names[m] +
                                          "': token indices not strictly increasing");
                prev = tc.index;
            }
        }
    }
}

namespace {

std::size_t line_of_offset(const std::string& text, std::size_t byte) {
    byte = std::min(byte, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + byte, '\n'));
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ParseError(p.string(), 0, "cannot open file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Vocabulary read_vocabulary(const fs::path& p, const std::string& modality) {
    std::ifstream in(p);
    if (!in) throw ParseError(p.string(), 0, "cannot open vocabulary");
    Vocabulary v;
    v.modality = modality;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        v.terms.push_back(line);
    }
    return v;
}

std::uint32_t parse_token_index(const std::string& key, const std::string& file, std::size_t line) {
    std::uint32_t out = 0;
    auto [ptr, ec] = std::from_chars(key.data(), key.data() + key.size(), out);
    if (key.empty() || ec != std::errc() || ptr != key.data() + key.size())
        throw ParseError(file, line, "token index '" + key + "' is not a non-negative integer");
    return out;
}

Document parse_document(const std::string& text, const ModalityLayout& layout, const std::string& file,
                        std::size_t line) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(file, line, e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string())
        throw ParseError(file, line, "document needs a string \"id\"");
    Document d;
    d.id = j["id"].get<std::string>();
    d.counts.resize(layout.size());
    if (!j.contains("counts")) return d;
    const auto& counts = j["counts"];
    if (!counts.is_object()) throw ParseError(file, line, "\"counts\" must be an object");
    for (const auto& [modality, bag] : counts.items()) {
        if (!layout.contains(modality))
            throw ParseError(file, line, "document '" + d.id + "' names unknown modality '" + modality + "'");
        if (!bag.is_object()) throw ParseError(file, line, "counts for '" + modality + "' must be an object");
        auto& sparse = d.counts[layout.index_of(modality)];
        for (const auto& [key, c] : bag.items()) {
            if (!c.is_number_integer() || c.get<std::int64_t>() <= 0)
                throw ParseError(file, line, "count for token " + key + " must be a positive integer");
            if (c.get<std::int64_t>() > std::numeric_limits<std::uint32_t>::max())
                throw ParseError(file, line, "count for token " + key + " too large");
            sparse.push_back({parse_token_index(key, file, line), static_cast<std::uint32_t>(c.get<std::int64_t>())});
        }
        std::sort(sparse.begin(), sparse.end(),
                  [](const TokenCount& a, const TokenCount& b) { return a.index < b.index; });
        for (std::size_t i = 1; i < sparse.size(); ++i)
            if (sparse[i].index == sparse[i - 1].index)
                throw ParseError(file, line, "duplicate token index " + std::to_string(sparse[i].index));
    }
    return d;
}

}  // namespace

MultiModalCorpus load_corpus(const fs::path& manifest_path) {
    const std::string text = read_file(manifest_path);
    json manifest;
    try {
        manifest = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(manifest_path.string(), line_of_offset(text, e.byte), e.what());
    }
    const fs::path base = manifest_path.parent_path();
    const std::string mfile = manifest_path.string();
    if (!manifest.is_object() || !manifest.contains("modalities") || !manifest["modalities"].is_array())
        throw ParseError(mfile, 0, "manifest needs a \"modalities\" array");
    if (!manifest.contains("documents") || !manifest["documents"].is_string())
        throw ParseError(mfile, 0, "manifest needs a \"documents\" path");

    std::vector<std::string> names;
    std::vector<fs::path> vocab_paths;
    for (const auto& m : manifest["modalities"]) {
        if (!m.is_object() || !m.contains("name") || !m.contains("vocabulary"))
            throw ParseError(mfile, 0, "each modality needs \"name\" and \"vocabulary\"");
        names.push_back(m["name"].get<std::string>());
        vocab_paths.push_back(base / m["vocabulary"].get<std::string>());
    }
    std::vector<std::size_t> counts(names.size(), kDefaultTruncation);
    if (manifest.contains("topic_counts")) {
        counts = manifest["topic_counts"].get<std::vector<std::size_t>>();
    }

    MultiModalCorpus corpus;
    corpus.layout = ModalityLayout::make(names, counts);
    for (std::size_t m = 0; m < names.size(); ++m)
        corpus.vocabularies.push_back(read_vocabulary(vocab_paths[m], names[m]));

    const fs::path docs_path = base / manifest["documents"].get<std::string>();
    std::ifstream in(docs_path);
    if (!in) throw ParseError(docs_path.string(), 0, "cannot open documents file");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        corpus.documents.push_back(parse_document(line, corpus.layout, docs_path.string(), lineno));
    }
    corpus.validate();
    return corpus;
}

fs::path write_corpus(const MultiModalCorpus& corpus, const fs::path& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["modalities"] = json::array();
    for (std::size_t m = 0; m < corpus.layout.size(); ++m) {
        const std::string vocab_file = corpus.layout.names[m] + ".vocab";
        manifest["modalities"].push_back({{"name", corpus.layout.names[m]}, {"vocabulary", vocab_file}});
        std::ofstream out(dir / vocab_file, std::ios::binary);
        for (const auto& t : corpus.vocabularies[m].terms) out << t << '\n';
        if (!out) throw Error("cannot write " + (dir / vocab_file).string());
    }
    manifest["topic_counts"] = corpus.layout.topic_counts;
    manifest["documents"] = "documents.jsonl";

    std::ofstream docs(dir / "documents.jsonl", std::ios::binary);
    for (const auto& d : corpus.documents) {
        // Hand-written so token keys keep numeric order.
        docs << "{\"id\":" << json(d.id).dump() << ",\"counts\":{";
        for (std::size_t m = 0; m < corpus.layout.size(); ++m) {
            if (m) docs << ',';
            docs << json(corpus.layout.names[m]).dump() << ":{";
            for (std::size_t i = 0; i < d.counts[m].size(); ++i) {
                if (i) docs << ',';
                docs << '"' << d.counts[m][i].index << "\":" << d.counts[m][i].count;
            }
            docs << '}';
        }
        docs << "}}\n";
    }
    if (!docs) throw Error("cannot write " + (dir / "documents.jsonl").string());

    const fs::path mpath = dir / "manifest.json";
    std::ofstream mout(mpath, std::ios::binary);
    mout << manifest.dump(2) << '\n';
    if (!mout) throw Error("cannot write " + mpath.string());
    return mpath;
}

std::pair<MultiModalCorpus, MultiModalCorpus> split_corpus(const MultiModalCorpus& corpus,
                                                           double train_fraction, std::uint64_t seed) {
    const std::size_t D = corpus.num_docs();
    if (D < 2) throw ValidationError("split_corpus: need at least 2 documents, got " + std::to_string(D));
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ValidationError("split_corpus: train fraction must lie in (0, 1)");
    const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(D) + 0.5));

    std::vector<std::size_t> order(D);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> test_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());

    auto subset = [&](const std::vector<std::size_t>& idx) {
        MultiModalCorpus c;
        c.layout = corpus.layout;
        c.vocabularies = corpus.vocabularies;
        c.documents.reserve(idx.size());
        for (auto i : idx) c.documents.push_back(corpus.documents[i]);
        return c;
    };
    return {subset(train_idx), subset(test_idx)};
}

std::vector<ModalityStats> corpus_stats(const MultiModalCorpus& corpus) {
    std::vector<ModalityStats> out;
    for (std::size_t m = 0; m < corpus.layout.size(); ++m) {
        ModalityStats s;
        s.modality = corpus.layout.names[m];
        s.num_docs = corpus.num_docs();
        s.vocabulary_size = m < corpus.vocabularies.size() ? corpus.vocabularies[m].size() : 0;
        for (const auto& d : corpus.documents) s.total_tokens += d.length(m);
        s.mean_length = s.num_docs ? static_cast<double>(s.total_tokens) / static_cast<double>(s.num_docs) : 0.0;
        out.push_back(s);
    }
    return out;
}

void Fnv1a::update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h_ ^= p[i];
        h_ *= 1099511628211ULL;
    }
}

void Fnv1a::update(const std::string& s) {
    update_value(static_cast<std::uint64_t>(s.size()));
    update(s.data(), s.size());
}

std::string Fnv1a::hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
    return buf;
}

std::string corpus_hash(const MultiModalCorpus& corpus) {
    Fnv1a h;
    for (std::size_t m = 0; m < corpus.layout.size(); ++m) {
        h.update(corpus.layout.names[m]);
        for (const auto& t : corpus.vocabularies[m].terms) h.update(t);
    }
    for (const auto& d : corpus.documents) {
        h.update(d.id);
        for (const auto& bag : d.counts) {
            h.update_value(static_cast<std::uint64_t>(bag.size()));
            for (const auto& tc : bag) {
                h.update_value(tc.index);
                h.update_value(tc.count);
            }
        }
    }
    return h.hex();
}

}  // namespace fmtm
