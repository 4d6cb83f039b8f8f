#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace fmtm {

/// Ordered modalities with their truncation levels and their offsets on the
/// concatenated topic axis.
struct ModalityLayout {
    std::vector<std::string> names;
    std::vector<std::size_t> topic_counts;
    std::vector<std::size_t> offsets;
    std::size_t total_topics = 0;

    /// Builds offsets/total from names and counts; throws ValidationError on
    /// empty or duplicate names and zero counts.
    static ModalityLayout make(std::vector<std::string> names, std::vector<std::size_t> topic_counts);

    std::size_t size() const noexcept { return names.size(); }
    /// Index of a modality name; throws ValidationError if absent.
    std::size_t index_of(const std::string& name) const;
    bool contains(const std::string& name) const noexcept;

    friend bool operator==(const ModalityLayout&, const ModalityLayout&) = default;
};

struct Vocabulary {
    std::string modality;
    std::vector<std::string> terms;

    std::size_t size() const noexcept { return terms.size(); }
    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

struct TokenCount {
    std::uint32_t index = 0;
    std::uint32_t count = 0;
    friend bool operator==(const TokenCount&, const TokenCount&) = default;
};

/// Sparse bag of words for one modality, sorted by token index.
using SparseCounts = std::vector<TokenCount>;

struct Document {
    std::string id;
    std::vector<SparseCounts> counts;  // one entry per modality, layout order

    std::size_t length(std::size_t modality) const;
    friend bool operator==(const Document&, const Document&) = default;
};

struct MultiModalCorpus {
    ModalityLayout layout;
    std::vector<Vocabulary> vocabularies;
    std::vector<Document> documents;

    std::size_t num_docs() const noexcept { return documents.size(); }
    /// Re-checks every corpus invariant; throws ValidationError.
    void validate() const;
    friend bool operator==(const MultiModalCorpus&, const MultiModalCorpus&) = default;
};

struct ModalityStats {
    std::string modality;
    std::size_t num_docs = 0;
    std::uint64_t total_tokens = 0;
    std::size_t vocabulary_size = 0;
    double mean_length = 0.0;
};

/// Truncation used when a manifest does not declare topic counts.
inline constexpr std::size_t kDefaultTruncation = 8;

/// Loads a manifest (JSON) plus the vocabulary and JSON-lines documents it names.
MultiModalCorpus load_corpus(const std::filesystem::path& manifest_path);

/// Writes manifest.json, one <modality>.vocab per modality and documents.jsonl
/// into `dir`; returns the manifest path.
std::filesystem::path write_corpus(const MultiModalCorpus& corpus, const std::filesystem::path& dir);

/// Random disjoint partition; train size = floor(fraction * D + 0.5).
std::pair<MultiModalCorpus, MultiModalCorpus> split_corpus(const MultiModalCorpus& corpus,
                                                           double train_fraction,
                                                           std::uint64_t seed);

std::vector<ModalityStats> corpus_stats(const MultiModalCorpus& corpus);

/// Stable 64-bit content hash (hex) over modalities, vocabularies and documents.
std::string corpus_hash(const MultiModalCorpus& corpus);

/// FNV-1a accumulator shared by the content hashes.
class Fnv1a {
public:
    void update(const void* data, std::size_t n);
    void update(const std::string& s);
    template <typename T>
    void update_value(const T& v) { update(&v, sizeof(T)); }
    std::uint64_t digest() const noexcept { return h_; }
    std::string hex() const;

private:
    std::uint64_t h_ = 1469598103934665603ULL;
};

}  // namespace fmtm
