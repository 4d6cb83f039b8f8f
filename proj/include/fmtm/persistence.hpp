#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmtm/corpus.hpp"
#include "fmtm/generative.hpp"
#include "fmtm/inference.hpp"

namespace fmtm {

inline constexpr std::uint32_t kArchiveFormatVersion = 1;
inline constexpr char kArchiveMagic[8] = {'F', 'M', 'T', 'M', 'A', 'R', 'C', '\0'};

/// Where a model came from. Empty for ground-truth models.
struct Provenance {
    std::string config_hash;
    std::string corpus_hash;
    std::uint64_t seed = 0;
    std::size_t sweeps = 0;
    double final_elbo = 0.0;
    std::vector<double> train_perplexity;  // per modality
    nlohmann::json config = nlohmann::json::object();

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct ModelArchive {
    ModelParams model;
    Provenance provenance;
    std::vector<Vocabulary> vocabularies;  // empty when none were stored
};

Provenance make_provenance(const TrainState& state, const MultiModalCorpus& corpus);

/// Writes the archive to a temporary sibling and renames it over `path`.
/// Vocabularies are optional and only used for reporting.
void save_model(const ModelParams& model, const Provenance& provenance, const std::filesystem::path& path,
                const std::vector<Vocabulary>& vocabularies = {});

/// Checks the format version before anything else, then re-validates the model.
ModelArchive load_model(const std::filesystem::path& path);

}  // namespace fmtm
