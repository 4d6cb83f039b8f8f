#include "fmtm/cli.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "fmtm/corpus.hpp"
#include "fmtm/error.hpp"
#include "fmtm/evaluation.hpp"
#include "fmtm/generative.hpp"
#include "fmtm/persistence.hpp"
#include "fmtm/prediction.hpp"

namespace fmtm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string(), 0, e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("failed writing " + path.string());
}

std::string fmt(double x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create directory " + dir.string() + ": " + ec.message());
}

TrainConfig inference_config(const ModelArchive& archive, const GlobalOptions& global) {
    // Only trained archives carry a training config; ground truth holds the scenario.
    const bool trained = archive.provenance.sweeps > 0 && !archive.provenance.config.empty();
    TrainConfig c = trained ? TrainConfig::from_json(archive.provenance.config) : TrainConfig{};
    c.workers = global.workers;
    return c;
}

std::vector<std::string> paths_json(const std::vector<fs::path>& paths) {
    std::vector<std::string> out;
    for (const auto& p : paths) out.push_back(p.string());
    return out;
}

}  // namespace

void write_trace_csv(const std::vector<std::string>& modalities, const std::vector<SweepRecord>& trace,
                     const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "sweep,elbo,relative_change,wall_seconds";
    for (const auto& m : modalities) out << ",train_perplexity_" << m;
    out << '\n';
    for (const auto& r : trace) {
        out << r.sweep << ',' << fmt(r.elbo) << ',' << fmt(r.relative_change) << ',' << fmt(r.wall_seconds);
        for (double p : r.train_perplexity) out << ',' << fmt(p);
        out << '\n';
    }
    if (!out) throw Error("failed writing " + path.string());
}

CommandResult cmd_generate(const GlobalOptions& global, const GenerateOptions& opts) {
    ScenarioConfig cfg = global.config.empty() ? ScenarioConfig::acceptance() : ScenarioConfig::from_json(read_json(global.config));
    if (global.seed) cfg.seed = *global.seed;
    cfg.validate();
    if (opts.out_dir.empty()) throw ValidationError("generate: output directory required");
    if (!(opts.split >= 0.0 && opts.split < 1.0)) throw ValidationError("generate: split must lie in [0, 1)");

    Rng rng(cfg.seed);
    Scenario sc = make_synthetic_scenario(cfg, rng);
    // Training truncation: the truth's topic count, at least the default.
    std::vector<std::size_t> trunc = sc.truth.layout.topic_counts;
    for (auto& t : trunc) t = std::max(t, kDefaultTruncation);
    sc.corpus.layout = ModalityLayout::make(sc.corpus.layout.names, trunc);

    ensure_dir(opts.out_dir);
    CommandResult res;
    res.artifacts.push_back(write_corpus(sc.corpus, opts.out_dir / "corpus"));

    Provenance prov;
    prov.seed = cfg.seed;
    prov.config = cfg.to_json();
    const fs::path truth = opts.out_dir / "truth.fmtm";
    save_model(sc.truth, prov, truth, sc.corpus.vocabularies);
    res.artifacts.push_back(truth);

    std::string latents;
    for (const auto& rec : sc.latents) latents += rec.to_json().dump() + '\n';
    write_text(opts.out_dir / "latents.jsonl", latents);
    res.artifacts.push_back(opts.out_dir / "latents.jsonl");
    write_text(opts.out_dir / "scenario.json", cfg.to_json().dump(2) + '\n');
    res.artifacts.push_back(opts.out_dir / "scenario.json");

    if (opts.split > 0.0) {
        auto [train, test] = split_corpus(sc.corpus, opts.split, cfg.seed);
        res.artifacts.push_back(write_corpus(train, opts.out_dir / "train"));
        res.artifacts.push_back(write_corpus(test, opts.out_dir / "test"));
        res.summary["train_documents"] = train.num_docs();
        res.summary["test_documents"] = test.num_docs();
    }
    res.summary["command"] = "generate";
    res.summary["documents"] = sc.corpus.num_docs();
    res.summary["corpus_hash"] = corpus_hash(sc.corpus);
    res.summary["artifacts"] = paths_json(res.artifacts);
    return res;
}

CommandResult cmd_train(const GlobalOptions& global, const TrainOptions& opts) {
    TrainConfig config = global.config.empty() ? TrainConfig{} : TrainConfig::from_json(read_json(global.config));
    if (global.seed) config.seed = *global.seed;
    config.workers = global.workers;
    if (opts.tied_xi) config.tied_xi = true;
    if (opts.check_invariants) config.check_invariants = true;
    config.validate();
    if (opts.model_out.empty()) throw ValidationError("train: output model path required");

    const MultiModalCorpus corpus = load_corpus(opts.corpus);
    Rng rng(config.seed);
    const TrainState state = fit(corpus, config, rng);
    const Provenance prov = make_provenance(state, corpus);

    CommandResult res;
    save_model(state.params, prov, opts.model_out, corpus.vocabularies);
    res.artifacts.push_back(opts.model_out);
    fs::path trace = opts.trace;
    if (trace.empty()) {
        trace = opts.model_out;
        trace += ".trace.csv";
    }
    write_trace_csv(corpus.layout.names, state.trace, trace);
    res.artifacts.push_back(trace);

    res.summary = {{"command", "train"},
                   {"tied_xi", config.tied_xi},
                   {"sweeps", prov.sweeps},
                   {"final_elbo", prov.final_elbo},
                   {"train_perplexity", prov.train_perplexity},
                   {"config_hash", prov.config_hash},
                   {"corpus_hash", prov.corpus_hash},
                   {"artifacts", paths_json(res.artifacts)}};
    return res;
}

CommandResult cmd_predict(const GlobalOptions& global, const PredictOptions& opts) {
    const ModelArchive archive = load_model(opts.model);
    const auto& model = archive.model;
    if (!model.layout.contains(opts.target)) throw ValidationError("predict: unknown modality '" + opts.target + "'");
    for (const auto& o : opts.observed)
        if (!model.layout.contains(o)) throw ValidationError("predict: unknown modality '" + o + "'");
    const MultiModalCorpus corpus = load_corpus(opts.corpus);
    const TrainConfig config = inference_config(archive, global);

    const auto preds = predict_batch(corpus, model, opts.target, opts.observed, config);
    const auto& vocab = corpus.vocabularies[model.layout.index_of(opts.target)];
    write_predictions_jsonl(preds, vocab, opts.target, opts.top_n, opts.out);

    CommandResult res;
    res.artifacts.push_back(opts.out);
    res.summary = {{"command", "predict"},
                   {"target", opts.target},
                   {"observed", opts.observed},
                   {"documents", preds.size()},
                   {"skipped", corpus.num_docs() - preds.size()},
                   {"artifacts", paths_json(res.artifacts)}};
    return res;
}

CommandResult cmd_evaluate(const GlobalOptions& global, const EvaluateOptions& opts) {
    if (opts.models.empty()) throw ValidationError("evaluate: at least one model required");
    const MultiModalCorpus test = load_corpus(opts.corpus);

    std::vector<ModelArchive> archives;
    for (const auto& p : opts.models) archives.push_back(load_model(p));
    for (std::size_t i = 1; i < archives.size(); ++i)
        if (archives[i].provenance.corpus_hash != archives[0].provenance.corpus_hash)
            throw ValidationError("evaluate: '" + opts.models[i].string() + "' was trained on a different corpus than '" +
                                  opts.models[0].string() + "'");

    std::vector<EvalReport> reports;
    for (std::size_t i = 0; i < archives.size(); ++i) {
        const auto& a = archives[i];
        reports.push_back(evaluate_model(a.model, test, opts.models[i].stem().string(), a.provenance.config_hash,
                                         a.provenance.train_perplexity, inference_config(a, global)));
    }
    if (opts.prior_mean_baseline) {
        const auto& a = archives[0];
        reports.push_back(evaluate_model(a.model, test, opts.models[0].stem().string() + ":prior_mean",
                                         a.provenance.config_hash, a.provenance.train_perplexity,
                                         inference_config(a, global), Predictor::PriorMean));
    }

    CommandResult res;
    json out = json::array();
    for (const auto& r : reports) out.push_back(r.to_json());
    write_text(opts.out, out.dump(2) + '\n');
    res.artifacts.push_back(opts.out);
    res.summary["command"] = "evaluate";
    res.summary["reports"] = out;
    if (reports.size() >= 2) {
        fs::path cmp = opts.comparison;
        if (cmp.empty()) {
            cmp = opts.out;
            cmp.replace_extension(".csv");
        }
        compare_models(reports).write_csv(cmp);
        res.artifacts.push_back(cmp);
    }
    res.summary["artifacts"] = paths_json(res.artifacts);
    return res;
}

CommandResult cmd_analyze(const GlobalOptions& /*global*/, const AnalyzeOptions& opts) {
    const ModelArchive archive = load_model(opts.model);
    const auto& model = archive.model;
    if (archive.provenance.sweeps == 0) throw ValidationError("analyze: archive holds an untrained model");
    if (model.num_modalities() < 2) throw ValidationError("analyze: model needs at least two modalities");
    const std::string source = opts.source.empty() ? model.layout.names[0] : opts.source;
    const std::string target = opts.target.empty() ? model.layout.names[1] : opts.target;

    std::vector<Vocabulary> vocabs = archive.vocabularies;
    if (vocabs.empty())
        for (std::size_t m = 0; m < model.num_modalities(); ++m) {
            Vocabulary v{model.layout.names[m], {}};
            for (std::size_t w = 0; w < model.dictionaries[m].vocab_size(); ++w) v.terms.push_back("w" + std::to_string(w));
            vocabs.push_back(std::move(v));
        }

    const TopicAnalysis an = analyze_topics(model, source, target, opts.threshold, opts.relevance);
    ensure_dir(opts.out_dir);
    CommandResult res;
    const auto sticks = stick_report(model);
    write_stick_report_csv(sticks, opts.out_dir / "sticks.csv");
    write_cross_block_csv(an, opts.out_dir / "cross_block.csv");
    write_ranking_csv(an, model, vocabs[model.layout.index_of(source)], opts.top_n, opts.out_dir / "ranking.csv");
    res.artifacts = {opts.out_dir / "sticks.csv", opts.out_dir / "cross_block.csv", opts.out_dir / "ranking.csv"};

    std::vector<std::size_t> priv;
    for (std::size_t k = 0; k < static_cast<std::size_t>(an.rho.size()); ++k)
        if (an.is_private(k)) priv.push_back(k);
    json eff = json::object();
    for (const auto& s : sticks) eff[s.modality] = s.effective_topics;
    res.summary = {{"command", "analyze"},
                   {"source", source},
                   {"target", target},
                   {"threshold", opts.threshold},
                   {"relevance", opts.relevance == Relevance::Mean ? "mean" : "max"},
                   {"ranking", an.ranking},
                   {"private_topics", priv},
                   {"effective_topics", eff},
                   {"artifacts", paths_json(res.artifacts)}};
    return res;
}

}  // namespace fmtm
