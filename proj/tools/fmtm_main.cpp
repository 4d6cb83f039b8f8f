#include <iostream>

#include <CLI11.hpp>

#include "fmtm/cli.hpp"
#include "fmtm/error.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Factorized multi-modal topic model"};
    app.require_subcommand(1);

    fmtm::GlobalOptions global;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Random seed (overrides the config)");
    app.add_option("--workers", global.workers, "Worker threads for document-parallel phases")
        ->check(CLI::PositiveNumber);
    app.add_option("--config", global.config, "Scenario (generate) or training (train) JSON")->check(CLI::ExistingFile);

    fmtm::GenerateOptions gen;
    auto* generate = app.add_subcommand("generate", "Sample a synthetic corpus with ground truth");
    generate->add_option("out_dir", gen.out_dir, "Output directory")->required();
    generate->add_option("--split", gen.split, "Train fraction for train/ and test/ corpora (0 disables)");

    fmtm::TrainOptions train;
    auto* train_cmd = app.add_subcommand("train", "Fit a model and write an archive plus a sweep trace");
    train_cmd->add_option("corpus", train.corpus, "Corpus manifest")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("model", train.model_out, "Output archive")->required();
    train_cmd->add_option("--trace", train.trace, "Trace CSV (default <model>.trace.csv)");
    train_cmd->add_flag("--tied-xi", train.tied_xi, "One xi shared by all modalities (mmDILN baseline)");
    train_cmd->add_flag("--check-invariants", train.check_invariants, "Assert state invariants after every sweep");

    fmtm::PredictOptions pred;
    auto* predict = app.add_subcommand("predict", "Predict a missing modality from observed ones");
    predict->add_option("model", pred.model, "Model archive")->required()->check(CLI::ExistingFile);
    predict->add_option("corpus", pred.corpus, "Corpus manifest")->required()->check(CLI::ExistingFile);
    predict->add_option("out", pred.out, "Output JSON-lines file")->required();
    predict->add_option("--observed", pred.observed, "Observed modality (repeatable)")->required();
    predict->add_option("--target", pred.target, "Target modality")->required();
    predict->add_option("--top-n", pred.top_n, "Top words per document");

    fmtm::EvaluateOptions eval;
    auto* evaluate = app.add_subcommand("evaluate", "Conditional perplexities and model comparison");
    evaluate->add_option("corpus", eval.corpus, "Test corpus manifest")->required()->check(CLI::ExistingFile);
    evaluate->add_option("out", eval.out, "Output JSON report list")->required();
    evaluate->add_option("--model", eval.models, "Model archive (repeatable)")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--comparison", eval.comparison, "Comparison CSV (default <out>.csv)");
    evaluate->add_flag("--prior-mean", eval.prior_mean_baseline, "Also score the first model's prior-mean predictor");

    fmtm::AnalyzeOptions an;
    std::string relevance = "mean";
    auto* analyze = app.add_subcommand("analyze", "Stick report, cross-correlation block and topic ranking");
    analyze->add_option("model", an.model, "Model archive")->required()->check(CLI::ExistingFile);
    analyze->add_option("out_dir", an.out_dir, "Output directory")->required();
    analyze->add_option("--threshold", an.threshold, "Correlation cutoff")->check(CLI::Range(0.0, 1.0));
    analyze->add_option("--relevance", relevance, "Row score: mean or max")->check(CLI::IsMember({"mean", "max"}));
    analyze->add_option("--source", an.source, "Source modality (rows)");
    analyze->add_option("--target", an.target, "Target modality (columns)");
    analyze->add_option("--top-n", an.top_n, "Top words per topic");

    CLI11_PARSE(app, argc, argv);
    if (*seed_opt) global.seed = seed;
    an.relevance = relevance == "max" ? fmtm::Relevance::Max : fmtm::Relevance::Mean;

    try {
        fmtm::CommandResult res;
        if (*generate) res = fmtm::cmd_generate(global, gen);
        else if (*train_cmd) res = fmtm::cmd_train(global, train);
        else if (*predict) res = fmtm::cmd_predict(global, pred);
        else if (*evaluate) res = fmtm::cmd_evaluate(global, eval);
        else res = fmtm::cmd_analyze(global, an);
        std::cout << res.summary.dump(2) << '\n';
        return res.exit_code;
    } catch (const fmtm::ElboDecreaseError& e) {
        std::cerr << "error: " << e.what() << " (sweep " << e.sweep() << ")\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
