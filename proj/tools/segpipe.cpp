#include <CLI11.hpp>

#include "segpipe/cli.hpp"

using namespace segpipe;

int main(int argc, char** argv) {
    CLI::App app{"segpipe: trainable FCN + FC-ResNet segmentation pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", checkpoints_csv, pred_dir;
    std::string scope = "all", arch = "pipeline", csv_out;
    double scale_override = -1.0;
    std::int64_t seed_override = -1;
    bool inject_fault = false;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* opt = sub->add_option("--config", config_path, "JSON run configuration");
        if (needs_config) opt->required();
        sub->add_option("--seed", seed_override, "override the config seed");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--scale", scale_override, "override the architecture width scale");
        sub->add_option("--checkpoints", checkpoints_csv, "comma-separated checkpoint paths");
    };

    auto* s_train = app.add_subcommand("train", "train the pipeline (optionally an ensemble)");
    add_common(s_train, true);
    auto* s_predict = app.add_subcommand("predict", "write ensemble-averaged probability maps");
    add_common(s_predict, true);
    auto* s_eval = app.add_subcommand("evaluate", "per-image and aggregate Dice CSV");
    add_common(s_eval, true);
    s_eval->add_option("--pred-dir", pred_dir, "evaluate existing predictions instead");
    auto* s_grad = app.add_subcommand("gradcheck", "finite-difference gradient suites");
    add_common(s_grad, false);
    s_grad->add_option("--scope", scope, "ops | blocks | pipeline | all");
    s_grad->add_flag("--inject-fault", inject_fault,
                     "corrupt one gradient to prove the harness catches it");
    auto* s_summary = app.add_subcommand("summary", "architecture shape/parameter table");
    add_common(s_summary, false);
    s_summary->add_option("--arch", arch, "fcn | resnet | pipeline");
    s_summary->add_option("--csv", csv_out, "also write the table as CSV");
    auto* s_post = app.add_subcommand("postprocess", "largest-component volume filtering");
    add_common(s_post, true);
    s_post->add_option("--pred-dir", pred_dir, "directory of pred_<id>.sgt1 maps")->required();
    auto* s_analyze = app.add_subcommand("analyze", "pre-processor normalization histograms");
    add_common(s_analyze, true);
    auto* s_gen = app.add_subcommand("gen-synthetic", "generate a synthetic dataset");
    add_common(s_gen, true);

    CLI11_PARSE(app, argc, argv);

    try {
        cli::RunConfig cfg;
        if (!config_path.empty()) cfg = cli::parse_config(config_path);
        if (seed_override >= 0) {
            cfg.seed = static_cast<std::uint64_t>(seed_override);
            cfg.synth.seed = cfg.seed;
        }
        if (scale_override > 0) cfg.scale = scale_override;
        const auto checkpoints = cli::split_paths(checkpoints_csv);

        if (s_train->parsed()) return cli::cmd_train(cfg, out_dir);
        if (s_predict->parsed()) return cli::cmd_predict(cfg, out_dir, checkpoints);
        if (s_eval->parsed()) return cli::cmd_evaluate(cfg, out_dir, checkpoints, pred_dir);
        if (s_grad->parsed())
            return cli::cmd_gradcheck(scope, seed_override >= 0 ? cfg.seed : 20240808, inject_fault);
        if (s_summary->parsed())
            return cli::cmd_summary(arch, scale_override > 0 ? scale_override : cfg.scale, csv_out);
        if (s_post->parsed()) return cli::cmd_postprocess(cfg, out_dir, pred_dir);
        if (s_analyze->parsed()) return cli::cmd_analyze(cfg, out_dir, checkpoints);
        if (s_gen->parsed()) return cli::cmd_gen_synthetic(cfg, out_dir);
        return cli::kExitConfig;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return cli::kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return cli::kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
