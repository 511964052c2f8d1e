// bevmt command-line entry point: train / eval / synth / verify / ablate.
//
// Exit codes: 0 success, 1 runtime failure (including failed gradient
// checks), 2 configuration errors.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bevmt/train.hpp"
#include "bevmt/verify_suite.hpp"

namespace {

// Builds the run configuration a subcommand starts from: defaults, then the
// config file (when given), then --set overrides in order.
bevmt::RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets) {
    bevmt::RunConfig cfg;
    if (!config_path.empty()) cfg = bevmt::RunConfig::from_file(config_path);
    for (const std::string& s : sets) cfg.apply_override(s);
    return cfg;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets, int64_t seed_flag,
              const std::string& out_flag) {
    bevmt::RunConfig cfg = resolve_config(config_path, sets);
    if (seed_flag >= 0) cfg.seed = uint64_t(seed_flag);
    if (!out_flag.empty()) cfg.out_dir = out_flag;
    cfg.validate();
    bevmt::TrainOutcome out = bevmt::train(cfg);
    std::printf("steps_done=%lld checkpoint=%s metrics=%s\n", static_cast<long long>(out.steps_done),
                out.checkpoint_path.c_str(), out.metrics_path.c_str());
    if (out.aborted) {
        std::fprintf(stderr, "training aborted on a non-finite loss; last good checkpoint kept\n");
        return 1;
    }
    const bevmt::EvalResult& e = out.final_eval;
    std::printf("final: map=%.4f seg_iou=%.4f occ_miou=%.4f total=%.6f\n", e.map, e.seg_iou, e.occ_miou, e.total);
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir) {
    bevmt::EvalResult e = bevmt::evaluate_checkpoint(ckpt, data_dir);
    std::printf("map=%.4f seg_iou=%.4f occ_miou=%.4f total=%.6f l_det=%.6f l_seg=%.6f l_occ=%.6f\n", e.map,
                e.seg_iou, e.occ_miou, e.total, e.l_det, e.l_seg, e.l_occ);
    return 0;
}

int cmd_synth(const std::string& config_path, const std::vector<std::string>& sets, int64_t n,
              const std::string& out_dir) {
    bevmt::RunConfig cfg = resolve_config(config_path, sets);
    bevmt::save_dataset(out_dir, cfg.scene, n);
    std::printf("wrote %lld samples to %s\n", static_cast<long long>(n), out_dir.c_str());
    return 0;
}

int cmd_verify(const std::string& module) {
    std::vector<bevmt::GradCheckReport> reports = bevmt::run_gradient_suite(module);
    bool all_ok = true;
    for (const bevmt::GradCheckReport& r : reports) {
        std::printf("%s\n", r.summary().c_str());
        all_ok = all_ok && r.ok();
    }
    if (!all_ok) {
        std::fprintf(stderr, "gradient checks FAILED\n");
        return 1;
    }
    std::printf("all %zu gradient checks passed\n", reports.size());
    return 0;
}

int cmd_ablate(const std::string& suite, const std::string& config_path, const std::vector<std::string>& sets,
               int n_seeds) {
    bevmt::RunConfig cfg = resolve_config(config_path, sets);
    bevmt::AblationTable table = bevmt::run_ablation(suite, cfg, n_seeds);
    std::printf("%s", table.to_text().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bevmt: multimodal multi-task BEV perception, desk scale"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt, data_dir, module, suite;
    std::vector<std::string> sets;
    int64_t seed_flag = -1, n_samples = 8;
    int n_seeds = 3;

    CLI::App* train = app.add_subcommand("train", "run a training loop");
    train->add_option("--config", config_path, "config file");
    train->add_option("--seed", seed_flag, "override the training seed");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--set", sets, "override any key (section.key=value)");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--spec", config_path, "config file carrying the scene section");
    synth->add_option("--n", n_samples, "number of samples");
    synth->add_option("--out", out_dir, "output directory")->required();
    synth->add_option("--set", sets, "override any key (section.key=value)");

    CLI::App* verify = app.add_subcommand("verify", "finite-difference gradient checks");
    verify->add_option("--module", module, "run a single module (default: all)");

    CLI::App* ablate = app.add_subcommand("ablate", "run an ablation suite");
    ablate->add_option("--suite", suite, "suite name")->required();
    ablate->add_option("--config", config_path, "base config file");
    ablate->add_option("--seeds", n_seeds, "number of seed indices");
    ablate->add_option("--set", sets, "override any key (section.key=value)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, sets, seed_flag, out_dir);
        if (eval->parsed()) return cmd_eval(ckpt, data_dir);
        if (synth->parsed()) return cmd_synth(config_path, sets, n_samples, out_dir);
        if (verify->parsed()) return cmd_verify(module);
        if (ablate->parsed()) return cmd_ablate(suite, config_path, sets, n_seeds);
    } catch (const bevmt::ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 1;
    }
    return 2;
}
