#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "bevmt/config.hpp"
#include "bevmt/model.hpp"

namespace bevmt {

// Deterministic dataset: sample i is generated from a seed derived from
// spec.seed and i, so two calls (or two processes) agree bit for bit.
std::vector<TrainSample> build_dataset(const SceneSpec& spec, int64_t n);

// Dataset-level evaluation numbers (training-set metrics in this artifact).
// Metrics of disabled tasks stay 0; losses are dataset means.
struct EvalResult {
    double map = 0.0;
    double seg_iou = 0.0;
    double occ_miou = 0.0;
    double total = 0.0, l_det = 0.0, l_seg = 0.0, l_occ = 0.0;
};

EvalResult evaluate_model(const Model& m, const std::vector<TrainSample>& data);

// One line of the metrics log. kind is "train" (every step), "eval"
// (checkpoint cadence and final) or "abort".
struct MetricsRecord {
    std::string kind = "train";
    int64_t step = 0;
    double lr = 0.0;
    double total = 0.0, l_det = 0.0, l_seg = 0.0, l_occ = 0.0;
    double map = 0.0, seg_iou = 0.0, occ_miou = 0.0;  // eval records only
    nlohmann::json to_json() const;
};

struct TrainOutcome {
    bool aborted = false;
    int64_t steps_done = 0;
    std::string checkpoint_path;  // last checkpoint written (final, or last good on abort)
    std::string metrics_path;
    EvalResult final_eval;
    std::vector<MetricsRecord> records;  // everything that went into the log
};

// Full training run: dataset build, model init from cfg.seed, AdamW with a
// one-cycle schedule, metrics log + periodic checkpoints under cfg.out_dir.
// An initial checkpoint is always written (steps = 0 writes only that one).
// staged_fraction > 0 holds occupancy out of the loss until that fraction
// of steps has elapsed. A non-finite loss aborts the run, keeping the last
// good checkpoint and logging an "abort" record.
TrainOutcome train(const RunConfig& cfg);

// Checkpoints: every model parameter by name, plus the config snapshot and
// the step count. load rebuilds the model from the snapshot and fails with
// a configuration error when the stored arrays do not match it.
void save_checkpoint(const std::string& path, const Model& m, const RunConfig& cfg, int64_t step);
Model load_checkpoint(const std::string& path, RunConfig* cfg_out = nullptr, int64_t* step_out = nullptr);

// Sample files: one self-describing container per scene (ground-truth
// arrays + scene snapshot + seed; features are re-rendered on load).
void save_dataset(const std::string& dir, const SceneSpec& spec, int64_t n);
std::vector<TrainSample> load_dataset(const std::string& dir, SceneSpec* spec_out = nullptr);

// eval subcommand: checkpoint against an on-disk dataset. Scene shapes of
// the two snapshots must match.
EvalResult evaluate_checkpoint(const std::string& ckpt_path, const std::string& data_dir);

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
    std::string arm;
    std::vector<EvalResult> per_seed;
    EvalResult mean;
    int64_t decoder_params = 0;  // variant_params suite
};

struct AblationTable {
    std::string suite;
    std::vector<AblationRow> rows;
    nlohmann::json summary;  // suite-specific derived quantities
    std::string to_text() const;
    nlohmann::json to_json() const;
};

// Runs a named ablation suite on top of `base`. All arms of one seed index
// share scene data and init seed; means are over n_seeds seed indices.
// Suites: mtl_vs_single, mafi, tcs, seg_layout, variant_params.
AblationTable run_ablation(const std::string& suite, const RunConfig& base, int n_seeds = 3);

}  // namespace bevmt
