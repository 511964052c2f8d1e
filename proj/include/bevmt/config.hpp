#pragma once

#include <string>

#include <json.hpp>

#include "bevmt/model.hpp"

namespace bevmt {

// Everything a run needs: the scene, the model, and the training budget.
// On disk this is sectioned key=value text ([scene], [model], [loss],
// [optim], [train]; '#' comments); any key can be overridden with
// "section.key=value" strings. Unknown keys are configuration errors.
struct RunConfig {
    SceneSpec scene;
    ModelConfig model;
    double peak_lr = 8e-4;
    double weight_decay = 0.01;
    double warmup_frac = 0.1;
    int64_t steps = 800;
    int64_t batch = 2;
    int64_t n_scenes = 8;
    int64_t checkpoint_every = 200;
    double staged_fraction = 0.0;  // > 0: occupancy joins after this fraction of steps
    uint64_t seed = 7;
    std::string out_dir = "out";

    void validate() const;  // throws ConfigError
    void apply_override(const std::string& key_eq_value);

    static RunConfig from_file(const std::string& path);
    static RunConfig from_text(const std::string& text);

    // Snapshot for checkpoints and logs. out_dir is run-local plumbing and
    // is excluded so identical runs produce identical snapshots.
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

// Scene-only snapshot (used by sample files, which carry no model config).
nlohmann::json scene_to_json(const SceneSpec& spec);
SceneSpec scene_from_json(const nlohmann::json& j);

// True when two specs describe the same array shapes (grid/output dims,
// channels, class counts). Seed and noise may differ.
bool scene_shapes_match(const SceneSpec& a, const SceneSpec& b);

}  // namespace bevmt
