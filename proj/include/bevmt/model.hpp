#pragma once

#include <string>
#include <vector>

#include "bevmt/fusion.hpp"
#include "bevmt/heads.hpp"
#include "bevmt/scene.hpp"

namespace bevmt {

// Model hyperparameters layered on top of a SceneSpec.
struct ModelConfig {
    std::string variant = "transformer";  // decoder mixer (occupancy refinement follows it)
    int64_t layers = 2;
    int64_t n_d = 32;      // detection queries
    int64_t s_blocks = 4;  // segmentation bands
    int64_t heads = 4, points = 4, n_state = 8;
    bool use_mafi = true, use_tcs = true;
    bool task_det = true, task_seg = true, task_occ = true;
    double lambda_det = 1.0, lambda_seg = 1.0, lambda_occ = 1.0;
    double lambda_cls = 1.0, lambda_reg = 0.25;  // detection loss mix

    void validate(const SceneSpec& spec) const;  // throws ConfigError
};

// One dataset element: a generated scene with its rendered modality
// features and training targets.
struct TrainSample {
    SceneSample scene;
    ModalityFeatures feats;
    Targets targets;
};

// Deterministic sample: the spec's seed is replaced by `seed`.
TrainSample make_sample(SceneSpec spec, uint64_t seed);

// The full multi-task pipeline: fusion, confidence maps, query
// initialization, shared decoder, and the three task heads. All parameters
// are registered (deterministically ordered) regardless of which tasks are
// enabled, so staged training can toggle tasks without changing the store.
struct Model {
    SceneSpec spec;
    ModelConfig cfg;
    ParamStore params;
    MafiParams mafi;
    QueryInitParams qinit;
    DecoderParams decoder;
    DetHeadParams det_head;
    OccHeadParams occ_head;

    static Model create(const SceneSpec& spec, const ModelConfig& cfg, uint64_t seed);
};

struct ForwardOut {
    Var total;                // scalar training loss (defined when with_loss)
    Var l_det, l_seg, l_occ;  // per-task components; zero constants when a task is off
    DetLossBreakdown det_parts;      // detection internals (det enabled, with_loss)
    std::vector<DecodedBox> boxes;   // decoded detections (det enabled)
    Var seg_logits;                  // [H*W, n_seg] (seg enabled)
    Var occ_logits;                  // [H'*W'*Z', M+1] (occ enabled)
};

// Runs fuse -> confidence maps -> query init -> decoder -> heads; with_loss
// additionally builds the loss graph (detection set loss + confidence-map
// supervision, segmentation + mask-confidence supervision, occupancy
// cross-entropy, weighted total).
ForwardOut model_forward(const Model& m, const TrainSample& s, bool with_loss);

}  // namespace bevmt
