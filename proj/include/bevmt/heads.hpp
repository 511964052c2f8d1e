#pragma once

#include <array>
#include <string>
#include <vector>

#include "bevmt/decoder.hpp"
#include "bevmt/scene.hpp"

namespace bevmt {

// ------------------------------------------------------------- detection

struct DetHeadParams {
    Mlp2 cls;     // C -> C -> n_det_classes
    Mlp2 offset;  // C -> C -> 2 (cells, along h then w)
    Mlp2 size;    // C -> C -> 2 (log-meters, length then width)
    Mlp2 yaw;     // C -> C -> 2 (sin, cos)

    static DetHeadParams create(ParamStore& ps, const std::string& prefix, int64_t c, int64_t n_det_classes,
                                Rng& rng);
};

struct DetectionOutput {
    Var cls_logits;  // [n_q, n_det_classes]
    Var offset;      // [n_q, 2]
    Var size_log;    // [n_q, 2]
    Var yaw;         // [n_q, 2]
    std::vector<int64_t> pos_h, pos_w;  // query grid cells
};

struct DecodedBox {
    Box box;       // cls set to the argmax class
    double score;  // sigmoid of the winning class logit
};

// Per-query two-layer MLPs over decoder-updated query embeddings.
DetectionOutput detection_head(const TaskQueries& det_q, const DetHeadParams& p);

// Box decode: center = (cell index + 0.5 + offset) * cell size - extent,
// sizes exponentiated, yaw from the normalized (sin, cos) pair.
std::vector<DecodedBox> decode_boxes(const DetectionOutput& out, double cell_h_m, double cell_w_m, double extent_m);

struct DetLossBreakdown {
    Var total, l_cls, l_reg;
    std::vector<int64_t> gt_to_query;  // assignment used (row = gt box)
};

// Hungarian matching on focal-classification + L1 box cost, then
// total = lambda1 * focal classification + lambda2 * L1 regression.
DetLossBreakdown detection_loss(const DetectionOutput& pred, const std::vector<Box>& gt, double lambda1,
                                double lambda2, double cell_h_m, double cell_w_m, double extent_m,
                                double alpha = 0.25, double gamma = 2.0);

// ---------------------------------------------------------- segmentation

// logit[cell, k] = <f_seg[cell], q_{band(cell), k}>: each band's queries
// score only the cells of their own band.
Var segmentation_head(const TaskQueries& seg_q, const Var& f_seg, int64_t s_blocks, int64_t h, int64_t w,
                      int64_t n_seg_classes);

// Focal loss between sigmoid(logits) and the {0,1} masks.
Var segmentation_loss(const Var& logits, const Tensor& masks, double alpha = 0.25, double gamma = 2.0);

// ------------------------------------------------------------- occupancy

struct OccHeadParams {
    std::string variant;  // "transformer" | "mamba" refinement
    int64_t d_attn = 8, n_state = 8;
    Affine merge_q, merge_k, merge_v, merge_o;  // uncertain -> definite attention
    Affine ref_q, ref_k, ref_v, ref_o;          // transformer refinement
    SSMParams::Direction ref_fwd, ref_bwd;      // mamba refinement (serpentine + reverse)
    Affine ref_merge;
    Affine out_logits;  // C -> M+1

    static OccHeadParams create(ParamStore& ps, const std::string& prefix, int64_t c, int64_t m_classes,
                                const std::string& variant, Rng& rng);
};

// Voxel-indexed scatter of the two query sets into a dense [H*W*Z, C] grid.
// Together the sets must cover every voxel exactly once.
Var scatter_occupancy(const TaskQueries& def_q, const TaskQueries& unc_q, int64_t h, int64_t w, int64_t z);

// Serpentine order over the voxel grid: rows alternate w-direction, z
// fastest; used by the mamba refinement (exposed for tests).
std::vector<int> serpentine_order(int64_t h, int64_t w, int64_t z);

// Merge-attend (uncertain queries read definite ones), scatter to a dense
// volume, one refinement block (dense self-attention or forward+reverse
// serpentine scan), trilinear upsample, per-voxel linear to M+1 logits.
// Returns [out_h*out_w*out_z, M+1]. An empty definite set skips the merge
// attention with a warning on stderr.
Var occupancy_head(const TaskQueries& def_q, const TaskQueries& unc_q, const OccHeadParams& p, int64_t h, int64_t w,
                   int64_t z, int64_t fh, int64_t fw, int64_t fz);

// Class-weighted softmax cross-entropy; semantic-class weights are the
// inverse square root of their relative frequency in the batch (absent
// classes drop out), the empty class (id == m_classes) weighs 1.
Var occupancy_loss(const Var& logits, const std::vector<int>& labels, int64_t m_classes);

// --------------------------------------------------------------- totals

// lambda_det * l_det + lambda_seg * l_seg + lambda_occ * l_occ.
Var total_loss(const Var& l_det, const Var& l_seg, const Var& l_occ, double lambda_det, double lambda_seg,
               double lambda_occ);

}  // namespace bevmt
