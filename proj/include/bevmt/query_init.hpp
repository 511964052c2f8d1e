#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "bevmt/autodiff.hpp"
#include "bevmt/nn.hpp"

namespace bevmt {

// Learnable state for query initialization: one category-embedding table
// covering detection then segmentation classes, one positional MLP shared by
// every task (2D positions fix z at 0.5), and the shared embedding used by
// uncertainly occupied voxels.
struct QueryInitParams {
    Var cat_embed;   // [n_det + n_seg, C]; rows [0, n_det) are detection
    Mlp2 pos_mlp;    // 3 -> C -> C
    Var occ_shared;  // [1, C]
    int64_t n_det = 0, n_seg = 0, c = 0;

    static QueryInitParams create(ParamStore& ps, const std::string& prefix, int64_t n_det, int64_t n_seg,
                                  int64_t c, Rng& rng);
};

// A task's query block. Positions are grid indices (z used only by
// occupancy); class/band annotations apply where the task defines them.
struct TaskQueries {
    Var embed;  // [n, C]
    std::vector<int64_t> pos_h, pos_w, pos_z;
    std::vector<int> cls;   // det, seg: class id per query
    std::vector<int> band;  // seg: band index per query
    int64_t count() const { return embed.defined() ? embed.rows() : 0; }
};

// MLP embedding of normalized coordinates in [0,1]^3; one row per position.
Var encode_positions(const QueryInitParams& p, const std::vector<std::array<double, 3>>& pos);

// det_conf [H*W, n_det], seg_conf [H*W, n_seg]:
// sigmoid(<f_bev[cell], cat[k]>) per cell and class.
std::pair<Var, Var> build_confidence_maps(const Var& f_bev, const QueryInitParams& p);

// Top-n_d cells of the flattened (h, w, class) confidence volume; ties go to
// the smaller flat index. Query embedding = f_bev[cell] + pos_embed(cell).
TaskQueries init_detection_queries(const Var& f_bev, const Var& det_conf, int64_t n_d, int64_t h, int64_t w,
                                   const QueryInitParams& p);

// S bands along the forward (h) axis; the last band absorbs any remainder.
// One query per (band, class) at the band's argmax-confidence cell.
TaskQueries init_segmentation_queries(const Var& f_bev, const Var& seg_conf, int64_t s_blocks, int64_t h, int64_t w,
                                      const QueryInitParams& p);

// Row-major partition of all voxels by LiDAR-return flag.
std::pair<std::vector<int64_t>, std::vector<int64_t>> split_occupancy_queries(const std::vector<uint8_t>& lidar_mask,
                                                                              int64_t h, int64_t w, int64_t z);

// Definite voxels take the BEV feature at their (h,w) plus a 3D positional
// embedding; uncertain voxels take the shared embedding plus the same
// positional term. Together they cover every voxel exactly once.
std::pair<TaskQueries, TaskQueries> init_occupancy_queries(const Var& f_bev, const std::vector<uint8_t>& lidar_mask,
                                                           int64_t h, int64_t w, int64_t z,
                                                           const QueryInitParams& p);

// Band boundaries used by init_segmentation_queries and the segmentation
// head: row range [first, second) of band s.
std::pair<int64_t, int64_t> seg_band_rows(int64_t s, int64_t s_blocks, int64_t h);

}  // namespace bevmt
