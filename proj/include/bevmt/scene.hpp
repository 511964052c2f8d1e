#pragma once

#include <cstdint>
#include <vector>

#include "bevmt/common.hpp"
#include "bevmt/tensor.hpp"

namespace bevmt {

// Geometry conventions used throughout:
//   - BEV axis h runs along world x (the "forward" axis; segmentation bands
//     partition it), axis w along world y.
//   - cell h covers x in [-extent + h*cell, -extent + (h+1)*cell); its center
//     is -extent + (h+0.5)*cell. Same for w/y.
//   - the z extent is fixed at 4 m: coarse voxels are 1 m tall (grid_z=4),
//     fine output voxels 0.25 m (out_z=16).
//   - occupancy class ids: [0, n_det_classes) are the box classes, then
//     ground, then pillar; id n_occ_classes means empty.
struct SceneSpec {
    double extent_m = 8.0;
    int64_t grid_h = 32, grid_w = 32, grid_z = 4;
    int64_t out_h = 64, out_w = 64, out_z = 16;
    int64_t n_det_classes = 4;
    int64_t n_seg_classes = 3;
    int64_t n_occ_classes = 6;  // M; labels run 0..M with M = empty
    int64_t channels = 64;
    double noise_amp = 0.1;
    uint64_t seed = 7;

    void validate() const;  // throws ConfigError
    double cell_h_m() const { return 2.0 * extent_m / static_cast<double>(grid_h); }
    double cell_w_m() const { return 2.0 * extent_m / static_cast<double>(grid_w); }
    double z_extent_m() const { return 4.0; }
    int64_t bev_cells() const { return grid_h * grid_w; }
    int64_t voxels() const { return grid_h * grid_w * grid_z; }
    int64_t out_voxels() const { return out_h * out_w * out_z; }
};

struct Box {
    double cx = 0, cy = 0;      // meters, world frame
    double length = 0, width = 0;  // meters; length along heading
    double yaw = 0;             // radians
    double height_m = 0;        // extrusion height above the ground slab
    int cls = 0;                // in [0, n_det_classes)
};

// True when the world point lies inside the box footprint.
bool box_contains(const Box& b, double x, double y);

struct SceneSample {
    std::vector<Box> boxes;
    Tensor map_masks;             // [out_h*out_w, n_seg_classes], values {0,1}
    std::vector<int> occ_labels;  // out resolution, voxel_index order, 0..M
    std::vector<uint8_t> lidar_mask;  // grid resolution, voxel_index order
};

struct ModalityFeatures {
    Tensor f_lidar;  // [grid_h*grid_w, C]
    Tensor f_cam;    // [grid_h*grid_w, C]
    std::vector<uint8_t> lidar_mask;
};

struct Targets {
    Tensor heatmaps;        // [grid_h*grid_w, n_det_classes], gaussian splats, peak 1.0
    Tensor seg_masks_grid;  // [grid_h*grid_w, n_seg_classes], majority-vote downsample
    Tensor seg_masks_out;   // copy of sample.map_masks
    std::vector<int> occ_labels;  // copy, out resolution
};

SceneSample generate_scene(const SceneSpec& spec);
ModalityFeatures render_modality_features(const SceneSample& sample, const SceneSpec& spec);
Targets make_targets(const SceneSample& sample, const SceneSpec& spec);

// Majority-vote pooling of out-resolution labels to grid resolution
// (2x2x4 fine voxels per coarse voxel; ties go to the smaller label id, so
// any occupied class beats empty on a tie).
std::vector<int> pool_occ_labels(const std::vector<int>& fine, const SceneSpec& spec);

// Channel layout of the renderer: channel c carries base map (c mod n_bases)
// scaled by a fixed per-channel coefficient. Exposed for tests that reason
// about which channels respond to which scene content.
int64_t lidar_base_count(const SceneSpec& spec);
int64_t cam_base_count(const SceneSpec& spec);
// cam bases [0, n_seg_classes) are the blurred map-mask channels
// ("semantic" group); the remaining bases derive from box geometry.

}  // namespace bevmt
