#include "bevmt/scene.hpp"

#include <algorithm>
#include <cmath>

namespace bevmt {

namespace {

constexpr int64_t kGroundFineCells = 2;     // 0.5 m ground slab at 0.25 m resolution
constexpr int64_t kBoxBottomFine = 2;       // boxes sit on top of the ground slab
constexpr double kFineZCell = 0.25;         // meters
constexpr double kLidarKeepProb = 0.98;     // simulated return dropout
constexpr uint64_t kChannelBasisSeed = 0xBA5E5EEDULL;  // fixed across scenes/seeds

double box_diag(const Box& b) { return std::hypot(b.length, b.width); }

}  // namespace

void SceneSpec::validate() const {
    if (extent_m <= 0) throw ConfigError("scene extent must be positive");
    if (grid_h < 1 || grid_w < 1 || grid_z < 1) throw ConfigError("grid dimensions must be >= 1");
    if (out_h != 2 * grid_h || out_w != 2 * grid_w || out_z != 4 * grid_z)
        throw ConfigError("output resolution must be grid * (2, 2, 4)");
    if (n_det_classes < 1 || n_seg_classes < 1) throw ConfigError("class counts must be >= 1");
    if (n_occ_classes < n_det_classes)
        throw ConfigError("occupancy classes must include every detection class");
    if (channels < 1) throw ConfigError("channel count must be >= 1");
    if (noise_amp < 0) throw ConfigError("noise amplitude must be non-negative");
}

bool box_contains(const Box& b, double x, double y) {
    const double dx = x - b.cx, dy = y - b.cy;
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return std::abs(u) <= 0.5 * b.length && std::abs(v) <= 0.5 * b.width;
}

std::vector<int> pool_occ_labels(const std::vector<int>& fine, const SceneSpec& spec) {
    if (static_cast<int64_t>(fine.size()) != spec.out_voxels())
        throw ContractViolation("pool_occ_labels: label volume size mismatch");
    const int m = static_cast<int>(spec.n_occ_classes);
    std::vector<int> coarse(static_cast<size_t>(spec.voxels()), m);
    std::vector<int> counts(static_cast<size_t>(m) + 1, 0);
    for (int64_t h = 0; h < spec.grid_h; ++h)
        for (int64_t w = 0; w < spec.grid_w; ++w)
            for (int64_t z = 0; z < spec.grid_z; ++z) {
                std::fill(counts.begin(), counts.end(), 0);
                for (int64_t dh = 0; dh < 2; ++dh)
                    for (int64_t dw = 0; dw < 2; ++dw)
                        for (int64_t dz = 0; dz < 4; ++dz) {
                            const int lab = fine[static_cast<size_t>(
                                voxel_index(2 * h + dh, 2 * w + dw, 4 * z + dz, spec.out_w, spec.out_z))];
                            ++counts[static_cast<size_t>(lab)];
                        }
                int best = 0;
                for (int k = 1; k <= m; ++k)
                    if (counts[static_cast<size_t>(k)] > counts[static_cast<size_t>(best)]) best = k;
                coarse[static_cast<size_t>(voxel_index(h, w, z, spec.grid_w, spec.grid_z))] = best;
            }
    return coarse;
}

SceneSample generate_scene(const SceneSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    SceneSample s;

    // --- oriented boxes, non-overlapping by a conservative circle bound ---
    const int64_t want = 1 + rng.randint(6);
    for (int64_t i = 0; i < want; ++i) {
        for (int tries = 0; tries < 64; ++tries) {
            Box b;
            b.length = rng.uniform(1.5, 4.0);
            b.width = rng.uniform(1.0, 3.0);
            const double margin = 0.5 * box_diag(b) + 0.3;
            b.cx = rng.uniform(-spec.extent_m + margin, spec.extent_m - margin);
            b.cy = rng.uniform(-spec.extent_m + margin, spec.extent_m - margin);
            b.yaw = rng.uniform(-M_PI, M_PI);
            b.height_m = 1.0 + 0.25 * static_cast<double>(rng.randint(9));  // 1.0 .. 3.0 m
            b.cls = static_cast<int>(rng.randint(spec.n_det_classes));
            bool ok = true;
            for (const Box& other : s.boxes) {
                const double need = 0.5 * (box_diag(b) + box_diag(other)) + 0.2;
                if (std::hypot(b.cx - other.cx, b.cy - other.cy) < need) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                s.boxes.push_back(b);
                break;
            }
        }
    }

    // --- occupancy volume at output resolution ---
    const int empty = static_cast<int>(spec.n_occ_classes);
    const int ground_id = static_cast<int>(spec.n_det_classes);
    const int pillar_id = ground_id + 1;
    s.occ_labels.assign(static_cast<size_t>(spec.out_voxels()), empty);
    const double fine_h = 2.0 * spec.extent_m / static_cast<double>(spec.out_h);
    const double fine_w = 2.0 * spec.extent_m / static_cast<double>(spec.out_w);
    auto paint_column = [&](int64_t i, int64_t j, int64_t z0, int64_t z1, int label) {
        for (int64_t z = std::max<int64_t>(z0, 0); z < std::min(z1, spec.out_z); ++z)
            s.occ_labels[static_cast<size_t>(voxel_index(i, j, z, spec.out_w, spec.out_z))] = label;
    };
    if (spec.n_occ_classes >= spec.n_det_classes + 1)
        for (int64_t i = 0; i < spec.out_h; ++i)
            for (int64_t j = 0; j < spec.out_w; ++j) paint_column(i, j, 0, kGroundFineCells, ground_id);

    // a few free-standing pillars give the non-box foreground class support
    if (spec.n_occ_classes >= spec.n_det_classes + 2) {
        const int64_t n_pillars = rng.randint(3);
        for (int64_t p = 0; p < n_pillars; ++p) {
            const double px = rng.uniform(-spec.extent_m + 1.0, spec.extent_m - 1.0);
            const double py = rng.uniform(-spec.extent_m + 1.0, spec.extent_m - 1.0);
            const int64_t hz = 4 + rng.randint(9);  // 1.0 .. 3.0 m of fine cells
            bool clear = true;
            for (const Box& b : s.boxes)
                if (std::hypot(px - b.cx, py - b.cy) < 0.5 * box_diag(b) + 1.2) {
                    clear = false;
                    break;
                }
            if (!clear) continue;
            for (int64_t i = 0; i < spec.out_h; ++i)
                for (int64_t j = 0; j < spec.out_w; ++j) {
                    const double x = -spec.extent_m + (static_cast<double>(i) + 0.5) * fine_h;
                    const double y = -spec.extent_m + (static_cast<double>(j) + 0.5) * fine_w;
                    if (std::abs(x - px) <= 0.5 && std::abs(y - py) <= 0.5)
                        paint_column(i, j, kBoxBottomFine, kBoxBottomFine + hz, pillar_id);
                }
        }
    }

    // boxes painted last: their extruded volume must carry the box class
    for (const Box& b : s.boxes) {
        const int64_t hz = static_cast<int64_t>(std::llround(b.height_m / kFineZCell));
        for (int64_t i = 0; i < spec.out_h; ++i)
            for (int64_t j = 0; j < spec.out_w; ++j) {
                const double x = -spec.extent_m + (static_cast<double>(i) + 0.5) * fine_h;
                const double y = -spec.extent_m + (static_cast<double>(j) + 0.5) * fine_w;
                if (box_contains(b, x, y)) paint_column(i, j, kBoxBottomFine, kBoxBottomFine + hz, b.cls);
            }
    }

    // --- semantic map masks: unions of axis-aligned strips at out res ---
    s.map_masks = Tensor::zeros(spec.out_h * spec.out_w, spec.n_seg_classes);
    for (int64_t k = 0; k < spec.n_seg_classes; ++k) {
        const int64_t strips = 1 + rng.randint(2);
        for (int64_t t = 0; t < strips; ++t) {
            const bool along_w = rng.bernoulli(0.5);  // strip spans the full w axis
            const int64_t span = along_w ? spec.out_h : spec.out_w;
            const int64_t width = 4 + rng.randint(12);
            const int64_t start = rng.randint(std::max<int64_t>(1, span - width));
            for (int64_t i = 0; i < spec.out_h; ++i)
                for (int64_t j = 0; j < spec.out_w; ++j) {
                    const int64_t along = along_w ? i : j;
                    if (along >= start && along < start + width)
                        s.map_masks(bev_index(i, j, spec.out_w), k) = 1.0;
                }
        }
    }

    // --- simulated LiDAR returns: only from occupied coarse voxels ---
    const std::vector<int> coarse = pool_occ_labels(s.occ_labels, spec);
    s.lidar_mask.assign(static_cast<size_t>(spec.voxels()), 0);
    for (int64_t v = 0; v < spec.voxels(); ++v) {
        const double u = rng.uniform();  // consumed for every voxel, content-independent
        s.lidar_mask[static_cast<size_t>(v)] =
            (coarse[static_cast<size_t>(v)] != empty && u < kLidarKeepProb) ? 1 : 0;
    }
    return s;
}

// ----------------------------------------------------------------- renderer

namespace {

// 3x3 box blur with edge renormalization, applied twice.
std::vector<double> blur(const std::vector<double>& in, int64_t h, int64_t w) {
    std::vector<double> cur = in, next(in.size());
    for (int pass = 0; pass < 2; ++pass) {
        for (int64_t r = 0; r < h; ++r)
            for (int64_t q = 0; q < w; ++q) {
                double acc = 0.0;
                int cnt = 0;
                for (int64_t dr = -1; dr <= 1; ++dr)
                    for (int64_t dq = -1; dq <= 1; ++dq) {
                        const int64_t rr = r + dr, qq = q + dq;
                        if (rr < 0 || rr >= h || qq < 0 || qq >= w) continue;
                        acc += cur[static_cast<size_t>(rr * w + qq)];
                        ++cnt;
                    }
                next[static_cast<size_t>(r * w + q)] = acc / static_cast<double>(cnt);
            }
        cur.swap(next);
    }
    return cur;
}

std::vector<std::vector<double>> lidar_bases(const SceneSample& s, const SceneSpec& spec) {
    const int64_t h = spec.grid_h, w = spec.grid_w;
    const double ch = spec.cell_h_m(), cw = spec.cell_w_m();
    const int empty = static_cast<int>(spec.n_occ_classes);
    std::vector<std::vector<double>> bases;

    // per-class box interiors (sharp)
    for (int64_t k = 0; k < spec.n_det_classes; ++k) {
        std::vector<double> m(static_cast<size_t>(h * w), 0.0);
        for (int64_t r = 0; r < h; ++r)
            for (int64_t q = 0; q < w; ++q) {
                const double x = -spec.extent_m + (static_cast<double>(r) + 0.5) * ch;
                const double y = -spec.extent_m + (static_cast<double>(q) + 0.5) * cw;
                for (const Box& b : s.boxes)
                    if (b.cls == k && box_contains(b, x, y)) m[static_cast<size_t>(r * w + q)] = 1.0;
            }
        bases.push_back(std::move(m));
    }
    // footprint boundary: interior cells with a non-interior 4-neighbor
    {
        std::vector<double> any(static_cast<size_t>(h * w), 0.0);
        for (int64_t k = 0; k < spec.n_det_classes; ++k)
            for (size_t i = 0; i < any.size(); ++i) any[i] = std::max(any[i], bases[static_cast<size_t>(k)][i]);
        std::vector<double> edge(static_cast<size_t>(h * w), 0.0);
        for (int64_t r = 0; r < h; ++r)
            for (int64_t q = 0; q < w; ++q) {
                if (any[static_cast<size_t>(r * w + q)] == 0.0) continue;
                const int64_t nh[4] = {r - 1, r + 1, r, r};
                const int64_t nw[4] = {q, q, q - 1, q + 1};
                for (int d = 0; d < 4; ++d)
                    if (nh[d] < 0 || nh[d] >= h || nw[d] < 0 || nw[d] >= w ||
                        any[static_cast<size_t>(nh[d] * w + nw[d])] == 0.0) {
                        edge[static_cast<size_t>(r * w + q)] = 1.0;
                        break;
                    }
            }
        bases.push_back(std::move(edge));
    }
    // per-layer occupancy fraction (height histogram over fine voxels)
    for (int64_t z = 0; z < spec.grid_z; ++z) {
        std::vector<double> m(static_cast<size_t>(h * w), 0.0);
        for (int64_t r = 0; r < h; ++r)
            for (int64_t q = 0; q < w; ++q) {
                int cnt = 0;
                for (int64_t dh = 0; dh < 2; ++dh)
                    for (int64_t dw = 0; dw < 2; ++dw)
                        for (int64_t dz = 0; dz < 4; ++dz)
                            if (s.occ_labels[static_cast<size_t>(voxel_index(
                                    2 * r + dh, 2 * q + dw, 4 * z + dz, spec.out_w, spec.out_z))] != empty)
                                ++cnt;
                m[static_cast<size_t>(r * w + q)] = static_cast<double>(cnt) / 16.0;
            }
        bases.push_back(std::move(m));
    }
    // return density per column
    {
        std::vector<double> m(static_cast<size_t>(h * w), 0.0);
        for (int64_t r = 0; r < h; ++r)
            for (int64_t q = 0; q < w; ++q) {
                int cnt = 0;
                for (int64_t z = 0; z < spec.grid_z; ++z)
                    cnt += s.lidar_mask[static_cast<size_t>(voxel_index(r, q, z, spec.grid_w, spec.grid_z))];
                m[static_cast<size_t>(r * w + q)] = static_cast<double>(cnt) / static_cast<double>(spec.grid_z);
            }
        bases.push_back(std::move(m));
    }
    return bases;
}

std::vector<std::vector<double>> cam_bases(const SceneSample& s, const SceneSpec& spec) {
    const int64_t h = spec.grid_h, w = spec.grid_w;
    const double ch = spec.cell_h_m(), cw = spec.cell_w_m();
    std::vector<std::vector<double>> bases;

    // map masks: mean-pool 2x2 to grid resolution, then blur (semantic group)
    for (int64_t k = 0; k < spec.n_seg_classes; ++k) {
        std::vector<double> m(static_cast<size_t>(h * w), 0.0);
        for (int64_t r = 0; r < h; ++r)
            for (int64_t q = 0; q < w; ++q) {
                double acc = 0.0;
                for (int64_t dh = 0; dh < 2; ++dh)
                    for (int64_t dw = 0; dw < 2; ++dw)
                        acc += s.map_masks(bev_index(2 * r + dh, 2 * q + dw, spec.out_w), k);
                m[static_cast<size_t>(r * w + q)] = acc / 4.0;
            }
        bases.push_back(blur(m, h, w));
    }
    // blurred per-class box interiors and their union
    std::vector<double> uni(static_cast<size_t>(h * w), 0.0);
    for (int64_t k = 0; k < spec.n_det_classes; ++k) {
        std::vector<double> m(static_cast<size_t>(h * w), 0.0);
        for (int64_t r = 0; r < h; ++r)
            for (int64_t q = 0; q < w; ++q) {
                const double x = -spec.extent_m + (static_cast<double>(r) + 0.5) * ch;
                const double y = -spec.extent_m + (static_cast<double>(q) + 0.5) * cw;
                for (const Box& b : s.boxes)
                    if (b.cls == k && box_contains(b, x, y)) m[static_cast<size_t>(r * w + q)] = 1.0;
            }
        for (size_t i = 0; i < uni.size(); ++i) uni[i] = std::max(uni[i], m[i]);
        bases.push_back(blur(m, h, w));
    }
    bases.push_back(blur(uni, h, w));
    return bases;
}

Tensor assemble_channels(const std::vector<std::vector<double>>& bases, const SceneSpec& spec, Rng& coef_rng,
                         Rng& noise_rng) {
    const int64_t cells = spec.bev_cells(), c = spec.channels;
    const int64_t nb = static_cast<int64_t>(bases.size());
    std::vector<double> coef(static_cast<size_t>(c));
    for (auto& v : coef) v = coef_rng.uniform(0.6, 1.4);

    Tensor f(cells, c);
    for (int64_t cc = 0; cc < c; ++cc) {
        const auto& base = bases[static_cast<size_t>(cc % nb)];
        double mean = 0.0;
        for (int64_t i = 0; i < cells; ++i) mean += base[static_cast<size_t>(i)];
        mean = mean * coef[static_cast<size_t>(cc)] / static_cast<double>(cells);
        // Centre each channel and scale it to unit peak amplitude. Dividing
        // by the standard deviation instead would blow the sparse channels
        // (a base active in a handful of cells) up to spikes tens of times
        // the typical value, and the model stack has no normalization layers
        // to absorb that.
        double peak = 0.0;
        for (int64_t i = 0; i < cells; ++i) {
            const double v = coef[static_cast<size_t>(cc)] * base[static_cast<size_t>(i)] - mean;
            peak = std::max(peak, std::abs(v));
        }
        for (int64_t i = 0; i < cells; ++i)
            f(i, cc) =
                peak < 1e-12 ? 0.0 : (coef[static_cast<size_t>(cc)] * base[static_cast<size_t>(i)] - mean) / peak;
    }
    for (int64_t i = 0; i < cells; ++i)
        for (int64_t cc = 0; cc < c; ++cc) f(i, cc) += spec.noise_amp * noise_rng.normal();
    return f;
}

}  // namespace

int64_t lidar_base_count(const SceneSpec& spec) { return spec.n_det_classes + 1 + spec.grid_z + 1; }
int64_t cam_base_count(const SceneSpec& spec) { return spec.n_seg_classes + spec.n_det_classes + 1; }

ModalityFeatures render_modality_features(const SceneSample& sample, const SceneSpec& spec) {
    spec.validate();
    if (sample.map_masks.rows != spec.out_h * spec.out_w || sample.map_masks.cols != spec.n_seg_classes ||
        static_cast<int64_t>(sample.occ_labels.size()) != spec.out_voxels() ||
        static_cast<int64_t>(sample.lidar_mask.size()) != spec.voxels())
        throw ContractViolation("render_modality_features: sample inconsistent with spec");

    // Channel coefficients come from a fixed stream so the signal layout is
    // identical across scenes and seeds; only the additive noise is seeded.
    Rng coef_rng(kChannelBasisSeed);
    Rng noise_rng(derive_seed(spec.seed, 0x51));
    ModalityFeatures mf;
    mf.f_lidar = assemble_channels(lidar_bases(sample, spec), spec, coef_rng, noise_rng);
    mf.f_cam = assemble_channels(cam_bases(sample, spec), spec, coef_rng, noise_rng);
    mf.lidar_mask = sample.lidar_mask;
    if (!mf.f_lidar.all_finite() || !mf.f_cam.all_finite())
        throw NumericError("render_modality_features: non-finite feature value");
    return mf;
}

Targets make_targets(const SceneSample& sample, const SceneSpec& spec) {
    Targets t;
    t.heatmaps = Tensor::zeros(spec.bev_cells(), spec.n_det_classes);
    const double ch = spec.cell_h_m(), cw = spec.cell_w_m();
    for (const Box& b : sample.boxes) {
        const int64_t h0 = std::clamp<int64_t>(
            static_cast<int64_t>(std::floor((b.cx + spec.extent_m) / ch)), 0, spec.grid_h - 1);
        const int64_t w0 = std::clamp<int64_t>(
            static_cast<int64_t>(std::floor((b.cy + spec.extent_m) / cw)), 0, spec.grid_w - 1);
        const double diag_cells = std::hypot(b.length, b.width) / std::min(ch, cw);
        const double sigma = std::max(1.0, diag_cells / 6.0);
        for (int64_t r = 0; r < spec.grid_h; ++r)
            for (int64_t q = 0; q < spec.grid_w; ++q) {
                const double d2 = static_cast<double>((r - h0) * (r - h0) + (q - w0) * (q - w0));
                const double g = std::exp(-d2 / (2.0 * sigma * sigma));
                double& cell = t.heatmaps(bev_index(r, q, spec.grid_w), b.cls);
                cell = std::max(cell, g);
            }
    }

    t.seg_masks_grid = Tensor::zeros(spec.bev_cells(), spec.n_seg_classes);
    for (int64_t k = 0; k < spec.n_seg_classes; ++k)
        for (int64_t r = 0; r < spec.grid_h; ++r)
            for (int64_t q = 0; q < spec.grid_w; ++q) {
                int cnt = 0;
                for (int64_t dh = 0; dh < 2; ++dh)
                    for (int64_t dw = 0; dw < 2; ++dw)
                        cnt += sample.map_masks(bev_index(2 * r + dh, 2 * q + dw, spec.out_w), k) > 0.5 ? 1 : 0;
                // majority of the 2x2 block; the 2-2 tie counts as occupied
                if (cnt >= 2) t.seg_masks_grid(bev_index(r, q, spec.grid_w), k) = 1.0;
            }

    t.seg_masks_out = sample.map_masks;
    t.occ_labels = sample.occ_labels;
    return t;
}

}  // namespace bevmt
