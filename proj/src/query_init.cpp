#include "bevmt/query_init.hpp"

#include <algorithm>
#include <numeric>

namespace bevmt {

QueryInitParams QueryInitParams::create(ParamStore& ps, const std::string& prefix, int64_t n_det, int64_t n_seg,
                                        int64_t c, Rng& rng) {
    QueryInitParams p;
    p.cat_embed = ps.add(prefix + ".cat_embed", Tensor::randn(n_det + n_seg, c, rng, 1.0 / std::sqrt(double(c))));
    p.pos_mlp = Mlp2::create(ps, prefix + ".pos_mlp", 3, c, c, rng);
    p.occ_shared = ps.add(prefix + ".occ_shared", Tensor::randn(1, c, rng, 0.02));
    p.n_det = n_det;
    p.n_seg = n_seg;
    p.c = c;
    return p;
}

Var encode_positions(const QueryInitParams& p, const std::vector<std::array<double, 3>>& pos) {
    Tensor x(static_cast<int64_t>(pos.size()), 3);
    for (size_t i = 0; i < pos.size(); ++i)
        for (int j = 0; j < 3; ++j) {
            const double v = pos[i][static_cast<size_t>(j)];
            if (v < 0.0 || v > 1.0)
                throw ContractViolation("encode_positions: coordinate outside [0,1]");
            x(static_cast<int64_t>(i), j) = v;
        }
    return p.pos_mlp.forward(constant(std::move(x)));
}

namespace {

std::array<double, 3> norm_pos(int64_t h, int64_t w, int64_t hh, int64_t ww) {
    return {(static_cast<double>(hh) + 0.5) / static_cast<double>(h),
            (static_cast<double>(ww) + 0.5) / static_cast<double>(w), 0.5};
}

}  // namespace

std::pair<Var, Var> build_confidence_maps(const Var& f_bev, const QueryInitParams& p) {
    if (f_bev.cols() != p.c) throw ContractViolation("build_confidence_maps: channel mismatch");
    std::vector<int64_t> det_rows(static_cast<size_t>(p.n_det));
    std::iota(det_rows.begin(), det_rows.end(), 0);
    std::vector<int64_t> seg_rows(static_cast<size_t>(p.n_seg));
    std::iota(seg_rows.begin(), seg_rows.end(), p.n_det);
    Var det = sigmoid(matmul_nt(f_bev, gather_rows(p.cat_embed, det_rows)));
    Var seg = sigmoid(matmul_nt(f_bev, gather_rows(p.cat_embed, seg_rows)));
    return {det, seg};
}

TaskQueries init_detection_queries(const Var& f_bev, const Var& det_conf, int64_t n_d, int64_t h, int64_t w,
                                   const QueryInitParams& p) {
    const int64_t k = det_conf.cols();
    const int64_t total = h * w * k;
    if (det_conf.rows() != h * w) throw ContractViolation("init_detection_queries: confidence grid mismatch");
    if (n_d < 1 || n_d > total) throw ConfigError("n_d must lie in [1, H*W*n_det_classes]");

    // flat index (cell*K + k) is exactly the row-major storage order of
    // det_conf, so the tie rule (h, then w, then class) is index order
    std::vector<int64_t> idx(static_cast<size_t>(total));
    std::iota(idx.begin(), idx.end(), 0);
    const double* score = det_conf.val().d.data();
    std::partial_sort(idx.begin(), idx.begin() + n_d, idx.end(), [&](int64_t a, int64_t b) {
        if (score[a] != score[b]) return score[a] > score[b];
        return a < b;
    });
    idx.resize(static_cast<size_t>(n_d));

    TaskQueries q;
    std::vector<int64_t> cells;
    std::vector<std::array<double, 3>> pos;
    for (int64_t flat : idx) {
        const int64_t cell = flat / k;
        q.cls.push_back(static_cast<int>(flat % k));
        q.pos_h.push_back(cell / w);
        q.pos_w.push_back(cell % w);
        cells.push_back(cell);
        pos.push_back(norm_pos(h, w, cell / w, cell % w));
    }
    q.embed = add(gather_rows(f_bev, cells), encode_positions(p, pos));
    return q;
}

std::pair<int64_t, int64_t> seg_band_rows(int64_t s, int64_t s_blocks, int64_t h) {
    const int64_t base = h / s_blocks;
    const int64_t lo = s * base;
    const int64_t hi = (s == s_blocks - 1) ? h : (s + 1) * base;
    return {lo, hi};
}

TaskQueries init_segmentation_queries(const Var& f_bev, const Var& seg_conf, int64_t s_blocks, int64_t h, int64_t w,
                                      const QueryInitParams& p) {
    if (s_blocks < 1 || s_blocks > h) throw ConfigError("segmentation blocks must lie in [1, grid_h]");
    if (seg_conf.rows() != h * w) throw ContractViolation("init_segmentation_queries: confidence grid mismatch");
    const int64_t k = seg_conf.cols();

    TaskQueries q;
    std::vector<int64_t> cells;
    std::vector<std::array<double, 3>> pos;
    for (int64_t s = 0; s < s_blocks; ++s) {
        const auto [lo, hi] = seg_band_rows(s, s_blocks, h);
        for (int64_t kk = 0; kk < k; ++kk) {
            int64_t best = -1;
            double best_score = 0.0;
            for (int64_t r = lo; r < hi; ++r)
                for (int64_t cc = 0; cc < w; ++cc) {
                    const double v = seg_conf.val()(bev_index(r, cc, w), kk);
                    if (best < 0 || v > best_score) {  // strict >, so first max wins
                        best = bev_index(r, cc, w);
                        best_score = v;
                    }
                }
            q.cls.push_back(static_cast<int>(kk));
            q.band.push_back(static_cast<int>(s));
            q.pos_h.push_back(best / w);
            q.pos_w.push_back(best % w);
            cells.push_back(best);
            pos.push_back(norm_pos(h, w, best / w, best % w));
        }
    }
    q.embed = add(gather_rows(f_bev, cells), encode_positions(p, pos));
    return q;
}

std::pair<std::vector<int64_t>, std::vector<int64_t>> split_occupancy_queries(const std::vector<uint8_t>& lidar_mask,
                                                                              int64_t h, int64_t w, int64_t z) {
    if (static_cast<int64_t>(lidar_mask.size()) != h * w * z)
        throw ContractViolation("split_occupancy_queries: mask size mismatch");
    std::vector<int64_t> definite, uncertain;
    for (int64_t v = 0; v < h * w * z; ++v)
        (lidar_mask[static_cast<size_t>(v)] ? definite : uncertain).push_back(v);
    return {definite, uncertain};
}

namespace {

TaskQueries occ_query_block(const Var& base_embed, const std::vector<int64_t>& voxels, int64_t w, int64_t z) {
    TaskQueries q;
    q.embed = base_embed;
    for (int64_t v : voxels) {
        q.pos_h.push_back(v / (w * z));
        q.pos_w.push_back((v / z) % w);
        q.pos_z.push_back(v % z);
    }
    return q;
}

}  // namespace

std::pair<TaskQueries, TaskQueries> init_occupancy_queries(const Var& f_bev, const std::vector<uint8_t>& lidar_mask,
                                                           int64_t h, int64_t w, int64_t z,
                                                           const QueryInitParams& p) {
    auto [definite, uncertain] = split_occupancy_queries(lidar_mask, h, w, z);
    auto positions = [&](const std::vector<int64_t>& voxels) {
        std::vector<std::array<double, 3>> pos;
        pos.reserve(voxels.size());
        for (int64_t v : voxels)
            pos.push_back({(static_cast<double>(v / (w * z)) + 0.5) / static_cast<double>(h),
                           (static_cast<double>((v / z) % w) + 0.5) / static_cast<double>(w),
                           (static_cast<double>(v % z) + 0.5) / static_cast<double>(z)});
        return pos;
    };

    TaskQueries def, unc;
    if (!definite.empty()) {
        std::vector<int64_t> cells;
        cells.reserve(definite.size());
        for (int64_t v : definite) cells.push_back(v / z);
        def = occ_query_block(add(gather_rows(f_bev, cells), encode_positions(p, positions(definite))),
                              definite, w, z);
    }
    if (!uncertain.empty()) {
        const std::vector<int64_t> zero_rows(uncertain.size(), 0);
        unc = occ_query_block(add(gather_rows(p.occ_shared, zero_rows), encode_positions(p, positions(uncertain))),
                              uncertain, w, z);
    }
    return {def, unc};
}

}  // namespace bevmt
