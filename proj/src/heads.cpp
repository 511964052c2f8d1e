#include "bevmt/heads.hpp"

#include <cmath>
#include <iostream>
#include <numeric>

#include "bevmt/matching.hpp"

namespace bevmt {

// ------------------------------------------------------------- detection

DetHeadParams DetHeadParams::create(ParamStore& ps, const std::string& prefix, int64_t c, int64_t n_det_classes,
                                    Rng& rng) {
    DetHeadParams p;
    p.cls = Mlp2::create(ps, prefix + ".cls", c, c, n_det_classes, rng);
    p.offset = Mlp2::create(ps, prefix + ".offset", c, c, 2, rng);
    p.size = Mlp2::create(ps, prefix + ".size", c, c, 2, rng);
    p.yaw = Mlp2::create(ps, prefix + ".yaw", c, c, 2, rng);
    // Start the output layers small so the first decoded boxes are near the
    // neutral box (zero offset, unit size) whatever the feature scale is;
    // exp(size_log) in the decode makes large initial outputs catastrophic.
    for (Mlp2* head : {&p.cls, &p.offset, &p.size, &p.yaw}) head->fc2.w.value_mut().map() *= 0.1;
    return p;
}

DetectionOutput detection_head(const TaskQueries& det_q, const DetHeadParams& p) {
    if (det_q.count() == 0) throw ContractViolation("detection_head: empty query set");
    DetectionOutput out;
    out.cls_logits = p.cls.forward(det_q.embed);
    out.offset = p.offset.forward(det_q.embed);
    out.size_log = p.size.forward(det_q.embed);
    out.yaw = p.yaw.forward(det_q.embed);
    out.pos_h = det_q.pos_h;
    out.pos_w = det_q.pos_w;
    return out;
}

std::vector<DecodedBox> decode_boxes(const DetectionOutput& out, double cell_h_m, double cell_w_m,
                                     double extent_m) {
    const int64_t n = out.cls_logits.rows(), k = out.cls_logits.cols();
    std::vector<DecodedBox> boxes;
    boxes.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        DecodedBox db;
        const double ch = double(out.pos_h[static_cast<size_t>(i)]) + 0.5 + out.offset.val()(i, 0);
        const double cw = double(out.pos_w[static_cast<size_t>(i)]) + 0.5 + out.offset.val()(i, 1);
        db.box.cx = ch * cell_h_m - extent_m;
        db.box.cy = cw * cell_w_m - extent_m;
        db.box.length = std::exp(out.size_log.val()(i, 0));
        db.box.width = std::exp(out.size_log.val()(i, 1));
        double sy = out.yaw.val()(i, 0), cy = out.yaw.val()(i, 1);
        const double norm = std::hypot(sy, cy);
        if (norm < 1e-12) {
            sy = 0.0;
            cy = 1.0;
        } else {
            sy /= norm;
            cy /= norm;
        }
        db.box.yaw = std::atan2(sy, cy);
        db.box.height_m = 0.0;  // height is not regressed; irrelevant to BEV matching
        int64_t best = 0;
        for (int64_t j = 1; j < k; ++j)
            if (out.cls_logits.val()(i, j) > out.cls_logits.val()(i, best)) best = j;
        db.box.cls = static_cast<int>(best);
        db.score = 1.0 / (1.0 + std::exp(-out.cls_logits.val()(i, best)));
        if (!std::isfinite(db.box.cx) || !std::isfinite(db.box.cy) || !std::isfinite(db.box.length) ||
            !std::isfinite(db.box.width) || !std::isfinite(db.box.yaw))
            throw NumericError("decode_boxes: non-finite decoded box");
        boxes.push_back(db);
    }
    return boxes;
}

namespace {

double clamp_prob(double p) { return std::min(std::max(p, 1e-7), 1.0 - 1e-7); }

}  // namespace

DetLossBreakdown detection_loss(const DetectionOutput& pred, const std::vector<Box>& gt, double lambda1,
                                double lambda2, double cell_h_m, double cell_w_m, double extent_m, double alpha,
                                double gamma) {
    const int64_t n_q = pred.cls_logits.rows(), k = pred.cls_logits.cols();
    const int64_t n_gt = static_cast<int64_t>(gt.size());
    if (n_gt > n_q)
        throw ConfigError("detection_loss: " + std::to_string(n_gt) + " ground-truth boxes exceed " +
                          std::to_string(n_q) + " queries");
    for (const Box& b : gt)
        if (b.cls < 0 || b.cls >= k) throw ContractViolation("detection_loss: ground-truth class out of range");

    DetLossBreakdown out;
    Var probs = sigmoid(pred.cls_logits);

    Tensor target = Tensor::zeros(n_q, k);
    if (n_gt > 0) {
        // matching cost: positive-branch focal classification + L1 in the
        // head's raw regression space (scalar arithmetic; the assignment
        // itself is a discrete choice and carries no gradient)
        Tensor cost(n_gt, n_q);
        for (int64_t i = 0; i < n_gt; ++i) {
            const double gh = (gt[static_cast<size_t>(i)].cx + extent_m) / cell_h_m;
            const double gw = (gt[static_cast<size_t>(i)].cy + extent_m) / cell_w_m;
            const double gl = std::log(gt[static_cast<size_t>(i)].length);
            const double gwd = std::log(gt[static_cast<size_t>(i)].width);
            const double gs = std::sin(gt[static_cast<size_t>(i)].yaw), gc = std::cos(gt[static_cast<size_t>(i)].yaw);
            for (int64_t j = 0; j < n_q; ++j) {
                const double p = clamp_prob(probs.val()(j, gt[static_cast<size_t>(i)].cls));
                const double cls_cost = -alpha * std::pow(1.0 - p, gamma) * std::log(p);
                const double ph = double(pred.pos_h[static_cast<size_t>(j)]) + 0.5 + pred.offset.val()(j, 0);
                const double pw = double(pred.pos_w[static_cast<size_t>(j)]) + 0.5 + pred.offset.val()(j, 1);
                const double l1 = std::abs(ph - gh) + std::abs(pw - gw) +
                                  std::abs(pred.size_log.val()(j, 0) - gl) +
                                  std::abs(pred.size_log.val()(j, 1) - gwd) +
                                  std::abs(pred.yaw.val()(j, 0) - gs) + std::abs(pred.yaw.val()(j, 1) - gc);
                cost(i, j) = cls_cost + l1;
            }
        }
        hungarian_assign(cost, out.gt_to_query);

        std::vector<int64_t> matched;
        Tensor reg_target(n_gt, 6);
        for (int64_t i = 0; i < n_gt; ++i) {
            const int64_t j = out.gt_to_query[static_cast<size_t>(i)];
            matched.push_back(j);
            target(j, gt[static_cast<size_t>(i)].cls) = 1.0;
            reg_target(i, 0) = (gt[static_cast<size_t>(i)].cx + extent_m) / cell_h_m -
                               double(pred.pos_h[static_cast<size_t>(j)]) - 0.5;
            reg_target(i, 1) = (gt[static_cast<size_t>(i)].cy + extent_m) / cell_w_m -
                               double(pred.pos_w[static_cast<size_t>(j)]) - 0.5;
            reg_target(i, 2) = std::log(gt[static_cast<size_t>(i)].length);
            reg_target(i, 3) = std::log(gt[static_cast<size_t>(i)].width);
            reg_target(i, 4) = std::sin(gt[static_cast<size_t>(i)].yaw);
            reg_target(i, 5) = std::cos(gt[static_cast<size_t>(i)].yaw);
        }
        Var pred6 = gather_rows(concat_cols(concat_cols(pred.offset, pred.size_log), pred.yaw), matched);
        out.l_reg = mean_all(abs_of(sub(pred6, constant(std::move(reg_target)))));
    } else {
        out.l_reg = constant(Tensor::zeros(1, 1));
    }
    out.l_cls = focal_loss_mean(probs, target, alpha, gamma);
    out.total = add(scale(out.l_cls, lambda1), scale(out.l_reg, lambda2));
    return out;
}

// ---------------------------------------------------------- segmentation

Var segmentation_head(const TaskQueries& seg_q, const Var& f_seg, int64_t s_blocks, int64_t h, int64_t w,
                      int64_t n_seg_classes) {
    if (f_seg.rows() != h * w) throw ContractViolation("segmentation_head: grid mismatch");
    if (seg_q.count() != s_blocks * n_seg_classes)
        throw ContractViolation("segmentation_head: expected one query per (band, class)");
    // map (band, class) -> query row
    std::vector<int64_t> lookup(static_cast<size_t>(s_blocks * n_seg_classes), -1);
    for (int64_t i = 0; i < seg_q.count(); ++i) {
        const int64_t band = seg_q.band[static_cast<size_t>(i)], cls = seg_q.cls[static_cast<size_t>(i)];
        if (band < 0 || band >= s_blocks || cls < 0 || cls >= n_seg_classes)
            throw ContractViolation("segmentation_head: query band/class out of range");
        auto& slot = lookup[static_cast<size_t>(band * n_seg_classes + cls)];
        if (slot >= 0) throw ContractViolation("segmentation_head: duplicate (band, class) query");
        slot = i;
    }

    Var logits;
    for (int64_t s = 0; s < s_blocks; ++s) {
        const auto [lo, hi] = seg_band_rows(s, s_blocks, h);
        std::vector<int64_t> cells(static_cast<size_t>((hi - lo) * w));
        std::iota(cells.begin(), cells.end(), lo * w);
        std::vector<int64_t> qrows(static_cast<size_t>(n_seg_classes));
        for (int64_t kk = 0; kk < n_seg_classes; ++kk)
            qrows[static_cast<size_t>(kk)] = lookup[static_cast<size_t>(s * n_seg_classes + kk)];
        Var band = matmul_nt(gather_rows(f_seg, cells), gather_rows(seg_q.embed, qrows));
        Var placed = scatter_rows(band, cells, h * w);
        logits = (s == 0) ? placed : add(logits, placed);
    }
    return logits;
}

Var segmentation_loss(const Var& logits, const Tensor& masks, double alpha, double gamma) {
    return focal_loss_mean(sigmoid(logits), masks, alpha, gamma);
}

// ------------------------------------------------------------- occupancy

OccHeadParams OccHeadParams::create(ParamStore& ps, const std::string& prefix, int64_t c, int64_t m_classes,
                                    const std::string& variant, Rng& rng) {
    if (variant != "transformer" && variant != "mamba")
        throw ConfigError("occupancy refinement variant must be 'transformer' or 'mamba', got '" + variant + "'");
    OccHeadParams p;
    p.variant = variant;
    p.merge_q = Affine::create(ps, prefix + ".merge_q", c, p.d_attn, rng);
    p.merge_k = Affine::create(ps, prefix + ".merge_k", c, p.d_attn, rng);
    p.merge_v = Affine::create(ps, prefix + ".merge_v", c, p.d_attn, rng);
    p.merge_o = Affine::create(ps, prefix + ".merge_o", p.d_attn, c, rng);
    if (variant == "transformer") {
        p.ref_q = Affine::create(ps, prefix + ".ref_q", c, p.d_attn, rng);
        p.ref_k = Affine::create(ps, prefix + ".ref_k", c, p.d_attn, rng);
        p.ref_v = Affine::create(ps, prefix + ".ref_v", c, p.d_attn, rng);
        p.ref_o = Affine::create(ps, prefix + ".ref_o", p.d_attn, c, rng);
    } else {
        p.ref_fwd = SSMParams::make_direction(ps, prefix + ".ref_fwd", c, p.n_state, rng);
        p.ref_bwd = SSMParams::make_direction(ps, prefix + ".ref_bwd", c, p.n_state, rng);
        p.ref_merge = Affine::create(ps, prefix + ".ref_merge", c, c, rng);
    }
    p.out_logits = Affine::create(ps, prefix + ".out_logits", c, m_classes + 1, rng);
    // Start near the uniform class distribution; the voxel features this
    // layer reads are whatever scale the decoder produces, and cross-entropy
    // over 64k voxels punishes confident noise brutally.
    p.out_logits.w.value_mut().map() *= 0.1;
    return p;
}

Var scatter_occupancy(const TaskQueries& def_q, const TaskQueries& unc_q, int64_t h, int64_t w, int64_t z) {
    const int64_t total = h * w * z;
    if (def_q.count() + unc_q.count() != total)
        throw ContractViolation("scatter_occupancy: query sets must cover the volume");
    std::vector<char> seen(static_cast<size_t>(total), 0);
    auto voxels_of = [&](const TaskQueries& q) {
        std::vector<int64_t> vox;
        vox.reserve(q.pos_h.size());
        for (size_t i = 0; i < q.pos_h.size(); ++i) {
            const int64_t v = voxel_index(q.pos_h[i], q.pos_w[i], q.pos_z[i], w, z);
            if (v < 0 || v >= total || seen[static_cast<size_t>(v)])
                throw ContractViolation("scatter_occupancy: voxel indices must form a bijection");
            seen[static_cast<size_t>(v)] = 1;
            vox.push_back(v);
        }
        return vox;
    };
    Var out;
    if (def_q.count() > 0) out = scatter_rows(def_q.embed, voxels_of(def_q), total);
    if (unc_q.count() > 0) {
        Var u = scatter_rows(unc_q.embed, voxels_of(unc_q), total);
        out = out.defined() ? add(out, u) : u;
    }
    return out;
}

std::vector<int> serpentine_order(int64_t h, int64_t w, int64_t z) {
    std::vector<int> order;
    order.reserve(static_cast<size_t>(h * w * z));
    for (int64_t hh = 0; hh < h; ++hh)
        for (int64_t i = 0; i < w; ++i) {
            const int64_t ww = (hh % 2 == 0) ? i : (w - 1 - i);
            for (int64_t zz = 0; zz < z; ++zz)
                order.push_back(static_cast<int>(voxel_index(hh, ww, zz, w, z)));
        }
    return order;
}

namespace {

Var scan_direction(const Var& x, const SSMParams::Direction& dir, int64_t n, std::vector<int> order) {
    Var proj = dir.in_proj.forward(x);
    Var b = slice_cols(proj, 0, n);
    Var c = slice_cols(proj, n, 2 * n);
    Var dt = softplus(outer_add(slice_cols(proj, 2 * n, 2 * n + 1), dir.dt_bias));
    Var a = neg(exp_of(dir.a_log));
    std::vector<int> starts{0, static_cast<int>(x.rows())};
    return selective_scan(x, dt, b, c, a, dir.d_skip, std::move(order), std::move(starts));
}

}  // namespace

Var occupancy_head(const TaskQueries& def_q, const TaskQueries& unc_q, const OccHeadParams& p, int64_t h, int64_t w,
                   int64_t z, int64_t fh, int64_t fw, int64_t fz) {
    TaskQueries unc = unc_q;
    if (def_q.count() == 0) {
        std::cerr << "warning: occupancy head: no definitely-occupied queries; skipping merge attention\n";
    } else if (unc.count() > 0) {
        Var att = sdp_attention(p.merge_q.forward(unc.embed), p.merge_k.forward(def_q.embed),
                                p.merge_v.forward(def_q.embed), 1.0 / std::sqrt(double(p.d_attn)));
        unc.embed = add(unc.embed, p.merge_o.forward(att));
    }
    Var f3d = scatter_occupancy(def_q, unc, h, w, z);

    Var refined;
    if (p.variant == "transformer") {
        Var att = sdp_attention(p.ref_q.forward(f3d), p.ref_k.forward(f3d), p.ref_v.forward(f3d),
                                1.0 / std::sqrt(double(p.d_attn)));
        refined = add(f3d, p.ref_o.forward(att));
    } else if (p.variant == "mamba") {
        std::vector<int> fwd = serpentine_order(h, w, z);
        std::vector<int> bwd(fwd.rbegin(), fwd.rend());
        Var y = add(scan_direction(f3d, p.ref_fwd, p.n_state, std::move(fwd)),
                    scan_direction(f3d, p.ref_bwd, p.n_state, std::move(bwd)));
        refined = add(f3d, p.ref_merge.forward(y));
    } else {
        throw ConfigError("occupancy refinement variant must be 'transformer' or 'mamba', got '" + p.variant + "'");
    }

    Var up = trilinear_upsample(refined, h, w, z, fh, fw, fz);
    return p.out_logits.forward(up);
}

Var occupancy_loss(const Var& logits, const std::vector<int>& labels, int64_t m_classes) {
    if (logits.cols() != m_classes + 1) throw ContractViolation("occupancy_loss: logits must have M+1 columns");
    if (static_cast<int64_t>(labels.size()) != logits.rows())
        throw ContractViolation("occupancy_loss: one label per voxel required");
    std::vector<int64_t> count(static_cast<size_t>(m_classes) + 1, 0);
    for (int y : labels) {
        if (y < 0 || y > m_classes) throw ContractViolation("occupancy_loss: label outside [0, M]");
        ++count[static_cast<size_t>(y)];
    }
    const double total = static_cast<double>(labels.size());
    std::vector<double> weights(static_cast<size_t>(m_classes) + 1, 0.0);
    for (int64_t kk = 0; kk < m_classes; ++kk)
        if (count[static_cast<size_t>(kk)] > 0)
            weights[static_cast<size_t>(kk)] = std::sqrt(total / double(count[static_cast<size_t>(kk)]));
    weights[static_cast<size_t>(m_classes)] = 1.0;
    return softmax_xent_weighted(logits, labels, weights);
}

// --------------------------------------------------------------- totals

Var total_loss(const Var& l_det, const Var& l_seg, const Var& l_occ, double lambda_det, double lambda_seg,
               double lambda_occ) {
    if (lambda_det < 0.0 || lambda_seg < 0.0 || lambda_occ < 0.0)
        throw ConfigError("loss weights must be non-negative");
    return add(add(scale(l_det, lambda_det), scale(l_seg, lambda_seg)), scale(l_occ, lambda_occ));
}

}  // namespace bevmt
