#include "bevmt/verify_suite.hpp"

#include <functional>
#include <utility>

#include "bevmt/model.hpp"

namespace bevmt {
namespace {

// Every check follows one pattern: build a minimal fixture with a fixed
// seed, collect its parameters, and compare analytic gradients of a scalar
// objective against central differences. Seeds are chosen so no objective
// sits on a selection boundary (argmax/top-k ties, |.| kinks, bilinear
// lattice points); the checks are deterministic.

std::vector<Var> all_params(const ParamStore& ps) {
    std::vector<Var> out;
    for (const auto& [name, v] : ps.items()) out.push_back(v);
    return out;
}

Var weighted_sum(const Var& x, Rng& rng) {
    return sum_all(mul(x, constant(Tensor::randn(x.rows(), x.cols(), rng))));
}

GradCheckReport check_mafi() {
    Rng rng(301);
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", 4, rng);
    Var fl = ps.add("f_lidar", Tensor::randn(9, 4, rng));
    Var fc = ps.add("f_cam", Tensor::randn(9, 4, rng));
    Rng wr(302);
    Tensor wsum = Tensor::randn(9, 4, wr);
    return grad_check("mafi", all_params(ps),
                      [&] { return sum_all(mul(mafi_fuse(fl, fc, p, 3, 3), constant(wsum))); });
}

GradCheckReport check_confidence() {
    Rng rng(303);
    ParamStore ps;
    QueryInitParams p = QueryInitParams::create(ps, "qinit", 2, 2, 4, rng);
    Var f = ps.add("f_bev", Tensor::randn(9, 4, rng));
    return grad_check("confidence_maps", all_params(ps), [&] {
        auto [det_conf, seg_conf] = build_confidence_maps(f, p);
        return add(mean_all(det_conf), mean_all(seg_conf));
    });
}

GradCheckReport check_positions() {
    Rng rng(304);
    ParamStore ps;
    QueryInitParams p = QueryInitParams::create(ps, "qinit", 2, 2, 4, rng);
    std::vector<std::array<double, 3>> pos = {{0.1, 0.7, 0.5}, {0.9, 0.3, 0.25}, {0.4, 0.4, 0.75}};
    Rng wr(305);
    Tensor wsum = Tensor::randn(3, 4, wr);
    return grad_check("positional_mlp", all_params(ps),
                      [&] { return sum_all(mul(encode_positions(p, pos), constant(wsum))); });
}

GradCheckReport check_query_init() {
    Rng rng(306);
    ParamStore ps;
    QueryInitParams p = QueryInitParams::create(ps, "qinit", 2, 2, 4, rng);
    Var f = ps.add("f_bev", Tensor::randn(9, 4, rng));
    std::vector<uint8_t> mask(9 * 2, 0);
    for (size_t i = 0; i < mask.size(); i += 3) mask[i] = 1;
    return grad_check("query_init", all_params(ps), [&] {
        auto [det_conf, seg_conf] = build_confidence_maps(f, p);
        TaskQueries det = init_detection_queries(f, det_conf, 2, 3, 3, p);
        TaskQueries seg = init_segmentation_queries(f, seg_conf, 2, 3, 3, p);
        auto [def, unc] = init_occupancy_queries(f, mask, 3, 3, 2, p);
        Var s = add(mean_all(det.embed), mean_all(seg.embed));
        return add(s, add(mean_all(def.embed), mean_all(unc.embed)));
    });
}

GradCheckReport check_deform_self() {
    Rng rng(307);
    ParamStore ps;
    DeformAttnParams p = DeformAttnParams::create(ps, "attn", 4, 2, 2, rng);
    Var f = ps.add("f_bev", Tensor::randn(9, 4, rng));
    Rng wr(308);
    Tensor wsum = Tensor::randn(9, 4, wr);
    return grad_check("deform_self_attention", all_params(ps),
                      [&] { return sum_all(mul(deformable_self_attention(f, p, 3, 3), constant(wsum))); });
}

GradCheckReport check_deform_cross() {
    Rng rng(309);
    ParamStore ps;
    CrossAttnParams p = CrossAttnParams::create(ps, "cross", 4, 2, 2, rng);
    Var f = ps.add("f_task", Tensor::randn(9, 4, rng));
    Var qe = ps.add("queries", Tensor::randn(2, 4, rng));
    Rng wr(310);
    Tensor wsum = Tensor::randn(2, 4, wr);
    return grad_check("deform_cross_attention", all_params(ps), [&] {
        TaskQueries q;
        q.embed = qe;
        q.pos_h = {0, 2};
        q.pos_w = {1, 2};
        q.pos_z = {0, 0};
        return sum_all(mul(cross_attend_queries(q, f, p, 3, 3).embed, constant(wsum)));
    });
}

GradCheckReport check_vss2d() {
    Rng rng(311);
    ParamStore ps;
    SSMParams p = SSMParams::create(ps, "ssm", 4, 2, rng);
    Var f = ps.add("f_bev", Tensor::randn(9, 4, rng));
    Rng wr(312);
    Tensor wsum = Tensor::randn(9, 4, wr);
    return grad_check("vss2d_scan", all_params(ps),
                      [&] { return sum_all(mul(vss2d_scan(f, p, 3, 3), constant(wsum))); });
}

GradCheckReport check_tcs() {
    Rng rng(313);
    ParamStore ps;
    TCSParams p = TCSParams::create(ps, "tcs", 3, rng);
    Var f = ps.add("f_bev", Tensor::randn(4, 3, rng));
    Rng wr(314);
    Tensor w0 = Tensor::randn(4, 3, wr), w1 = Tensor::randn(4, 3, wr), w2 = Tensor::randn(4, 3, wr);
    return grad_check("tcs", all_params(ps), [&] {
        auto grids = tcs(f, p);
        Var s = add(sum_all(mul(grids[0], constant(w0))), sum_all(mul(grids[1], constant(w1))));
        return add(s, sum_all(mul(grids[2], constant(w2))));
    });
}

GradCheckReport check_scan_kernel() {
    Rng rng(315);
    ParamStore ps;
    Var x = ps.add("x", Tensor::randn(4, 3, rng));
    Var delta = ps.add("delta", Tensor::full(4, 3, 0.6));
    Var b = ps.add("b", Tensor::randn(4, 2, rng));
    Var c = ps.add("c", Tensor::randn(4, 2, rng));
    Var a = ps.add("a", Tensor::full(3, 2, -0.8));
    Var dskip = ps.add("dskip", Tensor::randn(1, 3, rng));
    Rng wr(316);
    Tensor wsum = Tensor::randn(4, 3, wr);
    return grad_check("selective_scan", all_params(ps), [&] {
        return sum_all(mul(selective_scan(x, delta, b, c, a, dskip, {2, 0, 3, 1}, {0, 2, 4}), constant(wsum)));
    });
}

GradCheckReport check_attention_kernel() {
    Rng rng(317);
    ParamStore ps;
    Var q = ps.add("q", Tensor::randn(3, 4, rng));
    Var k = ps.add("k", Tensor::randn(5, 4, rng));
    Var v = ps.add("v", Tensor::randn(5, 4, rng));
    Rng wr(318);
    Tensor wsum = Tensor::randn(3, 4, wr);
    return grad_check("sdp_attention", all_params(ps),
                      [&] { return sum_all(mul(sdp_attention(q, k, v, 0.5), constant(wsum))); });
}

GradCheckReport check_trilinear() {
    Rng rng(319);
    ParamStore ps;
    Var x = ps.add("x", Tensor::randn(8, 3, rng));
    Rng wr(320);
    Tensor wsum = Tensor::randn(64, 3, wr);
    return grad_check("trilinear_upsample", all_params(ps),
                      [&] { return sum_all(mul(trilinear_upsample(x, 2, 2, 2, 2, 2, 2), constant(wsum))); });
}

GradCheckReport check_focal() {
    Rng rng(321);
    ParamStore ps;
    Var logits = ps.add("logits", Tensor::randn(4, 2, rng));
    Tensor target(4, 2);
    target(0, 0) = 1;
    target(1, 1) = 1;
    target(2, 0) = 0.3;  // soft target (gaussian heatmap values)
    target(3, 1) = 0.8;
    return grad_check("focal_loss", all_params(ps),
                      [&] { return focal_loss_mean(sigmoid(logits), target, 0.25, 2.0); });
}

GradCheckReport check_weighted_xent() {
    Rng rng(322);
    ParamStore ps;
    Var logits = ps.add("logits", Tensor::randn(5, 3, rng));
    std::vector<int> labels = {0, 2, 1, 2, 0};
    std::vector<double> weights = {1.0, 0.7, 1.3};
    return grad_check("softmax_xent_weighted", all_params(ps),
                      [&] { return softmax_xent_weighted(logits, labels, weights); });
}

GradCheckReport check_det_head() {
    Rng rng(323);
    ParamStore ps;
    DetHeadParams p = DetHeadParams::create(ps, "det", 4, 2, rng);
    Var qe = ps.add("queries", Tensor::randn(3, 4, rng));
    // Targets sit well off the |.| kinks of the L1 cost for every plausible
    // assignment, keeping the matching stable under the FD step.
    std::vector<Box> gt(1);
    gt[0].cx = -8.0 + 1.3 * 4.0;  // cell 1.3 of a 4 m grid cell
    gt[0].cy = -8.0 + 2.7 * 4.0;
    gt[0].length = 1.7;
    gt[0].width = 0.9;
    gt[0].yaw = 0.4;
    gt[0].height_m = 1.0;
    gt[0].cls = 1;
    return grad_check("det_head_loss", all_params(ps), [&] {
        TaskQueries q;
        q.embed = qe;
        q.pos_h = {1, 0, 3};
        q.pos_w = {2, 1, 3};
        q.pos_z = {0, 0, 0};
        DetectionOutput out = detection_head(q, p);
        return detection_loss(out, gt, 1.0, 0.25, 4.0, 4.0, 8.0).total;
    });
}

GradCheckReport check_seg_head() {
    Rng rng(324);
    ParamStore ps;
    Var f = ps.add("f_seg", Tensor::randn(9, 4, rng));
    Var qe = ps.add("queries", Tensor::randn(4, 4, rng));
    Tensor masks(9, 2);
    for (int64_t i = 0; i < 9; ++i) masks(i, i % 2) = double(i % 3 == 0);
    masks(4, 1) = 1;
    masks(7, 1) = 1;
    return grad_check("seg_head_loss", all_params(ps), [&] {
        TaskQueries q;
        q.embed = qe;
        q.pos_h = {0, 0, 2, 2};
        q.pos_w = {0, 1, 1, 2};
        q.pos_z = {0, 0, 0, 0};
        q.cls = {0, 1, 0, 1};
        q.band = {0, 0, 1, 1};
        Var logits = segmentation_head(q, f, 2, 3, 3, 2);
        return segmentation_loss(logits, masks);
    });
}

GradCheckReport check_occ_head(const std::string& variant) {
    Rng rng(variant == "transformer" ? 325 : 326);
    ParamStore ps;
    OccHeadParams p = OccHeadParams::create(ps, "occ", 4, 3, variant, rng);
    Var def_e = ps.add("def_embed", Tensor::randn(3, 4, rng));
    Var unc_e = ps.add("unc_embed", Tensor::randn(5, 4, rng));
    std::vector<int> labels(2 * 2 * 2 * 2);  // factors (1, 1, 2)
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = int(i % 4);
    return grad_check("occ_head_loss_" + variant, all_params(ps), [&] {
        TaskQueries def_q, unc_q;
        def_q.embed = def_e;
        def_q.pos_h = {0, 1, 1};
        def_q.pos_w = {0, 0, 1};
        def_q.pos_z = {1, 0, 0};
        unc_q.embed = unc_e;
        unc_q.pos_h = {0, 0, 0, 1, 1};
        unc_q.pos_w = {0, 1, 1, 0, 1};
        unc_q.pos_z = {0, 0, 1, 1, 1};
        Var logits = occupancy_head(def_q, unc_q, p, 2, 2, 2, 1, 1, 2);
        return occupancy_loss(logits, labels, 3);
    });
}

GradCheckReport check_decoder(const std::string& variant) {
    Rng rng(variant == "transformer" ? 327 : 328);
    ParamStore ps;
    DecoderParams p = DecoderParams::create(ps, "decoder", variant, 1, 4, 2, 2, 2, rng);
    Var f = ps.add("f_bev", Tensor::randn(9, 4, rng));
    Var det_e = ps.add("det_embed", Tensor::randn(2, 4, rng));
    Var seg_e = ps.add("seg_embed", Tensor::randn(2, 4, rng));
    Var occ_e = ps.add("occ_embed", Tensor::randn(2, 4, rng));
    Rng wr(329);
    Tensor wd = Tensor::randn(2, 4, wr), wsg = Tensor::randn(2, 4, wr), wo = Tensor::randn(2, 4, wr);
    Tensor wf = Tensor::randn(9, 4, wr);
    return grad_check("decoder_" + variant, all_params(ps), [&] {
        TaskQueries det, seg, occ;
        det.embed = det_e;
        det.pos_h = {0, 2};
        det.pos_w = {1, 2};
        det.pos_z = {0, 0};
        seg.embed = seg_e;
        seg.pos_h = {0, 2};
        seg.pos_w = {0, 1};
        seg.pos_z = {0, 0};
        occ.embed = occ_e;
        occ.pos_h = {1, 2};
        occ.pos_w = {0, 2};
        occ.pos_z = {0, 1};
        DecoderOut out = decoder_forward(det, seg, occ, f, p, 3, 3);
        Var s = add(sum_all(mul(out.det.embed, constant(wd))), sum_all(mul(out.seg.embed, constant(wsg))));
        s = add(s, sum_all(mul(out.occ.embed, constant(wo))));
        return add(s, sum_all(mul(out.f_task[0], constant(wf))));
    });
}

// End-to-end: the whole model graph (fusion through weighted total loss) on
// a micro scene. Entries are strided so the check stays fast; every tensor
// still contributes.
GradCheckReport check_model() {
    SceneSpec spec;
    spec.grid_h = spec.grid_w = 4;
    spec.grid_z = 1;
    spec.out_h = spec.out_w = 8;
    spec.out_z = 4;
    spec.n_det_classes = 2;
    spec.n_seg_classes = 2;
    spec.n_occ_classes = 4;
    spec.channels = 8;
    spec.seed = 21;
    ModelConfig cfg;
    cfg.variant = "mamba";
    cfg.layers = 1;
    cfg.n_d = 4;
    cfg.s_blocks = 2;
    cfg.heads = 2;
    cfg.points = 2;
    cfg.n_state = 2;
    Model m = Model::create(spec, cfg, 330);
    TrainSample s = make_sample(spec, 331);
    return grad_check("model_end_to_end", all_params(m.params),
                      [&] { return model_forward(m, s, true).total; }, 1e-5, 1e-4, 1e-6,
                      /*max_entries_per_param=*/2);
}

using CheckFn = std::function<GradCheckReport()>;

const std::vector<std::pair<std::string, CheckFn>>& suite() {
    static const std::vector<std::pair<std::string, CheckFn>> s = {
        {"mafi", check_mafi},
        {"confidence", check_confidence},
        {"positions", check_positions},
        {"query_init", check_query_init},
        {"deform_self", check_deform_self},
        {"deform_cross", check_deform_cross},
        {"vss2d", check_vss2d},
        {"tcs", check_tcs},
        {"scan_kernel", check_scan_kernel},
        {"attention_kernel", check_attention_kernel},
        {"trilinear", check_trilinear},
        {"focal", check_focal},
        {"weighted_xent", check_weighted_xent},
        {"det_head", check_det_head},
        {"seg_head", check_seg_head},
        {"occ_head_transformer", [] { return check_occ_head("transformer"); }},
        {"occ_head_mamba", [] { return check_occ_head("mamba"); }},
        {"decoder_transformer", [] { return check_decoder("transformer"); }},
        {"decoder_mamba", [] { return check_decoder("mamba"); }},
        {"model", check_model},
    };
    return s;
}

}  // namespace

std::vector<std::string> gradient_suite_modules() {
    std::vector<std::string> names;
    for (const auto& [name, fn] : suite()) names.push_back(name);
    return names;
}

std::vector<GradCheckReport> run_gradient_suite(const std::string& module) {
    std::vector<GradCheckReport> reports;
    for (const auto& [name, fn] : suite())
        if (module.empty() || module == name) reports.push_back(fn());
    if (reports.empty()) throw ConfigError("unknown verify module '" + module + "'");
    return reports;
}

}  // namespace bevmt
