#include "bevmt/model.hpp"

namespace bevmt {

void ModelConfig::validate(const SceneSpec& spec) const {
    if (variant != "transformer" && variant != "mamba")
        throw ConfigError("model.variant must be 'transformer' or 'mamba', got '" + variant + "'");
    if (layers < 0) throw ConfigError("model.layers must be >= 0");
    if (heads < 1 || points < 1 || n_state < 1) throw ConfigError("model.heads/points/n_state must be >= 1");
    if (spec.channels % heads != 0) throw ConfigError("model.heads must divide the channel count");
    if (n_d < 1 || n_d > spec.bev_cells() * spec.n_det_classes)
        throw ConfigError("model.n_d must lie in [1, H*W*n_det_classes]");
    if (s_blocks < 1 || s_blocks > spec.grid_h) throw ConfigError("model.s_blocks must lie in [1, grid_h]");
    if (!task_det && !task_seg && !task_occ) throw ConfigError("at least one task must be enabled");
    if (lambda_det < 0 || lambda_seg < 0 || lambda_occ < 0 || lambda_cls < 0 || lambda_reg < 0)
        throw ConfigError("loss weights must be non-negative");
}

TrainSample make_sample(SceneSpec spec, uint64_t seed) {
    spec.seed = seed;
    TrainSample s;
    s.scene = generate_scene(spec);
    s.feats = render_modality_features(s.scene, spec);
    s.targets = make_targets(s.scene, spec);
    return s;
}

Model Model::create(const SceneSpec& spec, const ModelConfig& cfg, uint64_t seed) {
    spec.validate();
    cfg.validate(spec);
    Model m;
    m.spec = spec;
    m.cfg = cfg;
    Rng rng(seed);
    m.mafi = MafiParams::create(m.params, "mafi", spec.channels, rng, cfg.use_mafi);
    m.qinit = QueryInitParams::create(m.params, "qinit", spec.n_det_classes, spec.n_seg_classes, spec.channels, rng);
    m.decoder = DecoderParams::create(m.params, "decoder", cfg.variant, cfg.layers, spec.channels, cfg.heads,
                                      cfg.points, cfg.n_state, rng);
    m.det_head = DetHeadParams::create(m.params, "det_head", spec.channels, spec.n_det_classes, rng);
    m.occ_head = OccHeadParams::create(m.params, "occ_head", spec.channels, spec.n_occ_classes, cfg.variant, rng);
    return m;
}

ForwardOut model_forward(const Model& m, const TrainSample& s, bool with_loss) {
    const SceneSpec& sp = m.spec;
    const int64_t h = sp.grid_h, w = sp.grid_w;

    Var f_lidar = constant(s.feats.f_lidar);
    Var f_cam = constant(s.feats.f_cam);
    Var f_bev = mafi_fuse(f_lidar, f_cam, m.mafi, h, w);  // gates off reduces to the fusion conv

    auto [det_conf, seg_conf] = build_confidence_maps(f_bev, m.qinit);

    TaskQueries det_q, seg_q, occ_def, occ_unc;
    if (m.cfg.task_det) det_q = init_detection_queries(f_bev, det_conf, m.cfg.n_d, h, w, m.qinit);
    if (m.cfg.task_seg) seg_q = init_segmentation_queries(f_bev, seg_conf, m.cfg.s_blocks, h, w, m.qinit);
    if (m.cfg.task_occ)
        std::tie(occ_def, occ_unc) = init_occupancy_queries(f_bev, s.feats.lidar_mask, h, w, sp.grid_z, m.qinit);

    DecoderOut dec = decoder_forward(det_q, seg_q, occ_def, f_bev, m.decoder, h, w, m.cfg.use_tcs);

    ForwardOut out;
    out.l_det = constant(Tensor::zeros(1, 1));
    out.l_seg = constant(Tensor::zeros(1, 1));
    out.l_occ = constant(Tensor::zeros(1, 1));

    if (m.cfg.task_det) {
        DetectionOutput head = detection_head(dec.det, m.det_head);
        out.boxes = decode_boxes(head, sp.cell_h_m(), sp.cell_w_m(), sp.extent_m);
        if (with_loss) {
            out.det_parts = detection_loss(head, s.scene.boxes, m.cfg.lambda_cls, m.cfg.lambda_reg, sp.cell_h_m(),
                                           sp.cell_w_m(), sp.extent_m);
            // the center-heatmap supervision trains detection's query selection
            out.l_det = add(out.det_parts.total, focal_loss_mean(det_conf, s.targets.heatmaps, 0.25, 2.0));
        }
    }
    if (m.cfg.task_seg) {
        out.seg_logits = segmentation_head(dec.seg, dec.f_task[1], m.cfg.s_blocks, h, w, sp.n_seg_classes);
        if (with_loss)
            out.l_seg = add(segmentation_loss(out.seg_logits, s.targets.seg_masks_grid),
                            focal_loss_mean(seg_conf, s.targets.seg_masks_grid, 0.25, 2.0));
    }
    if (m.cfg.task_occ) {
        out.occ_logits = occupancy_head(dec.occ, occ_unc, m.occ_head, h, w, sp.grid_z, sp.out_h / sp.grid_h,
                                        sp.out_w / sp.grid_w, sp.out_z / sp.grid_z);
        if (with_loss) out.l_occ = occupancy_loss(out.occ_logits, s.targets.occ_labels, sp.n_occ_classes);
    }
    if (with_loss)
        out.total = total_loss(out.l_det, out.l_seg, out.l_occ, m.cfg.lambda_det, m.cfg.lambda_seg, m.cfg.lambda_occ);
    return out;
}

}  // namespace bevmt
