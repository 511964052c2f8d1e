#include "bevmt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bevmt/container.hpp"
#include "bevmt/metrics.hpp"

namespace fs = std::filesystem;

namespace bevmt {

using nlohmann::json;

std::vector<TrainSample> build_dataset(const SceneSpec& spec, int64_t n) {
    if (n < 1) throw ConfigError("dataset size must be at least 1");
    std::vector<TrainSample> out;
    out.reserve(size_t(n));
    for (int64_t i = 0; i < n; ++i) out.push_back(make_sample(spec, derive_seed(spec.seed, uint64_t(i))));
    return out;
}

EvalResult evaluate_model(const Model& m, const std::vector<TrainSample>& data) {
    if (data.empty()) throw ContractViolation("evaluate_model: empty dataset");
    std::vector<std::vector<DecodedBox>> det_pred;
    std::vector<std::vector<Box>> det_gt;
    std::vector<Tensor> seg_logits, seg_masks;
    std::vector<std::vector<int>> occ_pred, occ_gt;
    EvalResult r;
    const double inv_n = 1.0 / double(data.size());
    for (const TrainSample& s : data) {
        ForwardOut fo = model_forward(m, s, /*with_loss=*/true);
        r.total += inv_n * fo.total.val()(0, 0);
        r.l_det += inv_n * fo.l_det.val()(0, 0);
        r.l_seg += inv_n * fo.l_seg.val()(0, 0);
        r.l_occ += inv_n * fo.l_occ.val()(0, 0);
        if (m.cfg.task_det) {
            det_pred.push_back(fo.boxes);
            det_gt.push_back(s.scene.boxes);
        }
        if (m.cfg.task_seg) {
            seg_logits.push_back(fo.seg_logits.val());
            seg_masks.push_back(s.targets.seg_masks_grid);
        }
        if (m.cfg.task_occ) {
            occ_pred.push_back(occ_argmax(fo.occ_logits.val()));
            occ_gt.push_back(s.targets.occ_labels);
        }
    }
    if (m.cfg.task_det) r.map = simplified_map(det_pred, det_gt, m.spec.n_det_classes);
    if (m.cfg.task_seg) r.seg_iou = seg_mean_iou(seg_logits, seg_masks);
    if (m.cfg.task_occ) r.occ_miou = occ_mean_iou(occ_pred, occ_gt, m.spec.n_occ_classes);
    return r;
}

json MetricsRecord::to_json() const {
    json j;
    j["kind"] = kind;
    j["step"] = step;
    if (kind == "train") {
        j["lr"] = lr;
        j["total"] = total;
        j["l_det"] = l_det;
        j["l_seg"] = l_seg;
        j["l_occ"] = l_occ;
    } else if (kind == "eval") {
        j["total"] = total;
        j["l_det"] = l_det;
        j["l_seg"] = l_seg;
        j["l_occ"] = l_occ;
        j["map"] = map;
        j["seg_iou"] = seg_iou;
        j["occ_miou"] = occ_miou;
    } else {
        j["total"] = total;
    }
    return j;
}

void save_checkpoint(const std::string& path, const Model& m, const RunConfig& cfg, int64_t step) {
    Container c;
    c.meta["kind"] = "checkpoint";
    c.meta["step"] = step;
    c.meta["config"] = cfg.to_json();
    for (const auto& [name, v] : m.params.items()) c.put_f64("param/" + name, v.val());
    c.save(path);
}

Model load_checkpoint(const std::string& path, RunConfig* cfg_out, int64_t* step_out) {
    Container c = Container::load(path);
    if (c.meta.value("kind", std::string()) != "checkpoint")
        throw ConfigError("'" + path + "' is not a checkpoint file");
    RunConfig cfg;
    int64_t step = 0;
    try {
        cfg = RunConfig::from_json(c.meta.at("config"));
        step = c.meta.at("step").get<int64_t>();
    } catch (const json::exception& e) {
        throw ConfigError("checkpoint '" + path + "' has a malformed header: " + e.what());
    }
    cfg.validate();
    Model m = Model::create(cfg.scene, cfg.model, cfg.seed);
    size_t used = 0;
    for (auto [name, v] : m.params.items()) {
        Tensor t = c.f64("param/" + name);
        if (!t.same_shape(v.val()))
            throw ConfigError("checkpoint array 'param/" + name + "' has shape " +
                              std::to_string(t.rows) + "x" + std::to_string(t.cols) +
                              ", model expects " + std::to_string(v.val().rows) + "x" +
                              std::to_string(v.val().cols));
        v.value_mut() = t;
        ++used;
    }
    if (used != c.names().size())
        throw ConfigError("checkpoint '" + path + "' carries arrays the model does not own");
    if (cfg_out) *cfg_out = cfg;
    if (step_out) *step_out = step;
    return m;
}

// ---------------------------------------------------------------------------
// Sample files

namespace {

std::string sample_filename(int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "sample_%04lld.bvmt", static_cast<long long>(i));
    return buf;
}

std::string ckpt_filename(int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%06lld.bvmt", static_cast<long long>(step));
    return buf;
}

}  // namespace

void save_dataset(const std::string& dir, const SceneSpec& spec, int64_t n) {
    if (n < 1) throw ConfigError("dataset size must be at least 1");
    spec.validate();
    fs::create_directories(dir);
    for (int64_t i = 0; i < n; ++i) {
        uint64_t seed = derive_seed(spec.seed, uint64_t(i));
        TrainSample s = make_sample(spec, seed);
        Container c;
        c.meta["kind"] = "sample";
        c.meta["index"] = i;
        c.meta["seed"] = seed;  // feature noise stream; features are re-rendered on load
        c.meta["scene"] = scene_to_json(spec);
        Tensor boxes(int64_t(s.scene.boxes.size()), 7);
        for (size_t r = 0; r < s.scene.boxes.size(); ++r) {
            const Box& b = s.scene.boxes[r];
            boxes(int64_t(r), 0) = b.cx;
            boxes(int64_t(r), 1) = b.cy;
            boxes(int64_t(r), 2) = b.length;
            boxes(int64_t(r), 3) = b.width;
            boxes(int64_t(r), 4) = b.yaw;
            boxes(int64_t(r), 5) = b.height_m;
            boxes(int64_t(r), 6) = double(b.cls);
        }
        c.put_f64("boxes", boxes);
        c.put_f64("map_masks", s.scene.map_masks);
        c.put_i64("occ_labels", std::vector<int64_t>(s.scene.occ_labels.begin(), s.scene.occ_labels.end()));
        c.put_u8("lidar_mask", s.scene.lidar_mask);
        c.save((fs::path(dir) / sample_filename(i)).string());
    }
}

std::vector<TrainSample> load_dataset(const std::string& dir, SceneSpec* spec_out) {
    if (!fs::is_directory(dir)) throw ConfigError("'" + dir + "' is not a directory");
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".bvmt") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError("no .bvmt sample files in '" + dir + "'");

    std::vector<TrainSample> out;
    SceneSpec base;
    bool have_base = false;
    for (const std::string& path : files) {
        Container c = Container::load(path);
        if (c.meta.value("kind", std::string()) != "sample")
            throw ConfigError("'" + path + "' is not a sample file");
        SceneSpec spec;
        uint64_t seed = 0;
        try {
            spec = scene_from_json(c.meta.at("scene"));
            seed = c.meta.at("seed").get<uint64_t>();
        } catch (const json::exception& e) {
            throw ConfigError("sample '" + path + "' has a malformed header: " + e.what());
        }
        spec.validate();
        if (!have_base) {
            base = spec;
            have_base = true;
        } else if (!scene_shapes_match(base, spec)) {
            throw ConfigError("sample '" + path + "' disagrees with the rest of the dataset");
        }

        SceneSample smp;
        Tensor boxes = c.f64("boxes");
        if (boxes.cols != 7 && boxes.rows != 0)
            throw ConfigError("sample '" + path + "': boxes array must have 7 columns");
        for (int64_t r = 0; r < boxes.rows; ++r) {
            Box b;
            b.cx = boxes(r, 0);
            b.cy = boxes(r, 1);
            b.length = boxes(r, 2);
            b.width = boxes(r, 3);
            b.yaw = boxes(r, 4);
            b.height_m = boxes(r, 5);
            b.cls = int(std::llround(boxes(r, 6)));
            if (b.cls < 0 || b.cls >= int(spec.n_det_classes))
                throw ConfigError("sample '" + path + "': box class out of range");
            smp.boxes.push_back(b);
        }
        smp.map_masks = c.f64("map_masks");
        if (smp.map_masks.rows != spec.out_h * spec.out_w || smp.map_masks.cols != spec.n_seg_classes)
            throw ConfigError("sample '" + path + "': map_masks shape disagrees with the scene spec");
        std::vector<int64_t> occ = c.i64("occ_labels");
        if (int64_t(occ.size()) != spec.out_voxels())
            throw ConfigError("sample '" + path + "': occ_labels size disagrees with the scene spec");
        smp.occ_labels.reserve(occ.size());
        for (int64_t v : occ) {
            if (v < 0 || v > spec.n_occ_classes)
                throw ConfigError("sample '" + path + "': occupancy label out of range");
            smp.occ_labels.push_back(int(v));
        }
        smp.lidar_mask = c.u8(std::string("lidar_mask"));
        if (int64_t(smp.lidar_mask.size()) != spec.voxels())
            throw ConfigError("sample '" + path + "': lidar_mask size disagrees with the scene spec");

        SceneSpec rspec = spec;
        rspec.seed = seed;
        TrainSample ts;
        ts.scene = std::move(smp);
        ts.feats = render_modality_features(ts.scene, rspec);
        ts.targets = make_targets(ts.scene, rspec);
        out.push_back(std::move(ts));
    }
    if (spec_out) *spec_out = base;
    return out;
}

EvalResult evaluate_checkpoint(const std::string& ckpt_path, const std::string& data_dir) {
    RunConfig cfg;
    Model m = load_checkpoint(ckpt_path, &cfg);
    SceneSpec dspec;
    std::vector<TrainSample> data = load_dataset(data_dir, &dspec);
    if (!scene_shapes_match(cfg.scene, dspec))
        throw ConfigError("checkpoint and dataset describe different scene shapes");
    return evaluate_model(m, data);
}

// ---------------------------------------------------------------------------
// Training loop

TrainOutcome train(const RunConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);

    std::vector<TrainSample> data = build_dataset(cfg.scene, cfg.n_scenes);
    Model m = Model::create(cfg.scene, cfg.model, cfg.seed);
    AdamW opt(0.9, 0.999, 1e-8, cfg.weight_decay);

    TrainOutcome out;
    out.metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    std::ofstream log(out.metrics_path, std::ios::trunc);
    if (!log) throw ConfigError("cannot open metrics log '" + out.metrics_path + "'");
    auto emit = [&](const MetricsRecord& r) {
        log << r.to_json().dump() << "\n";
        log.flush();
        out.records.push_back(r);
    };
    auto write_ckpt = [&](int64_t step) {
        std::string path = (fs::path(cfg.out_dir) / ckpt_filename(step)).string();
        save_checkpoint(path, m, cfg, step);
        out.checkpoint_path = path;
    };
    auto emit_eval = [&](int64_t step) {
        EvalResult e = evaluate_model(m, data);
        MetricsRecord r;
        r.kind = "eval";
        r.step = step;
        r.total = e.total;
        r.l_det = e.l_det;
        r.l_seg = e.l_seg;
        r.l_occ = e.l_occ;
        r.map = e.map;
        r.seg_iou = e.seg_iou;
        r.occ_miou = e.occ_miou;
        emit(r);
        return e;
    };

    write_ckpt(0);
    if (cfg.steps == 0) {
        out.final_eval = emit_eval(0);
        out.steps_done = 0;
        return out;
    }

    // Staged schedule: occupancy joins once the warm phase is over.
    int64_t stage_until = 0;
    if (cfg.staged_fraction > 0.0 && cfg.model.task_occ)
        stage_until = int64_t(std::llround(cfg.staged_fraction * double(cfg.steps)));
    if (stage_until > 0) m.cfg.task_occ = false;

    for (int64_t s = 0; s < cfg.steps; ++s) {
        if (stage_until > 0 && s >= stage_until) {
            m.cfg.task_occ = true;
            stage_until = 0;
        }
        double lr = one_cycle_lr(s, cfg.steps, cfg.peak_lr, cfg.warmup_frac);
        MetricsRecord rec;
        rec.step = s;
        rec.lr = lr;
        try {
            m.params.zero_grads();
            Var batch_loss;
            for (int64_t k = 0; k < cfg.batch; ++k) {
                const TrainSample& sample = data[size_t((s * cfg.batch + k) % int64_t(data.size()))];
                ForwardOut fo = model_forward(m, sample, /*with_loss=*/true);
                batch_loss = k == 0 ? fo.total : add(batch_loss, fo.total);
                rec.total += fo.total.val()(0, 0) / double(cfg.batch);
                rec.l_det += fo.l_det.val()(0, 0) / double(cfg.batch);
                rec.l_seg += fo.l_seg.val()(0, 0) / double(cfg.batch);
                rec.l_occ += fo.l_occ.val()(0, 0) / double(cfg.batch);
            }
            if (!std::isfinite(rec.total)) throw NumericError("training loss is not finite");
            if (cfg.batch > 1) batch_loss = scale(batch_loss, 1.0 / double(cfg.batch));
            run_backward(batch_loss);
            opt.step(m.params, lr);
        } catch (const NumericError& e) {
            std::fprintf(stderr, "step %lld: %s\n", static_cast<long long>(s), e.what());
            MetricsRecord abort;
            abort.kind = "abort";
            abort.step = s;
            abort.total = rec.total;
            emit(abort);
            out.aborted = true;
            out.steps_done = s;
            return out;  // last good checkpoint stays in place
        }
        emit(rec);
        int64_t done = s + 1;
        if (done % cfg.checkpoint_every == 0 && done != cfg.steps) {
            write_ckpt(done);
            emit_eval(done);
        }
    }

    m.cfg.task_occ = cfg.model.task_occ;
    write_ckpt(cfg.steps);
    out.final_eval = emit_eval(cfg.steps);
    out.steps_done = cfg.steps;
    return out;
}

// ---------------------------------------------------------------------------
// Ablations

namespace {

EvalResult mean_of(const std::vector<EvalResult>& xs) {
    EvalResult m;
    if (xs.empty()) return m;
    const double inv = 1.0 / double(xs.size());
    for (const EvalResult& x : xs) {
        m.map += inv * x.map;
        m.seg_iou += inv * x.seg_iou;
        m.occ_miou += inv * x.occ_miou;
        m.total += inv * x.total;
        m.l_det += inv * x.l_det;
        m.l_seg += inv * x.l_seg;
        m.l_occ += inv * x.l_occ;
    }
    return m;
}

struct Arm {
    std::string name;
    RunConfig cfg;
};

RunConfig with_tasks(RunConfig cfg, bool det, bool seg, bool occ) {
    cfg.model.task_det = det;
    cfg.model.task_seg = seg;
    cfg.model.task_occ = occ;
    return cfg;
}

// Trains every arm under every seed index (shared data/init seeds per
// index) and fills per-seed + mean rows.
std::vector<AblationRow> run_arms(const std::vector<Arm>& arms, const RunConfig& base, int n_seeds,
                                  const std::string& suite) {
    std::vector<AblationRow> rows(arms.size());
    for (size_t a = 0; a < arms.size(); ++a) rows[a].arm = arms[a].name;
    for (int i = 0; i < n_seeds; ++i) {
        for (size_t a = 0; a < arms.size(); ++a) {
            RunConfig cfg = arms[a].cfg;
            cfg.scene.seed = base.scene.seed + uint64_t(i);
            cfg.seed = base.seed + uint64_t(i);
            cfg.out_dir = (fs::path(base.out_dir) / suite / (arms[a].name + "_seed" + std::to_string(i))).string();
            TrainOutcome t = train(cfg);
            if (t.aborted)
                throw NumericError("ablation arm '" + arms[a].name + "' (seed index " +
                                   std::to_string(i) + ") aborted on a non-finite loss");
            rows[a].per_seed.push_back(t.final_eval);
        }
    }
    for (AblationRow& r : rows) r.mean = mean_of(r.per_seed);
    return rows;
}

json result_json(const EvalResult& e) {
    return json{{"map", e.map},   {"seg_iou", e.seg_iou}, {"occ_miou", e.occ_miou}, {"total", e.total},
                {"l_det", e.l_det}, {"l_seg", e.l_seg},   {"l_occ", e.l_occ}};
}

double metric_sum(const EvalResult& e) { return e.map + e.seg_iou + e.occ_miou; }

}  // namespace

std::string AblationTable::to_text() const {
    std::ostringstream os;
    os << "suite: " << suite << "\n";
    char line[160];
    std::snprintf(line, sizeof(line), "%-24s %8s %8s %8s", "arm", "mAP", "segIoU", "occmIoU");
    os << line;
    bool show_params = false;
    for (const AblationRow& r : rows) show_params = show_params || r.decoder_params > 0;
    if (show_params) os << "   decoder_params";
    os << "\n";
    for (const AblationRow& r : rows) {
        std::snprintf(line, sizeof(line), "%-24s %8.4f %8.4f %8.4f", r.arm.c_str(), r.mean.map,
                      r.mean.seg_iou, r.mean.occ_miou);
        os << line;
        if (show_params) os << "   " << r.decoder_params;
        os << "\n";
    }
    if (!summary.empty()) os << "summary: " << summary.dump() << "\n";
    return os.str();
}

json AblationTable::to_json() const {
    json j;
    j["suite"] = suite;
    j["rows"] = json::array();
    for (const AblationRow& r : rows) {
        json row;
        row["arm"] = r.arm;
        row["mean"] = result_json(r.mean);
        row["per_seed"] = json::array();
        for (const EvalResult& e : r.per_seed) row["per_seed"].push_back(result_json(e));
        if (r.decoder_params > 0) row["decoder_params"] = r.decoder_params;
        j["rows"].push_back(row);
    }
    j["summary"] = summary;
    return j;
}

AblationTable run_ablation(const std::string& suite, const RunConfig& base, int n_seeds) {
    if (n_seeds < 1) throw ConfigError("ablation needs at least one seed");
    base.validate();
    AblationTable table;
    table.suite = suite;

    auto find_row = [&](const std::string& name) -> const AblationRow& {
        for (const AblationRow& r : table.rows)
            if (r.arm == name) return r;
        throw ContractViolation("ablation row '" + name + "' missing");
    };

    if (suite == "mtl_vs_single") {
        RunConfig joint_plain = with_tasks(base, true, true, true);
        joint_plain.model.use_mafi = false;
        joint_plain.model.use_tcs = false;
        std::vector<Arm> arms = {
            {"single_det", with_tasks(base, true, false, false)},
            {"single_seg", with_tasks(base, false, true, false)},
            {"single_occ", with_tasks(base, false, false, true)},
            {"joint_plain", joint_plain},
            {"joint_full", with_tasks(base, true, true, true)},
        };
        table.rows = run_arms(arms, base, n_seeds, suite);
        const EvalResult &sd = find_row("single_det").mean, &ss = find_row("single_seg").mean,
                         &so = find_row("single_occ").mean, &jp = find_row("joint_plain").mean,
                         &jf = find_row("joint_full").mean;
        double delta_plain = (jp.map - sd.map) + (jp.seg_iou - ss.seg_iou) + (jp.occ_miou - so.occ_miou);
        double delta_full = (jf.map - sd.map) + (jf.seg_iou - ss.seg_iou) + (jf.occ_miou - so.occ_miou);
        table.summary = {{"delta_mtl_plain", delta_plain},
                         {"delta_mtl_full", delta_full},
                         {"full_beats_plain", delta_full > delta_plain},
                         {"occ_joint_minus_single", jf.occ_miou - so.occ_miou}};
    } else if (suite == "mafi" || suite == "tcs") {
        RunConfig off = base, on = base;
        if (suite == "mafi") {
            off.model.use_mafi = false;
            on.model.use_mafi = true;
        } else {
            off.model.use_tcs = false;
            on.model.use_tcs = true;
        }
        std::vector<Arm> arms = {{suite + "_off", off}, {suite + "_on", on}};
        table.rows = run_arms(arms, base, n_seeds, suite);
        double s_off = metric_sum(find_row(suite + "_off").mean);
        double s_on = metric_sum(find_row(suite + "_on").mean);
        table.summary = {{"metric_sum_off", s_off}, {"metric_sum_on", s_on}, {"gain", s_on - s_off}};
    } else if (suite == "seg_layout") {
        std::vector<Arm> arms;
        for (int64_t s : {int64_t(1), int64_t(4), int64_t(8)}) {
            RunConfig cfg = with_tasks(base, false, true, false);
            cfg.model.s_blocks = s;
            arms.push_back({"s" + std::to_string(s), cfg});
        }
        table.rows = run_arms(arms, base, n_seeds, suite);
        table.summary = {{"iou_s1", find_row("s1").mean.seg_iou},
                         {"iou_s4", find_row("s4").mean.seg_iou},
                         {"iou_s8", find_row("s8").mean.seg_iou}};
    } else if (suite == "variant_params") {
        for (const std::string& variant : {std::string("transformer"), std::string("mamba")}) {
            RunConfig cfg = base;
            cfg.model.variant = variant;
            Model m = Model::create(cfg.scene, cfg.model, cfg.seed);
            AblationRow row;
            row.arm = variant;
            row.decoder_params = m.params.params_with_prefix("decoder");
            table.rows.push_back(row);
        }
        int64_t tp = table.rows[0].decoder_params, mp = table.rows[1].decoder_params;
        table.summary = {{"transformer_params", tp}, {"mamba_params", mp}, {"mamba_smaller", mp < tp}};
    } else {
        throw ConfigError("unknown ablation suite '" + suite +
                          "' (expected mtl_vs_single, mafi, tcs, seg_layout or variant_params)");
    }
    return table;
}

}  // namespace bevmt
