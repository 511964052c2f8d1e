#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bevmt/container.hpp"
#include "bevmt/metrics.hpp"
#include "bevmt/train.hpp"

using namespace bevmt;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory per test case; never reused across runs.
fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("bevmt_harness_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// Small-but-complete run configuration: every module is live, the step is
// cheap (4x4 grid, 8 channels, 1 layer).
RunConfig micro_config() {
    RunConfig cfg;
    cfg.scene.grid_h = cfg.scene.grid_w = 4;
    cfg.scene.grid_z = 1;
    cfg.scene.out_h = cfg.scene.out_w = 8;
    cfg.scene.out_z = 4;
    cfg.scene.n_det_classes = 2;
    cfg.scene.n_seg_classes = 2;
    cfg.scene.n_occ_classes = 4;
    cfg.scene.channels = 8;
    cfg.scene.seed = 5;
    cfg.model.layers = 1;
    cfg.model.n_d = 8;  // scenes carry up to 6 boxes
    cfg.model.s_blocks = 2;
    cfg.model.heads = 2;
    cfg.model.points = 2;
    cfg.model.n_state = 2;
    cfg.model.variant = "mamba";
    cfg.steps = 6;
    cfg.batch = 1;
    cfg.n_scenes = 2;
    cfg.checkpoint_every = 3;
    cfg.seed = 11;
    return cfg;
}

DecodedBox pred_at(double cx, double cy, int cls, double score) {
    DecodedBox d;
    d.box.cx = cx;
    d.box.cy = cy;
    d.box.length = d.box.width = 1.0;
    d.box.cls = cls;
    d.score = score;
    return d;
}

Box gt_at(double cx, double cy, int cls) {
    Box b;
    b.cx = cx;
    b.cy = cy;
    b.length = b.width = 1.0;
    b.cls = cls;
    return b;
}

}  // namespace

// ===================================================================== config

TEST_CASE("config text parses sections, comments and every field") {
    const char* text =
        "# full config\n"
        "[scene]\n"
        "grid_h = 4\ngrid_w = 4\ngrid_z = 1\nout_h = 8\nout_w = 8\nout_z = 4\n"
        "extent_m = 4.0\nn_det_classes = 2\nn_seg_classes = 2\nn_occ_classes = 4\n"
        "channels = 8\nnoise_amp = 0.05   # trailing comment\nseed = 3\n"
        "[model]\n"
        "variant = mamba\nlayers = 1\nn_d = 4\ns_blocks = 2\nheads = 2\npoints = 2\nn_state = 2\n"
        "use_mafi = false\nuse_tcs = true\ntask_det = true\ntask_seg = false\ntask_occ = true\n"
        "[loss]\n"
        "lambda_det = 2.0\nlambda_seg = 0.5\nlambda_occ = 1.5\nlambda_cls = 1.0\nlambda_reg = 0.3\n"
        "[optim]\n"
        "peak_lr = 0.001\nweight_decay = 0.02\nwarmup_frac = 0.2\n"
        "[train]\n"
        "steps = 12\nbatch = 2\nn_scenes = 3\ncheckpoint_every = 6\nstaged_fraction = 0.25\n"
        "seed = 9\nout_dir = /tmp/x\n";
    RunConfig cfg = RunConfig::from_text(text);
    CHECK(cfg.scene.grid_h == 4);
    CHECK(cfg.scene.extent_m == 4.0);
    CHECK(cfg.scene.noise_amp == 0.05);
    CHECK(cfg.model.variant == "mamba");
    CHECK(cfg.model.use_mafi == false);
    CHECK(cfg.model.task_seg == false);
    CHECK(cfg.model.lambda_det == 2.0);
    CHECK(cfg.model.lambda_reg == 0.3);
    CHECK(cfg.peak_lr == 0.001);
    CHECK(cfg.warmup_frac == 0.2);
    CHECK(cfg.steps == 12);
    CHECK(cfg.staged_fraction == 0.25);
    CHECK(cfg.seed == 9);
    CHECK(cfg.out_dir == "/tmp/x");
    cfg.validate();
}

TEST_CASE("config rejects unknown keys, bad values and malformed lines") {
    CHECK_THROWS_AS(RunConfig::from_text("[scene]\nnope = 3\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_text("[nope]\ngrid_h = 3\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_text("grid_h = 3\n"), ConfigError);  // before any section
    CHECK_THROWS_AS(RunConfig::from_text("[scene]\ngrid_h = abc\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_text("[scene]\ngrid_h\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_text("[model]\nuse_mafi = maybe\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_text("[model]\nvariant = lstm\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_text("[scene\ngrid_h = 3\n"), ConfigError);
}

TEST_CASE("config overrides follow section.key=value") {
    RunConfig cfg;
    cfg.apply_override("train.steps=42");
    cfg.apply_override(" model.variant = mamba ");
    cfg.apply_override("loss.lambda_occ=0.5");
    CHECK(cfg.steps == 42);
    CHECK(cfg.model.variant == "mamba");
    CHECK(cfg.model.lambda_occ == 0.5);
    CHECK_THROWS_AS(cfg.apply_override("steps=42"), ConfigError);
    CHECK_THROWS_AS(cfg.apply_override("train.steps"), ConfigError);
    CHECK_THROWS_AS(cfg.apply_override("train.nope=1"), ConfigError);
}

TEST_CASE("config validation enforces run invariants") {
    RunConfig bad = micro_config();
    bad.peak_lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = micro_config();
    bad.staged_fraction = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = micro_config();
    bad.batch = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = micro_config();
    bad.scene.out_h = 9;  // scene invariant surfaces through validate
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = micro_config();
    bad.model.n_d = 0;  // model invariant surfaces through validate
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config json snapshot round-trips and excludes out_dir") {
    RunConfig cfg = micro_config();
    cfg.model.lambda_reg = 0.125;
    cfg.out_dir = "/tmp/somewhere_specific";
    nlohmann::json j = cfg.to_json();
    CHECK(!j["train"].contains("out_dir"));
    RunConfig back = RunConfig::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(back.scene.grid_h == cfg.scene.grid_h);
    CHECK(back.model.lambda_reg == 0.125);
    CHECK(back.out_dir == "out");  // default, not the original
    nlohmann::json missing = j;
    missing["train"].erase("steps");
    CHECK_THROWS_AS(RunConfig::from_json(missing), ConfigError);
}

TEST_CASE("config file loader reports the path on errors") {
    fs::path dir = scratch("cfgfile");
    std::ofstream((dir / "a.ini").string()) << "[train]\nsteps = 3\n";
    RunConfig cfg = RunConfig::from_file((dir / "a.ini").string());
    CHECK(cfg.steps == 3);
    CHECK_THROWS_AS(RunConfig::from_file((dir / "missing.ini").string()), ConfigError);
    std::ofstream((dir / "b.ini").string()) << "[train]\nnope = 3\n";
    try {
        RunConfig::from_file((dir / "b.ini").string());
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("b.ini") != std::string::npos);
    }
}

// ================================================================== container

TEST_CASE("container round-trips arrays, metadata and byte-identity") {
    fs::path dir = scratch("container");
    Rng rng(3);
    Container c;
    c.meta["note"] = "hello";
    c.meta["step"] = 17;
    Tensor t = Tensor::randn(5, 3, rng);
    c.put_f64("weights", t);
    c.put_i64("labels", {4, -2, 7});
    c.put_u8("mask", {1, 0, 1, 1});
    const std::string p1 = (dir / "a.bvmt").string(), p2 = (dir / "b.bvmt").string();
    c.save(p1);
    c.save(p2);
    CHECK(slurp(p1) == slurp(p2));  // identical content -> identical bytes

    Container r = Container::load(p1);
    CHECK(r.meta["note"] == "hello");
    CHECK(r.meta["step"] == 17);
    CHECK(r.names() == std::vector<std::string>{"weights", "labels", "mask"});
    Tensor rt = r.f64("weights");
    REQUIRE(rt.same_shape(t));
    for (int64_t i = 0; i < t.numel(); ++i) CHECK(rt.d[size_t(i)] == t.d[size_t(i)]);
    CHECK(r.i64("labels") == std::vector<int64_t>{4, -2, 7});
    CHECK(r.u8("mask") == std::vector<uint8_t>{1, 0, 1, 1});
    CHECK(r.has("mask"));
    CHECK(!r.has("nope"));
}

TEST_CASE("container rejects corrupt files and mistyped reads") {
    fs::path dir = scratch("container_bad");
    Container c;
    c.put_i64("x", {1, 2});
    const std::string good = (dir / "good.bvmt").string();
    c.save(good);

    CHECK_THROWS_AS(Container::load((dir / "missing.bvmt").string()), ConfigError);

    std::string bytes = slurp(good);
    bytes[0] = 'X';  // break the magic
    std::ofstream((dir / "badmagic.bvmt").string(), std::ios::binary) << bytes;
    CHECK_THROWS_AS(Container::load((dir / "badmagic.bvmt").string()), ConfigError);

    std::ofstream((dir / "trunc.bvmt").string(), std::ios::binary) << slurp(good).substr(0, 20);
    CHECK_THROWS_AS(Container::load((dir / "trunc.bvmt").string()), ConfigError);

    Container r = Container::load(good);
    CHECK_THROWS_AS(r.f64("x"), ConfigError);   // wrong dtype
    CHECK_THROWS_AS(r.i64("y"), ConfigError);   // absent
    CHECK_THROWS_AS(c.put_i64("x", {3}), ConfigError);  // duplicate name
}

// ====================================================================== model

TEST_CASE("model forward produces finite outputs with contracted shapes") {
    RunConfig cfg = micro_config();
    Model m = Model::create(cfg.scene, cfg.model, 21);
    TrainSample s = make_sample(cfg.scene, 31);
    ForwardOut fo = model_forward(m, s, true);

    CHECK(fo.total.rows() == 1);
    CHECK(fo.total.cols() == 1);
    CHECK(std::isfinite(fo.total.val()(0, 0)));
    CHECK(int64_t(fo.boxes.size()) == cfg.model.n_d);
    CHECK(fo.seg_logits.rows() == 16);
    CHECK(fo.seg_logits.cols() == 2);
    CHECK(fo.occ_logits.rows() == 8 * 8 * 4);
    CHECK(fo.occ_logits.cols() == cfg.scene.n_occ_classes + 1);
    for (const DecodedBox& b : fo.boxes) {
        CHECK(std::isfinite(b.box.cx));
        CHECK(b.box.length > 0);
        CHECK(b.score > 0);
        CHECK(b.score < 1);
    }
    // weighted total matches its parts
    const double lhs = fo.total.val()(0, 0);
    const double rhs = cfg.model.lambda_det * fo.l_det.val()(0, 0) + cfg.model.lambda_seg * fo.l_seg.val()(0, 0) +
                       cfg.model.lambda_occ * fo.l_occ.val()(0, 0);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("disabled tasks contribute exactly zero loss and no outputs") {
    RunConfig cfg = micro_config();
    cfg.model.task_seg = false;
    cfg.model.task_occ = false;
    Model m = Model::create(cfg.scene, cfg.model, 21);
    TrainSample s = make_sample(cfg.scene, 31);
    ForwardOut fo = model_forward(m, s, true);
    CHECK(fo.l_seg.val()(0, 0) == 0.0);
    CHECK(fo.l_occ.val()(0, 0) == 0.0);
    CHECK(!fo.seg_logits.defined());
    CHECK(!fo.occ_logits.defined());
    CHECK(fo.total.val()(0, 0) == doctest::Approx(fo.l_det.val()(0, 0)).epsilon(1e-12));
    // parameter registry does not depend on the task switches
    Model all = Model::create(cfg.scene, micro_config().model, 21);
    CHECK(m.params.total_params() == all.params.total_params());
}

TEST_CASE("model config validation rejects inconsistent settings") {
    RunConfig cfg = micro_config();
    cfg.model.heads = 3;  // does not divide channels = 8
    CHECK_THROWS_AS(Model::create(cfg.scene, cfg.model, 1), ConfigError);
    cfg = micro_config();
    cfg.model.task_det = cfg.model.task_seg = cfg.model.task_occ = false;
    CHECK_THROWS_AS(Model::create(cfg.scene, cfg.model, 1), ConfigError);
    cfg = micro_config();
    cfg.model.s_blocks = 99;  // more bands than rows
    CHECK_THROWS_AS(Model::create(cfg.scene, cfg.model, 1), ConfigError);
}

// ==================================================================== metrics

TEST_CASE("simplified mAP hand cases") {
    // perfect predictions -> 1
    std::vector<std::vector<Box>> gt = {{gt_at(1, 1, 0), gt_at(-2, 0.5, 1)}};
    std::vector<std::vector<DecodedBox>> perfect = {{pred_at(1, 1, 0, 0.9), pred_at(-2, 0.5, 1, 0.8)}};
    CHECK(simplified_map(perfect, gt, 2) == doctest::Approx(1.0));

    // no predictions -> 0
    std::vector<std::vector<DecodedBox>> none = {{}};
    CHECK(simplified_map(none, gt, 2) == doctest::Approx(0.0));

    // one gt, one prediction 0.7 m away -> misses at 0.5, hits at 1 and 2 -> 2/3
    std::vector<std::vector<Box>> one_gt = {{gt_at(0, 0, 0)}};
    std::vector<std::vector<DecodedBox>> off = {{pred_at(0.7, 0.0, 0, 0.9)}};
    CHECK(simplified_map(off, one_gt, 2) == doctest::Approx(2.0 / 3.0));

    // classes absent from the ground truth are not averaged in
    std::vector<std::vector<DecodedBox>> cls1_noise = {{pred_at(0, 0, 0, 0.9), pred_at(5, 5, 1, 0.99)}};
    CHECK(simplified_map(cls1_noise, one_gt, 2) == doctest::Approx(1.0));

    // a low-scored false positive after the true positive lowers nothing;
    // before it, precision at the match drops to 1/2
    std::vector<std::vector<DecodedBox>> fp_after = {{pred_at(0, 0, 0, 0.9), pred_at(5, 5, 0, 0.1)}};
    CHECK(simplified_map(fp_after, one_gt, 2) == doctest::Approx(1.0));
    std::vector<std::vector<DecodedBox>> fp_before = {{pred_at(0, 0, 0, 0.1), pred_at(5, 5, 0, 0.9)}};
    CHECK(simplified_map(fp_before, one_gt, 2) == doctest::Approx(0.5));

    // greedy matching: each gt consumed once; duplicate predictions count as FP
    std::vector<std::vector<DecodedBox>> dup = {{pred_at(0, 0, 0, 0.9), pred_at(0.1, 0, 0, 0.8)}};
    CHECK(simplified_map(dup, one_gt, 2) == doctest::Approx(1.0));

    // two gt, only one found -> recall caps at 1/2
    std::vector<std::vector<Box>> two_gt = {{gt_at(0, 0, 0), gt_at(4, 4, 0)}};
    std::vector<std::vector<DecodedBox>> half = {{pred_at(0, 0, 0, 0.9)}};
    CHECK(simplified_map(half, two_gt, 2) == doctest::Approx(0.5));

    CHECK_THROWS_AS(simplified_map({}, gt, 2), ContractViolation);
}

TEST_CASE("random predictions score far below a working detector") {
    Rng rng(99);
    std::vector<std::vector<Box>> gt;
    std::vector<std::vector<DecodedBox>> pred;
    for (int s = 0; s < 8; ++s) {
        std::vector<Box> boxes;
        for (int g = 0; g < 3; ++g) boxes.push_back(gt_at(rng.uniform(-7, 7), rng.uniform(-7, 7), g % 2));
        gt.push_back(boxes);
        std::vector<DecodedBox> p;
        for (int q = 0; q < 16; ++q)
            p.push_back(pred_at(rng.uniform(-7, 7), rng.uniform(-7, 7), int(rng.randint(2)), rng.uniform()));
        pred.push_back(p);
    }
    CHECK(simplified_map(pred, gt, 2) < 0.2);
}

TEST_CASE("segmentation IoU aggregates counts over the dataset") {
    Tensor logit1(4, 2), mask1(4, 2), logit2(4, 2), mask2(4, 2);
    // class 0: pred rows {0,1}, gt rows {1,2} in sample 1 -> inter 1, union 3
    logit1(0, 0) = 2.0;
    logit1(1, 0) = 1.0;
    mask1(1, 0) = 1.0;
    mask1(2, 0) = 1.0;
    // class 0 in sample 2: exact match on row 3 -> inter 1, union 1
    logit2(3, 0) = 5.0;
    mask2(3, 0) = 1.0;
    // class 1 appears nowhere -> skipped
    std::vector<double> per_class;
    double iou = seg_mean_iou({logit1, logit2}, {mask1, mask2}, &per_class);
    CHECK(per_class[0] == doctest::Approx(2.0 / 4.0));
    CHECK(per_class[1] == -1.0);
    CHECK(iou == doctest::Approx(0.5));
    // nothing anywhere -> vacuous 1
    Tensor z(4, 2), zm(4, 2);
    CHECK(seg_mean_iou({z}, {zm}) == doctest::Approx(1.0));
}

TEST_CASE("occupancy mIoU covers semantic classes only") {
    // M = 2 semantic classes + empty id 2
    std::vector<int> gt = {0, 0, 1, 2, 2, 2};
    std::vector<int> pr = {0, 1, 1, 2, 0, 2};
    // class 0: inter {v0}, union {v0, v1, v4} -> 1/3; class 1: inter {v2}, union {v1, v2} -> 1/2
    std::vector<double> per_class;
    double miou = occ_mean_iou({pr}, {gt}, 2, &per_class);
    CHECK(per_class[0] == doctest::Approx(1.0 / 3.0));
    CHECK(per_class[1] == doctest::Approx(0.5));
    CHECK(miou == doctest::Approx((1.0 / 3.0 + 0.5) / 2.0));
    CHECK_THROWS_AS(occ_mean_iou({{0, 3}}, {{0, 0}}, 2, nullptr), ContractViolation);
    CHECK_THROWS_AS(occ_mean_iou({{0}}, {{0, 0}}, 2, nullptr), ContractViolation);

    Tensor logits = Tensor::from({{1.0, 3.0, 2.0}, {5.0, 5.0, 1.0}});
    CHECK(occ_argmax(logits) == std::vector<int>{1, 0});  // tie goes to the smaller id
}

// ================================================================== training

TEST_CASE("identical configs and seeds produce identical logs and checkpoints") {
    RunConfig a = micro_config(), b = micro_config();
    a.out_dir = scratch("det_a").string();
    b.out_dir = scratch("det_b").string();
    TrainOutcome ra = train(a), rb = train(b);
    CHECK(!ra.aborted);
    CHECK(ra.steps_done == 6);
    CHECK(slurp(ra.metrics_path) == slurp(rb.metrics_path));
    CHECK(slurp(ra.checkpoint_path) == slurp(rb.checkpoint_path));
    // a different seed changes the log
    RunConfig c = micro_config();
    c.seed = 12;
    c.out_dir = scratch("det_c").string();
    TrainOutcome rc = train(c);
    CHECK(slurp(ra.metrics_path) != slurp(rc.metrics_path));
}

TEST_CASE("metrics records keep losses finite and metrics inside [0, 1]") {
    RunConfig cfg = micro_config();
    cfg.out_dir = scratch("records").string();
    TrainOutcome r = train(cfg);
    int64_t trains = 0, evals = 0;
    for (const MetricsRecord& rec : r.records) {
        CHECK(std::isfinite(rec.total));
        if (rec.kind == "train") {
            ++trains;
            CHECK(rec.lr > 0.0);
            CHECK(std::isfinite(rec.l_det));
            CHECK(std::isfinite(rec.l_seg));
            CHECK(std::isfinite(rec.l_occ));
        } else if (rec.kind == "eval") {
            ++evals;
            for (double v : {rec.map, rec.seg_iou, rec.occ_miou}) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
    }
    CHECK(trains == 6);
    CHECK(evals == 2);  // step 3 and final step 6
    // the jsonl file holds one self-describing record per line
    std::ifstream in(r.metrics_path);
    std::string line;
    int64_t lines = 0;
    while (std::getline(in, line)) {
        ++lines;
        nlohmann::json j = nlohmann::json::parse(line);
        CHECK(j.contains("kind"));
        CHECK(j.contains("step"));
    }
    CHECK(lines == int64_t(r.records.size()));
}

TEST_CASE("steps=0 writes the initial checkpoint and evaluates it") {
    RunConfig cfg = micro_config();
    cfg.steps = 0;
    cfg.out_dir = scratch("zero_steps").string();
    TrainOutcome r = train(cfg);
    CHECK(r.steps_done == 0);
    CHECK(!r.aborted);
    CHECK(fs::exists(r.checkpoint_path));
    CHECK(r.checkpoint_path.find("ckpt_000000") != std::string::npos);
    RunConfig loaded_cfg;
    int64_t step = -1;
    Model m = load_checkpoint(r.checkpoint_path, &loaded_cfg, &step);
    CHECK(step == 0);
    CHECK(loaded_cfg.steps == 0);
}

TEST_CASE("a diverging run aborts and keeps the last good checkpoint") {
    RunConfig cfg = micro_config();
    cfg.peak_lr = 1e18;  // guarantees a numeric blow-up within a few steps
    cfg.warmup_frac = 0.0;
    cfg.steps = 6;
    cfg.out_dir = scratch("abort").string();
    TrainOutcome r = train(cfg);
    CHECK(r.aborted);
    CHECK(r.steps_done < 6);
    CHECK(fs::exists(r.checkpoint_path));  // the initial checkpoint survived
    CHECK(r.records.back().kind == "abort");
    Model m = load_checkpoint(r.checkpoint_path);  // still loadable
    for (const auto& [name, v] : m.params.items())
        for (int64_t i = 0; i < v.val().numel(); ++i) REQUIRE(std::isfinite(v.val().d[size_t(i)]));
}

TEST_CASE("training overfits one scene: loss collapses, train metrics saturate") {
    RunConfig cfg = micro_config();
    // A second grid plane and wider channels give the occupancy head enough
    // capacity to actually fit one scene; with grid_z = 1 the upsampled volume
    // is constant along z and the occupancy loss plateaus well above zero.
    cfg.scene.grid_z = 2;
    cfg.scene.out_z = 8;
    cfg.scene.channels = 16;
    cfg.peak_lr = 2e-3;
    cfg.n_scenes = 1;
    cfg.steps = 500;
    cfg.checkpoint_every = 500;
    cfg.out_dir = scratch("overfit_micro").string();
    TrainOutcome r = train(cfg);
    REQUIRE(!r.aborted);
    double at0 = -1, seg0 = -1, at_last = -1, seg_last = -1;
    for (const MetricsRecord& rec : r.records)
        if (rec.kind == "train") {
            if (at0 < 0) {
                at0 = rec.total;
                seg0 = rec.l_seg;
            }
            at_last = rec.total;
            seg_last = rec.l_seg;
        }
    REQUIRE(at0 > 0);
    // The detection focal term (soft gaussian targets) and the occupancy
    // boundary voxels keep the total away from zero, so the total is held to
    // a 5x collapse while the floor-free segmentation term must fall by an
    // order of magnitude and the train metrics must saturate outright.
    CHECK(at_last < 0.2 * at0);
    CHECK(seg_last < 0.1 * seg0);
    CHECK(r.final_eval.map == 1.0);
    CHECK(r.final_eval.seg_iou == 1.0);
    CHECK(r.final_eval.occ_miou > 0.5);
}

TEST_CASE("staged training holds occupancy out of the early loss") {
    RunConfig cfg = micro_config();
    cfg.steps = 8;
    cfg.staged_fraction = 0.5;
    cfg.out_dir = scratch("staged").string();
    TrainOutcome r = train(cfg);
    REQUIRE(!r.aborted);
    for (const MetricsRecord& rec : r.records) {
        if (rec.kind != "train") continue;
        if (rec.step < 4) CHECK(rec.l_occ == 0.0);
        else CHECK(rec.l_occ > 0.0);
    }
}

// ================================================== checkpoints and datasets

TEST_CASE("checkpoint round-trip reproduces the model bit for bit") {
    RunConfig cfg = micro_config();
    cfg.out_dir = scratch("roundtrip").string();
    TrainOutcome r = train(cfg);
    REQUIRE(!r.aborted);

    std::vector<TrainSample> data = build_dataset(cfg.scene, cfg.n_scenes);
    Model m = load_checkpoint(r.checkpoint_path);
    EvalResult direct = evaluate_model(m, data);
    CHECK(direct.map == r.final_eval.map);
    CHECK(direct.seg_iou == r.final_eval.seg_iou);
    CHECK(direct.occ_miou == r.final_eval.occ_miou);
    CHECK(direct.total == r.final_eval.total);

    // saving the loaded model again is byte-identical
    RunConfig loaded_cfg;
    int64_t step = 0;
    Model m2 = load_checkpoint(r.checkpoint_path, &loaded_cfg, &step);
    loaded_cfg.out_dir = cfg.out_dir;
    fs::path again = fs::path(cfg.out_dir) / "again.bvmt";
    save_checkpoint(again.string(), m2, loaded_cfg, step);
    CHECK(slurp(again.string()) == slurp(r.checkpoint_path));
}

TEST_CASE("checkpoint loading rejects mismatched or foreign files") {
    fs::path dir = scratch("badckpt");
    Container c;
    c.meta["kind"] = "sample";
    c.save((dir / "sample.bvmt").string());
    CHECK_THROWS_AS(load_checkpoint((dir / "sample.bvmt").string()), ConfigError);

    RunConfig cfg = micro_config();
    Model m = Model::create(cfg.scene, cfg.model, 1);
    // a snapshot whose arrays do not match its own config
    Container bad;
    bad.meta["kind"] = "checkpoint";
    bad.meta["step"] = 0;
    RunConfig other = cfg;
    other.scene.channels = 16;  // claims wider arrays than stored
    bad.meta["config"] = other.to_json();
    for (const auto& [name, v] : m.params.items()) bad.put_f64("param/" + name, v.val());
    bad.save((dir / "mismatch.bvmt").string());
    CHECK_THROWS_AS(load_checkpoint((dir / "mismatch.bvmt").string()), ConfigError);
}

TEST_CASE("dataset files round-trip the generated scenes exactly") {
    fs::path dir = scratch("dataset");
    RunConfig cfg = micro_config();
    save_dataset(dir.string(), cfg.scene, 2);
    SceneSpec spec;
    std::vector<TrainSample> loaded = load_dataset(dir.string(), &spec);
    std::vector<TrainSample> built = build_dataset(cfg.scene, 2);
    REQUIRE(loaded.size() == 2);
    CHECK(scene_shapes_match(spec, cfg.scene));
    for (size_t i = 0; i < 2; ++i) {
        REQUIRE(loaded[i].scene.boxes.size() == built[i].scene.boxes.size());
        for (size_t b = 0; b < loaded[i].scene.boxes.size(); ++b) {
            CHECK(loaded[i].scene.boxes[b].cx == built[i].scene.boxes[b].cx);
            CHECK(loaded[i].scene.boxes[b].yaw == built[i].scene.boxes[b].yaw);
            CHECK(loaded[i].scene.boxes[b].cls == built[i].scene.boxes[b].cls);
        }
        CHECK(loaded[i].scene.occ_labels == built[i].scene.occ_labels);
        CHECK(loaded[i].scene.lidar_mask == built[i].scene.lidar_mask);
        // features re-rendered from the stored seed match bit for bit
        require_same_shape(loaded[i].feats.f_lidar, built[i].feats.f_lidar, "test");
        for (int64_t e = 0; e < loaded[i].feats.f_lidar.numel(); ++e) {
            CHECK(loaded[i].feats.f_lidar.d[size_t(e)] == built[i].feats.f_lidar.d[size_t(e)]);
            CHECK(loaded[i].feats.f_cam.d[size_t(e)] == built[i].feats.f_cam.d[size_t(e)]);
        }
        for (int64_t e = 0; e < loaded[i].targets.heatmaps.numel(); ++e)
            CHECK(loaded[i].targets.heatmaps.d[size_t(e)] == built[i].targets.heatmaps.d[size_t(e)]);
    }
    CHECK_THROWS_AS(load_dataset(scratch("empty_ds").string(), nullptr), ConfigError);
}

TEST_CASE("evaluate_checkpoint matches in-process evaluation and checks shapes") {
    RunConfig cfg = micro_config();
    cfg.out_dir = scratch("evalckpt").string();
    TrainOutcome r = train(cfg);
    REQUIRE(!r.aborted);
    fs::path data_dir = scratch("evalckpt_data");
    save_dataset(data_dir.string(), cfg.scene, 2);
    EvalResult e = evaluate_checkpoint(r.checkpoint_path, data_dir.string());
    CHECK(e.map == r.final_eval.map);
    CHECK(e.seg_iou == r.final_eval.seg_iou);
    CHECK(e.occ_miou == r.final_eval.occ_miou);

    // dataset with different shapes -> configuration error
    fs::path other_dir = scratch("evalckpt_other");
    SceneSpec other = cfg.scene;
    other.grid_h = 8;
    other.out_h = 16;
    save_dataset(other_dir.string(), other, 1);
    CHECK_THROWS_AS(evaluate_checkpoint(r.checkpoint_path, other_dir.string()), ConfigError);
}

// ================================================================== ablations

TEST_CASE("unknown ablation suites are configuration errors") {
    CHECK_THROWS_AS(run_ablation("nope", micro_config(), 1), ConfigError);
}

TEST_CASE("variant_params reports decoder sizes with mamba strictly smaller") {
    RunConfig cfg = micro_config();
    AblationTable t = run_ablation("variant_params", cfg, 1);
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0].arm == "transformer");
    CHECK(t.rows[1].arm == "mamba");
    CHECK(t.rows[0].decoder_params > 0);
    CHECK(t.rows[1].decoder_params > 0);
    CHECK(t.rows[1].decoder_params < t.rows[0].decoder_params);
    CHECK(t.summary["mamba_smaller"] == true);
    CHECK(t.to_text().find("mamba") != std::string::npos);
    CHECK(t.to_json()["suite"] == "variant_params");
}

TEST_CASE("a tiny two-arm ablation shares data across arms and reports means") {
    RunConfig cfg = micro_config();
    cfg.steps = 2;
    cfg.checkpoint_every = 2;
    cfg.out_dir = scratch("ablate_tcs").string();
    AblationTable t = run_ablation("tcs", cfg, 2);
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0].arm == "tcs_off");
    CHECK(t.rows[1].arm == "tcs_on");
    for (const AblationRow& r : t.rows) {
        CHECK(r.per_seed.size() == 2);
        double mean_map = 0.5 * (r.per_seed[0].map + r.per_seed[1].map);
        CHECK(r.mean.map == doctest::Approx(mean_map));
    }
    CHECK(t.summary.contains("gain"));
}

