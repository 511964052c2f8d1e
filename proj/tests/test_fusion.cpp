#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bevmt/fusion.hpp"
#include "bevmt/verify.hpp"

using namespace bevmt;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.d[static_cast<size_t>(i)] - b.d[static_cast<size_t>(i)]));
    return m;
}

void zero_params(ParamStore& ps) {
    for (auto [name, v] : ps.items())  // Var copies share the underlying node
        std::fill(v.value_mut().d.begin(), v.value_mut().d.end(), 0.0);
}

}  // namespace

TEST_CASE("init_fuse: zero inputs and zero bias give zero output") {
    Rng rng(31);
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", 4, rng);
    std::fill(p.fuse_conv.b.value_mut().d.begin(), p.fuse_conv.b.value_mut().d.end(), 0.0);
    Var zl = constant(Tensor::zeros(12, 4));
    Var zc = constant(Tensor::zeros(12, 4));
    Var f = init_fuse(zl, zc, p, 3, 4);
    CHECK(f.val().cmap().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("init_fuse: center-tap identity kernel passes the lidar channels") {
    Rng rng(32);
    const int64_t c = 3, h = 4, w = 5;
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", c, rng);
    zero_params(ps);
    // tap 4 is (dh=0, dw=0); the first c concat columns are the lidar feature
    for (int64_t i = 0; i < c; ++i) p.fuse_conv.w.value_mut()(4 * 2 * c + i, i) = 1.0;
    Var fl = constant(Tensor::randn(h * w, c, rng));
    Var fc = constant(Tensor::randn(h * w, c, rng));
    Var f = init_fuse(fl, fc, p, h, w);
    CHECK(max_abs_diff(f.val(), fl.val()) == 0.0);
}

TEST_CASE("init_fuse matches the sliding-window oracle on random input") {
    Rng rng(33);
    const int64_t c = 2, h = 4, w = 4;
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", c, rng);
    Var fl = constant(Tensor::randn(h * w, c, rng));
    Var fc = constant(Tensor::randn(h * w, c, rng));
    Var f = init_fuse(fl, fc, p, h, w);

    Tensor cat(h * w, 2 * c);
    cat.map().leftCols(c) = fl.val().cmap();
    cat.map().rightCols(c) = fc.val().cmap();
    Tensor want = oracle_conv3x3(cat, h, w, p.fuse_conv.w.val(), p.fuse_conv.b.val());
    CHECK(max_abs_diff(f.val(), want) < 1e-6);
}

TEST_CASE("gate_weights closed forms") {
    Rng rng(34);
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", 2, rng);
    zero_params(ps);
    SUBCASE("zero parameters give 0.5 everywhere") {
        Var f = constant(Tensor::randn(6, 2, rng));
        Var g = gate_weights(f, p.gate_lidar);
        for (int64_t i = 0; i < g.val().numel(); ++i) CHECK(g.val().d[static_cast<size_t>(i)] == 0.5);
    }
    SUBCASE("large bias saturates toward 1") {
        std::fill(p.gate_lidar.b.value_mut().d.begin(), p.gate_lidar.b.value_mut().d.end(), 20.0);
        Var f = constant(Tensor::randn(6, 2, rng));
        Var g = gate_weights(f, p.gate_lidar);
        for (int64_t i = 0; i < g.val().numel(); ++i) CHECK(g.val().d[static_cast<size_t>(i)] >= 1.0 - 1e-8);
    }
    SUBCASE("diagonal ln3 weights on feature [1,-1] give gates [0.75, 0.25]") {
        p.gate_lidar.w.value_mut()(0, 0) = std::log(3.0);
        p.gate_lidar.w.value_mut()(1, 1) = std::log(3.0);
        Var f = constant(Tensor::from({{1.0, -1.0}}));
        Var g = gate_weights(f, p.gate_lidar);
        CHECK(g.val()(0, 0) == doctest::Approx(0.75).epsilon(1e-12));
        CHECK(g.val()(0, 1) == doctest::Approx(0.25).epsilon(1e-12));
    }
}

TEST_CASE("mafi_fuse: zero gate parameters reduce to the initial fusion exactly") {
    Rng rng(35);
    const int64_t c = 4, h = 3, w = 3;
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", c, rng);
    std::fill(p.gate_lidar.w.value_mut().d.begin(), p.gate_lidar.w.value_mut().d.end(), 0.0);
    std::fill(p.gate_lidar.b.value_mut().d.begin(), p.gate_lidar.b.value_mut().d.end(), 0.0);
    std::fill(p.gate_cam.w.value_mut().d.begin(), p.gate_cam.w.value_mut().d.end(), 0.0);
    std::fill(p.gate_cam.b.value_mut().d.begin(), p.gate_cam.b.value_mut().d.end(), 0.0);
    Var fl = constant(Tensor::randn(h * w, c, rng));
    Var fc = constant(Tensor::randn(h * w, c, rng));
    Var fused = mafi_fuse(fl, fc, p, h, w);
    Var finit = init_fuse(fl, fc, p, h, w);
    // each gate is exactly 0.5, so the gate sum is exactly 1
    CHECK(max_abs_diff(fused.val(), finit.val()) == 0.0);
}

TEST_CASE("mafi_fuse: saturated gates double the initial fusion") {
    Rng rng(36);
    const int64_t c = 4, h = 3, w = 3;
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", c, rng);
    for (Affine* g : {&p.gate_lidar, &p.gate_cam}) {
        std::fill(g->w.value_mut().d.begin(), g->w.value_mut().d.end(), 0.0);
        std::fill(g->b.value_mut().d.begin(), g->b.value_mut().d.end(), 30.0);
    }
    Var fl = constant(Tensor::randn(h * w, c, rng));
    Var fc = constant(Tensor::randn(h * w, c, rng));
    Var fused = mafi_fuse(fl, fc, p, h, w);
    Tensor twice(h * w, c);
    twice.map() = init_fuse(fl, fc, p, h, w).val().cmap() * 2.0;
    CHECK(max_abs_diff(fused.val(), twice) < 1e-6);
}

TEST_CASE("mafi_fuse equals the elementwise evaluation of the gating formula") {
    Rng rng(37);
    const int64_t c = 4, h = 3, w = 3;
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", c, rng);
    Var fl = constant(Tensor::randn(h * w, c, rng));
    Var fc = constant(Tensor::randn(h * w, c, rng));
    Var fused = mafi_fuse(fl, fc, p, h, w);

    // scripted elementwise oracle: sigmoid gates from plain loops, two-term sum
    Tensor finit = oracle_conv3x3([&] {
        Tensor cat(h * w, 2 * c);
        cat.map().leftCols(c) = fl.val().cmap();
        cat.map().rightCols(c) = fc.val().cmap();
        return cat;
    }(), h, w, p.fuse_conv.w.val(), p.fuse_conv.b.val());
    auto gate_at = [&](const Tensor& f, const Affine& g, int64_t r, int64_t cc) {
        double acc = g.b.val()(0, cc);
        for (int64_t j = 0; j < c; ++j) acc += f(r, j) * g.w.val()(j, cc);
        return 1.0 / (1.0 + std::exp(-acc));
    };
    Tensor want(h * w, c);
    for (int64_t r = 0; r < h * w; ++r)
        for (int64_t cc = 0; cc < c; ++cc)
            want(r, cc) = gate_at(fl.val(), p.gate_lidar, r, cc) * finit(r, cc) +
                          gate_at(fc.val(), p.gate_cam, r, cc) * finit(r, cc);
    CHECK(max_abs_diff(fused.val(), want) < 1e-6);

    // the factored identity (G_lidar + G_cam) (.) F_init holds bit-exactly
    Var gsum = add(gate_weights(fl, p.gate_lidar), gate_weights(fc, p.gate_cam));
    Var factored = mul(gsum, init_fuse(fl, fc, p, h, w));
    CHECK(max_abs_diff(fused.val(), factored.val()) == 0.0);
}

TEST_CASE("mafi_fuse gradients pass finite differences") {
    Rng rng(38);
    const int64_t c = 4, h = 3, w = 3;
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", c, rng);
    Var fl = make_param(Tensor::randn(h * w, c, rng));
    Var fc = make_param(Tensor::randn(h * w, c, rng));
    std::vector<Var> params{fl, fc};
    for (auto& [name, v] : ps.items()) params.push_back(v);
    Tensor wsum = Tensor::randn(h * w, c, rng);
    auto rep = grad_check("mafi_fuse", params,
                          [&] { return sum_all(mul(mafi_fuse(fl, fc, p, h, w), constant(wsum))); });
    INFO(rep.summary());
    CHECK(rep.ok());
}

TEST_CASE("gate gradients are modality-isolated") {
    Rng rng(39);
    const int64_t c = 4, h = 3, w = 3;
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", c, rng);
    Var fl = make_param(Tensor::randn(h * w, c, rng));
    Var fc = make_param(Tensor::randn(h * w, c, rng));
    Var loss = sum_all(gate_weights(fl, p.gate_lidar));
    run_backward(loss);
    CHECK(fl.has_grad());
    CHECK_FALSE(fc.has_grad());  // exactly zero: f_cam is not in this graph at all
}

TEST_CASE("mafi_fuse rejects non-finite input with a located message") {
    Rng rng(40);
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", 2, rng);
    Tensor bad = Tensor::randn(9, 2, rng);
    bad(4, 1) = std::numeric_limits<double>::quiet_NaN();
    Var fl = constant(bad);
    Var fc = constant(Tensor::randn(9, 2, rng));
    CHECK_THROWS_WITH_AS(mafi_fuse(fl, fc, p, 3, 3), doctest::Contains("flat index 9"), NumericError);
}

TEST_CASE("disabled gates reduce mafi_fuse to init_fuse") {
    Rng rng(41);
    ParamStore ps;
    MafiParams p = MafiParams::create(ps, "mafi", 4, rng, /*use_gates=*/false);
    Var fl = constant(Tensor::randn(9, 4, rng));
    Var fc = constant(Tensor::randn(9, 4, rng));
    CHECK(max_abs_diff(mafi_fuse(fl, fc, p, 3, 3).val(), init_fuse(fl, fc, p, 3, 3).val()) == 0.0);
}
