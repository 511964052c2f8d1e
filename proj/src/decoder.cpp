#include "bevmt/decoder.hpp"

#include <cmath>

namespace bevmt {

DeformAttnParams DeformAttnParams::create(ParamStore& ps, const std::string& prefix, int64_t c, int64_t heads,
                                          int64_t points, Rng& rng) {
    if (c % heads != 0) throw ConfigError("attention heads must divide the channel count");
    DeformAttnParams p;
    p.heads = heads;
    p.points = points;
    p.offset_lin = Affine::create(ps, prefix + ".offset", c, heads * points * 2, rng);
    p.attn_lin = Affine::create(ps, prefix + ".attn", c, heads * points, rng);
    p.value_proj = Affine::create(ps, prefix + ".value", c, c, rng);
    p.out_proj = Affine::create(ps, prefix + ".out", c, c, rng);
    return p;
}

TCSParams TCSParams::create(ParamStore& ps, const std::string& prefix, int64_t c, Rng& rng) {
    static const char* task[] = {"det", "seg", "occ"};
    TCSParams p;
    for (int i = 0; i < kNumTasks; ++i) {
        p.embed[static_cast<size_t>(i)] = Affine::create(ps, prefix + ".embed_" + task[i], c, c, rng);
        Affine wl = Affine::create_zero(ps, prefix + ".scale_" + task[i], c, c);
        std::fill(wl.b.value_mut().d.begin(), wl.b.value_mut().d.end(), 1.0);
        p.w_lin[static_cast<size_t>(i)] = wl;
    }
    return p;
}

SSMParams::Direction SSMParams::make_direction(ParamStore& ps, const std::string& prefix, int64_t c,
                                               int64_t n_state, Rng& rng) {
    Direction dir;
    dir.in_proj = Affine::create(ps, prefix + ".in_proj", c, 2 * n_state + 1, rng);
    // The scan multiplies three projections of the same features (B·x
    // accumulated, then ·C), so without normalization layers its gain is
    // cubic in the feature scale. Starting the projections small keeps the
    // recurrence a perturbation of the skip path at init.
    dir.in_proj.w.value_mut().map() *= 0.1;
    Tensor a_log(c, n_state);
    for (int64_t cc = 0; cc < c; ++cc)
        for (int64_t nn = 0; nn < n_state; ++nn) a_log(cc, nn) = std::log(double(nn + 1));
    dir.a_log = ps.add(prefix + ".a_log", std::move(a_log));
    // softplus(-3) ~ 0.049: stable decay factors around 0.6..0.95 at init
    dir.dt_bias = ps.add(prefix + ".dt_bias", Tensor::full(1, c, -3.0));
    // the four directional outputs are summed; starting at 1/4 keeps that
    // sum at roughly the input scale
    dir.d_skip = ps.add(prefix + ".d_skip", Tensor::full(1, c, 0.25));
    return dir;
}

SSMParams SSMParams::create(ParamStore& ps, const std::string& prefix, int64_t c, int64_t n_state, Rng& rng) {
    static const char* names[] = {"left", "right", "top", "bottom"};
    SSMParams p;
    p.n_state = n_state;
    for (int d = 0; d < 4; ++d)
        p.dir[static_cast<size_t>(d)] = make_direction(ps, prefix + "." + names[d], c, n_state, rng);
    p.merge = Affine::create(ps, prefix + ".merge", c, c, rng);
    return p;
}

CrossAttnParams CrossAttnParams::create(ParamStore& ps, const std::string& prefix, int64_t c, int64_t heads,
                                        int64_t points, Rng& rng) {
    CrossAttnParams p;
    p.attn = DeformAttnParams::create(ps, prefix + ".attn", c, heads, points, rng);
    p.ffn = Mlp2::create(ps, prefix + ".ffn", c, 2 * c, c, rng);
    return p;
}

DecoderParams DecoderParams::create(ParamStore& ps, const std::string& prefix, const std::string& variant,
                                    int64_t layers, int64_t c, int64_t heads, int64_t points, int64_t n_state,
                                    Rng& rng) {
    if (variant != "transformer" && variant != "mamba")
        throw ConfigError("decoder variant must be 'transformer' or 'mamba', got '" + variant + "'");
    if (layers < 0) throw ConfigError("decoder layer count must be non-negative");
    static const char* task[] = {"det", "seg", "occ"};
    DecoderParams p;
    p.variant = variant;
    p.layers = layers;
    for (int64_t l = 0; l < layers; ++l) {
        const std::string lp = prefix + ".layer" + std::to_string(l);
        if (variant == "transformer") {
            TransformerLayerParams tl;
            tl.self_attn = DeformAttnParams::create(ps, lp + ".self_attn", c, heads, points, rng);
            tl.ffn = Mlp2::create(ps, lp + ".ffn", c, 2 * c, c, rng);
            tl.tcs = TCSParams::create(ps, lp + ".tcs", c, rng);
            for (int i = 0; i < kNumTasks; ++i)
                tl.cross[static_cast<size_t>(i)] =
                    CrossAttnParams::create(ps, lp + ".cross_" + task[i], c, heads, points, rng);
            p.transformer.push_back(std::move(tl));
        } else {
            MambaLayerParams ml;
            ml.ssm = SSMParams::create(ps, lp + ".ssm", c, n_state, rng);
            ml.tcs = TCSParams::create(ps, lp + ".tcs", c, rng);
            p.mamba.push_back(std::move(ml));
        }
    }
    return p;
}

namespace {

// softmax over `groups` equal column blocks of x (per-head normalization)
Var softmax_grouped(const Var& x, int64_t groups) {
    if (groups == 1) return softmax_rows(x);
    const int64_t block = x.cols() / groups;
    Var out;
    for (int64_t g = 0; g < groups; ++g) {
        Var s = softmax_rows(slice_cols(x, g * block, (g + 1) * block));
        out = (g == 0) ? s : concat_cols(out, s);
    }
    return out;
}

// sampling locations = per-query reference point + predicted offsets
Var build_locations(const Var& offsets, const std::vector<double>& ref_y, const std::vector<double>& ref_x,
                    int64_t heads, int64_t points) {
    const int64_t q = offsets.rows();
    Tensor ref(q, heads * points * 2);
    for (int64_t i = 0; i < q; ++i)
        for (int64_t hp = 0; hp < heads * points; ++hp) {
            ref(i, 2 * hp) = ref_y[static_cast<size_t>(i)];
            ref(i, 2 * hp + 1) = ref_x[static_cast<size_t>(i)];
        }
    return add(offsets, constant(std::move(ref)));
}

// shared core: deformable attention of `queries` (feature rows) into f_bev
// at reference points (ref_y, ref_x); returns the projected attended value
Var deform_attfeat(const Var& queries, const Var& f_bev, const DeformAttnParams& p, int64_t h, int64_t w,
                   const std::vector<double>& ref_y, const std::vector<double>& ref_x) {
    Var offsets = p.offset_lin.forward(queries);
    if (!offsets.val().all_finite())
        throw NumericError("deformable attention: non-finite sampling offsets at flat index " +
                           std::to_string(offsets.val().first_nonfinite()));
    Var loc = build_locations(offsets, ref_y, ref_x, p.heads, p.points);
    Var attn = softmax_grouped(p.attn_lin.forward(queries), p.heads);
    Var value = p.value_proj.forward(f_bev);
    return p.out_proj.forward(deform_attend(value, loc, attn, h, w, p.heads));
}

std::vector<double> cell_ys(int64_t h, int64_t w) {
    std::vector<double> y(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) y[static_cast<size_t>(i)] = double(i / w);
    return y;
}

std::vector<double> cell_xs(int64_t h, int64_t w) {
    std::vector<double> x(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) x[static_cast<size_t>(i)] = double(i % w);
    return x;
}

void require_positions_in_grid(const TaskQueries& q, int64_t h, int64_t w, const char* who) {
    for (size_t i = 0; i < q.pos_h.size(); ++i)
        if (q.pos_h[i] < 0 || q.pos_h[i] >= h || q.pos_w[i] < 0 || q.pos_w[i] >= w)
            throw ContractViolation(std::string(who) + ": query position outside the grid");
}

}  // namespace

Var deformable_self_attention(const Var& f_bev, const DeformAttnParams& p, int64_t h, int64_t w) {
    if (h < 2 || w < 2) throw ContractViolation("deformable_self_attention: grid must be at least 2x2");
    if (f_bev.rows() != h * w) throw ContractViolation("deformable_self_attention: rows must equal h*w");
    return add(f_bev, deform_attfeat(f_bev, f_bev, p, h, w, cell_ys(h, w), cell_xs(h, w)));
}

std::pair<std::vector<int>, std::vector<int>> scan_order_rows(int64_t h, int64_t w, bool reversed) {
    std::vector<int> order, starts;
    starts.push_back(0);
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t cc = 0; cc < w; ++cc) {
            const int64_t col = reversed ? (w - 1 - cc) : cc;
            order.push_back(static_cast<int>(bev_index(r, col, w)));
        }
        starts.push_back(static_cast<int>((r + 1) * w));
    }
    return {order, starts};
}

std::pair<std::vector<int>, std::vector<int>> scan_order_cols(int64_t h, int64_t w, bool reversed) {
    std::vector<int> order, starts;
    starts.push_back(0);
    for (int64_t col = 0; col < w; ++col) {
        for (int64_t rr = 0; rr < h; ++rr) {
            const int64_t r = reversed ? (h - 1 - rr) : rr;
            order.push_back(static_cast<int>(bev_index(r, col, w)));
        }
        starts.push_back(static_cast<int>((col + 1) * h));
    }
    return {order, starts};
}

Var vss2d_scan(const Var& f_bev, const SSMParams& p, int64_t h, int64_t w) {
    if (f_bev.rows() != h * w) throw ContractViolation("vss2d_scan: rows must equal h*w");
    const int64_t n = p.n_state;
    std::array<std::pair<std::vector<int>, std::vector<int>>, 4> orders = {
        scan_order_rows(h, w, false), scan_order_rows(h, w, true),
        scan_order_cols(h, w, false), scan_order_cols(h, w, true)};

    Var sum;  // fixed reduction order: left, right, top, bottom
    for (int d = 0; d < 4; ++d) {
        const auto& dir = p.dir[static_cast<size_t>(d)];
        Var proj = dir.in_proj.forward(f_bev);
        Var b = slice_cols(proj, 0, n);
        Var c = slice_cols(proj, n, 2 * n);
        Var dt = softplus(outer_add(slice_cols(proj, 2 * n, 2 * n + 1), dir.dt_bias));
        Var a = neg(exp_of(dir.a_log));
        Var y = selective_scan(f_bev, dt, b, c, a, dir.d_skip, orders[static_cast<size_t>(d)].first,
                               orders[static_cast<size_t>(d)].second);
        sum = (d == 0) ? y : add(sum, y);
    }
    return add(f_bev, p.merge.forward(sum));
}

std::array<Var, kNumTasks> tcs(const Var& f_bev, const TCSParams& p) {
    std::array<Var, kNumTasks> out;
    for (size_t i = 0; i < static_cast<size_t>(kNumTasks); ++i)
        out[i] = mul(p.w_lin[i].forward(silu(p.embed[i].forward(f_bev))), f_bev);
    return out;
}

TaskQueries cross_attend_queries(const TaskQueries& q, const Var& f_task, const CrossAttnParams& p, int64_t h,
                                 int64_t w) {
    if (q.count() == 0) return q;
    require_positions_in_grid(q, h, w, "cross_attend_queries");
    std::vector<double> ry(q.pos_h.begin(), q.pos_h.end());
    std::vector<double> rx(q.pos_w.begin(), q.pos_w.end());
    TaskQueries out = q;
    Var attended = add(q.embed, deform_attfeat(q.embed, f_task, p.attn, h, w, ry, rx));
    out.embed = add(attended, p.ffn.forward(attended));
    return out;
}

TaskQueries index_update_queries(const TaskQueries& q, const Var& f_task, int64_t h, int64_t w) {
    if (q.count() == 0) return q;
    require_positions_in_grid(q, h, w, "index_update_queries");
    std::vector<int64_t> cells;
    cells.reserve(q.pos_h.size());
    for (size_t i = 0; i < q.pos_h.size(); ++i) cells.push_back(bev_index(q.pos_h[i], q.pos_w[i], w));
    TaskQueries out = q;
    out.embed = add(q.embed, gather_rows(f_task, cells));
    return out;
}

DecoderOut decoder_forward(const TaskQueries& det_q, const TaskQueries& seg_q, const TaskQueries& occ_q,
                           const Var& f_bev, const DecoderParams& p, int64_t h, int64_t w, bool use_tcs) {
    if (p.variant != "transformer" && p.variant != "mamba")
        throw ConfigError("decoder variant must be 'transformer' or 'mamba', got '" + p.variant + "'");
    DecoderOut s{det_q, seg_q, occ_q, f_bev, {f_bev, f_bev, f_bev}};
    for (int64_t l = 0; l < p.layers; ++l) {
        if (p.variant == "transformer") {
            const auto& lp = p.transformer[static_cast<size_t>(l)];
            Var f1 = deformable_self_attention(s.f_bev, lp.self_attn, h, w);
            s.f_bev = add(f1, lp.ffn.forward(f1));
            s.f_task = use_tcs ? tcs(s.f_bev, lp.tcs) : std::array<Var, kNumTasks>{s.f_bev, s.f_bev, s.f_bev};
            s.det = cross_attend_queries(s.det, s.f_task[0], lp.cross[0], h, w);
            s.seg = cross_attend_queries(s.seg, s.f_task[1], lp.cross[1], h, w);
            s.occ = cross_attend_queries(s.occ, s.f_task[2], lp.cross[2], h, w);
        } else {
            const auto& lp = p.mamba[static_cast<size_t>(l)];
            s.f_bev = vss2d_scan(s.f_bev, lp.ssm, h, w);
            s.f_task = use_tcs ? tcs(s.f_bev, lp.tcs) : std::array<Var, kNumTasks>{s.f_bev, s.f_bev, s.f_bev};
            s.det = index_update_queries(s.det, s.f_task[0], h, w);
            s.seg = index_update_queries(s.seg, s.f_task[1], h, w);
            s.occ = index_update_queries(s.occ, s.f_task[2], h, w);
        }
    }
    return s;
}

}  // namespace bevmt
