#include "bevmt/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "bevmt/common.hpp"

namespace bevmt {

std::string GradCheckReport::summary() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-28s %s  checked=%lld failed=%lld worst_rel=%.3e worst_abs=%.3e",
                  name.c_str(), ok() ? "PASS" : "FAIL", static_cast<long long>(checked),
                  static_cast<long long>(failed), worst_rel, worst_abs);
    std::string s(buf);
    if (!ok() && !first_failure.empty()) s += "  [" + first_failure + "]";
    return s;
}

GradCheckReport grad_check(const std::string& name, const std::vector<Var>& params, const std::function<Var()>& f,
                           double step, double rel_tol, double abs_tol, int64_t max_entries_per_param) {
    GradCheckReport rep;
    rep.name = name;

    for (const Var& p : params) p.node()->grad_set = false;
    for (const Var& p : params) p.node()->grad = Tensor();
    Var loss = f();
    run_backward(loss);

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const Var& p : params)
        analytic.push_back(p.has_grad() ? p.node()->grad : Tensor::zeros(p.rows(), p.cols()));

    for (size_t pi = 0; pi < params.size(); ++pi) {
        Var p = params[pi];
        Tensor& w = p.value_mut();
        const int64_t numel = w.numel();
        int64_t stride = 1;
        if (max_entries_per_param > 0 && numel > max_entries_per_param)
            stride = (numel + max_entries_per_param - 1) / max_entries_per_param;
        for (int64_t j = 0; j < numel; j += stride) {
            const double keep = w.d[static_cast<size_t>(j)];
            w.d[static_cast<size_t>(j)] = keep + step;
            const double lp = f().val()(0, 0);
            w.d[static_cast<size_t>(j)] = keep - step;
            const double lm = f().val()(0, 0);
            w.d[static_cast<size_t>(j)] = keep;
            const double fd = (lp - lm) / (2.0 * step);
            const double an = analytic[pi].d[static_cast<size_t>(j)];
            ++rep.checked;
            bool pass;
            if (std::abs(an) > 1e-6) {
                const double rel = std::abs(an - fd) / std::max(std::abs(an), std::abs(fd));
                rep.worst_rel = std::max(rep.worst_rel, rel);
                pass = rel <= rel_tol;
            } else {
                const double ae = std::abs(an - fd);
                rep.worst_abs = std::max(rep.worst_abs, ae);
                pass = ae <= abs_tol;
            }
            if (!pass) {
                ++rep.failed;
                if (rep.first_failure.empty()) {
                    char buf[160];
                    std::snprintf(buf, sizeof(buf), "param %zu entry %lld: analytic=%.9e fd=%.9e", pi,
                                  static_cast<long long>(j), an, fd);
                    rep.first_failure = buf;
                }
            }
        }
    }
    return rep;
}

// ------------------------------------------------------------------ oracles

Tensor oracle_ssm_scan(const Tensor& x, const Tensor& delta, const Tensor& b, const Tensor& c, const Tensor& a,
                       const Tensor& dskip, const std::vector<int>& order, const std::vector<int>& starts) {
    const int64_t ch = x.cols, n = a.cols;
    Tensor y = Tensor::zeros(x.rows, x.cols);
    for (size_t seq = 0; seq + 1 < starts.size(); ++seq) {
        std::vector<std::vector<double>> h(static_cast<size_t>(ch), std::vector<double>(static_cast<size_t>(n), 0.0));
        for (int v = starts[seq]; v < starts[seq + 1]; ++v) {
            const int64_t tok = order[static_cast<size_t>(v)];
            for (int64_t cc = 0; cc < ch; ++cc) {
                auto& state = h[static_cast<size_t>(cc)];
                double acc = dskip(0, cc) * x(tok, cc);
                for (int64_t nn = 0; nn < n; ++nn) {
                    state[static_cast<size_t>(nn)] = std::exp(delta(tok, cc) * a(cc, nn)) * state[static_cast<size_t>(nn)] +
                                                     delta(tok, cc) * b(tok, nn) * x(tok, cc);
                    acc += c(tok, nn) * state[static_cast<size_t>(nn)];
                }
                y(tok, cc) = acc;
            }
        }
    }
    return y;
}

Tensor oracle_deform_dense(const Tensor& value, const Tensor& loc, const Tensor& attn, int64_t h, int64_t w,
                           int64_t heads) {
    const int64_t q = loc.rows, c = value.cols;
    const int64_t points = attn.cols / heads;
    const int64_t chn = c / heads;
    Tensor out = Tensor::zeros(q, c);
    std::vector<double> wmap(static_cast<size_t>(h * w));
    for (int64_t qi = 0; qi < q; ++qi)
        for (int64_t m = 0; m < heads; ++m) {
            std::fill(wmap.begin(), wmap.end(), 0.0);
            for (int64_t p = 0; p < points; ++p) {
                const int64_t pp = m * points + p;
                const double sy = loc(qi, 2 * pp), sx = loc(qi, 2 * pp + 1);
                for (int64_t r = 0; r < h; ++r)
                    for (int64_t col = 0; col < w; ++col) {
                        const double ky = std::max(0.0, 1.0 - std::abs(sy - static_cast<double>(r)));
                        const double kx = std::max(0.0, 1.0 - std::abs(sx - static_cast<double>(col)));
                        wmap[static_cast<size_t>(r * w + col)] += attn(qi, pp) * ky * kx;
                    }
            }
            for (int64_t cell = 0; cell < h * w; ++cell)
                for (int64_t cc = 0; cc < chn; ++cc)
                    out(qi, m * chn + cc) += wmap[static_cast<size_t>(cell)] * value(cell, m * chn + cc);
        }
    return out;
}

std::vector<int64_t> oracle_topk(const std::vector<double>& scores, int64_t k) {
    if (k < 0 || k > static_cast<int64_t>(scores.size()))
        throw ContractViolation("oracle_topk: k out of range");
    std::vector<int64_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t l, int64_t r) {
        if (scores[static_cast<size_t>(l)] != scores[static_cast<size_t>(r)])
            return scores[static_cast<size_t>(l)] > scores[static_cast<size_t>(r)];
        return l < r;
    });
    idx.resize(static_cast<size_t>(k));
    return idx;
}

namespace {

void assignment_recurse(const Tensor& cost, int64_t row, std::vector<char>& used, std::vector<int64_t>& cur,
                        double acc, double& best, std::vector<int64_t>& best_assign) {
    if (row == cost.rows) {
        if (acc < best) {
            best = acc;
            best_assign = cur;
        }
        return;
    }
    for (int64_t col = 0; col < cost.cols; ++col) {
        if (used[static_cast<size_t>(col)]) continue;
        used[static_cast<size_t>(col)] = 1;
        cur[static_cast<size_t>(row)] = col;
        assignment_recurse(cost, row + 1, used, cur, acc + cost(row, col), best, best_assign);
        used[static_cast<size_t>(col)] = 0;
    }
}

}  // namespace

double oracle_assignment(const Tensor& cost, std::vector<int64_t>& row_to_col) {
    if (cost.rows > cost.cols) throw ContractViolation("oracle_assignment: needs rows <= cols");
    if (cost.rows == 0) {
        row_to_col.clear();
        return 0.0;
    }
    std::vector<char> used(static_cast<size_t>(cost.cols), 0);
    std::vector<int64_t> cur(static_cast<size_t>(cost.rows), -1);
    double best = std::numeric_limits<double>::infinity();
    assignment_recurse(cost, 0, used, cur, 0.0, best, row_to_col);
    return best;
}

Tensor oracle_conv3x3(const Tensor& x, int64_t h, int64_t w, const Tensor& weights, const Tensor& bias) {
    const int64_t cin = x.cols, cout = weights.cols;
    if (weights.rows != 9 * cin) throw ContractViolation("oracle_conv3x3: weights must be [9*c_in, c_out]");
    Tensor out(h * w, cout);
    for (int64_t r = 0; r < h; ++r)
        for (int64_t q = 0; q < w; ++q)
            for (int64_t co = 0; co < cout; ++co) {
                double acc = bias(0, co);
                for (int64_t dh = -1; dh <= 1; ++dh)
                    for (int64_t dw = -1; dw <= 1; ++dw) {
                        const int64_t sr = r + dh, sq = q + dw;
                        if (sr < 0 || sr >= h || sq < 0 || sq >= w) continue;
                        const int64_t tap = (dh + 1) * 3 + (dw + 1);
                        for (int64_t ci = 0; ci < cin; ++ci)
                            acc += x(sr * w + sq, ci) * weights(tap * cin + ci, co);
                    }
                out(r * w + q, co) = acc;
            }
    return out;
}

Tensor oracle_dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
    Tensor out = Tensor::zeros(q.rows, v.cols);
    std::vector<double> row(static_cast<size_t>(k.rows));
    for (int64_t i = 0; i < q.rows; ++i) {
        double m = -1e300;
        for (int64_t j = 0; j < k.rows; ++j) {
            double s = 0.0;
            for (int64_t d = 0; d < q.cols; ++d) s += q(i, d) * k(j, d);
            row[static_cast<size_t>(j)] = s * scale;
            m = std::max(m, row[static_cast<size_t>(j)]);
        }
        double z = 0.0;
        for (int64_t j = 0; j < k.rows; ++j) {
            row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - m);
            z += row[static_cast<size_t>(j)];
        }
        for (int64_t j = 0; j < k.rows; ++j)
            for (int64_t d = 0; d < v.cols; ++d) out(i, d) += row[static_cast<size_t>(j)] / z * v(j, d);
    }
    return out;
}

Tensor oracle_trilinear(const Tensor& x, int64_t h, int64_t w, int64_t z, int64_t fh, int64_t fw, int64_t fz) {
    const int64_t oh = h * fh, ow = w * fw, oz = z * fz, c = x.cols;
    Tensor out = Tensor::zeros(oh * ow * oz, c);
    auto src = [&](int64_t o, int64_t f, int64_t lim) {
        double s = (static_cast<double>(o) + 0.5) / static_cast<double>(f) - 0.5;
        return std::min(std::max(s, 0.0), static_cast<double>(lim - 1));
    };
    for (int64_t r = 0; r < oh; ++r)
        for (int64_t q = 0; q < ow; ++q)
            for (int64_t s = 0; s < oz; ++s) {
                const double sh = src(r, fh, h), sw = src(q, fw, w), sz = src(s, fz, z);
                const int64_t h0 = static_cast<int64_t>(std::floor(sh));
                const int64_t w0 = static_cast<int64_t>(std::floor(sw));
                const int64_t z0 = static_cast<int64_t>(std::floor(sz));
                const int64_t h1 = std::min(h0 + 1, h - 1), w1 = std::min(w0 + 1, w - 1),
                              z1 = std::min(z0 + 1, z - 1);
                const double ah = sh - std::floor(sh), aw = sw - std::floor(sw), az = sz - std::floor(sz);
                for (int64_t cc = 0; cc < c; ++cc) {
                    auto at = [&](int64_t hh, int64_t ww, int64_t zz) { return x((hh * w + ww) * z + zz, cc); };
                    const double c00 = at(h0, w0, z0) * (1 - az) + at(h0, w0, z1) * az;
                    const double c01 = at(h0, w1, z0) * (1 - az) + at(h0, w1, z1) * az;
                    const double c10 = at(h1, w0, z0) * (1 - az) + at(h1, w0, z1) * az;
                    const double c11 = at(h1, w1, z0) * (1 - az) + at(h1, w1, z1) * az;
                    const double c0 = c00 * (1 - aw) + c01 * aw;
                    const double c1 = c10 * (1 - aw) + c11 * aw;
                    out((r * ow + q) * oz + s, cc) = c0 * (1 - ah) + c1 * ah;
                }
            }
    return out;
}

double oracle_focal_term(double p, double y, double alpha, double gamma) {
    const double pc = std::min(std::max(p, 1e-7), 1.0 - 1e-7);
    return -(y * alpha * std::pow(1.0 - pc, gamma) * std::log(pc) +
             (1.0 - y) * (1.0 - alpha) * std::pow(pc, gamma) * std::log(1.0 - pc));
}

}  // namespace bevmt
