#include "bevmt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_set>
#include <utility>

namespace bevmt {

Tensor& ensure_grad(Node& n) {
    if (!n.grad_set) {
        n.grad = Tensor::zeros(n.val.rows, n.val.cols);
        n.grad_set = true;
    }
    return n.grad;
}

Tensor& Var::grad() const { return ensure_grad(*n_); }

Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->op = "constant";
    return Var(n);
}

Var make_param(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->requires_grad = true;
    n->op = "param";
    return Var(n);
}

Var make_op(Tensor val, std::vector<Var> parents, std::function<void(Node&)> bwd, const char* opname) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->op = opname;
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(bwd);
    }
    return Var(n);
}

void accumulate(const Var& v, const Tensor& g) {
    if (!v.requires_grad()) return;
    require_same_shape(v.val(), g, "gradient accumulate");
    ensure_grad(*v.node()).map() += g.cmap();
}

void run_backward(const Var& root) {
    if (!root.defined()) throw ContractViolation("backward on undefined Var");
    if (root.rows() != 1 || root.cols() != 1)
        throw ContractViolation("backward root must be a 1x1 scalar");
    if (!root.requires_grad()) return;
    ensure_grad(*root.node())(0, 0) += 1.0;

    // Iterative post-order DFS over parent edges; reversed post-order is a
    // topological order where every consumer precedes its producers.
    std::vector<Node*> postorder;
    std::vector<std::pair<Node*, size_t>> stack;
    std::unordered_set<Node*> visited;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            postorder.push_back(n);
            stack.pop_back();
        }
    }
    for (auto it = postorder.rbegin(); it != postorder.rend(); ++it) {
        Node* n = *it;
        if (n->grad_set && n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "add");
    Tensor out(a.rows(), a.cols());
    out.map() = a.val().cmap() + b.val().cmap();
    return make_op(std::move(out), {a, b},
                   [a, b](Node& self) {
                       if (a.requires_grad()) ensure_grad(*a.node()).map() += self.grad.cmap();
                       if (b.requires_grad()) ensure_grad(*b.node()).map() += self.grad.cmap();
                   },
                   "add");
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "sub");
    Tensor out(a.rows(), a.cols());
    out.map() = a.val().cmap() - b.val().cmap();
    return make_op(std::move(out), {a, b},
                   [a, b](Node& self) {
                       if (a.requires_grad()) ensure_grad(*a.node()).map() += self.grad.cmap();
                       if (b.requires_grad()) ensure_grad(*b.node()).map() -= self.grad.cmap();
                   },
                   "sub");
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.val(), b.val(), "mul");
    Tensor out(a.rows(), a.cols());
    out.map().array() = a.val().cmap().array() * b.val().cmap().array();
    return make_op(std::move(out), {a, b},
                   [a, b](Node& self) {
                       if (a.requires_grad())
                           ensure_grad(*a.node()).map().array() += self.grad.cmap().array() * b.val().cmap().array();
                       if (b.requires_grad())
                           ensure_grad(*b.node()).map().array() += self.grad.cmap().array() * a.val().cmap().array();
                   },
                   "mul");
}

Var scale(const Var& a, double s) {
    Tensor out(a.rows(), a.cols());
    out.map() = a.val().cmap() * s;
    return make_op(std::move(out), {a},
                   [a, s](Node& self) {
                       if (a.requires_grad()) ensure_grad(*a.node()).map() += self.grad.cmap() * s;
                   },
                   "scale");
}

Var neg(const Var& x) { return scale(x, -1.0); }

Var sigmoid(const Var& x) {
    Tensor out(x.rows(), x.cols());
    const double* xd = x.val().d.data();
    double* od = out.d.data();
    for (int64_t i = 0; i < out.numel(); ++i)
        od[i] = xd[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-xd[i])) : std::exp(xd[i]) / (1.0 + std::exp(xd[i]));
    Tensor s = out;
    return make_op(std::move(out), {x},
                   [x, s = std::move(s)](Node& self) {
                       if (!x.requires_grad()) return;
                       ensure_grad(*x.node()).map().array() +=
                           self.grad.cmap().array() * s.cmap().array() * (1.0 - s.cmap().array());
                   },
                   "sigmoid");
}

Var silu(const Var& x) {
    Tensor out(x.rows(), x.cols());
    Tensor s(x.rows(), x.cols());
    const double* xd = x.val().d.data();
    double* od = out.d.data();
    double* sd = s.d.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        sd[i] = xd[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-xd[i])) : std::exp(xd[i]) / (1.0 + std::exp(xd[i]));
        od[i] = xd[i] * sd[i];
    }
    return make_op(std::move(out), {x},
                   [x, s = std::move(s)](Node& self) {
                       if (!x.requires_grad()) return;
                       auto xs = x.val().cmap().array();
                       auto sa = s.cmap().array();
                       ensure_grad(*x.node()).map().array() +=
                           self.grad.cmap().array() * (sa + xs * sa * (1.0 - sa));
                   },
                   "silu");
}

Var softplus(const Var& x) {
    Tensor out(x.rows(), x.cols());
    const double* xd = x.val().d.data();
    double* od = out.d.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double v = xd[i];
        od[i] = v > 30.0 ? v : (v < -30.0 ? std::exp(v) : std::log1p(std::exp(v)));
    }
    return make_op(std::move(out), {x},
                   [x](Node& self) {
                       if (!x.requires_grad()) return;
                       auto& g = ensure_grad(*x.node());
                       const double* xd = x.val().d.data();
                       const double* sg = self.grad.d.data();
                       for (int64_t i = 0; i < g.numel(); ++i) {
                           const double v = xd[i];
                           const double sig = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
                           g.d[i] += sg[i] * sig;
                       }
                   },
                   "softplus");
}

Var exp_of(const Var& x) {
    Tensor out(x.rows(), x.cols());
    out.map().array() = x.val().cmap().array().exp();
    Tensor y = out;
    return make_op(std::move(out), {x},
                   [x, y = std::move(y)](Node& self) {
                       if (x.requires_grad())
                           ensure_grad(*x.node()).map().array() += self.grad.cmap().array() * y.cmap().array();
                   },
                   "exp");
}

Var abs_of(const Var& x) {
    Tensor out(x.rows(), x.cols());
    out.map().array() = x.val().cmap().array().abs();
    return make_op(std::move(out), {x},
                   [x](Node& self) {
                       if (!x.requires_grad()) return;
                       auto& g = ensure_grad(*x.node());
                       const double* xd = x.val().d.data();
                       const double* sg = self.grad.d.data();
                       for (int64_t i = 0; i < g.numel(); ++i)
                           g.d[i] += sg[i] * (xd[i] > 0.0 ? 1.0 : (xd[i] < 0.0 ? -1.0 : 0.0));
                   },
                   "abs");
}

Var softmax_rows(const Var& x) {
    Tensor out(x.rows(), x.cols());
    for (int64_t r = 0; r < x.rows(); ++r) {
        double m = -1e300;
        for (int64_t c = 0; c < x.cols(); ++c) m = std::max(m, x.val()(r, c));
        double z = 0.0;
        for (int64_t c = 0; c < x.cols(); ++c) {
            out(r, c) = std::exp(x.val()(r, c) - m);
            z += out(r, c);
        }
        for (int64_t c = 0; c < x.cols(); ++c) out(r, c) /= z;
    }
    Tensor p = out;
    return make_op(std::move(out), {x},
                   [x, p = std::move(p)](Node& self) {
                       if (!x.requires_grad()) return;
                       auto& g = ensure_grad(*x.node());
                       for (int64_t r = 0; r < g.rows; ++r) {
                           double dot = 0.0;
                           for (int64_t c = 0; c < g.cols; ++c) dot += self.grad(r, c) * p(r, c);
                           for (int64_t c = 0; c < g.cols; ++c) g(r, c) += p(r, c) * (self.grad(r, c) - dot);
                       }
                   },
                   "softmax_rows");
}

Var sum_all(const Var& x) {
    Tensor out(1, 1);
    out(0, 0) = x.val().cmap().sum();
    return make_op(std::move(out), {x},
                   [x](Node& self) {
                       if (x.requires_grad()) ensure_grad(*x.node()).map().array() += self.grad(0, 0);
                   },
                   "sum_all");
}

Var mean_all(const Var& x) {
    const double inv = 1.0 / static_cast<double>(x.val().numel());
    Tensor out(1, 1);
    out(0, 0) = x.val().cmap().sum() * inv;
    return make_op(std::move(out), {x},
                   [x, inv](Node& self) {
                       if (x.requires_grad()) ensure_grad(*x.node()).map().array() += self.grad(0, 0) * inv;
                   },
                   "mean_all");
}

Var add_rowvec(const Var& x, const Var& row) {
    if (row.rows() != 1 || row.cols() != x.cols())
        throw ContractViolation("add_rowvec: row must be [1, cols(x)]");
    Tensor out(x.rows(), x.cols());
    out.map() = x.val().cmap();
    out.map().rowwise() += row.val().cmap().row(0);
    return make_op(std::move(out), {x, row},
                   [x, row](Node& self) {
                       if (x.requires_grad()) ensure_grad(*x.node()).map() += self.grad.cmap();
                       if (row.requires_grad())
                           ensure_grad(*row.node()).map().row(0) += self.grad.cmap().colwise().sum();
                   },
                   "add_rowvec");
}

Var outer_add(const Var& col, const Var& row) {
    if (col.cols() != 1 || row.rows() != 1)
        throw ContractViolation("outer_add: need col [N,1] and row [1,C]");
    Tensor out(col.rows(), row.cols());
    for (int64_t r = 0; r < out.rows; ++r)
        for (int64_t c = 0; c < out.cols; ++c) out(r, c) = col.val()(r, 0) + row.val()(0, c);
    return make_op(std::move(out), {col, row},
                   [col, row](Node& self) {
                       if (col.requires_grad())
                           ensure_grad(*col.node()).map().col(0) += self.grad.cmap().rowwise().sum();
                       if (row.requires_grad())
                           ensure_grad(*row.node()).map().row(0) += self.grad.cmap().colwise().sum();
                   },
                   "outer_add");
}

Var concat_cols(const Var& a, const Var& b) {
    if (a.rows() != b.rows()) throw ContractViolation("concat_cols: row mismatch");
    Tensor out(a.rows(), a.cols() + b.cols());
    out.map().leftCols(a.cols()) = a.val().cmap();
    out.map().rightCols(b.cols()) = b.val().cmap();
    const int64_t ac = a.cols();
    return make_op(std::move(out), {a, b},
                   [a, b, ac](Node& self) {
                       if (a.requires_grad()) ensure_grad(*a.node()).map() += self.grad.cmap().leftCols(ac);
                       if (b.requires_grad())
                           ensure_grad(*b.node()).map() += self.grad.cmap().rightCols(self.grad.cols - ac);
                   },
                   "concat_cols");
}

Var slice_cols(const Var& x, int64_t c0, int64_t c1) {
    if (c0 < 0 || c1 > x.cols() || c0 >= c1) throw ContractViolation("slice_cols: bad range");
    Tensor out(x.rows(), c1 - c0);
    out.map() = x.val().cmap().middleCols(c0, c1 - c0);
    return make_op(std::move(out), {x},
                   [x, c0](Node& self) {
                       if (x.requires_grad())
                           ensure_grad(*x.node()).map().middleCols(c0, self.grad.cols) += self.grad.cmap();
                   },
                   "slice_cols");
}

Var gather_rows(const Var& x, std::vector<int64_t> idx) {
    for (int64_t i : idx)
        if (i < 0 || i >= x.rows()) throw ContractViolation("gather_rows: index out of range");
    Tensor out(static_cast<int64_t>(idx.size()), x.cols());
    for (size_t r = 0; r < idx.size(); ++r)
        out.map().row(static_cast<int64_t>(r)) = x.val().cmap().row(idx[r]);
    return make_op(std::move(out), {x},
                   [x, idx = std::move(idx)](Node& self) {
                       if (!x.requires_grad()) return;
                       auto& g = ensure_grad(*x.node());
                       for (size_t r = 0; r < idx.size(); ++r)
                           g.map().row(idx[r]) += self.grad.cmap().row(static_cast<int64_t>(r));
                   },
                   "gather_rows");
}

Var scatter_rows(const Var& x, std::vector<int64_t> idx, int64_t out_rows) {
    if (static_cast<int64_t>(idx.size()) != x.rows())
        throw ContractViolation("scatter_rows: idx size must equal rows(x)");
    for (int64_t i : idx)
        if (i < 0 || i >= out_rows) throw ContractViolation("scatter_rows: index out of range");
    Tensor out = Tensor::zeros(out_rows, x.cols());
    for (size_t r = 0; r < idx.size(); ++r)
        out.map().row(idx[r]) += x.val().cmap().row(static_cast<int64_t>(r));
    return make_op(std::move(out), {x},
                   [x, idx = std::move(idx)](Node& self) {
                       if (!x.requires_grad()) return;
                       auto& g = ensure_grad(*x.node());
                       for (size_t r = 0; r < idx.size(); ++r)
                           g.map().row(static_cast<int64_t>(r)) += self.grad.cmap().row(idx[r]);
                   },
                   "scatter_rows");
}

// ------------------------------------------------------------ linear algebra

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw ContractViolation("matmul: inner dimension mismatch");
    Tensor out(a.rows(), b.cols());
    out.map().noalias() = a.val().cmap() * b.val().cmap();
    return make_op(std::move(out), {a, b},
                   [a, b](Node& self) {
                       if (a.requires_grad())
                           ensure_grad(*a.node()).map().noalias() += self.grad.cmap() * b.val().cmap().transpose();
                       if (b.requires_grad())
                           ensure_grad(*b.node()).map().noalias() += a.val().cmap().transpose() * self.grad.cmap();
                   },
                   "matmul");
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) throw ContractViolation("matmul_nt: inner dimension mismatch");
    Tensor out(a.rows(), b.rows());
    out.map().noalias() = a.val().cmap() * b.val().cmap().transpose();
    return make_op(std::move(out), {a, b},
                   [a, b](Node& self) {
                       if (a.requires_grad())
                           ensure_grad(*a.node()).map().noalias() += self.grad.cmap() * b.val().cmap();
                       if (b.requires_grad())
                           ensure_grad(*b.node()).map().noalias() += self.grad.cmap().transpose() * a.val().cmap();
                   },
                   "matmul_nt");
}

Var affine(const Var& x, const Var& w, const Var& b) {
    if (x.cols() != w.rows()) throw ContractViolation("affine: inner dimension mismatch");
    Tensor out(x.rows(), w.cols());
    out.map().noalias() = x.val().cmap() * w.val().cmap();
    std::vector<Var> parents{x, w};
    if (b.defined()) {
        if (b.rows() != 1 || b.cols() != w.cols()) throw ContractViolation("affine: bias must be [1, cols(w)]");
        out.map().rowwise() += b.val().cmap().row(0);
        parents.push_back(b);
    }
    return make_op(std::move(out), std::move(parents),
                   [x, w, b](Node& self) {
                       if (x.requires_grad())
                           ensure_grad(*x.node()).map().noalias() += self.grad.cmap() * w.val().cmap().transpose();
                       if (w.requires_grad())
                           ensure_grad(*w.node()).map().noalias() += x.val().cmap().transpose() * self.grad.cmap();
                       if (b.defined() && b.requires_grad())
                           ensure_grad(*b.node()).map().row(0) += self.grad.cmap().colwise().sum();
                   },
                   "affine");
}

// ------------------------------------------------------------------- im2col

Var im2col3x3(const Var& x, int64_t h, int64_t w) {
    if (x.rows() != h * w) throw ContractViolation("im2col3x3: rows(x) must be h*w");
    const int64_t c = x.cols();
    Tensor out = Tensor::zeros(h * w, 9 * c);
    for (int64_t r = 0; r < h; ++r)
        for (int64_t q = 0; q < w; ++q) {
            const int64_t base = r * w + q;
            for (int64_t dh = -1; dh <= 1; ++dh)
                for (int64_t dw = -1; dw <= 1; ++dw) {
                    const int64_t sr = r + dh, sq = q + dw;
                    if (sr < 0 || sr >= h || sq < 0 || sq >= w) continue;
                    const int64_t tap = (dh + 1) * 3 + (dw + 1);
                    out.map().row(base).segment(tap * c, c) = x.val().cmap().row(sr * w + sq);
                }
        }
    return make_op(std::move(out), {x},
                   [x, h, w, c](Node& self) {
                       if (!x.requires_grad()) return;
                       auto& g = ensure_grad(*x.node());
                       for (int64_t r = 0; r < h; ++r)
                           for (int64_t q = 0; q < w; ++q) {
                               const int64_t base = r * w + q;
                               for (int64_t dh = -1; dh <= 1; ++dh)
                                   for (int64_t dw = -1; dw <= 1; ++dw) {
                                       const int64_t sr = r + dh, sq = q + dw;
                                       if (sr < 0 || sr >= h || sq < 0 || sq >= w) continue;
                                       const int64_t tap = (dh + 1) * 3 + (dw + 1);
                                       g.map().row(sr * w + sq) += self.grad.cmap().row(base).segment(tap * c, c);
                                   }
                           }
                   },
                   "im2col3x3");
}

// ----------------------------------------------------------- deform_attend

namespace {

struct Corner {
    int64_t hh, ww;
    double weight;   // bilinear weight
    double dw_dy;    // d weight / d y
    double dw_dx;    // d weight / d x
    bool valid;
};

inline void bilinear_corners(double y, double x, int64_t h, int64_t w, Corner out[4]) {
    const double fy = std::floor(y), fx = std::floor(x);
    const int64_t h0 = static_cast<int64_t>(fy), w0 = static_cast<int64_t>(fx);
    const double ly = y - fy, lx = x - fx;
    const double hy = 1.0 - ly, hx = 1.0 - lx;
    out[0] = {h0, w0, hy * hx, -hx, -hy, false};
    out[1] = {h0, w0 + 1, hy * lx, -lx, hy, false};
    out[2] = {h0 + 1, w0, ly * hx, hx, -ly, false};
    out[3] = {h0 + 1, w0 + 1, ly * lx, lx, ly, false};
    for (int i = 0; i < 4; ++i)
        out[i].valid = out[i].hh >= 0 && out[i].hh < h && out[i].ww >= 0 && out[i].ww < w;
}

}  // namespace

Var deform_attend(const Var& value, const Var& loc, const Var& attn, int64_t h, int64_t w, int64_t heads) {
    const int64_t c = value.cols();
    if (value.rows() != h * w) throw ContractViolation("deform_attend: rows(value) must be h*w");
    if (heads <= 0 || c % heads != 0) throw ContractViolation("deform_attend: channels must split evenly across heads");
    const int64_t q = loc.rows();
    if (attn.rows() != q) throw ContractViolation("deform_attend: loc/attn row mismatch");
    if (loc.cols() % 2 != 0 || loc.cols() != 2 * attn.cols())
        throw ContractViolation("deform_attend: loc must hold (y,x) per attention weight");
    if (attn.cols() % heads != 0) throw ContractViolation("deform_attend: points must split evenly across heads");
    const int64_t points = attn.cols() / heads;
    const int64_t ch = c / heads;

    Tensor out = Tensor::zeros(q, c);
    for (int64_t qi = 0; qi < q; ++qi)
        for (int64_t m = 0; m < heads; ++m)
            for (int64_t p = 0; p < points; ++p) {
                const int64_t pp = m * points + p;
                const double a = attn.val()(qi, pp);
                Corner cr[4];
                bilinear_corners(loc.val()(qi, 2 * pp), loc.val()(qi, 2 * pp + 1), h, w, cr);
                for (const Corner& k : cr) {
                    if (!k.valid) continue;
                    const int64_t src = k.hh * w + k.ww;
                    for (int64_t cc = 0; cc < ch; ++cc)
                        out(qi, m * ch + cc) += a * k.weight * value.val()(src, m * ch + cc);
                }
            }

    return make_op(std::move(out), {value, loc, attn},
                   [value, loc, attn, h, w, heads, points, ch](Node& self) {
                       Tensor* gv = value.requires_grad() ? &ensure_grad(*value.node()) : nullptr;
                       Tensor* gl = loc.requires_grad() ? &ensure_grad(*loc.node()) : nullptr;
                       Tensor* ga = attn.requires_grad() ? &ensure_grad(*attn.node()) : nullptr;
                       for (int64_t qi = 0; qi < self.grad.rows; ++qi)
                           for (int64_t m = 0; m < heads; ++m)
                               for (int64_t p = 0; p < points; ++p) {
                                   const int64_t pp = m * points + p;
                                   const double a = attn.val()(qi, pp);
                                   Corner cr[4];
                                   bilinear_corners(loc.val()(qi, 2 * pp), loc.val()(qi, 2 * pp + 1), h, w, cr);
                                   double da = 0.0, dy = 0.0, dx = 0.0;
                                   for (const Corner& k : cr) {
                                       if (!k.valid) continue;
                                       const int64_t src = k.hh * w + k.ww;
                                       for (int64_t cc = 0; cc < ch; ++cc) {
                                           const double go = self.grad(qi, m * ch + cc);
                                           const double v = value.val()(src, m * ch + cc);
                                           if (gv) (*gv)(src, m * ch + cc) += go * a * k.weight;
                                           da += go * k.weight * v;
                                           dy += go * a * k.dw_dy * v;
                                           dx += go * a * k.dw_dx * v;
                                       }
                                   }
                                   if (ga) (*ga)(qi, pp) += da;
                                   if (gl) {
                                       (*gl)(qi, 2 * pp) += dy;
                                       (*gl)(qi, 2 * pp + 1) += dx;
                                   }
                               }
                   },
                   "deform_attend");
}

// ---------------------------------------------------------- selective_scan

Var selective_scan(const Var& x, const Var& delta, const Var& b, const Var& c, const Var& a, const Var& dskip,
                   std::vector<int> order, std::vector<int> starts) {
    const int64_t t = x.rows(), ch = x.cols(), n = a.cols();
    require_same_shape(x.val(), delta.val(), "selective_scan x/delta");
    if (b.rows() != t || c.rows() != t || b.cols() != n || c.cols() != n)
        throw ContractViolation("selective_scan: b/c must be [T,N]");
    if (a.rows() != ch) throw ContractViolation("selective_scan: a must be [C,N]");
    if (dskip.rows() != 1 || dskip.cols() != ch) throw ContractViolation("selective_scan: dskip must be [1,C]");
    if (static_cast<int64_t>(order.size()) != t)
        throw ContractViolation("selective_scan: order must visit every token once");
    {
        std::vector<char> seen(static_cast<size_t>(t), 0);
        for (int o : order) {
            if (o < 0 || o >= t || seen[static_cast<size_t>(o)])
                throw ContractViolation("selective_scan: order must be a permutation of tokens");
            seen[static_cast<size_t>(o)] = 1;
        }
    }
    if (starts.empty() || starts.front() != 0 || starts.back() != static_cast<int>(t))
        throw ContractViolation("selective_scan: starts must begin at 0 and end at T");
    for (size_t k = 0; k + 1 < starts.size(); ++k)
        if (starts[k] >= starts[k + 1]) throw ContractViolation("selective_scan: starts must be strictly increasing");

    // Dense cache of hidden states in visit order: hcache[(v*ch + cc)*n + nn].
    std::vector<double> hcache(static_cast<size_t>(t) * ch * n);
    Tensor out = Tensor::zeros(t, ch);
    std::vector<double> h(static_cast<size_t>(ch) * n);
    for (size_t seq = 0; seq + 1 < starts.size(); ++seq) {
        std::fill(h.begin(), h.end(), 0.0);
        for (int v = starts[seq]; v < starts[seq + 1]; ++v) {
            const int64_t tok = order[static_cast<size_t>(v)];
            for (int64_t cc = 0; cc < ch; ++cc) {
                const double dt = delta.val()(tok, cc);
                const double xv = x.val()(tok, cc);
                double y = dskip.val()(0, cc) * xv;
                double* hrow = h.data() + cc * n;
                double* hout = hcache.data() + (static_cast<size_t>(v) * ch + cc) * n;
                for (int64_t nn = 0; nn < n; ++nn) {
                    const double arg = dt * a.val()(cc, nn);
                    if (arg > 1e-9) throw NumericError("selective_scan: unstable discretization (delta*a > 0)");
                    const double abar = std::exp(arg);
                    hrow[nn] = abar * hrow[nn] + dt * b.val()(tok, nn) * xv;
                    hout[nn] = hrow[nn];
                    y += c.val()(tok, nn) * hrow[nn];
                }
                out(tok, cc) = y;
            }
        }
    }

    return make_op(
        std::move(out), {x, delta, b, c, a, dskip},
        [x, delta, b, c, a, dskip, order = std::move(order), starts = std::move(starts),
         hcache = std::move(hcache), t, ch, n](Node& self) {
            Tensor* gx = x.requires_grad() ? &ensure_grad(*x.node()) : nullptr;
            Tensor* gd = delta.requires_grad() ? &ensure_grad(*delta.node()) : nullptr;
            Tensor* gb = b.requires_grad() ? &ensure_grad(*b.node()) : nullptr;
            Tensor* gc = c.requires_grad() ? &ensure_grad(*c.node()) : nullptr;
            Tensor* ga = a.requires_grad() ? &ensure_grad(*a.node()) : nullptr;
            Tensor* gskip = dskip.requires_grad() ? &ensure_grad(*dskip.node()) : nullptr;
            std::vector<double> lam(static_cast<size_t>(ch) * n);
            for (size_t seq = 0; seq + 1 < starts.size(); ++seq) {
                std::fill(lam.begin(), lam.end(), 0.0);
                for (int v = starts[seq + 1] - 1; v >= starts[seq]; --v) {
                    const int64_t tok = order[static_cast<size_t>(v)];
                    const bool first = (v == starts[seq]);
                    for (int64_t cc = 0; cc < ch; ++cc) {
                        const double go = self.grad(tok, cc);
                        const double dt = delta.val()(tok, cc);
                        const double xv = x.val()(tok, cc);
                        const double* hcur = hcache.data() + (static_cast<size_t>(v) * ch + cc) * n;
                        const double* hprev =
                            first ? nullptr : hcache.data() + (static_cast<size_t>(v - 1) * ch + cc) * n;
                        double* lrow = lam.data() + cc * n;
                        double dxv = go * dskip.val()(0, cc);
                        if (gskip) (*gskip)(0, cc) += go * xv;
                        double ddt = 0.0;
                        for (int64_t nn = 0; nn < n; ++nn) {
                            const double cv = c.val()(tok, nn);
                            if (gc) (*gc)(tok, nn) += go * hcur[nn];
                            double l = lrow[nn] + go * cv;
                            const double av = a.val()(cc, nn);
                            const double abar = std::exp(dt * av);
                            const double hp = first ? 0.0 : hprev[nn];
                            const double dabar = l * hp;
                            ddt += l * b.val()(tok, nn) * xv + dabar * abar * av;
                            if (ga) (*ga)(cc, nn) += dabar * abar * dt;
                            if (gb) (*gb)(tok, nn) += l * dt * xv;
                            dxv += l * dt * b.val()(tok, nn);
                            lrow[nn] = abar * l;
                        }
                        if (gd) (*gd)(tok, cc) += ddt;
                        if (gx) (*gx)(tok, cc) += dxv;
                    }
                }
            }
        },
        "selective_scan");
}

// ----------------------------------------------------------- sdp_attention

Var sdp_attention(const Var& q, const Var& k, const Var& v, double scale_factor) {
    if (q.cols() != k.cols()) throw ContractViolation("sdp_attention: q/k depth mismatch");
    if (k.rows() != v.rows()) throw ContractViolation("sdp_attention: k/v row mismatch");
    const int64_t nq = q.rows(), nk = k.rows();
    Tensor p(nq, nk);
    p.map().noalias() = q.val().cmap() * k.val().cmap().transpose();
    p.map() *= scale_factor;
    for (int64_t r = 0; r < nq; ++r) {
        double m = p.cmap().row(r).maxCoeff();
        p.map().row(r) = (p.cmap().row(r).array() - m).exp();
        p.map().row(r) /= p.cmap().row(r).sum();
    }
    Tensor out(nq, v.cols());
    out.map().noalias() = p.cmap() * v.val().cmap();
    return make_op(std::move(out), {q, k, v},
                   [q, k, v, scale_factor, p = std::move(p)](Node& self) {
                       Tensor dp(p.rows, p.cols);
                       dp.map().noalias() = self.grad.cmap() * v.val().cmap().transpose();
                       if (v.requires_grad())
                           ensure_grad(*v.node()).map().noalias() += p.cmap().transpose() * self.grad.cmap();
                       // softmax jacobian, then scale
                       Tensor ds(p.rows, p.cols);
                       for (int64_t r = 0; r < p.rows; ++r) {
                           const double dot = (dp.cmap().row(r).array() * p.cmap().row(r).array()).sum();
                           ds.map().row(r) =
                               (p.cmap().row(r).array() * (dp.cmap().row(r).array() - dot)).matrix() * scale_factor;
                       }
                       if (q.requires_grad())
                           ensure_grad(*q.node()).map().noalias() += ds.cmap() * k.val().cmap();
                       if (k.requires_grad())
                           ensure_grad(*k.node()).map().noalias() += ds.cmap().transpose() * q.val().cmap();
                   },
                   "sdp_attention");
}

// ------------------------------------------------------ trilinear_upsample

namespace {

struct AxisTap {
    int64_t i0, i1;
    double w1;  // weight of i1; i0 gets 1-w1
};

std::vector<AxisTap> axis_taps(int64_t coarse, int64_t factor) {
    std::vector<AxisTap> taps(static_cast<size_t>(coarse * factor));
    for (int64_t o = 0; o < coarse * factor; ++o) {
        double s = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        s = std::min(std::max(s, 0.0), static_cast<double>(coarse - 1));
        const double f = std::floor(s);
        AxisTap& tp = taps[static_cast<size_t>(o)];
        tp.i0 = static_cast<int64_t>(f);
        tp.i1 = std::min(tp.i0 + 1, coarse - 1);
        tp.w1 = s - f;
    }
    return taps;
}

}  // namespace

Var trilinear_upsample(const Var& x, int64_t h, int64_t w, int64_t z, int64_t fh, int64_t fw, int64_t fz) {
    if (x.rows() != h * w * z) throw ContractViolation("trilinear_upsample: rows(x) must be h*w*z");
    if (fh < 1 || fw < 1 || fz < 1) throw ContractViolation("trilinear_upsample: factors must be >= 1");
    const int64_t c = x.cols();
    const int64_t oh = h * fh, ow = w * fw, oz = z * fz;
    const auto th = axis_taps(h, fh), tw = axis_taps(w, fw), tz = axis_taps(z, fz);

    Tensor out = Tensor::zeros(oh * ow * oz, c);
    auto xm = x.val().cmap();
    auto om = out.map();
    for (int64_t r = 0; r < oh; ++r) {
        const AxisTap& ah = th[static_cast<size_t>(r)];
        for (int64_t q = 0; q < ow; ++q) {
            const AxisTap& aw = tw[static_cast<size_t>(q)];
            for (int64_t s = 0; s < oz; ++s) {
                const AxisTap& az = tz[static_cast<size_t>(s)];
                const int64_t dst = (r * ow + q) * oz + s;
                const double wh[2] = {1.0 - ah.w1, ah.w1};
                const double ww[2] = {1.0 - aw.w1, aw.w1};
                const double wz[2] = {1.0 - az.w1, az.w1};
                const int64_t ih[2] = {ah.i0, ah.i1}, iw[2] = {aw.i0, aw.i1}, iz[2] = {az.i0, az.i1};
                for (int bh = 0; bh < 2; ++bh)
                    for (int bw = 0; bw < 2; ++bw)
                        for (int bz = 0; bz < 2; ++bz) {
                            const double wt = wh[bh] * ww[bw] * wz[bz];
                            if (wt == 0.0) continue;
                            om.row(dst) += wt * xm.row((ih[bh] * w + iw[bw]) * z + iz[bz]);
                        }
            }
        }
    }
    return make_op(std::move(out), {x},
                   [x, h, w, z, fh, fw, fz, th, tw, tz](Node& self) {
                       if (!x.requires_grad()) return;
                       auto gm = ensure_grad(*x.node()).map();
                       const int64_t ow = w * fw, oz = z * fz;
                       for (int64_t r = 0; r < h * fh; ++r) {
                           const AxisTap& ah = th[static_cast<size_t>(r)];
                           for (int64_t q = 0; q < ow; ++q) {
                               const AxisTap& aw = tw[static_cast<size_t>(q)];
                               for (int64_t s = 0; s < oz; ++s) {
                                   const AxisTap& az = tz[static_cast<size_t>(s)];
                                   const int64_t dst = (r * ow + q) * oz + s;
                                   const double wh[2] = {1.0 - ah.w1, ah.w1};
                                   const double wwt[2] = {1.0 - aw.w1, aw.w1};
                                   const double wzt[2] = {1.0 - az.w1, az.w1};
                                   const int64_t ih[2] = {ah.i0, ah.i1}, iw[2] = {aw.i0, aw.i1},
                                                 iz[2] = {az.i0, az.i1};
                                   for (int bh = 0; bh < 2; ++bh)
                                       for (int bw = 0; bw < 2; ++bw)
                                           for (int bz = 0; bz < 2; ++bz) {
                                               const double wt = wh[bh] * wwt[bw] * wzt[bz];
                                               if (wt == 0.0) continue;
                                               gm.row((ih[bh] * w + iw[bw]) * z + iz[bz]) +=
                                                   wt * self.grad.cmap().row(dst);
                                           }
                               }
                           }
                       }
                   },
                   "trilinear_upsample");
}

Tensor trilinear_point(const Tensor& x, int64_t h, int64_t w, int64_t z, double py, double px, double pz) {
    if (x.rows != h * w * z) throw ContractViolation("trilinear_point: rows(x) must be h*w*z");
    const auto clamp_axis = [](double s, int64_t n) { return std::min(std::max(s, 0.0), static_cast<double>(n - 1)); };
    const double sy = clamp_axis(py, h), sx = clamp_axis(px, w), sz = clamp_axis(pz, z);
    const int64_t y0 = static_cast<int64_t>(std::floor(sy)), y1 = std::min(y0 + 1, h - 1);
    const int64_t x0 = static_cast<int64_t>(std::floor(sx)), x1 = std::min(x0 + 1, w - 1);
    const int64_t z0 = static_cast<int64_t>(std::floor(sz)), z1 = std::min(z0 + 1, z - 1);
    const double fy = sy - std::floor(sy), fx = sx - std::floor(sx), fz = sz - std::floor(sz);
    const double wh[2] = {1.0 - fy, fy}, ww[2] = {1.0 - fx, fx}, wz[2] = {1.0 - fz, fz};
    const int64_t ih[2] = {y0, y1}, iw[2] = {x0, x1}, iz[2] = {z0, z1};
    Tensor out = Tensor::zeros(1, x.cols);
    auto om = out.map();
    auto xm = x.cmap();
    for (int bh = 0; bh < 2; ++bh)
        for (int bw = 0; bw < 2; ++bw)
            for (int bz = 0; bz < 2; ++bz)
                om.row(0) += wh[bh] * ww[bw] * wz[bz] * xm.row((ih[bh] * w + iw[bw]) * z + iz[bz]);
    return out;
}

// ------------------------------------------------------------ fused losses

Var focal_loss_mean(const Var& p, const Tensor& target, double alpha, double gamma) {
    require_same_shape(p.val(), target, "focal_loss_mean");
    constexpr double kEps = 1e-7;
    const int64_t numel = p.val().numel();
    double total = 0.0;
    for (int64_t i = 0; i < numel; ++i) {
        const double pc = std::min(std::max(p.val().d[static_cast<size_t>(i)], kEps), 1.0 - kEps);
        const double y = target.d[static_cast<size_t>(i)];
        total -= y * alpha * std::pow(1.0 - pc, gamma) * std::log(pc) +
                 (1.0 - y) * (1.0 - alpha) * std::pow(pc, gamma) * std::log(1.0 - pc);
    }
    Tensor out(1, 1);
    out(0, 0) = total / static_cast<double>(numel);
    return make_op(std::move(out), {p},
                   [p, target, alpha, gamma, numel](Node& self) {
                       if (!p.requires_grad()) return;
                       auto& g = ensure_grad(*p.node());
                       const double go = self.grad(0, 0) / static_cast<double>(numel);
                       for (int64_t i = 0; i < numel; ++i) {
                           const double praw = p.val().d[static_cast<size_t>(i)];
                           if (praw < kEps || praw > 1.0 - kEps) continue;  // clamped: flat
                           const double y = target.d[static_cast<size_t>(i)];
                           const double lp = std::log(praw), lq = std::log(1.0 - praw);
                           const double pow1 = std::pow(1.0 - praw, gamma);
                           const double pow0 = std::pow(praw, gamma);
                           const double d1 =
                               alpha * ((gamma == 0.0 ? 0.0 : gamma * std::pow(1.0 - praw, gamma - 1.0) * lp) -
                                        pow1 / praw);
                           const double d0 =
                               (1.0 - alpha) * (pow0 / (1.0 - praw) -
                                                (gamma == 0.0 ? 0.0 : gamma * std::pow(praw, gamma - 1.0) * lq));
                           g.d[static_cast<size_t>(i)] += go * (y * d1 + (1.0 - y) * d0);
                       }
                   },
                   "focal_loss_mean");
}

Var softmax_xent_weighted(const Var& logits, const std::vector<int>& labels,
                          const std::vector<double>& class_weights) {
    const int64_t nr = logits.rows(), k = logits.cols();
    if (static_cast<int64_t>(labels.size()) != nr)
        throw ContractViolation("softmax_xent_weighted: one label per row required");
    if (static_cast<int64_t>(class_weights.size()) != k)
        throw ContractViolation("softmax_xent_weighted: one weight per class required");
    for (int y : labels)
        if (y < 0 || y >= k) throw ContractViolation("softmax_xent_weighted: label out of range");

    Tensor probs(nr, k);
    double total = 0.0, wsum = 0.0;
    for (int64_t r = 0; r < nr; ++r) {
        const double m = logits.val().cmap().row(r).maxCoeff();
        double z = 0.0;
        for (int64_t j = 0; j < k; ++j) {
            probs(r, j) = std::exp(logits.val()(r, j) - m);
            z += probs(r, j);
        }
        for (int64_t j = 0; j < k; ++j) probs(r, j) /= z;
        const double wr = class_weights[static_cast<size_t>(labels[static_cast<size_t>(r)])];
        total += wr * (std::log(z) + m - logits.val()(r, labels[static_cast<size_t>(r)]));
        wsum += wr;
    }
    if (wsum <= 0.0) throw NumericError("softmax_xent_weighted: zero total weight");
    Tensor out(1, 1);
    out(0, 0) = total / wsum;
    return make_op(std::move(out), {logits},
                   [logits, labels, class_weights, probs = std::move(probs), wsum](Node& self) {
                       if (!logits.requires_grad()) return;
                       auto& g = ensure_grad(*logits.node());
                       const double go = self.grad(0, 0) / wsum;
                       for (int64_t r = 0; r < g.rows; ++r) {
                           const int y = labels[static_cast<size_t>(r)];
                           const double wr = class_weights[static_cast<size_t>(y)];
                           for (int64_t j = 0; j < g.cols; ++j)
                               g(r, j) += go * wr * (probs(r, j) - (j == y ? 1.0 : 0.0));
                       }
                   },
                   "softmax_xent_weighted");
}

}  // namespace bevmt
