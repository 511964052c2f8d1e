#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "bevmt/tensor.hpp"

namespace bevmt {

// Reverse-mode autodiff over Tensor. Each op builds a Node holding the
// result value plus a closure that routes the incoming gradient to the
// node's parents. backward() walks the DAG once in reverse topological
// order. All arithmetic is double precision.
struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    bool grad_set = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "";
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    bool defined() const { return bool(n_); }
    const Tensor& val() const { return n_->val; }
    Tensor& value_mut() { return n_->val; }  // for optimizers / in-place param updates
    Tensor& grad() const;                    // allocates zeros on first touch
    bool has_grad() const { return n_->grad_set; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    int64_t rows() const { return n_->val.rows; }
    int64_t cols() const { return n_->val.cols; }
    const std::shared_ptr<Node>& node() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

Var constant(Tensor t);
Var make_param(Tensor t);
Var make_op(Tensor val, std::vector<Var> parents, std::function<void(Node&)> bwd, const char* opname);

Tensor& ensure_grad(Node& n);
void accumulate(const Var& v, const Tensor& g);

// root must be a 1x1 scalar; seeds with 1 and propagates.
void run_backward(const Var& root);

// ---- elementwise / shape ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var sigmoid(const Var& x);
Var silu(const Var& x);
Var softplus(const Var& x);
Var exp_of(const Var& x);
Var abs_of(const Var& x);
Var neg(const Var& x);
Var softmax_rows(const Var& x);
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var add_rowvec(const Var& x, const Var& row);         // x[N,C] + row[1,C]
Var outer_add(const Var& col, const Var& row);        // col[N,1] (+) row[1,C] -> [N,C]
Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& x, int64_t c0, int64_t c1);  // [c0, c1)
Var gather_rows(const Var& x, std::vector<int64_t> idx);
// rows of x land at out[idx[i]] in a zero tensor of out_rows rows; duplicate
// indices accumulate
Var scatter_rows(const Var& x, std::vector<int64_t> idx, int64_t out_rows);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);     // a[M,K] * b[K,N]
Var matmul_nt(const Var& a, const Var& b);  // a[M,K] * b[N,K]^T
Var affine(const Var& x, const Var& w, const Var& b);  // x*w + rowbcast b; b may be undefined

// ---- convolution support ----
// 3x3 same-padding patch extraction: x is an HxW grid flattened to [H*W, C];
// output [H*W, 9*C] with taps ordered (dh, dw) row-major, zero padded.
Var im2col3x3(const Var& x, int64_t h, int64_t w);

// ---- fused kernels (hand-written backward) ----

// Multi-head deformable sampling. value: [H*W, C] with C = heads*ch.
// loc: [Q, heads*points*2] sampling locations in cell-index coordinates,
// ordered (head, point, {y,x}). attn: [Q, heads*points], normalized per
// (query, head). Out-of-grid corners contribute zero. Returns [Q, C].
Var deform_attend(const Var& value, const Var& loc, const Var& attn, int64_t h, int64_t w, int64_t heads);

// Selective state-space scan. Tokens are visited in `order`;
// starts[k]..starts[k+1] delimit independent subsequences (state resets).
// x,delta: [T,C]; b,c: [T,N]; a: [C,N] (negative for stability); dskip: [1,C].
// y[t] = c_t . h_t + dskip * x_t with h updated per visited token.
Var selective_scan(const Var& x, const Var& delta, const Var& b, const Var& c, const Var& a, const Var& dskip,
                   std::vector<int> order, std::vector<int> starts);

// softmax(q k^T * scale) v, probabilities cached for backward.
Var sdp_attention(const Var& q, const Var& k, const Var& v, double scale);

// Trilinear upsampling of an HxWxZ grid flattened [H*W*Z, C] by integer
// factors; edge-clamped sampling at (coarse + 0.5)/factor - 0.5.
Var trilinear_upsample(const Var& x, int64_t h, int64_t w, int64_t z, int64_t fh, int64_t fw, int64_t fz);

// Edge-clamped trilinear read of an HxWxZ grid flattened [H*W*Z, C] at one
// arbitrary point in cell-index coordinates (forward only). Shares the
// corner convention of trilinear_upsample.
Tensor trilinear_point(const Tensor& x, int64_t h, int64_t w, int64_t z, double py, double px, double pz);

// ---- fused losses ----

// Binary focal loss on probabilities (clamped to [1e-7, 1-1e-7]), linear in
// the target so soft targets interpolate the two branches. Mean over all
// elements.
Var focal_loss_mean(const Var& p, const Tensor& target, double alpha, double gamma);

// Class-weighted softmax cross-entropy; weighted mean over rows.
Var softmax_xent_weighted(const Var& logits, const std::vector<int>& labels, const std::vector<double>& class_weights);

}  // namespace bevmt
