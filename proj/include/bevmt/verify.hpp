#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bevmt/autodiff.hpp"

namespace bevmt {

// Result of checking one op/module's analytic gradients against central
// finite differences.
struct GradCheckReport {
    std::string name;
    int64_t checked = 0;
    int64_t failed = 0;
    double worst_rel = 0.0;
    double worst_abs = 0.0;
    std::string first_failure;
    bool ok() const { return failed == 0 && checked > 0; }
    std::string summary() const;
};

// Central-difference gradient check. `f` must rebuild the graph from the
// current parameter values and return a scalar loss. Entries are checked on
// a deterministic stride so large tensors stay affordable
// (max_entries_per_param < 0 checks everything). Pass criterion: relative
// error <= rel_tol where |analytic| > 1e-6, absolute error <= abs_tol
// elsewhere.
GradCheckReport grad_check(const std::string& name, const std::vector<Var>& params, const std::function<Var()>& f,
                           double step = 1e-5, double rel_tol = 1e-4, double abs_tol = 1e-6,
                           int64_t max_entries_per_param = -1);

// ---- independent oracles (plain loops, no autodiff, no shared kernels) ----

// State-space recurrence evaluated directly.
Tensor oracle_ssm_scan(const Tensor& x, const Tensor& delta, const Tensor& b, const Tensor& c, const Tensor& a,
                       const Tensor& dskip, const std::vector<int>& order, const std::vector<int>& starts);

// Deformable sampling rewritten as dense attention: per (query, head) a full
// weight map over all grid cells built from the tent kernel
// max(0,1-|dy|)*max(0,1-|dx|), then a weighted sum over the grid.
Tensor oracle_deform_dense(const Tensor& value, const Tensor& loc, const Tensor& attn, int64_t h, int64_t w,
                           int64_t heads);

// Indices of the k largest entries of a flat score vector; ties prefer the
// smaller index. Full stable sort, O(n log n).
std::vector<int64_t> oracle_topk(const std::vector<double>& scores, int64_t k);

// Minimum-cost one-to-one assignment of every row (task) to a distinct
// column, found by exhaustive enumeration in lexicographic order (first
// strict minimum wins, so ties resolve to the lexicographically smallest
// assignment vector). cost is [n_rows, n_cols] with n_rows <= n_cols.
double oracle_assignment(const Tensor& cost, std::vector<int64_t>& row_to_col);

// Direct 3x3 same-padding convolution; weights [9*c_in, c_out] with taps
// ordered (dh, dw) row-major, bias [1, c_out].
Tensor oracle_conv3x3(const Tensor& x, int64_t h, int64_t w, const Tensor& weights, const Tensor& bias);

// softmax(q k^T * scale) v with plain loops.
Tensor oracle_dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale);

// Per-output-voxel trilinear interpolation with edge clamping.
Tensor oracle_trilinear(const Tensor& x, int64_t h, int64_t w, int64_t z, int64_t fh, int64_t fw, int64_t fz);

// Closed-form single-element binary focal term on a clamped probability.
double oracle_focal_term(double p, double y, double alpha, double gamma);

}  // namespace bevmt
