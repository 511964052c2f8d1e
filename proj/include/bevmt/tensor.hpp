#pragma once

#include <Eigen/Core>
#include <vector>

#include "bevmt/common.hpp"

namespace bevmt {

// Dense row-major 2D array of doubles. Grids are stored flattened as
// [H*W, C] (or [H*W*Z, C]) with the spatial dims carried alongside by the
// operations that need them.
struct Tensor {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<double> d;

    Tensor() = default;
    Tensor(int64_t r, int64_t c) : rows(r), cols(c), d(size_t(r) * size_t(c), 0.0) {}
    Tensor(int64_t r, int64_t c, double fill) : rows(r), cols(c), d(size_t(r) * size_t(c), fill) {}

    static Tensor zeros(int64_t r, int64_t c) { return Tensor(r, c); }
    static Tensor full(int64_t r, int64_t c, double v) { return Tensor(r, c, v); }
    static Tensor randn(int64_t r, int64_t c, Rng& rng, double scale = 1.0) {
        Tensor t(r, c);
        for (auto& x : t.d) x = scale * rng.normal();
        return t;
    }
    static Tensor from(std::initializer_list<std::initializer_list<double>> v) {
        Tensor t(int64_t(v.size()), int64_t(v.begin()->size()));
        int64_t r = 0;
        for (auto& row : v) {
            int64_t c = 0;
            for (double x : row) t.at(r, c++) = x;
            ++r;
        }
        return t;
    }

    int64_t numel() const { return rows * cols; }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    double& at(int64_t r, int64_t c) { return d[size_t(r * cols + c)]; }
    double at(int64_t r, int64_t c) const { return d[size_t(r * cols + c)]; }
    double& operator()(int64_t r, int64_t c) { return at(r, c); }
    double operator()(int64_t r, int64_t c) const { return at(r, c); }

    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<Mat> map() { return Eigen::Map<Mat>(d.data(), rows, cols); }
    Eigen::Map<const Mat> map() const { return Eigen::Map<const Mat>(d.data(), rows, cols); }
    Eigen::Map<const Mat> cmap() const { return map(); }

    bool all_finite() const {
        for (double x : d)
            if (!std::isfinite(x)) return false;
        return true;
    }

    // index of first non-finite entry, or -1
    int64_t first_nonfinite() const {
        for (int64_t i = 0; i < numel(); ++i)
            if (!std::isfinite(d[size_t(i)])) return i;
        return -1;
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw ContractViolation(std::string(what) + ": shape mismatch (" + std::to_string(a.rows) + "x" +
                                std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                                std::to_string(b.cols) + ")");
}

}  // namespace bevmt
