#include "bevmt/matching.hpp"

#include <limits>

#include "bevmt/common.hpp"

namespace bevmt {

namespace {

void validate_cost(const Tensor& cost) {
    if (cost.rows < 1 || cost.rows > cost.cols)
        throw ContractViolation("assignment: need 1 <= rows <= cols");
    if (!cost.all_finite()) throw NumericError("assignment: non-finite cost entry");
}

}  // namespace

// Kuhn-Munkres with row/column potentials, O(rows^2 * cols).
double hungarian_min_cost(const Tensor& cost, std::vector<int64_t>* row_to_col) {
    validate_cost(cost);
    const int64_t n = cost.rows, m = cost.cols;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(m) + 1, 0.0);
    std::vector<int64_t> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
    for (int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        int64_t j0 = 0;
        std::vector<double> minv(static_cast<size_t>(m) + 1, inf);
        std::vector<char> used(static_cast<size_t>(m) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            const int64_t i0 = p[static_cast<size_t>(j0)];
            int64_t j1 = -1;
            double delta = inf;
            for (int64_t j = 1; j <= m; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int64_t j = 0; j <= m; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            const int64_t j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int64_t> assign(static_cast<size_t>(n), -1);
    for (int64_t j = 1; j <= m; ++j)
        if (p[static_cast<size_t>(j)] != 0) assign[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
    // total recomputed in row order so equal instances sum identically
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) total += cost(i, assign[static_cast<size_t>(i)]);
    if (row_to_col) *row_to_col = std::move(assign);
    return total;
}

double hungarian_assign(const Tensor& cost, std::vector<int64_t>& row_to_col) {
    validate_cost(cost);
    const int64_t n = cost.rows, m = cost.cols;
    row_to_col.assign(static_cast<size_t>(n), -1);
    std::vector<int64_t> avail(static_cast<size_t>(m));
    for (int64_t j = 0; j < m; ++j) avail[static_cast<size_t>(j)] = j;

    double prefix = 0.0;
    for (int64_t r = 0; r < n; ++r) {
        double best_total = std::numeric_limits<double>::infinity();
        size_t best_slot = 0;
        for (size_t slot = 0; slot < avail.size(); ++slot) {
            double completion = 0.0;
            if (r + 1 < n) {
                Tensor sub(n - r - 1, static_cast<int64_t>(avail.size()) - 1);
                for (int64_t rr = r + 1; rr < n; ++rr) {
                    int64_t cc = 0;
                    for (size_t s2 = 0; s2 < avail.size(); ++s2) {
                        if (s2 == slot) continue;
                        sub(rr - r - 1, cc++) = cost(rr, avail[s2]);
                    }
                }
                completion = hungarian_min_cost(sub, nullptr);
            }
            const double total = prefix + cost(r, avail[slot]) + completion;
            if (total < best_total) {  // strict <: ascending scan keeps the smallest column
                best_total = total;
                best_slot = slot;
            }
        }
        row_to_col[static_cast<size_t>(r)] = avail[best_slot];
        prefix += cost(r, avail[best_slot]);
        avail.erase(avail.begin() + static_cast<int64_t>(best_slot));
    }
    return prefix;
}

}  // namespace bevmt
