#pragma once

#include <cstdint>
#include <vector>

#include "bevmt/tensor.hpp"

namespace bevmt {

// Minimum total cost over all one-to-one assignments of rows to distinct
// columns (rows <= cols). Assignment output is optional.
double hungarian_min_cost(const Tensor& cost, std::vector<int64_t>* row_to_col);

// Minimum-cost assignment with a canonical tie rule: among all equal-cost
// optima, the lexicographically smallest row->column vector is returned
// (row 0's column minimized first, then row 1's, ...). Returns the total.
double hungarian_assign(const Tensor& cost, std::vector<int64_t>& row_to_col);

}  // namespace bevmt
