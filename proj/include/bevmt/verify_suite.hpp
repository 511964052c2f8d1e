#pragma once

#include <string>
#include <vector>

#include "bevmt/verify.hpp"

namespace bevmt {

// Names of the gradient-suite modules in run order.
std::vector<std::string> gradient_suite_modules();

// Finite-difference gradient checks on minimal shapes, one report per
// module. An empty name runs everything; an unknown name is a
// configuration error.
std::vector<GradCheckReport> run_gradient_suite(const std::string& module = "");

}  // namespace bevmt
