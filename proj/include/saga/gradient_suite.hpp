#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "saga/gradcheck.hpp"

namespace saga {

inline constexpr double kGradientTolerance = 1e-4;

struct SuiteEntry {
  std::string module;  // ops, anchors, refine, objective
  GradCheckReport report;
  bool passed() const { return report.max_rel_error < kGradientTolerance; }
};

const std::vector<std::string>& gradient_suite_modules();

// Central-difference checks of every differentiable op and of the full
// training loss on a 4-image batch. An empty `module` runs everything;
// an unknown one throws std::invalid_argument.
std::vector<SuiteEntry> run_gradient_suite(const std::string& module = "", std::uint64_t seed = 0);

}  // namespace saga
