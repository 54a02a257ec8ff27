#pragma once

#include <string>
#include <vector>

namespace pgu::cli {

inline constexpr double kGradCheckTolerance = 1e-3;

struct GradCheckRow {
  std::string op;
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t kink_excluded = 0;

  bool passed() const { return max_relative_error < kGradCheckTolerance; }
};

/// Central-difference check (64-bit, step 1e-4) of every differentiable op
/// and of an end-to-end stage-1 model.
std::vector<GradCheckRow> run_gradcheck_suite();

}  // namespace pgu::cli
