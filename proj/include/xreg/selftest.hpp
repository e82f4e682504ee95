// Built-in self-test suite behind `xreg check`: finite-difference gradient
// checks in 64-bit mode plus loop-nest reference comparisons.

#pragma once

#include "xreg/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace xreg {

struct CheckResult {
  std::string name;
  bool passed = false;
  double error = 0.0;  // worst relative error observed
  double tolerance = 0.0;
  std::string detail;
};

struct GradCheckSettings {
  double step = 1e-4;
  double tolerance = 1e-3;
  std::size_t samples_per_tensor = 12;  // 0: every element
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double worst = 0.0;  // |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)
  std::size_t central = 0;
  // A step that flips a relu or changes a pooling argmax leaves the smooth
  // piece; the difference is then taken on the side that stays, or the
  // coordinate is skipped when both sides leave.
  std::size_t one_sided = 0;
  std::size_t skipped = 0;
  std::size_t checked() const { return central + one_sided + skipped; }
};

// Finite differences on `loss` against the taped gradient for sampled
// entries of every tensor in `leaves`.
GradCheckReport check_gradients(const std::vector<Tensor<double>>& leaves,
                                const std::function<Tensor<double>(Tape<double>*)>& loss,
                                const GradCheckSettings& settings);

// A gradient check passes when the worst error is within tolerance and at
// least 90% of the coordinates used central differences.
bool grad_check_passed(const GradCheckReport& r, double tolerance);

// quick: op-level checks; full adds the whole network on 8^3 inputs.
std::vector<CheckResult> run_selftest(bool full);

}  // namespace xreg
