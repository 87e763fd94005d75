#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "essd/tape.hpp"

namespace essd {

/// Builds a scalar from the input leaves on the given tape.
using ScalarFn = std::function<Var(GradTape<double>&, const std::vector<Var>&)>;

/// Worst elementwise |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
/// over all inputs, with central differences of step h.
double gradient_error(const ScalarFn& fn, const std::vector<TensorD>& inputs, double h = 1e-5);

struct GradCheckResult {
  std::string name;
  std::uint64_t seed = 0;
  double rel_error = 0;
  bool passed = false;
};

/// Every differentiable op plus the full multibox loss, each over `seeds`
/// seeds (0..seeds-1), in double precision.
std::vector<GradCheckResult> run_gradcheck_suite(std::size_t seeds = 5, double tol = 1e-4);

}  // namespace essd
