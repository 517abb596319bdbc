#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "advdistill/tensor.hpp"

namespace advdistill {

inline constexpr double kFiniteDifferenceStep = 1e-5;
inline constexpr double kGradRelTolerance = 1e-4;

// |a - b| / max(|a|, |b|, 1e-4). The floor keeps near-zero gradients from
// turning rounding noise into large relative errors.
double relative_error(double analytic, double numeric);

// Builds a scalar loss from the inputs. Called with history enabled once and
// under NoGradGuard for every finite-difference probe, so any randomness must
// be re-seeded inside.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t values_checked = 0;
};

// Compares reverse-mode gradients of every input element with central
// differences of step `step`. Inputs are modified during probing and
// restored afterwards.
GradCheckResult check_gradients(const ScalarFn& fn, std::vector<Tensor> inputs, double step = kFiniteDifferenceStep);

struct GradCheckReport {
  std::size_t op_instances = 0;
  std::size_t networks = 0;
  std::size_t values_checked = 0;
  double max_rel_error = 0.0;
  std::string worst_case;

  bool passed(double tolerance = kGradRelTolerance) const { return max_rel_error < tolerance; }
};

// Randomized operation instances (every differentiable op and loss) followed
// by random small dense/conv networks.
GradCheckReport run_gradcheck_suite(std::uint64_t seed, std::size_t op_instances = 120, std::size_t networks = 24);

}  // namespace advdistill
