#pragma once

// Central finite-difference checks of the analytic gradients, run in double
// precision.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "banet/tensor.hpp"

namespace banet::gradcheck {

inline constexpr double kDefaultTolerance = 1e-3;
inline constexpr double kDefaultStep = 1e-4;
// Denominator floor of the relative error, so that gradients that are zero
// analytically compare on an absolute scale.
inline constexpr double kErrorFloor = 1e-6;

struct Result {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Probes dropped because the perturbation crossed a kink.
  std::size_t skipped = 0;
  bool passed = false;
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = kErrorFloor);

struct Options {
  double step = kDefaultStep;
  double tolerance = kDefaultTolerance;
  // Entries probed per input tensor; 0 probes every entry.
  std::size_t samples_per_input = 0;
};

/// Compares the tape gradient of the scalar `loss()` with respect to every
/// tensor in `inputs` against the five-point central difference
/// (f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h. `loss` must rebuild its
/// graph from the current input values on each call. A probe whose
/// evaluations put some leaky_relu input on different sides of zero, or some
/// probability on different sides of the loss clamp, is not differentiable
/// there; the step is shrunk up to a hundredfold, then the entry is replaced
/// by another.
Result check(const std::string& name, const std::function<Tensor<double>()>& loss,
             std::vector<Tensor<double>> inputs, std::mt19937_64& rng, const Options& opts = {});

/// The full suite: every differentiable op, the losses, and the parameter
/// gradients of a small three-level network.
std::vector<Result> run_suite(std::uint64_t seed, double tolerance = kDefaultTolerance);

}  // namespace banet::gradcheck
