#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "steermoe/autodiff.hpp"

namespace steermoe {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  Index worst_index = -1;
  Index coordinates_checked = 0;
};

// Builds the forward on the given tape and returns a scalar loss.
using LossClosure = std::function<Var(Tape&)>;

// Compares reverse-mode gradients with central differences
// (f(x+h) - f(x-h)) / 2h on up to max_coordinates randomly chosen entries of
// every trainable parameter. The error of one coordinate is
// |analytic - numeric| / (|analytic| + |numeric| + 1e-8). Parameters are
// perturbed in place and restored bit-exactly. Throws NumericalError if two
// identical forward evaluations disagree.
GradCheckResult check_gradients(const LossClosure& forward, const ParameterRefs& params, double h = 1e-5,
                                Index max_coordinates = 200, std::uint64_t seed = 0);

}  // namespace steermoe
