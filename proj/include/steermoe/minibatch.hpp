#pragma once

#include <functional>
#include <utility>

#include "steermoe/autodiff.hpp"

namespace steermoe {

// Loss of one example plus the weight its gradient carries in the batch.
struct WeightedLoss {
  Var loss;
  double weight = 1.0;
};

using ExampleLoss = std::function<WeightedLoss(Tape&, size_t example)>;

// Evaluates `example_loss` for examples [0, count), each on its own tape,
// back-propagates weight * loss, and adds the resulting gradients into
// `params`. Examples may run on up to `threads` workers; the reduction is
// always performed in example order, so the result does not depend on the
// thread count. Returns sum(weight * loss).
double accumulate_minibatch(const ParameterRefs& params, size_t count, const ExampleLoss& example_loss,
                            int threads = 1);

}  // namespace steermoe
