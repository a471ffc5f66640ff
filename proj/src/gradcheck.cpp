#include "steermoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <unordered_map>

#include "steermoe/errors.hpp"

namespace steermoe {

namespace {

double evaluate(const LossClosure& forward) {
  Tape tape;
  const Var loss = forward(tape);
  if (loss.rows() != 1 || loss.cols() != 1) throw ContractError("check_gradients: loss must be scalar");
  return loss.value()(0, 0);
}

}  // namespace

GradCheckResult check_gradients(const LossClosure& forward, const ParameterRefs& params, double h,
                                Index max_coordinates, std::uint64_t seed) {
  std::unordered_map<const Parameter*, Matrix> analytic;
  {
    Tape tape;
    const Var loss = forward(tape);
    const double again = evaluate(forward);
    if (loss.value()(0, 0) != again) {
      throw NumericalError("check_gradients: forward is not deterministic");
    }
    tape.backward(loss);
    for (auto [p, g] : tape.parameter_grads()) {
      if (g) analytic.emplace(p, *g);
    }
  }

  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    Matrix& w = p->value.matrix();
    const Index n = w.size();
    std::vector<Index> coords(static_cast<size_t>(n));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (n > max_coordinates) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<size_t>(max_coordinates));
    }
    const auto it = analytic.find(p);
    for (Index c : coords) {
      const double a = it == analytic.end() ? 0.0 : it->second.data()[c];
      const double saved = w.data()[c];
      w.data()[c] = saved + h;
      const double up = evaluate(forward);
      w.data()[c] = saved - h;
      const double down = evaluate(forward);
      w.data()[c] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8);
      ++result.coordinates_checked;
      if (err > result.max_relative_error || result.worst_index < 0) {
        result.max_relative_error = err;
        result.worst_parameter = p->name;
        result.worst_index = c;
      }
    }
  }
  return result;
}

}  // namespace steermoe
