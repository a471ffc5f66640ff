#include "steermoe/minibatch.hpp"

#include <exception>
#include <optional>
#include <thread>
#include <unordered_map>

namespace steermoe {

double accumulate_minibatch(const ParameterRefs& params, size_t count, const ExampleLoss& example_loss,
                            int threads) {
  std::unordered_map<const Parameter*, size_t> slot;
  for (size_t i = 0; i < params.size(); ++i) slot.emplace(params[i], i);

  std::vector<std::vector<std::optional<Matrix>>> grads(count);
  std::vector<double> losses(count, 0.0);
  std::vector<std::exception_ptr> errors(count);

  auto run = [&](size_t e) {
    try {
      Tape tape;
      WeightedLoss wl = example_loss(tape, e);
      losses[e] = wl.weight * wl.loss.value()(0, 0);
      tape.backward(wl.loss, wl.weight);
      auto& mine = grads[e];
      mine.resize(params.size());
      for (auto [p, g] : tape.parameter_grads()) {
        auto it = slot.find(p);
        if (it != slot.end() && g) mine[it->second] = *g;
      }
    } catch (...) {
      errors[e] = std::current_exception();
    }
  };

  const size_t workers = std::min<size_t>(count, static_cast<size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (size_t e = 0; e < count; ++e) run(e);
  } else {
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (size_t e = w; e < count; e += workers) run(e);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }

  double total = 0.0;
  for (size_t e = 0; e < count; ++e) {
    total += losses[e];
    for (size_t i = 0; i < params.size(); ++i) {
      if (grads[e].size() > i && grads[e][i]) params[i]->accumulate_grad(*grads[e][i]);
    }
  }
  return total;
}

}  // namespace steermoe
