#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>

#include "json.hpp"

#include "steermoe/tensor.hpp"

namespace steermoe {

struct OptimSpec {
  double lr_base = 1e-4;
  double lr_steering_vectors = 1e-2;
  double lr_router = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int batch_size = 4;
  int max_steps = 1500;
  int eval_interval = 250;
  std::uint64_t seed = 7;

  double lr_for(LrGroup g) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const OptimSpec& s);
void from_json(const nlohmann::json& j, OptimSpec& s);

// Gradient L2 norms indexed by LrGroup.
using GroupNorms = std::array<double, 3>;

// AdamW with decoupled weight decay, bias correction, per-group learning
// rates and optional global-norm clipping. Moments are keyed by parameter name.
class AdamW {
 public:
  explicit AdamW(OptimSpec spec);

  // Applies one update (step is 1-based) to every trainable parameter; a
  // trainable parameter without a gradient is treated as having a zero one.
  // Frozen parameters are never touched. Gradients are cleared afterwards.
  // Returns the pre-clipping gradient norm of each group. Throws
  // NumericalError naming the parameter on a non-finite gradient.
  GroupNorms step(const ParameterRefs& params, int step);

  const OptimSpec& spec() const { return spec_; }

 private:
  struct Moments {
    Matrix m, v;
  };
  OptimSpec spec_;
  std::map<std::string, Moments> moments_;
};

}  // namespace steermoe
