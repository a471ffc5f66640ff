#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "steermoe/encoder.hpp"

namespace steermoe {

// Temporal average-pooling kernel applied after the last steered layer.
inline constexpr Index kPoolKernel = 4;

enum class AdapterKind {
  moe,                // layer-wise expert steering + projection
  static_projection,  // projection only, no layer-wise intervention
};

std::string_view to_string(AdapterKind k);
AdapterKind adapter_kind_from_string(std::string_view s);

struct SteeringConfig {
  AdapterKind kind = AdapterKind::moe;
  int num_experts = 8;
  double alpha_init = 0.1;
  double expert_init_std = 0.02;
  // Negative means 1/sqrt(encoder_dim).
  double projection_init_std = 0.01;
  int decoder_dim = 64;
  std::uint64_t seed = 3;

  void validate() const;
};

void to_json(nlohmann::json& j, const SteeringConfig& c);
void from_json(const nlohmann::json& j, SteeringConfig& c);

// Every trainable parameter of the alignment module.
//   experts    {L, N, D}     lr group steering_vectors (rows l*N..l*N+N-1 are layer l)
//   router     D x (L*N)     lr group router; columns [l*N, (l+1)*N) gate layer l
//   alphas     {L}           lr group base, exempt from weight decay
//   projection D x D_llm     lr group base
// The static-projection variant carries only `projection`.
struct SteeringState {
  SteeringConfig config;
  int layers = 0;
  int dim = 0;
  Parameter experts;
  Parameter router;
  Parameter alphas;
  Parameter projection;

  // Experts ~ N(0, expert_init_std^2), router zero, alphas = alpha_init,
  // projection ~ N(0, projection_init_std^2).
  static SteeringState init(const SteeringConfig& config, int layers, int encoder_dim);

  bool steers() const { return config.kind == AdapterKind::moe; }
  ParameterRefs parameters();
  ConstParameterRefs parameters() const;
  Index trainable_count() const;
};

// L*N*D + D*L*N + L + D*D_llm for the MoE module, D*D_llm for the static one.
Index census(AdapterKind kind, Index layers, Index experts, Index dim, Index decoder_dim);

// Gating scores of layer `layer` (0-based): softmax over that layer's N
// router columns of hidden * router. Throws IndexError for a bad layer.
Var route(Var hidden, const SteeringState& state, int layer);

// hidden + alpha_layer * (route(hidden) * E_layer).
Var steer_layer(Var hidden, const SteeringState& state, int layer);

// Encoder forward with steer_layer after every layer (none for the static
// variant), then kernel-4 average pooling over time.
Var steered_encode(Var features, const EncoderWeights& encoder, const SteeringState& state);

// pooled * projection.
Var project(Var pooled, const SteeringState& state);

// project(steered_encode(features)).
Var audio_prompt(Var features, const EncoderWeights& encoder, const SteeringState& state);

struct RouterStats {
  // usage[l][n]: mean gate weight of expert n over every frame.
  std::vector<std::vector<double>> usage;
  // Mean per-frame gate entropy of each layer in nats.
  std::vector<double> entropy;
  Index frames = 0;
};

void to_json(nlohmann::json& j, const RouterStats& s);

RouterStats router_stats(const SteeringState& state, const EncoderWeights& encoder,
                         std::span<const Utterance> corpus);

}  // namespace steermoe
