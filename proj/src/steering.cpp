#include "steermoe/steering.hpp"

#include <cmath>
#include <random>

#include "steermoe/errors.hpp"

namespace steermoe {

std::string_view to_string(AdapterKind k) {
  return k == AdapterKind::moe ? "moe" : "static_projection";
}

AdapterKind adapter_kind_from_string(std::string_view s) {
  if (s == "moe") return AdapterKind::moe;
  if (s == "static_projection") return AdapterKind::static_projection;
  throw FormatError("steering.kind: unknown adapter kind '" + std::string(s) + "'");
}

void SteeringConfig::validate() const {
  if (num_experts < 1) throw FormatError("steering.num_experts: must be >= 1");
  if (!std::isfinite(alpha_init)) throw FormatError("steering.alpha_init: must be finite");
  if (!(expert_init_std >= 0)) throw FormatError("steering.expert_init_std: must be >= 0");
  if (!std::isfinite(projection_init_std)) throw FormatError("steering.projection_init_std: must be finite");
  if (decoder_dim < 1) throw FormatError("steering.decoder_dim: must be >= 1");
}

void to_json(nlohmann::json& j, const SteeringConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},
                     {"num_experts", c.num_experts},
                     {"alpha_init", c.alpha_init},
                     {"expert_init_std", c.expert_init_std},
                     {"projection_init_std", c.projection_init_std},
                     {"decoder_dim", c.decoder_dim},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SteeringConfig& c) {
  c.kind = adapter_kind_from_string(j.at("kind").get<std::string>());
  c.num_experts = j.at("num_experts").get<int>();
  c.alpha_init = j.at("alpha_init").get<double>();
  c.expert_init_std = j.at("expert_init_std").get<double>();
  c.projection_init_std = j.at("projection_init_std").get<double>();
  c.decoder_dim = j.at("decoder_dim").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

SteeringState SteeringState::init(const SteeringConfig& config, int layers, int encoder_dim) {
  config.validate();
  if (layers < 1 || encoder_dim < 1) throw ContractError("SteeringState::init: layers and dim must be >= 1");
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  SteeringState s;
  s.config = config;
  s.layers = layers;
  s.dim = encoder_dim;
  const Index n = config.num_experts;

  if (s.steers()) {
    Tensor experts({layers, n, encoder_dim});
    for (Index i = 0; i < experts.size(); ++i) experts.data()[i] = config.expert_init_std * unit(rng);
    s.experts = Parameter("steering.experts", std::move(experts), true, LrGroup::steering_vectors);
    s.router = Parameter("steering.router", Tensor({encoder_dim, layers * n}), true, LrGroup::router);
    Tensor alphas({layers});
    alphas.matrix().setConstant(config.alpha_init);
    s.alphas = Parameter("steering.alphas", std::move(alphas), true, LrGroup::base, /*decay=*/false);
  }
  // Separate stream so every adapter kind and expert count starts from the
  // same projection.
  std::seed_seq proj_seq{config.seed, std::uint64_t{1}};
  std::mt19937_64 proj_rng(proj_seq);
  Tensor proj({encoder_dim, config.decoder_dim});
  const double std = config.projection_init_std < 0 ? 1.0 / std::sqrt(static_cast<double>(encoder_dim))
                                                    : config.projection_init_std;
  for (Index i = 0; i < proj.size(); ++i) proj.data()[i] = std * unit(proj_rng);
  s.projection = Parameter("steering.projection", std::move(proj), true, LrGroup::base);
  return s;
}

ParameterRefs SteeringState::parameters() {
  if (!steers()) return {&projection};
  return {&experts, &router, &alphas, &projection};
}

ConstParameterRefs SteeringState::parameters() const {
  if (!steers()) return {&projection};
  return {&experts, &router, &alphas, &projection};
}

Index SteeringState::trainable_count() const { return count_elements(parameters(), true); }

Index census(AdapterKind kind, Index layers, Index experts, Index dim, Index decoder_dim) {
  if (kind == AdapterKind::static_projection) return dim * decoder_dim;
  return layers * experts * dim + dim * layers * experts + layers + dim * decoder_dim;
}

namespace {

void check_layer(const SteeringState& state, int layer) {
  if (!state.steers()) throw ContractError("static projection adapter has no router or experts");
  if (layer < 0 || layer >= state.layers) {
    throw IndexError("steering: layer " + std::to_string(layer) + " outside [0, " + std::to_string(state.layers) +
                     ")");
  }
}

}  // namespace

Var route(Var hidden, const SteeringState& state, int layer) {
  check_layer(state, layer);
  const Index n = state.config.num_experts;
  Var logits = matmul(hidden, hidden.tape().param(state.router));
  return softmax(slice_cols(logits, layer * n, n));
}

Var steer_layer(Var hidden, const SteeringState& state, int layer) {
  Var gates = route(hidden, state, layer);
  Tape& tape = hidden.tape();
  const Index n = state.config.num_experts;
  Var layer_experts = slice_rows(tape.param(state.experts), layer * n, n);
  Var adjustment = matmul(gates, layer_experts);
  Var alpha = slice_cols(tape.param(state.alphas), layer, 1);
  return add(hidden, scale_by(adjustment, alpha));
}

Var steered_encode(Var features, const EncoderWeights& encoder, const SteeringState& state) {
  if (encoder.config.model_dim != state.dim || encoder.config.num_layers != state.layers) {
    throw DimensionError("steered_encode: steering state built for " + std::to_string(state.layers) + " layers x " +
                         std::to_string(state.dim) + " dims, encoder has " +
                         std::to_string(encoder.config.num_layers) + " x " + std::to_string(encoder.config.model_dim));
  }
  LayerHook hook;
  if (state.steers()) hook = [&state](Var h, int layer) { return steer_layer(h, state, layer); };
  return avg_pool_time(encode_layers(features, encoder, hook).final, kPoolKernel);
}

Var project(Var pooled, const SteeringState& state) {
  if (pooled.cols() != state.dim) {
    throw DimensionError("project: input " + shape_string(pooled.value()) + " but projection expects " +
                         std::to_string(state.dim) + " columns");
  }
  return matmul(pooled, pooled.tape().param(state.projection));
}

Var audio_prompt(Var features, const EncoderWeights& encoder, const SteeringState& state) {
  return project(steered_encode(features, encoder, state), state);
}

void to_json(nlohmann::json& j, const RouterStats& s) {
  j = nlohmann::json{{"usage", s.usage}, {"entropy", s.entropy}, {"frames", s.frames}};
}

RouterStats router_stats(const SteeringState& state, const EncoderWeights& encoder,
                         std::span<const Utterance> corpus) {
  if (corpus.empty()) throw EmptyInputError("router_stats: empty corpus");
  if (!state.steers()) throw ContractError("router_stats: static projection adapter has no router");
  const auto L = static_cast<size_t>(state.layers);
  const auto N = static_cast<size_t>(state.config.num_experts);
  RouterStats stats;
  stats.usage.assign(L, std::vector<double>(N, 0.0));
  stats.entropy.assign(L, 0.0);
  for (const Utterance& u : corpus) {
    Tape tape;
    LayerHook hook = [&](Var h, int layer) {
      const Matrix& g = route(h, state, layer).value();
      auto& usage = stats.usage[static_cast<size_t>(layer)];
      for (Index t = 0; t < g.rows(); ++t) {
        double ent = 0.0;
        for (Index n = 0; n < g.cols(); ++n) {
          const double p = g(t, n);
          usage[static_cast<size_t>(n)] += p;
          if (p > 0.0) ent -= p * std::log(p);
        }
        stats.entropy[static_cast<size_t>(layer)] += ent;
      }
      return steer_layer(h, state, layer);
    };
    encode_layers(tape.constant(u.features), encoder, hook);
    stats.frames += u.frames();
  }
  const auto frames = static_cast<double>(stats.frames);
  for (size_t l = 0; l < L; ++l) {
    for (double& v : stats.usage[l]) v /= frames;
    stats.entropy[l] /= frames;
  }
  return stats;
}

}  // namespace steermoe
