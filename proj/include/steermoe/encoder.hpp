#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "json.hpp"

#include "steermoe/data.hpp"
#include "steermoe/transformer.hpp"

namespace steermoe {

struct EncoderConfig {
  int num_layers = 4;
  int model_dim = 64;
  int num_heads = 4;
  int ff_dim = 128;
  int input_dim = 16;
  int max_frames = 256;

  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

// Bidirectional pre-norm transformer over feature frames. Input frames are
// projected to model_dim and summed with sinusoidal positions.
struct EncoderWeights {
  EncoderConfig config;
  Parameter in_proj;  // input_dim x model_dim
  Parameter in_bias;  // 1 x model_dim
  std::vector<BlockWeights> blocks;
  // Validation frame accuracy recorded by pretraining (NaN if never trained).
  double frame_accuracy = std::numeric_limits<double>::quiet_NaN();

  static EncoderWeights init(const EncoderConfig& config, std::uint64_t seed);

  ParameterRefs parameters();
  ConstParameterRefs parameters() const;
  void freeze();
  bool frozen() const;
};

// Transform applied to the output of encoder layer `layer` (0-based) before
// it feeds layer + 1.
using LayerHook = std::function<Var(Var hidden, int layer)>;

struct EncoderOutput {
  Var final;
  std::vector<Var> per_layer;  // hooked output of every layer
};

// Runs the encoder, interposing `hook` (if set) after every block. Throws
// LengthError when features has more than max_frames rows.
EncoderOutput encode_layers(Var features, const EncoderWeights& weights, const LayerHook& hook = {});

// Plain forward without hooks or gradient tracking.
Matrix encode(const Matrix& features, const EncoderWeights& weights);

struct PretrainSpec {
  int epochs = 3;
  double lr = 1e-3;
  int batch_size = 8;
  std::uint64_t seed = 11;
  int threads = 1;
};

void to_json(nlohmann::json& j, const PretrainSpec& s);
void from_json(const nlohmann::json& j, PretrainSpec& s);

// Trains the encoder plus a temporary linear frame classifier to predict the
// generating token of every frame, then discards the classifier and freezes
// the encoder. The returned weights record dev frame accuracy. Throws
// PretrainingError when training ran (epochs > 0) but accuracy is < 60%.
EncoderWeights pretrain_encoder(const EncoderConfig& config, std::span<const Utterance> train,
                                std::span<const Utterance> dev, int vocab_size, const PretrainSpec& spec);

// Frame label sequence of an utterance (each token repeated frames/|transcript| times).
std::vector<int> frame_labels(const Utterance& u);

}  // namespace steermoe
