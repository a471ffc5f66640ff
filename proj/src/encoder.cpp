#include "steermoe/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "steermoe/errors.hpp"
#include "steermoe/minibatch.hpp"
#include "steermoe/optim.hpp"

namespace steermoe {

void EncoderConfig::validate() const {
  if (num_layers < 1) throw FormatError("encoder.num_layers: must be >= 1");
  if (model_dim < 2) throw FormatError("encoder.model_dim: must be >= 2");
  if (num_heads < 1 || model_dim % num_heads != 0) {
    throw FormatError("encoder.num_heads: must divide encoder.model_dim");
  }
  if (ff_dim < model_dim) throw FormatError("encoder.ff_dim: must be >= model_dim");
  if (input_dim < 1) throw FormatError("encoder.input_dim: must be >= 1");
  if (max_frames < 1) throw FormatError("encoder.max_frames: must be >= 1");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers}, {"model_dim", c.model_dim}, {"num_heads", c.num_heads},
                     {"ff_dim", c.ff_dim},         {"input_dim", c.input_dim}, {"max_frames", c.max_frames}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.num_layers = j.at("num_layers").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.input_dim = j.at("input_dim").get<int>();
  c.max_frames = j.at("max_frames").get<int>();
}

void to_json(nlohmann::json& j, const PretrainSpec& s) {
  j = nlohmann::json{{"epochs", s.epochs}, {"lr", s.lr}, {"batch_size", s.batch_size}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, PretrainSpec& s) {
  s.epochs = j.at("epochs").get<int>();
  s.lr = j.at("lr").get<double>();
  s.batch_size = j.at("batch_size").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
}

EncoderWeights EncoderWeights::init(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  EncoderWeights w;
  w.config = config;
  w.in_proj = normal_parameter("encoder.in_proj", {config.input_dim, config.model_dim},
                               1.0 / std::sqrt(static_cast<double>(config.input_dim)), rng);
  w.in_bias = constant_parameter("encoder.in_bias", {1, config.model_dim}, 0.0);
  for (int l = 0; l < config.num_layers; ++l) {
    w.blocks.push_back(make_block("encoder.layer." + std::to_string(l), config.model_dim, config.ff_dim,
                                  config.num_layers, rng));
  }
  return w;
}

ParameterRefs EncoderWeights::parameters() {
  ParameterRefs out{&in_proj, &in_bias};
  for (auto& b : blocks) b.append_to(out);
  return out;
}

ConstParameterRefs EncoderWeights::parameters() const {
  ConstParameterRefs out{&in_proj, &in_bias};
  for (const auto& b : blocks) b.append_to(out);
  return out;
}

void EncoderWeights::freeze() {
  for (Parameter* p : parameters()) p->freeze();
}

bool EncoderWeights::frozen() const {
  const auto params = parameters();
  return std::none_of(params.begin(), params.end(), [](const Parameter* p) { return p->trainable; });
}

namespace {

Var embed_frames(Var features, const EncoderWeights& w) {
  const auto& c = w.config;
  if (features.cols() != c.input_dim) {
    throw DimensionError("encoder: features " + shape_string(features.value()) + " but input_dim is " +
                         std::to_string(c.input_dim));
  }
  if (features.rows() > c.max_frames) {
    throw LengthError("encoder: " + std::to_string(features.rows()) + " frames exceeds max_frames " +
                      std::to_string(c.max_frames));
  }
  if (features.rows() == 0) throw EmptyInputError("encoder: no frames");
  Tape& tape = features.tape();
  Var x = add_row(matmul(features, tape.param(w.in_proj)), tape.param(w.in_bias));
  return add(x, tape.constant(sinusoidal_positions<double>(0, features.rows(), c.model_dim)));
}

}  // namespace

EncoderOutput encode_layers(Var features, const EncoderWeights& weights, const LayerHook& hook) {
  EncoderOutput out;
  Var x = embed_frames(features, weights);
  for (int l = 0; l < weights.config.num_layers; ++l) {
    x = block_forward(x, weights.blocks[static_cast<size_t>(l)], weights.config.num_heads, false);
    if (hook) x = hook(x, l);
    out.per_layer.push_back(x);
  }
  out.final = x;
  return out;
}

Matrix encode(const Matrix& features, const EncoderWeights& weights) {
  Tape tape;
  Var x = embed_frames(tape.constant(features), weights);
  for (const auto& block : weights.blocks) x = block_forward(x, block, weights.config.num_heads, false);
  return x.value();
}

std::vector<int> frame_labels(const Utterance& u) {
  const Index n = static_cast<Index>(u.transcript.size());
  if (n == 0 || u.frames() % n != 0) throw ContractError("frame_labels: frames not a multiple of transcript length");
  const Index k = u.frames() / n;
  std::vector<int> labels;
  labels.reserve(static_cast<size_t>(u.frames()));
  for (int tok : u.transcript) labels.insert(labels.end(), static_cast<size_t>(k), tok);
  return labels;
}

namespace {

double frame_accuracy(const EncoderWeights& w, const Parameter& head, const Parameter& head_bias,
                      std::span<const Utterance> corpus) {
  Index correct = 0, total = 0;
  for (const Utterance& u : corpus) {
    Matrix logits = encode(u.features, w) * head.matrix();
    logits.rowwise() += head_bias.matrix().row(0);
    const auto labels = frame_labels(u);
    for (Index t = 0; t < logits.rows(); ++t) {
      Index best = 0;
      logits.row(t).maxCoeff(&best);
      correct += best == labels[static_cast<size_t>(t)];
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace

EncoderWeights pretrain_encoder(const EncoderConfig& config, std::span<const Utterance> train,
                                std::span<const Utterance> dev, int vocab_size, const PretrainSpec& spec) {
  if (train.empty()) throw EmptyInputError("pretrain_encoder: empty training corpus");
  std::mt19937_64 rng(spec.seed);
  EncoderWeights w = EncoderWeights::init(config, spec.seed);
  Parameter head = normal_parameter("encoder.head", {config.model_dim, vocab_size}, 0.02, rng);
  Parameter head_bias = constant_parameter("encoder.head_bias", {1, vocab_size}, 0.0);

  ParameterRefs params = w.parameters();
  params.push_back(&head);
  params.push_back(&head_bias);
  for (Parameter* p : params) p->trainable = true;

  OptimSpec opt;
  opt.lr_base = spec.lr;
  opt.weight_decay = 0.0;
  opt.batch_size = spec.batch_size;
  AdamW adam(opt);

  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), size_t{0});
  int step = 0;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(spec.batch_size)) {
      const size_t count = std::min(order.size() - start, static_cast<size_t>(spec.batch_size));
      Index frames = 0;
      for (size_t e = 0; e < count; ++e) frames += train[order[start + e]].frames();
      accumulate_minibatch(
          params, count,
          [&](Tape& tape, size_t e) {
            const Utterance& u = train[order[start + e]];
            const Var h = encode_layers(tape.constant(u.features), w).final;
            const Var logits = add_row(matmul(h, tape.param(head)), tape.param(head_bias));
            const auto labels = frame_labels(u);
            const std::vector<bool> mask(labels.size(), true);
            return WeightedLoss{cross_entropy_masked(logits, labels, mask),
                                static_cast<double>(u.frames()) / static_cast<double>(frames)};
          },
          spec.threads);
      adam.step(params, ++step);
    }
  }

  w.freeze();
  w.frame_accuracy = frame_accuracy(w, head, head_bias, dev.empty() ? train : dev);
  if (spec.epochs > 0 && w.frame_accuracy < 0.6) {
    throw PretrainingError("encoder pretraining reached only " + std::to_string(100.0 * w.frame_accuracy) +
                           "% frame accuracy (< 60%)");
  }
  return w;
}

}  // namespace steermoe
