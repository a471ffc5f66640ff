#include "steermoe/decoder.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "steermoe/errors.hpp"
#include "steermoe/minibatch.hpp"
#include "steermoe/optim.hpp"

namespace steermoe {

void DecoderConfig::validate() const {
  if (num_layers < 1) throw FormatError("decoder.num_layers: must be >= 1");
  if (model_dim < 2) throw FormatError("decoder.model_dim: must be >= 2");
  if (num_heads < 1 || model_dim % num_heads != 0) {
    throw FormatError("decoder.num_heads: must divide decoder.model_dim");
  }
  if (ff_dim < 1) throw FormatError("decoder.ff_dim: must be >= 1");
  if (vocab_size < 2) throw FormatError("decoder.vocab_size: must be >= 2");
  if (max_positions < 1) throw FormatError("decoder.max_positions: must be >= 1");
}

void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers}, {"model_dim", c.model_dim},   {"num_heads", c.num_heads},
                     {"ff_dim", c.ff_dim},         {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions}};
}

void from_json(const nlohmann::json& j, DecoderConfig& c) {
  c.num_layers = j.at("num_layers").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
}

DecoderWeights DecoderWeights::init(const DecoderConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  DecoderWeights w;
  w.config = config;
  w.token_embedding = normal_parameter("decoder.token_embedding", {config.vocab_size, config.model_dim}, 1.0, rng);
  for (int l = 0; l < config.num_layers; ++l) {
    w.blocks.push_back(make_block("decoder.layer." + std::to_string(l), config.model_dim, config.ff_dim,
                                  config.num_layers, rng));
  }
  w.final_gain = constant_parameter("decoder.final_ln.gain", {1, config.model_dim}, 1.0);
  w.final_bias = constant_parameter("decoder.final_ln.bias", {1, config.model_dim}, 0.0);
  w.out_proj = normal_parameter("decoder.out_proj", {config.model_dim, config.vocab_size}, 0.02, rng);
  w.out_bias = constant_parameter("decoder.out_bias", {1, config.vocab_size}, 0.0);
  return w;
}

ParameterRefs DecoderWeights::parameters() {
  ParameterRefs out{&token_embedding};
  for (auto& b : blocks) b.append_to(out);
  out.insert(out.end(), {&final_gain, &final_bias, &out_proj, &out_bias});
  return out;
}

ConstParameterRefs DecoderWeights::parameters() const {
  ConstParameterRefs out{&token_embedding};
  for (const auto& b : blocks) b.append_to(out);
  out.insert(out.end(), {&final_gain, &final_bias, &out_proj, &out_bias});
  return out;
}

void DecoderWeights::freeze() {
  for (Parameter* p : parameters()) p->freeze();
}

bool DecoderWeights::frozen() const {
  const auto params = parameters();
  return std::none_of(params.begin(), params.end(), [](const Parameter* p) { return p->trainable; });
}

Var embed_text(Tape& tape, std::span<const int> tokens, const DecoderWeights& weights, Index first_position) {
  const Index dim = weights.config.model_dim;
  if (tokens.empty()) return tape.constant(Matrix(0, dim));
  for (int t : tokens) {
    if (t < 0 || t >= weights.config.vocab_size) {
      throw IndexError("embed_text: token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(weights.config.vocab_size));
    }
  }
  Var rows = gather_rows(tape.param(weights.token_embedding), tokens);
  return add(rows, tape.constant(sinusoidal_positions<double>(first_position, static_cast<Index>(tokens.size()), dim)));
}

namespace {

Var decode_stack(Var x, const DecoderWeights& w) {
  Tape& tape = x.tape();
  for (const auto& block : w.blocks) x = block_forward(x, block, w.config.num_heads, true);
  x = layer_norm(x, tape.param(w.final_gain), tape.param(w.final_bias));
  return add_row(matmul(x, tape.param(w.out_proj)), tape.param(w.out_bias));
}

void check_length(Index positions, const DecoderWeights& w) {
  if (positions > w.config.max_positions) {
    throw LengthError("decoder: " + std::to_string(positions) + " positions exceeds max_positions " +
                      std::to_string(w.config.max_positions));
  }
  if (positions == 0) throw EmptyInputError("decoder: empty input sequence");
}

}  // namespace

Var forward_text(Tape& tape, std::span<const int> tokens, const DecoderWeights& weights) {
  check_length(static_cast<Index>(tokens.size()), weights);
  return decode_stack(embed_text(tape, tokens, weights, 0), weights);
}

Var forward_with_prompt(Var prompt, std::span<const int> tokens, const DecoderWeights& weights) {
  Tape& tape = prompt.tape();
  if (prompt.cols() != weights.config.model_dim) {
    throw DimensionError("forward_with_prompt: prompt " + shape_string(prompt.value()) + " but model_dim is " +
                         std::to_string(weights.config.model_dim));
  }
  const Index s = prompt.rows();
  if (s == 0) return forward_text(tape, tokens, weights);
  check_length(s + static_cast<Index>(tokens.size()), weights);
  Var audio = add(prompt, tape.constant(sinusoidal_positions<double>(0, s, weights.config.model_dim)));
  if (tokens.empty()) return decode_stack(audio, weights);
  const std::array<Var, 2> parts{audio, embed_text(tape, tokens, weights, s)};
  return decode_stack(concat_rows(parts), weights);
}

std::vector<int> greedy_decode(const Matrix& prompt, std::span<const int> instruction, const DecoderWeights& weights,
                               int max_new, int eos) {
  if (max_new < 0) throw ContractError("greedy_decode: max_new must be >= 0");
  check_length(prompt.rows() + static_cast<Index>(instruction.size()) + max_new, weights);
  std::vector<int> tokens(instruction.begin(), instruction.end());
  std::vector<int> out;
  for (int i = 0; i < max_new; ++i) {
    Tape tape;
    const Matrix& logits = forward_with_prompt(tape.constant(prompt), tokens, weights).value();
    const auto last = logits.row(logits.rows() - 1);
    int best = 0;
    for (Index v = 1; v < last.cols(); ++v) {
      if (last(v) > last(best)) best = static_cast<int>(v);
    }
    if (best == eos) break;
    out.push_back(best);
    tokens.push_back(best);
  }
  return out;
}

double perplexity(const DecoderWeights& weights, std::span<const std::vector<int>> sequences) {
  double nll = 0.0;
  Index count = 0;
  for (const auto& seq : sequences) {
    if (seq.size() < 2) continue;
    Tape tape;
    const std::span<const int> input(seq.data(), seq.size() - 1);
    const std::span<const int> targets(seq.data() + 1, seq.size() - 1);
    const std::vector<bool> mask(targets.size(), true);
    const Var loss = cross_entropy_masked(forward_text(tape, input, weights), targets, mask);
    nll += loss.value()(0, 0) * static_cast<double>(targets.size());
    count += static_cast<Index>(targets.size());
  }
  if (count == 0) throw EmptyInputError("perplexity: no predictable positions");
  return std::exp(nll / static_cast<double>(count));
}

DecoderWeights pretrain_decoder(const DecoderConfig& config, std::span<const std::vector<int>> train,
                                std::span<const std::vector<int>> dev, const PretrainSpec& spec) {
  if (train.empty()) throw EmptyInputError("pretrain_decoder: empty text corpus");
  std::mt19937_64 rng(spec.seed);
  DecoderWeights w = DecoderWeights::init(config, spec.seed);
  ParameterRefs params = w.parameters();
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
      Index positions = 0;
      for (size_t e = 0; e < count; ++e) positions += static_cast<Index>(train[order[start + e]].size()) - 1;
      accumulate_minibatch(
          params, count,
          [&](Tape& tape, size_t e) {
            const auto& seq = train[order[start + e]];
            const std::span<const int> input(seq.data(), seq.size() - 1);
            const std::span<const int> targets(seq.data() + 1, seq.size() - 1);
            const std::vector<bool> mask(targets.size(), true);
            return WeightedLoss{cross_entropy_masked(forward_text(tape, input, w), targets, mask),
                                static_cast<double>(targets.size()) / static_cast<double>(positions)};
          },
          spec.threads);
      adam.step(params, ++step);
    }
  }

  w.freeze();
  w.validation_perplexity = perplexity(w, dev.empty() ? train : dev);
  if (spec.epochs > 0 && !(w.validation_perplexity < static_cast<double>(config.vocab_size))) {
    throw PretrainingError("decoder pretraining left validation perplexity at " +
                           std::to_string(w.validation_perplexity) + " (>= vocabulary size " +
                           std::to_string(config.vocab_size) + ")");
  }
  return w;
}

}  // namespace steermoe
