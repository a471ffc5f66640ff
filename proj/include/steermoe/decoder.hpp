#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "json.hpp"

#include "steermoe/encoder.hpp"
#include "steermoe/transformer.hpp"

namespace steermoe {

struct DecoderConfig {
  int num_layers = 4;
  int model_dim = 64;
  int num_heads = 4;
  int ff_dim = 128;
  int vocab_size = 30;
  int max_positions = 512;

  void validate() const;
};

void to_json(nlohmann::json& j, const DecoderConfig& c);
void from_json(const nlohmann::json& j, DecoderConfig& c);

// Causal pre-norm transformer language model with untied input and output
// embeddings and sinusoidal positions over the whole input sequence.
struct DecoderWeights {
  DecoderConfig config;
  Parameter token_embedding;  // vocab x model_dim
  std::vector<BlockWeights> blocks;
  Parameter final_gain, final_bias;
  Parameter out_proj;  // model_dim x vocab
  Parameter out_bias;  // 1 x vocab
  double validation_perplexity = std::numeric_limits<double>::quiet_NaN();

  static DecoderWeights init(const DecoderConfig& config, std::uint64_t seed);

  ParameterRefs parameters();
  ConstParameterRefs parameters() const;
  void freeze();
  bool frozen() const;
};

// Token embeddings plus the positional encoding of positions
// [first_position, first_position + tokens.size()).
Var embed_text(Tape& tape, std::span<const int> tokens, const DecoderWeights& weights, Index first_position = 0);

// Logits for every position of [prompt ; text] where prompt rows occupy
// positions 0..S-1 and receive positional encodings like tokens do. With an
// empty prompt this is exactly forward_text.
Var forward_with_prompt(Var prompt, std::span<const int> tokens, const DecoderWeights& weights);
Var forward_text(Tape& tape, std::span<const int> tokens, const DecoderWeights& weights);

// Appends argmax tokens (ties go to the smallest id) after the instruction
// until eos or max_new tokens. The returned sequence excludes eos.
std::vector<int> greedy_decode(const Matrix& prompt, std::span<const int> instruction,
                               const DecoderWeights& weights, int max_new, int eos);

// exp(mean next-token NLL) over every position of every sequence.
double perplexity(const DecoderWeights& weights, std::span<const std::vector<int>> sequences);

// Next-token training on text sequences, then freeze. Records dev
// perplexity; throws PretrainingError when training ran (epochs > 0) and
// perplexity is still >= vocab_size.
DecoderWeights pretrain_decoder(const DecoderConfig& config, std::span<const std::vector<int>> train,
                                std::span<const std::vector<int>> dev, const PretrainSpec& spec);

}  // namespace steermoe
