#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "steermoe/data.hpp"
#include "steermoe/decoder.hpp"
#include "steermoe/encoder.hpp"
#include "steermoe/optim.hpp"
#include "steermoe/steering.hpp"

namespace steermoe {

struct DataConfig {
  int corpus_size = 2500;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
  std::uint64_t split_seed = 5;
  // Transcript-distribution text used to pretrain the decoder.
  int text_corpus_size = 20000;
  std::uint64_t text_seed = 99;
  // Longest text segment (instruction + transcript + EOS) kept by collate.
  int max_text = 64;
};

struct EvalConfig {
  int max_new_tokens = 24;
  int dev_eval_limit = 100;  // 0 = whole dev split
};

// Everything a run needs. Dimensions shared between components
// (encoder.input_dim, decoder.vocab_size, steering.decoder_dim) are derived
// and not part of the file schema.
struct RunConfig {
  SynthSpec synth;
  DataConfig data;
  EncoderConfig encoder;
  PretrainSpec encoder_pretrain{2, 1e-3, 8, 11, 1};
  DecoderConfig decoder;
  PretrainSpec decoder_pretrain{2, 1e-3, 16, 13, 1};
  SteeringConfig steering;
  OptimSpec optim;
  EvalConfig eval;

  int vocab_size() const { return static_cast<int>(synth.symbols.size()) + 4; }
  // Fills the derived dimensions from the independent ones.
  void resolve();
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);

// Starts from the defaults, overlays `j`, and rejects any key the schema
// does not define (FormatError naming the key).
RunConfig config_from_json(const nlohmann::json& j);

// Applies "dotted.key=value" onto a schema JSON. The value is parsed as JSON
// when possible and taken as a string otherwise.
void apply_override(nlohmann::json& schema, const std::string& assignment);

// Reads an optional config file, then applies overrides in order.
RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);
RunConfig load_config(const std::vector<std::string>& overrides);

}  // namespace steermoe
