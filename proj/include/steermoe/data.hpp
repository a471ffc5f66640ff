#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "steermoe/tensor.hpp"
#include "steermoe/vocab.hpp"

namespace steermoe {

// Parameters of the synthetic "audio" task. Each symbol owns a fixed
// frames_per_token x feature_dim template; an utterance is the concatenation
// of its symbols' templates plus Gaussian noise.
struct SynthSpec {
  std::vector<std::string> symbols;  // defaults to a..z
  int frames_per_token = 4;
  int feature_dim = 16;
  double noise_std = 0.3;
  int min_tokens = 3;
  int max_tokens = 20;
  std::uint64_t seed = 1234;

  SynthSpec();
  void validate() const;
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

struct Utterance {
  Matrix features;               // frames x feature_dim
  std::vector<int> transcript;   // symbol ids, non-empty
  std::vector<int> instruction;  // marker ids prepended to the text segment

  Index frames() const { return features.rows(); }
  friend bool operator==(const Utterance&, const Utterance&) = default;
};

// Deterministic generator: utterance(i) is a pure function of (spec.seed, i).
class Synthesizer {
 public:
  Synthesizer(SynthSpec spec, const Vocabulary& vocab);

  const SynthSpec& spec() const { return spec_; }
  // Template for a symbol id (frames_per_token x feature_dim).
  const Matrix& template_for(int token) const;
  std::span<const int> symbol_ids() const { return symbol_ids_; }

  std::vector<int> transcript(std::uint64_t index) const;
  Utterance utterance(std::uint64_t index) const;

 private:
  SynthSpec spec_;
  std::vector<int> symbol_ids_;
  std::vector<Matrix> templates_;  // indexed by position in symbol_ids_
  int first_symbol_id_ = 0;
};

std::vector<Utterance> generate_corpus(const SynthSpec& spec, const Vocabulary& vocab, int count);

// Text-only pretraining sequence: transcript, instruction, transcript, EOS.
std::vector<int> lm_sequence(std::span<const int> transcript, std::span<const int> instruction);

// Padded minibatch. Decoder position p of example b holds the audio prompt for
// p < prompt_lengths[b], then the text tokens (instruction + transcript).
// targets(b, p) is the token to predict from position p.
struct Batch {
  Index size = 0;
  Index feature_dim = 0;
  Index max_frames = 0;
  Index max_text = 0;
  Index max_positions = 0;

  Tensor features;                  // {size, max_frames, feature_dim}, zero padded
  std::vector<Index> frame_lengths;
  std::vector<Index> prompt_lengths;
  std::vector<int> tokens;          // size x max_text, PAD padded
  std::vector<Index> text_lengths;
  std::vector<int> targets;         // size x max_positions
  std::vector<bool> loss_mask;      // size x max_positions
  std::vector<size_t> source_indices;  // positions in the collated input list

  Matrix features_of(Index b) const;
  std::span<const int> text_of(Index b) const;
  std::vector<int> targets_of(Index b) const;  // first prompt+text positions
  std::vector<bool> mask_of(Index b) const;
  Index positions_of(Index b) const { return prompt_lengths[b] + text_lengths[b]; }
  Index loss_positions() const;
};

// Drops utterances longer than max_frames or whose text (instruction +
// transcript + EOS) exceeds max_text, then pads the rest. Throws
// EmptyInputError when nothing survives.
Batch collate(std::span<const Utterance> utterances, Index max_frames, Index max_text,
              Index pool_kernel = 4);

struct CorpusSplit {
  std::vector<Utterance> train, dev, test;
};

CorpusSplit split(std::span<const Utterance> corpus, std::array<double, 3> ratios, std::uint64_t seed);

// JSON-lines corpus: a header line, then one utterance per line with the
// feature buffer base64-encoded as little-endian doubles.
inline constexpr int kCorpusFormatVersion = 1;

void write_corpus(const std::filesystem::path& path, std::span<const Utterance> corpus,
                  const SynthSpec& spec, const Vocabulary& vocab);

struct CorpusFile {
  SynthSpec spec;
  std::vector<Utterance> utterances;
};

CorpusFile read_corpus(const std::filesystem::path& path, const Vocabulary& vocab);

std::string base64_encode(std::span<const unsigned char> bytes);
std::vector<unsigned char> base64_decode(std::string_view text);

}  // namespace steermoe
