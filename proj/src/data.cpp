#include "steermoe/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include <openssl/evp.h>

#include "steermoe/errors.hpp"

namespace steermoe {

static_assert(std::endian::native == std::endian::little, "corpus format assumes little-endian doubles");

namespace {

constexpr std::uint64_t kTemplateStream = 0x7465'6d70'6c61'7465ULL;
constexpr std::uint64_t kUtteranceStream = 0x7574'7465'7261'6e63ULL;
constexpr std::uint64_t kSplitStream = 0x7370'6c69'7400'0000ULL;

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

SynthSpec::SynthSpec() {
  for (char c = 'a'; c <= 'z'; ++c) symbols.emplace_back(1, c);
}

void SynthSpec::validate() const {
  if (symbols.empty()) throw FormatError("synth.symbols: must be non-empty");
  if (frames_per_token < 1) throw FormatError("synth.frames_per_token: must be >= 1");
  if (feature_dim < 1) throw FormatError("synth.feature_dim: must be >= 1");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw FormatError("synth.noise_std: must be finite and >= 0");
  if (min_tokens < 1 || max_tokens < min_tokens) {
    throw FormatError("synth.min_tokens/max_tokens: need 1 <= min_tokens <= max_tokens");
  }
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = nlohmann::json{{"symbols", s.symbols},       {"frames_per_token", s.frames_per_token},
                     {"feature_dim", s.feature_dim}, {"noise_std", s.noise_std},
                     {"min_tokens", s.min_tokens},   {"max_tokens", s.max_tokens},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  s.symbols = j.at("symbols").get<std::vector<std::string>>();
  s.frames_per_token = j.at("frames_per_token").get<int>();
  s.feature_dim = j.at("feature_dim").get<int>();
  s.noise_std = j.at("noise_std").get<double>();
  s.min_tokens = j.at("min_tokens").get<int>();
  s.max_tokens = j.at("max_tokens").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
}

Synthesizer::Synthesizer(SynthSpec spec, const Vocabulary& vocab) : spec_(std::move(spec)) {
  spec_.validate();
  for (const auto& s : spec_.symbols) symbol_ids_.push_back(vocab.id(s));
  auto rng = make_rng(spec_.seed, kTemplateStream, 0);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (size_t i = 0; i < symbol_ids_.size(); ++i) {
    Matrix t(spec_.frames_per_token, spec_.feature_dim);
    for (Index r = 0; r < t.rows(); ++r) {
      for (Index c = 0; c < t.cols(); ++c) t(r, c) = unit(rng);
    }
    for (const Matrix& other : templates_) {
      if (other == t) throw FormatError("synthesizer: duplicate symbol template");
    }
    templates_.push_back(std::move(t));
  }
}

const Matrix& Synthesizer::template_for(int token) const {
  auto it = std::find(symbol_ids_.begin(), symbol_ids_.end(), token);
  if (it == symbol_ids_.end()) throw IndexError("token " + std::to_string(token) + " has no template");
  return templates_[static_cast<size_t>(it - symbol_ids_.begin())];
}

std::vector<int> Synthesizer::transcript(std::uint64_t index) const {
  auto rng = make_rng(spec_.seed, kUtteranceStream, index);
  std::uniform_int_distribution<int> length(spec_.min_tokens, spec_.max_tokens);
  std::uniform_int_distribution<size_t> pick(0, symbol_ids_.size() - 1);
  std::vector<int> out(static_cast<size_t>(length(rng)));
  for (int& t : out) t = symbol_ids_[pick(rng)];
  return out;
}

Utterance Synthesizer::utterance(std::uint64_t index) const {
  Utterance u;
  u.transcript = transcript(index);
  u.instruction = {Vocabulary::instr};
  const Index k = spec_.frames_per_token;
  u.features.resize(k * static_cast<Index>(u.transcript.size()), spec_.feature_dim);
  for (size_t i = 0; i < u.transcript.size(); ++i) {
    u.features.middleRows(static_cast<Index>(i) * k, k) = template_for(u.transcript[i]);
  }
  if (spec_.noise_std > 0.0) {
    // Separate stream so the transcript does not depend on the noise level.
    auto rng = make_rng(spec_.seed, kUtteranceStream ^ 0xffff, index);
    std::normal_distribution<double> noise(0.0, spec_.noise_std);
    for (Index i = 0; i < u.features.size(); ++i) u.features.data()[i] += noise(rng);
  }
  return u;
}

std::vector<Utterance> generate_corpus(const SynthSpec& spec, const Vocabulary& vocab, int count) {
  if (count < 1) throw ContractError("generate_corpus: count must be >= 1");
  Synthesizer synth(spec, vocab);
  std::vector<Utterance> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(synth.utterance(static_cast<std::uint64_t>(i)));
  return out;
}

std::vector<int> lm_sequence(std::span<const int> transcript, std::span<const int> instruction) {
  std::vector<int> seq(transcript.begin(), transcript.end());
  seq.insert(seq.end(), instruction.begin(), instruction.end());
  seq.insert(seq.end(), transcript.begin(), transcript.end());
  seq.push_back(Vocabulary::eos);
  return seq;
}

// ---------------------------------------------------------------------------

Matrix Batch::features_of(Index b) const {
  const Index rows = frame_lengths[b];
  return features.matrix().middleRows(b * max_frames, rows);
}

std::span<const int> Batch::text_of(Index b) const {
  return std::span<const int>(tokens).subspan(static_cast<size_t>(b * max_text),
                                              static_cast<size_t>(text_lengths[b]));
}

std::vector<int> Batch::targets_of(Index b) const {
  auto first = targets.begin() + b * max_positions;
  return std::vector<int>(first, first + positions_of(b));
}

std::vector<bool> Batch::mask_of(Index b) const {
  auto first = loss_mask.begin() + b * max_positions;
  return std::vector<bool>(first, first + positions_of(b));
}

Index Batch::loss_positions() const {
  return static_cast<Index>(std::count(loss_mask.begin(), loss_mask.end(), true));
}

Batch collate(std::span<const Utterance> utterances, Index max_frames, Index max_text, Index pool_kernel) {
  if (utterances.empty()) throw EmptyInputError("collate: no utterances");
  std::vector<size_t> kept;
  for (size_t i = 0; i < utterances.size(); ++i) {
    const Utterance& u = utterances[i];
    if (u.transcript.empty()) throw ContractError("collate: utterance with empty transcript");
    if (u.frames() == 0) throw EmptyInputError("collate: utterance with no frames");
    const Index text = static_cast<Index>(u.instruction.size() + u.transcript.size() + 1);
    if (u.frames() > max_frames || text > max_text) continue;
    kept.push_back(i);
  }
  if (kept.empty()) throw EmptyInputError("collate: every utterance exceeded the length limits");

  Batch b;
  b.size = static_cast<Index>(kept.size());
  b.feature_dim = utterances[kept.front()].features.cols();
  for (size_t i : kept) {
    const Utterance& u = utterances[i];
    if (u.features.cols() != b.feature_dim) throw DimensionError("collate: mixed feature dimensions");
    const Index prompt = (u.frames() + pool_kernel - 1) / pool_kernel;
    const Index text = static_cast<Index>(u.instruction.size() + u.transcript.size());
    b.frame_lengths.push_back(u.frames());
    b.prompt_lengths.push_back(prompt);
    b.text_lengths.push_back(text);
    b.max_frames = std::max(b.max_frames, u.frames());
    b.max_text = std::max(b.max_text, text);
    b.max_positions = std::max(b.max_positions, prompt + text);
  }
  b.source_indices = kept;
  b.features = Tensor({b.size, b.max_frames, b.feature_dim});
  b.tokens.assign(static_cast<size_t>(b.size * b.max_text), Vocabulary::pad);
  b.targets.assign(static_cast<size_t>(b.size * b.max_positions), Vocabulary::pad);
  b.loss_mask.assign(static_cast<size_t>(b.size * b.max_positions), false);

  for (Index r = 0; r < b.size; ++r) {
    const Utterance& u = utterances[kept[static_cast<size_t>(r)]];
    b.features.matrix().middleRows(r * b.max_frames, u.frames()) = u.features;
    auto tok = b.tokens.begin() + r * b.max_text;
    tok = std::copy(u.instruction.begin(), u.instruction.end(), tok);
    std::copy(u.transcript.begin(), u.transcript.end(), tok);
    // The first transcript token is predicted from the last instruction
    // position; EOS from the last transcript position.
    const Index first = b.prompt_lengths[r] + static_cast<Index>(u.instruction.size()) - 1;
    const Index n = static_cast<Index>(u.transcript.size());
    for (Index i = 0; i <= n; ++i) {
      const auto at = static_cast<size_t>(r * b.max_positions + first + i);
      b.targets[at] = i < n ? u.transcript[static_cast<size_t>(i)] : Vocabulary::eos;
      b.loss_mask[at] = true;
    }
  }
  return b;
}

CorpusSplit split(std::span<const Utterance> corpus, std::array<double, 3> ratios, std::uint64_t seed) {
  if (corpus.size() < 3) throw EmptyInputError("split: corpus needs at least 3 utterances");
  for (double r : ratios) {
    if (!(r >= 0.0)) throw FormatError("split.ratios: entries must be >= 0");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw FormatError("split.ratios: must sum to 1");
  }
  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), size_t{0});
  auto rng = make_rng(seed, kSplitStream, 0);
  std::shuffle(order.begin(), order.end(), rng);

  const auto n = static_cast<double>(corpus.size());
  const auto n_train = static_cast<size_t>(std::llround(ratios[0] * n));
  const auto n_dev = std::min(corpus.size() - n_train, static_cast<size_t>(std::llround(ratios[1] * n)));
  CorpusSplit out;
  for (size_t i = 0; i < order.size(); ++i) {
    const Utterance& u = corpus[order[i]];
    if (i < n_train) {
      out.train.push_back(u);
    } else if (i < n_train + n_dev) {
      out.dev.push_back(u);
    } else {
      out.test.push_back(u);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string base64_encode(std::span<const unsigned char> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<size_t>(n));
  return out;
}

std::vector<unsigned char> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw FormatError("base64: length not a multiple of 4");
  std::vector<unsigned char> out(3 * (text.size() / 4));
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw FormatError("base64: malformed input");
  size_t padding = 0;
  if (!text.empty() && text.back() == '=') ++padding;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++padding;
  out.resize(static_cast<size_t>(n) - padding);
  return out;
}

void write_corpus(const std::filesystem::path& path, std::span<const Utterance> corpus, const SynthSpec& spec,
                  const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write corpus file " + path.string());
  nlohmann::json header{{"format", "steermoe-corpus"},
                        {"version", kCorpusFormatVersion},
                        {"spec", spec},
                        {"vocabulary", vocab.symbols()},
                        {"count", corpus.size()}};
  out << header.dump() << '\n';
  for (const Utterance& u : corpus) {
    const auto* raw = reinterpret_cast<const unsigned char*>(u.features.data());
    const auto bytes = static_cast<size_t>(u.features.size()) * sizeof(double);
    nlohmann::json line{{"frames", u.features.rows()},
                        {"feature_dim", u.features.cols()},
                        {"features", base64_encode({raw, bytes})},
                        {"transcript", vocab.decode(u.transcript)},
                        {"instruction", vocab.decode(u.instruction)}};
    out << line.dump() << '\n';
  }
}

CorpusFile read_corpus(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open corpus file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("corpus file " + path.string() + " is empty");
  CorpusFile file;
  size_t expected = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format") != "steermoe-corpus") throw FormatError("not a corpus file: " + path.string());
    if (header.at("version").get<int>() != kCorpusFormatVersion) {
      throw FormatError("corpus version " + header.at("version").dump() + " unsupported (expected " +
                        std::to_string(kCorpusFormatVersion) + ")");
    }
    file.spec = header.at("spec").get<SynthSpec>();
    if (header.at("vocabulary").get<std::vector<std::string>>() != vocab.symbols()) {
      throw FormatError("corpus vocabulary does not match " + path.string());
    }
    expected = header.at("count").get<size_t>();
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      Utterance u;
      const auto rows = j.at("frames").get<Index>();
      const auto cols = j.at("feature_dim").get<Index>();
      const auto bytes = base64_decode(j.at("features").get<std::string>());
      if (bytes.size() != static_cast<size_t>(rows * cols) * sizeof(double)) {
        throw FormatError("corpus: feature buffer size mismatch");
      }
      u.features.resize(rows, cols);
      std::memcpy(u.features.data(), bytes.data(), bytes.size());
      u.transcript = vocab.encode(j.at("transcript").get<std::vector<std::string>>());
      u.instruction = vocab.encode(j.at("instruction").get<std::vector<std::string>>());
      file.utterances.push_back(std::move(u));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corpus " + path.string() + ": " + e.what());
  }
  if (file.utterances.size() != expected) {
    throw FormatError("corpus " + path.string() + ": header promises " + std::to_string(expected) +
                      " utterances, found " + std::to_string(file.utterances.size()));
  }
  return file;
}

}  // namespace steermoe
