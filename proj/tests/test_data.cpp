#include <algorithm>
#include <random>
#include <set>

#include "doctest.h"
#include "steermoe/data.hpp"
#include "steermoe/errors.hpp"
#include "steermoe/vocab.hpp"
#include "util.hpp"

using namespace steermoe;
using testutil::bitwise_equal;
using testutil::TempDir;

namespace {

const Vocabulary& default_vocab() {
  static const Vocabulary v = Vocabulary::with_symbols(SynthSpec().symbols);
  return v;
}

Utterance make_utterance(Index frames, std::vector<int> transcript, double fill = 1.0) {
  Utterance u;
  u.features = Matrix::Constant(frames, 3, fill);
  u.transcript = std::move(transcript);
  u.instruction = {Vocabulary::instr};
  return u;
}

}  // namespace

TEST_CASE("vocabulary layout and lookups") {
  const Vocabulary& v = default_vocab();
  CHECK(v.size() == 30);
  CHECK(Vocabulary::pad == 0);
  CHECK(Vocabulary::bos == 1);
  CHECK(Vocabulary::eos == 2);
  CHECK(Vocabulary::instr == 3);
  CHECK(v.id("a") == 4);
  CHECK(v.id("z") == 29);
  CHECK(v.symbol(5) == "b");
  const std::vector<std::string> word{"c", "a", "t"};
  CHECK(v.decode(v.encode(word)) == word);
  CHECK_THROWS_AS(v.id("?"), IndexError);
  CHECK_THROWS_AS(v.symbol(30), IndexError);
  CHECK_THROWS_AS(v.symbol(-1), IndexError);
  CHECK_THROWS_AS(Vocabulary::with_symbols({"a", "a"}), FormatError);

  TempDir dir("vocab");
  v.save(dir / "vocab.txt");
  CHECK(Vocabulary::load(dir / "vocab.txt") == v);
  testutil::write_file(dir / "bad.txt", "a\nb\n");
  CHECK_THROWS_AS(Vocabulary::load(dir / "bad.txt"), FormatError);
}

TEST_CASE("synthesizer is deterministic and follows the spec") {
  const SynthSpec spec;
  const Synthesizer a(spec, default_vocab()), b(spec, default_vocab());
  for (std::uint64_t i : {0ULL, 1ULL, 17ULL, 123456789ULL}) {
    const Utterance x = a.utterance(i), y = b.utterance(i);
    CHECK(x.transcript == y.transcript);
    CHECK(bitwise_equal(x.features, y.features));
    CHECK(x.instruction == std::vector<int>{Vocabulary::instr});
    CHECK(x.transcript.size() >= 3);
    CHECK(x.transcript.size() <= 20);
    CHECK(x.frames() == 4 * static_cast<Index>(x.transcript.size()));
    CHECK(x.features.cols() == 16);
    for (int t : x.transcript) CHECK((t >= 4 && t < 30));
  }

  // Noise does not change transcripts; without noise the features are the
  // concatenated templates.
  SynthSpec clean = spec;
  clean.noise_std = 0.0;
  const Synthesizer c(clean, default_vocab());
  for (std::uint64_t i = 0; i < 20; ++i) {
    const Utterance u = c.utterance(i);
    CHECK(u.transcript == a.utterance(i).transcript);
    for (size_t k = 0; k < u.transcript.size(); ++k) {
      CHECK(u.features.middleRows(static_cast<Index>(4 * k), 4) == c.template_for(u.transcript[k]));
    }
  }

  std::set<std::vector<double>> distinct;
  for (int id : a.symbol_ids()) {
    const Matrix& t = a.template_for(id);
    distinct.insert(std::vector<double>(t.data(), t.data() + t.size()));
  }
  CHECK(distinct.size() == 26);
  CHECK_THROWS_AS(a.template_for(Vocabulary::eos), IndexError);
}

TEST_CASE("synth spec validation") {
  SynthSpec s;
  s.min_tokens = 5;
  s.max_tokens = 4;
  CHECK_THROWS_AS(s.validate(), FormatError);
  s = SynthSpec();
  s.noise_std = -1.0;
  CHECK_THROWS_AS(s.validate(), FormatError);
  s = SynthSpec();
  s.frames_per_token = 0;
  CHECK_THROWS_AS(s.validate(), FormatError);
  CHECK_THROWS_AS(generate_corpus(SynthSpec(), default_vocab(), 0), ContractError);
}

TEST_CASE("lm_sequence layout") {
  const std::vector<int> t{7, 8}, instr{Vocabulary::instr};
  CHECK(lm_sequence(t, instr) == std::vector<int>{7, 8, Vocabulary::instr, 7, 8, Vocabulary::eos});
}

TEST_CASE("collate lays out prompt, text, targets and mask") {
  const std::vector<Utterance> us{make_utterance(5, {4, 5}, 1.0), make_utterance(8, {6, 7, 8}, 2.0)};
  const Batch b = collate(us, 64, 64);
  REQUIRE(b.size == 2);
  CHECK(b.max_frames == 8);
  CHECK(b.prompt_lengths == std::vector<Index>{2, 2});
  CHECK(b.text_lengths == std::vector<Index>{3, 4});
  CHECK(b.max_positions == 6);
  CHECK(b.loss_positions() == 3 + 4);

  // Example 0: positions 0-1 prompt, 2 instr, 3-4 transcript.
  CHECK(b.targets_of(0) == std::vector<int>{0, 0, 4, 5, Vocabulary::eos});
  CHECK(b.mask_of(0) == std::vector<bool>{false, false, true, true, true});
  CHECK(b.targets_of(1) == std::vector<int>{0, 0, 6, 7, 8, Vocabulary::eos});
  CHECK(std::vector<int>(b.text_of(0).begin(), b.text_of(0).end()) == std::vector<int>{Vocabulary::instr, 4, 5});
  CHECK(b.tokens[3] == Vocabulary::pad);
  CHECK(b.targets[5] == Vocabulary::pad);
  CHECK_FALSE(b.loss_mask[5]);

  CHECK(b.features_of(0) == us[0].features);
  CHECK(b.features.matrix().middleRows(5, 3) == Matrix::Zero(3, 3));
  CHECK(b.features_of(1) == us[1].features);
}

TEST_CASE("collate filters overlong inputs") {
  const std::vector<Utterance> us{make_utterance(5, {4, 5}), make_utterance(9, {4}), make_utterance(4, {4, 5, 6, 7})};
  const Batch b = collate(us, 8, 5);
  CHECK(b.size == 1);
  CHECK(b.source_indices == std::vector<size_t>{0});
  CHECK_THROWS_AS(collate(us, 2, 64), EmptyInputError);
  CHECK_THROWS_AS(collate(std::span<const Utterance>{}, 8, 8), EmptyInputError);
  CHECK_THROWS_AS(collate(std::vector<Utterance>{make_utterance(0, {4})}, 8, 8), EmptyInputError);
  CHECK_THROWS_AS(collate(std::vector<Utterance>{make_utterance(3, {})}, 8, 8), ContractError);
  std::vector<Utterance> mixed{make_utterance(3, {4}), make_utterance(3, {4})};
  mixed[1].features = Matrix::Zero(3, 4);
  CHECK_THROWS_AS(collate(mixed, 8, 8), DimensionError);
}

TEST_CASE("collate never admits an input beyond the limits") {
  const auto corpus = generate_corpus(SynthSpec(), default_vocab(), 300);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<Index> frame_limit(12, 80), text_limit(5, 22);
  std::uniform_int_distribution<size_t> start(0, corpus.size() - 8);
  for (int draw = 0; draw < 500; ++draw) {
    const Index mf = frame_limit(rng), mt = text_limit(rng);
    const size_t first = start(rng);
    const std::span<const Utterance> slice(corpus.data() + first, 8);
    const size_t admissible = static_cast<size_t>(std::count_if(slice.begin(), slice.end(), [&](const Utterance& u) {
      return u.frames() <= mf && static_cast<Index>(u.transcript.size()) + 2 <= mt;
    }));
    if (admissible == 0) {
      CHECK_THROWS_AS(collate(slice, mf, mt), EmptyInputError);
      continue;
    }
    const Batch b = collate(slice, mf, mt);
    CHECK(static_cast<size_t>(b.size) == admissible);
    CHECK(b.max_frames <= mf);
    for (Index i = 0; i < b.size; ++i) {
      CHECK(b.frame_lengths[i] <= mf);
      CHECK(b.text_lengths[i] + 1 <= mt);
      CHECK(b.prompt_lengths[i] == (b.frame_lengths[i] + 3) / 4);
      const auto mask = b.mask_of(i);
      CHECK(std::count(mask.begin(), mask.end(), true) == b.text_lengths[i]);
    }
  }
}

TEST_CASE("split sizes, coverage and determinism") {
  const auto corpus = generate_corpus(SynthSpec(), default_vocab(), 10);
  const CorpusSplit s = split(corpus, {0.8, 0.1, 0.1}, 5);
  CHECK(s.train.size() == 8);
  CHECK(s.dev.size() == 1);
  CHECK(s.test.size() == 1);
  std::vector<std::vector<int>> seen;
  for (const auto* part : {&s.train, &s.dev, &s.test})
    for (const Utterance& u : *part) seen.push_back(u.transcript);
  std::vector<std::vector<int>> all;
  for (const Utterance& u : corpus) all.push_back(u.transcript);
  std::sort(seen.begin(), seen.end());
  std::sort(all.begin(), all.end());
  CHECK(seen == all);

  const CorpusSplit again = split(corpus, {0.8, 0.1, 0.1}, 5);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);
  const CorpusSplit other = split(corpus, {0.8, 0.1, 0.1}, 6);
  CHECK_FALSE(other.train == s.train);

  const auto big = generate_corpus(SynthSpec(), default_vocab(), 2500);
  const CorpusSplit d = split(big, {0.8, 0.1, 0.1}, 5);
  CHECK(d.train.size() == 2000);
  CHECK(d.dev.size() == 250);
  CHECK(d.test.size() == 250);

  CHECK_THROWS_AS(split(std::span<const Utterance>(corpus.data(), 2), {0.8, 0.1, 0.1}, 5), EmptyInputError);
  CHECK_THROWS_AS(split(corpus, {0.8, 0.1, 0.2}, 5), FormatError);
  CHECK_THROWS_AS(split(corpus, {1.2, -0.1, -0.1}, 5), FormatError);
}

TEST_CASE("base64 roundtrip") {
  CHECK(base64_encode(std::vector<unsigned char>{}) == "");
  const std::string text = "foobar";
  const std::vector<unsigned char> bytes(text.begin(), text.end());
  CHECK(base64_encode(std::span(bytes).first(1)) == "Zg==");
  CHECK(base64_encode(std::span(bytes).first(2)) == "Zm8=");
  CHECK(base64_encode(bytes) == "Zm9vYmFy");
  std::mt19937_64 rng(2);
  for (size_t n = 0; n < 64; ++n) {
    std::vector<unsigned char> b(n);
    for (auto& c : b) c = static_cast<unsigned char>(rng());
    CHECK(base64_decode(base64_encode(b)) == b);
  }
  CHECK_THROWS_AS(base64_decode("abc"), FormatError);
  CHECK_THROWS_AS(base64_decode("a*c="), FormatError);
}

TEST_CASE("corpus files roundtrip exactly") {
  const SynthSpec spec;
  const auto corpus = generate_corpus(spec, default_vocab(), 25);
  TempDir dir("corpus");
  write_corpus(dir / "a.jsonl", corpus, spec, default_vocab());
  const CorpusFile back = read_corpus(dir / "a.jsonl", default_vocab());
  REQUIRE(back.utterances.size() == corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    CHECK(back.utterances[i].transcript == corpus[i].transcript);
    CHECK(back.utterances[i].instruction == corpus[i].instruction);
    CHECK(bitwise_equal(back.utterances[i].features, corpus[i].features));
  }
  CHECK(back.spec.seed == spec.seed);
  CHECK(back.spec.symbols == spec.symbols);

  write_corpus(dir / "b.jsonl", generate_corpus(spec, default_vocab(), 25), spec, default_vocab());
  CHECK(testutil::read_file(dir / "a.jsonl") == testutil::read_file(dir / "b.jsonl"));

  const std::string text = testutil::read_file(dir / "a.jsonl");
  const size_t eol = text.find('\n');
  std::string header = text.substr(0, eol);
  const std::string body = text.substr(eol);
  const size_t v = header.find("\"version\":1");
  REQUIRE(v != std::string::npos);
  std::string future = header;
  future.replace(v, 11, "\"version\":2");
  testutil::write_file(dir / "future.jsonl", future + body);
  CHECK_THROWS_AS(read_corpus(dir / "future.jsonl", default_vocab()), FormatError);

  testutil::write_file(dir / "short.jsonl", text.substr(0, text.rfind('\n', text.size() - 2) + 1));
  CHECK_THROWS_AS(read_corpus(dir / "short.jsonl", default_vocab()), FormatError);
  testutil::write_file(dir / "empty.jsonl", "");
  CHECK_THROWS_AS(read_corpus(dir / "empty.jsonl", default_vocab()), FormatError);
  CHECK_THROWS_AS(read_corpus(dir / "missing.jsonl", default_vocab()), FormatError);
  const Vocabulary other = Vocabulary::with_symbols({"x", "y"});
  CHECK_THROWS_AS(read_corpus(dir / "a.jsonl", other), FormatError);
}
