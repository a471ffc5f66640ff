#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "steermoe/decoder.hpp"
#include "steermoe/encoder.hpp"
#include "steermoe/errors.hpp"
#include "steermoe/gradcheck.hpp"
#include "steermoe/steering.hpp"
#include "steermoe/vocab.hpp"
#include "steermoe/data.hpp"
#include "util.hpp"

using namespace steermoe;
using testutil::bitwise_equal;
using testutil::random_matrix;

namespace {

EncoderConfig small_encoder(int layers, int dim) {
  EncoderConfig c;
  c.num_layers = layers;
  c.model_dim = dim;
  c.num_heads = 2;
  c.ff_dim = 2 * dim;
  c.input_dim = 5;
  c.max_frames = 64;
  return c;
}

SteeringConfig steering_config(int experts, int decoder_dim, std::uint64_t seed = 3) {
  SteeringConfig c;
  c.num_experts = experts;
  c.decoder_dim = decoder_dim;
  c.seed = seed;
  return c;
}

// Gives every steering parameter a non-trivial value.
void randomize(SteeringState& s, std::mt19937_64& rng) {
  for (Parameter* p : s.parameters()) {
    p->value.matrix() = random_matrix(p->matrix().rows(), p->matrix().cols(), rng, 0.5);
  }
}

}  // namespace

TEST_CASE("init follows the parameter contract") {
  const SteeringState s = SteeringState::init(steering_config(8, 16), 4, 8);
  CHECK(s.experts.value.shape() == std::vector<Index>{4, 8, 8});
  CHECK(s.experts.lr_group == LrGroup::steering_vectors);
  CHECK(s.router.value.shape() == std::vector<Index>{8, 32});
  CHECK(s.router.lr_group == LrGroup::router);
  CHECK(s.router.matrix().cwiseAbs().maxCoeff() == 0.0);
  CHECK(s.alphas.value.shape() == std::vector<Index>{4});
  CHECK(s.alphas.lr_group == LrGroup::base);
  CHECK_FALSE(s.alphas.weight_decay);
  CHECK((s.alphas.matrix().array() == 0.1).all());
  CHECK(s.projection.value.shape() == std::vector<Index>{8, 16});
  CHECK(s.projection.lr_group == LrGroup::base);
  for (const Parameter* p : s.parameters()) CHECK(p->trainable);

  const SteeringState st = SteeringState::init([] {
    SteeringConfig c = steering_config(8, 16);
    c.kind = AdapterKind::static_projection;
    return c;
  }(), 4, 8);
  CHECK(st.parameters().size() == 1);
  CHECK(st.projection.value == s.projection.value);
}

TEST_CASE("parameter census") {
  // Independent count: L*N*D experts, D*(L*N) router, L alphas, D*D_llm projection.
  struct Case {
    int layers, experts, dim, llm;
  };
  for (const Case c : {Case{4, 8, 64, 64}, Case{2, 3, 8, 12}, Case{1, 1, 4, 4}}) {
    const Index expected = Index{c.layers} * c.experts * c.dim + Index{c.dim} * c.layers * c.experts + c.layers +
                           Index{c.dim} * c.llm;
    CHECK(census(AdapterKind::moe, c.layers, c.experts, c.dim, c.llm) == expected);
    CHECK(SteeringState::init(steering_config(c.experts, c.llm), c.layers, c.dim).trainable_count() == expected);
    SteeringConfig sc = steering_config(c.experts, c.llm);
    sc.kind = AdapterKind::static_projection;
    CHECK(census(AdapterKind::static_projection, c.layers, c.experts, c.dim, c.llm) == Index{c.dim} * c.llm);
    CHECK(SteeringState::init(sc, c.layers, c.dim).trainable_count() == Index{c.dim} * c.llm);
  }
}

TEST_CASE("gates sum to one and each layer reads only its own router block") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> pick_layers(1, 4), pick_experts(1, 8), pick_rows(1, 9);
  for (int draw = 0; draw < 1000; ++draw) {
    const int layers = pick_layers(rng), n = pick_experts(rng), dim = 4 + 4 * (draw % 2);
    SteeringState s = SteeringState::init(steering_config(n, dim), layers, dim);
    s.router.value.matrix() = random_matrix(dim, layers * n, rng, 2.0);
    const Matrix h = random_matrix(pick_rows(rng), dim, rng, 3.0);
    const int l = draw % layers;
    Tape tape;
    const Matrix g = route(tape.constant(h), s, l).value();
    REQUIRE(g.cols() == n);
    for (Index r = 0; r < g.rows(); ++r) CHECK(std::abs(g.row(r).sum() - 1.0) < 1e-9);

    SteeringState other = s;
    Matrix& w = other.router.value.matrix();
    const Matrix noise = random_matrix(w.rows(), w.cols(), rng, 5.0);
    for (Index c = 0; c < w.cols(); ++c) {
      if (c < Index{l} * n || c >= Index{l + 1} * n) w.col(c) += noise.col(c);
    }
    Tape t2;
    CHECK(bitwise_equal(route(t2.constant(h), other, l).value(), g));
  }
}

TEST_CASE("route and steer_layer match the formulas") {
  std::mt19937_64 rng(2);
  SteeringState s = SteeringState::init(steering_config(3, 6), 2, 6);
  randomize(s, rng);
  const Matrix h = random_matrix(5, 6, rng);
  Tape tape;
  const Matrix g = route(tape.constant(h), s, 1).value();
  const oracle::Mat logits = oracle::matmul(oracle::from(h), oracle::from(s.router.matrix()));
  oracle::Mat block(5, 3);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 3; ++c) block(r, c) = logits(r, 3 + c);
  CHECK(oracle::max_abs_diff(g, oracle::softmax(block)) < 1e-12);

  const Matrix steered = steer_layer(tape.constant(h), s, 1).value();
  const oracle::Mat experts = oracle::from(s.experts.matrix().middleRows(3, 3));
  oracle::Mat expected = oracle::matmul(oracle::softmax(block), experts);
  const double alpha = s.alphas.matrix()(0, 1);
  for (size_t i = 0; i < expected.a.size(); ++i) expected.a[i] = h.data()[i] + alpha * expected.a[i];
  CHECK(oracle::max_abs_diff(steered, expected) < 1e-12);

  CHECK_THROWS_AS(route(tape.constant(h), s, 2), IndexError);
  CHECK_THROWS_AS(route(tape.constant(h), s, -1), IndexError);
}

TEST_CASE("identity degeneration") {
  std::mt19937_64 rng(3);
  const EncoderConfig ec = small_encoder(3, 8);
  const EncoderWeights enc = EncoderWeights::init(ec, 4);
  const Matrix f = random_matrix(11, ec.input_dim, rng);
  const Matrix unsteered = avg_pool_rows(encode(f, enc), kPoolKernel);

  SteeringState s = SteeringState::init(steering_config(4, 8), 3, 8);
  randomize(s, rng);
  s.alphas.value.matrix().setZero();
  Tape a;
  CHECK(bitwise_equal(steered_encode(a.constant(f), enc, s).value(), unsteered));

  SteeringState z = SteeringState::init(steering_config(4, 8), 3, 8);
  randomize(z, rng);
  z.experts.value.matrix().setZero();
  Tape b;
  CHECK(bitwise_equal(steered_encode(b.constant(f), enc, z).value(), unsteered));

  SteeringConfig sc = steering_config(4, 8);
  sc.kind = AdapterKind::static_projection;
  Tape c;
  CHECK(bitwise_equal(steered_encode(c.constant(f), enc, SteeringState::init(sc, 3, 8)).value(), unsteered));
}

TEST_CASE("projection examples") {
  std::mt19937_64 rng(4);
  SteeringState s = SteeringState::init(steering_config(2, 6), 1, 6);
  const Matrix h = random_matrix(3, 6, rng);
  Tape tape;
  s.projection.value.matrix() = Matrix::Identity(6, 6);
  CHECK(project(tape.constant(h), s).value() == h);
  s.projection.value.matrix().setZero();
  CHECK(project(tape.constant(h), s).value() == Matrix::Zero(3, 6));
  CHECK_THROWS_AS(project(tape.constant(Matrix::Zero(3, 5)), s), DimensionError);
}

TEST_CASE("prompt length is ceil(T / 4)") {
  const EncoderConfig ec = small_encoder(1, 4);
  const EncoderWeights enc = EncoderWeights::init(ec, 5);
  const SteeringState s = SteeringState::init(steering_config(2, 4), 1, 4);
  std::mt19937_64 rng(5);
  for (Index t = 1; t <= 64; ++t) {
    Tape tape;
    CHECK(audio_prompt(tape.constant(random_matrix(t, ec.input_dim, rng)), enc, s).rows() == (t + 3) / 4);
  }
}

TEST_CASE("full pipeline gradients pass the finite-difference check") {
  std::mt19937_64 rng(6);
  const EncoderConfig ec = small_encoder(2, 8);
  const EncoderWeights enc = EncoderWeights::init(ec, 7);
  DecoderConfig dc;
  dc.num_layers = 1;
  dc.model_dim = 8;
  dc.num_heads = 2;
  dc.ff_dim = 16;
  const DecoderWeights dec = DecoderWeights::init(dc, 8);
  SteeringState s = SteeringState::init(steering_config(2, 8), 2, 8);
  randomize(s, rng);
  const Matrix f = random_matrix(9, ec.input_dim, rng);
  const std::vector<int> text{Vocabulary::instr, 5, 9};
  const std::vector<int> targets{0, 0, 0, 5, 9, Vocabulary::eos};
  const std::vector<bool> mask{false, false, false, true, true, true};
  const auto r = check_gradients(
      [&](Tape& t) {
        return cross_entropy_masked(forward_with_prompt(audio_prompt(t.constant(f), enc, s), text, dec), targets, mask);
      },
      s.parameters());
  CHECK(r.coordinates_checked == s.trainable_count());
  CHECK(r.max_relative_error < 1e-5);
}

TEST_CASE("router statistics") {
  const Vocabulary vocab = Vocabulary::with_symbols(SynthSpec().symbols);
  const auto corpus = generate_corpus(SynthSpec(), vocab, 6);
  EncoderConfig ec;
  const EncoderWeights enc = EncoderWeights::init(ec, 9);
  const SteeringState fresh = SteeringState::init(steering_config(8, 64), ec.num_layers, ec.model_dim);
  const RouterStats u = router_stats(fresh, enc, corpus);
  REQUIRE(u.entropy.size() == 4);
  for (double e : u.entropy) CHECK(std::abs(e - std::log(8.0)) < 1e-12);
  for (const auto& row : u.usage) {
    double total = 0.0;
    for (double x : row) {
      CHECK(std::abs(x - 0.125) < 1e-12);
      total += x;
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }

  std::mt19937_64 rng(10);
  SteeringState trained = fresh;
  randomize(trained, rng);
  const RouterStats t = router_stats(trained, enc, corpus);
  for (size_t l = 0; l < t.entropy.size(); ++l) {
    CHECK(t.entropy[l] >= 0.0);
    CHECK(t.entropy[l] < std::log(8.0));
    double total = 0.0;
    for (double x : t.usage[l]) total += x;
    CHECK(std::abs(total - 1.0) < 1e-12);
  }

  CHECK_THROWS_AS(router_stats(fresh, enc, std::span<const Utterance>{}), EmptyInputError);
  SteeringConfig sc = steering_config(8, 64);
  sc.kind = AdapterKind::static_projection;
  CHECK_THROWS_AS(router_stats(SteeringState::init(sc, 4, 64), enc, corpus), ContractError);
}

TEST_CASE("steering config validation") {
  SteeringConfig c;
  c.num_experts = 0;
  CHECK_THROWS_AS(c.validate(), FormatError);
  c.num_experts = 1;
  c.alpha_init = std::nan("");
  CHECK_THROWS_AS(c.validate(), FormatError);
  CHECK_THROWS_AS(adapter_kind_from_string("mlp"), FormatError);
  CHECK(adapter_kind_from_string(to_string(AdapterKind::static_projection)) == AdapterKind::static_projection);
}
