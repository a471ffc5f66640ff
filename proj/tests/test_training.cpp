#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "steermoe/errors.hpp"
#include "steermoe/eval.hpp"
#include "steermoe/minibatch.hpp"
#include "steermoe/optim.hpp"
#include "steermoe/training.hpp"
#include "util.hpp"

using namespace steermoe;
using testutil::bitwise_equal;
using testutil::random_matrix;
using testutil::trainable;

namespace {

struct Toy {
  Vocabulary vocab = Vocabulary::with_symbols(SynthSpec().symbols);
  EncoderWeights encoder;
  DecoderWeights decoder;
  SteeringConfig steering;
  std::vector<Utterance> corpus;

  Toy() {
    EncoderConfig ec;
    ec.num_layers = 2;
    ec.model_dim = 8;
    ec.num_heads = 2;
    ec.ff_dim = 16;
    encoder = EncoderWeights::init(ec, 1);
    encoder.freeze();
    DecoderConfig dc;
    dc.num_layers = 1;
    dc.model_dim = 8;
    dc.num_heads = 2;
    dc.ff_dim = 16;
    decoder = DecoderWeights::init(dc, 2);
    decoder.freeze();
    steering.decoder_dim = 8;
    steering.num_experts = 4;
    SynthSpec spec;
    spec.max_tokens = 6;
    corpus = generate_corpus(spec, vocab, 40);
  }

  SteeringState state() const { return SteeringState::init(steering, 2, 8); }
};

OptimSpec quick_optim(int steps) {
  OptimSpec s;
  s.max_steps = steps;
  s.eval_interval = 1000000;
  s.batch_size = 2;
  return s;
}

}  // namespace

TEST_CASE("AdamW matches a scalar oracle per group") {
  OptimSpec spec;
  spec.clip_norm = 0.0;
  AdamW adam(spec);
  Parameter base = trainable("base", Matrix::Constant(1, 2, 0.5));
  Parameter vec = trainable("vec", Matrix::Constant(1, 1, -0.3), LrGroup::steering_vectors);
  Parameter router = trainable("router", Matrix::Constant(1, 1, 0.2), LrGroup::router);
  Parameter alpha("alpha", Tensor::from_matrix(Matrix::Constant(1, 1, 0.1)), true, LrGroup::base, false);
  ParameterRefs params{&base, &vec, &router, &alpha};

  oracle::ScalarAdam o_base0{1e-4, 0.9, 0.999, 1e-8, 0.01}, o_base1{1e-4, 0.9, 0.999, 1e-8, 0.01};
  oracle::ScalarAdam o_vec{1e-2, 0.9, 0.999, 1e-8, 0.01}, o_router{1e-3, 0.9, 0.999, 1e-8, 0.01};
  oracle::ScalarAdam o_alpha{1e-4, 0.9, 0.999, 1e-8, 0.0};
  double w[5] = {0.5, 0.5, -0.3, 0.2, 0.1};
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int step = 1; step <= 50; ++step) {
    double grads[5];
    for (double& x : grads) x = g(rng);
    if (step % 7 == 0) grads[3] = 0.0;
    base.accumulate_grad((Matrix(1, 2) << grads[0], grads[1]).finished());
    vec.accumulate_grad(Matrix::Constant(1, 1, grads[2]));
    // A parameter without a gradient is updated as if it had a zero one.
    if (step % 7 != 0) router.accumulate_grad(Matrix::Constant(1, 1, grads[3]));
    alpha.accumulate_grad(Matrix::Constant(1, 1, grads[4]));
    adam.step(params, step);
    w[0] = o_base0.step(w[0], grads[0]);
    w[1] = o_base1.step(w[1], grads[1]);
    w[2] = o_vec.step(w[2], grads[2]);
    w[3] = o_router.step(w[3], grads[3]);
    w[4] = o_alpha.step(w[4], grads[4]);
    CHECK(std::abs(base.matrix()(0, 0) - w[0]) < 1e-12);
    CHECK(std::abs(base.matrix()(0, 1) - w[1]) < 1e-12);
    CHECK(std::abs(vec.matrix()(0, 0) - w[2]) < 1e-12);
    CHECK(std::abs(router.matrix()(0, 0) - w[3]) < 1e-12);
    CHECK(std::abs(alpha.matrix()(0, 0) - w[4]) < 1e-12);
    for (Parameter* p : params) CHECK_FALSE(p->grad.has_value());
  }
}

TEST_CASE("AdamW clips by the global norm and reports group norms") {
  OptimSpec spec;
  AdamW adam(spec);
  Parameter a = trainable("a", Matrix::Zero(1, 1));
  Parameter b = trainable("b", Matrix::Zero(1, 1), LrGroup::router);
  a.accumulate_grad(Matrix::Constant(1, 1, 3.0));
  b.accumulate_grad(Matrix::Constant(1, 1, 4.0));
  const GroupNorms norms = adam.step({&a, &b}, 1);
  CHECK(norms[0] == 3.0);
  CHECK(norms[1] == 0.0);
  CHECK(norms[2] == 4.0);
  oracle::ScalarAdam oa{1e-4, 0.9, 0.999, 1e-8, 0.01}, ob{1e-3, 0.9, 0.999, 1e-8, 0.01};
  CHECK(std::abs(a.matrix()(0, 0) - oa.step(0.0, 3.0 / 5.0)) < 1e-15);
  CHECK(std::abs(b.matrix()(0, 0) - ob.step(0.0, 4.0 / 5.0)) < 1e-15);

  Parameter c = trainable("c", Matrix::Zero(1, 1));
  c.accumulate_grad(Matrix::Constant(1, 1, std::nan("")));
  CHECK_THROWS_WITH_AS(AdamW(spec).step({&c}, 1), doctest::Contains("c"), NumericalError);
  CHECK_THROWS_AS(AdamW(spec).step({&a}, 0), ContractError);
}

TEST_CASE("frozen parameters never move") {
  std::mt19937_64 rng(2);
  Parameter frozen("frozen", Tensor::from_matrix(random_matrix(3, 3, rng)), false);
  const Matrix before = frozen.matrix();
  Parameter live = trainable("live", random_matrix(3, 3, rng));
  CHECK_THROWS_AS(frozen.accumulate_grad(Matrix::Ones(3, 3)), ContractError);
  AdamW adam{OptimSpec()};
  for (int step = 1; step <= 1000; ++step) {
    live.accumulate_grad(random_matrix(3, 3, rng));
    adam.step({&frozen, &live}, step);
  }
  CHECK(bitwise_equal(frozen.matrix(), before));
  CHECK_FALSE(frozen.grad.has_value());
}

TEST_CASE("minibatch accumulation is independent of the thread count") {
  const Toy toy;
  SteeringState s = toy.state();
  std::mt19937_64 rng(3);
  for (Parameter* p : s.parameters()) p->value.matrix() = random_matrix(p->matrix().rows(), p->matrix().cols(), rng, 0.3);
  const Batch batch = collate(std::span(toy.corpus).first(5), 256, 64);
  auto run = [&](int threads) {
    SteeringState copy = s;
    const double loss = accumulate_minibatch(
        copy.parameters(), static_cast<size_t>(batch.size),
        [&](Tape& t, size_t b) { return example_loss(t, batch, static_cast<Index>(b), toy.encoder, toy.decoder, copy); },
        threads);
    std::vector<Matrix> grads;
    for (Parameter* p : copy.parameters()) grads.push_back(*p->grad);
    return std::make_pair(loss, grads);
  };
  const auto one = run(1), four = run(4);
  CHECK(one.first == four.first);
  for (size_t i = 0; i < one.second.size(); ++i) CHECK(bitwise_equal(one.second[i], four.second[i]));
}

TEST_CASE("padded batch loss equals the weighted per-example losses") {
  const Toy toy;
  SteeringState s = toy.state();
  std::mt19937_64 rng(4);
  for (Parameter* p : s.parameters()) p->value.matrix() = random_matrix(p->matrix().rows(), p->matrix().cols(), rng, 0.3);
  const Batch batch = collate(std::span(toy.corpus).first(4), 256, 64);
  REQUIRE(batch.size == 4);

  SteeringState padded_state = s;
  Tape tape;
  Var logits;
  const Var padded = padded_batch_loss(tape, batch, toy.encoder, toy.decoder, padded_state, &logits);
  tape.backward(padded);

  SteeringState split_state = s;
  double total = 0.0;
  for (Index b = 0; b < batch.size; ++b) {
    Tape t;
    const WeightedLoss wl = example_loss(t, batch, b, toy.encoder, toy.decoder, split_state);
    total += wl.weight * wl.loss.value()(0, 0);
  }
  CHECK(std::abs(padded.value()(0, 0) - total) < 1e-10);

  const double sum = accumulate_minibatch(
      split_state.parameters(), static_cast<size_t>(batch.size),
      [&](Tape& t, size_t b) { return example_loss(t, batch, static_cast<Index>(b), toy.encoder, toy.decoder, split_state); });
  CHECK(std::abs(sum - total) < 1e-12);
  for (const auto& [param, grad] : tape.parameter_grads()) {
    const Parameter* twin = nullptr;
    for (const Parameter* p : split_state.parameters())
      if (p->name == param->name) twin = p;
    REQUIRE(twin);
    CHECK((*grad - *twin->grad).cwiseAbs().maxCoeff() < 1e-10);
  }

  // Rows whose target is audio, instruction or padding get no gradient.
  const Matrix* dlogits = tape.grad(logits);
  REQUIRE(dlogits);
  for (Index r = 0; r < dlogits->rows(); ++r) {
    if (!batch.loss_mask[static_cast<size_t>(r)]) CHECK(dlogits->row(r).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("hand-built batch: masked loss covers transcript positions only") {
  const Toy toy;
  Utterance a, b;
  a.features = Matrix::Constant(6, 16, 0.5);
  a.transcript = {4, 5};
  a.instruction = {Vocabulary::instr};
  b.features = Matrix::Constant(3, 16, -0.5);
  b.transcript = {6};
  b.instruction = {Vocabulary::instr};
  const std::vector<Utterance> pair{a, b};
  const Batch batch = collate(pair, 256, 64);
  // a: prompt 2, text [instr 4 5]; b: prompt 1, text [instr 6]; width 5.
  REQUIRE(batch.max_positions == 5);
  std::mt19937_64 rng(5);
  const Matrix raw = random_matrix(10, 30, rng, 2.0);
  Tape tape;
  const Var logits = tape.variable(raw);
  const Var loss = cross_entropy_masked(logits, batch.targets, batch.loss_mask);
  tape.backward(loss);

  const std::vector<std::pair<int, int>> scored{{2, 4}, {3, 5}, {4, 2}, {6, 6}, {7, 2}};
  double expected = 0.0;
  for (auto [row, target] : scored) {
    std::vector<double> v(raw.row(row).data(), raw.row(row).data() + 30);
    expected += oracle::log_sum_exp(v) - raw(row, target);
  }
  expected /= 5.0;
  CHECK(std::abs(loss.value()(0, 0) - expected) < 1e-10);
  const Matrix& g = *tape.grad(logits);
  for (int r : {0, 1, 5, 8, 9}) CHECK(g.row(r).cwiseAbs().maxCoeff() == 0.0);
  for (auto [row, target] : scored) CHECK(g.row(row).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("alignment budget edge cases") {
  const Toy toy;
  const auto train = std::span(toy.corpus).first(30);
  const AlignResult none = align_train(toy.encoder, toy.decoder, toy.state(), train, {}, quick_optim(0));
  CHECK(none.log.entries.empty());
  CHECK(none.state.projection.value == toy.state().projection.value);
  CHECK_THROWS_AS(align_train(toy.encoder, toy.decoder, toy.state(), {}, {}, quick_optim(1)), EmptyInputError);

  DecoderWeights live = toy.decoder;
  live.token_embedding.trainable = true;
  CHECK_THROWS_AS(align_train(toy.encoder, live, toy.state(), train, {}, quick_optim(1)), ContractError);
}

TEST_CASE("alignment lowers the loss and leaves the backbones untouched") {
  const Toy toy;
  const std::string enc_hash = backbone_hash(toy.encoder), dec_hash = backbone_hash(toy.decoder);
  const std::vector<std::vector<int>> texts{lm_sequence(toy.corpus[0].transcript, toy.corpus[0].instruction)};
  const double ppl = perplexity(toy.decoder, texts);
  const auto train = std::span(toy.corpus).first(30), dev = std::span(toy.corpus).subspan(30);
  OptimSpec spec = quick_optim(200);
  spec.eval_interval = 100;
  AlignOptions opts;
  int logged = 0;
  opts.on_log = [&](const TrainLogEntry&) { ++logged; };
  const AlignResult r = align_train(toy.encoder, toy.decoder, toy.state(), train, dev, spec, opts);
  REQUIRE(r.log.entries.size() == 200);
  CHECK(logged == 200);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 20; ++i) {
    first += r.log.entries[static_cast<size_t>(i)].loss;
    last += r.log.entries[static_cast<size_t>(180 + i)].loss;
  }
  CHECK(last < first);
  CHECK(r.log.entries[99].dev_wer.has_value());
  CHECK(r.log.entries[199].dev_wer.has_value());
  CHECK_FALSE(r.log.entries[100].dev_wer.has_value());
  CHECK(r.best_dev_wer.has_value());
  CHECK((r.best_step == 100 || r.best_step == 200));
  CHECK(backbone_hash(toy.encoder) == enc_hash);
  CHECK(backbone_hash(toy.decoder) == dec_hash);
  CHECK(perplexity(toy.decoder, texts) == ppl);

  const std::string csv = r.log.csv();
  CHECK(csv.rfind("step,loss,grad_norm_base,grad_norm_steering_vectors,grad_norm_router,dev_wer\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 201);

  const AlignResult again = align_train(toy.encoder, toy.decoder, toy.state(), train, dev, spec, opts);
  CHECK(again.log.csv() == csv);
  AlignOptions threaded = opts;
  threaded.threads = 3;
  const AlignResult parallel = align_train(toy.encoder, toy.decoder, toy.state(), train, dev, spec, threaded);
  CHECK(parallel.log.csv() == csv);
  CHECK(parallel.state.projection.value == r.state.projection.value);
}
