#include "steermoe/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "steermoe/errors.hpp"
#include "steermoe/metrics.hpp"

namespace steermoe {

std::string TrainLog::csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "step,loss,grad_norm_base,grad_norm_steering_vectors,grad_norm_router,dev_wer\n";
  for (const auto& e : entries) {
    os << e.step << ',' << e.loss << ',' << e.grad_norms[0] << ',' << e.grad_norms[1] << ',' << e.grad_norms[2]
       << ',';
    if (e.dev_wer) os << *e.dev_wer;
    os << '\n';
  }
  return os.str();
}

WeightedLoss example_loss(Tape& tape, const Batch& batch, Index b, const EncoderWeights& encoder,
                          const DecoderWeights& decoder, const SteeringState& state) {
  const Var prompt = audio_prompt(tape.constant(batch.features_of(b)), encoder, state);
  const Var logits = forward_with_prompt(prompt, batch.text_of(b), decoder);
  const auto targets = batch.targets_of(b);
  const auto mask = batch.mask_of(b);
  const auto count = static_cast<double>(std::count(mask.begin(), mask.end(), true));
  return WeightedLoss{cross_entropy_masked(logits, targets, mask),
                      count / static_cast<double>(batch.loss_positions())};
}

Var padded_batch_loss(Tape& tape, const Batch& batch, const EncoderWeights& encoder, const DecoderWeights& decoder,
                      const SteeringState& state, Var* logits) {
  std::vector<Var> rows;
  const Index vocab = decoder.config.vocab_size;
  for (Index b = 0; b < batch.size; ++b) {
    const Var prompt = audio_prompt(tape.constant(batch.features_of(b)), encoder, state);
    rows.push_back(forward_with_prompt(prompt, batch.text_of(b), decoder));
    const Index pad = batch.max_positions - batch.positions_of(b);
    if (pad > 0) rows.push_back(tape.constant(Matrix::Zero(pad, vocab)));
  }
  const Var all = concat_rows(rows);
  if (logits) *logits = all;
  return cross_entropy_masked(all, batch.targets, batch.loss_mask);
}

std::vector<int> transcribe(const Utterance& u, const EncoderWeights& encoder, const DecoderWeights& decoder,
                            const SteeringState& state, int max_new_tokens) {
  Tape tape;
  const Matrix prompt = audio_prompt(tape.constant(u.features), encoder, state).value();
  return greedy_decode(prompt, u.instruction, decoder, max_new_tokens, Vocabulary::eos);
}

namespace {

double dev_error_rate(std::span<const Utterance> dev, const EncoderWeights& encoder, const DecoderWeights& decoder,
                      const SteeringState& state, const AlignOptions& options) {
  const size_t n = options.dev_eval_limit ? std::min(options.dev_eval_limit, dev.size()) : dev.size();
  std::vector<std::vector<int>> refs(n), hyps(n);
  auto work = [&](size_t i) {
    refs[i] = dev[i].transcript;
    hyps[i] = transcribe(dev[i], encoder, decoder, state, options.max_new_tokens);
  };
  const size_t workers = std::min<size_t>(n, static_cast<size_t>(std::max(options.threads, 1)));
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (size_t i = w; i < n; i += workers) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  return corpus_error_rate<int>(refs, hyps);
}

}  // namespace

AlignResult align_train(const EncoderWeights& encoder, const DecoderWeights& decoder, SteeringState state,
                        std::span<const Utterance> train, std::span<const Utterance> dev, const OptimSpec& spec,
                        const AlignOptions& options) {
  if (!encoder.frozen() || !decoder.frozen()) {
    throw ContractError("align_train: encoder and decoder must be frozen");
  }
  spec.validate();
  AlignResult result{state, {}, 0, std::nullopt};
  if (spec.max_steps == 0) return result;
  if (train.empty()) throw EmptyInputError("align_train: empty training corpus");

  AdamW adam(spec);
  const ParameterRefs params = state.parameters();
  std::mt19937_64 rng(spec.seed);
  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  size_t cursor = 0;
  const auto started = std::chrono::steady_clock::now();

  for (int step = 1; step <= spec.max_steps; ++step) {
    std::vector<Utterance> picked;
    for (int i = 0; i < spec.batch_size; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      picked.push_back(train[order[cursor++]]);
    }
    const Batch batch = collate(picked, options.max_frames, options.max_text, kPoolKernel);
    const double loss = accumulate_minibatch(
        params, static_cast<size_t>(batch.size),
        [&](Tape& tape, size_t b) {
          return example_loss(tape, batch, static_cast<Index>(b), encoder, decoder, state);
        },
        options.threads);
    if (!std::isfinite(loss)) {
      throw NumericalError("align_train: non-finite loss at step " + std::to_string(step));
    }
    TrainLogEntry entry;
    entry.step = step;
    entry.loss = loss;
    entry.grad_norms = adam.step(params, step);

    if (!dev.empty() && (step % spec.eval_interval == 0 || step == spec.max_steps)) {
      const double wer = dev_error_rate(dev, encoder, decoder, state, options);
      entry.dev_wer = wer;
      if (!result.best_dev_wer || wer < *result.best_dev_wer) {
        result.best_dev_wer = wer;
        result.best_step = step;
        result.state = state;
      }
    }
    entry.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.append(entry);
    if (options.on_log) options.on_log(entry);
  }
  if (dev.empty()) {
    result.state = state;
    result.best_step = spec.max_steps;
  }
  return result;
}

}  // namespace steermoe
