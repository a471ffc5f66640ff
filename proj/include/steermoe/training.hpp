#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steermoe/data.hpp"
#include "steermoe/decoder.hpp"
#include "steermoe/minibatch.hpp"
#include "steermoe/optim.hpp"
#include "steermoe/steering.hpp"

namespace steermoe {

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  GroupNorms grad_norms{0.0, 0.0, 0.0};
  std::optional<double> dev_wer;
  double wall_clock_seconds = 0.0;
};

// Append-only. The CSV omits wall-clock time so that reruns are byte-identical.
struct TrainLog {
  std::vector<TrainLogEntry> entries;

  void append(TrainLogEntry e) { entries.push_back(e); }
  std::string csv() const;
};

struct AlignOptions {
  int threads = 1;
  int max_new_tokens = 24;
  Index max_frames = 256;  // longer utterances are dropped by collate
  Index max_text = 64;
  // Dev utterances used for the periodic WER (0 = all).
  size_t dev_eval_limit = 0;
  std::function<void(const TrainLogEntry&)> on_log;
};

struct AlignResult {
  SteeringState state;  // best-dev checkpoint (final state if no dev set)
  TrainLog log;
  int best_step = 0;
  std::optional<double> best_dev_wer;
};

// Loss of example b of a batch: audio prompt -> decoder -> masked CE,
// weighted by its share of the batch's loss positions.
WeightedLoss example_loss(Tape& tape, const Batch& batch, Index b, const EncoderWeights& encoder,
                          const DecoderWeights& decoder, const SteeringState& state);

// Batch loss assembled as one padded (size * max_positions) x V logits matrix
// with zero pad rows, reduced by a single cross_entropy_masked. Exposes the
// padded logits var through `logits` when non-null.
Var padded_batch_loss(Tape& tape, const Batch& batch, const EncoderWeights& encoder, const DecoderWeights& decoder,
                      const SteeringState& state, Var* logits = nullptr);

// Optimizes the steering state against the masked next-token loss. Both
// backbones must be frozen. Evaluates dev WER every eval_interval steps and
// after the last step, and returns the state with the lowest dev WER.
// Throws NumericalError on a non-finite loss (naming the step).
AlignResult align_train(const EncoderWeights& encoder, const DecoderWeights& decoder, SteeringState state,
                        std::span<const Utterance> train, std::span<const Utterance> dev, const OptimSpec& spec,
                        const AlignOptions& options = {});

// Greedy transcription of one utterance through the aligned pipeline.
std::vector<int> transcribe(const Utterance& u, const EncoderWeights& encoder, const DecoderWeights& decoder,
                            const SteeringState& state, int max_new_tokens);

}  // namespace steermoe
