#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "steermoe/training.hpp"

namespace steermoe {

struct UtteranceResult {
  std::vector<std::string> reference;
  std::vector<std::string> hypothesis;
  Index word_edits = 0;
  Index reference_words = 0;
  Index char_edits = 0;
  Index reference_chars = 0;
};

struct EvalReport {
  std::string variant;
  std::string split;
  double wer = 0.0;  // total word edits / total reference words
  double cer = 0.0;
  Index utterances = 0;
  std::vector<UtteranceResult> details;
  std::optional<RouterStats> router;
  Index trainable_parameters = 0;
  std::string encoder_hash;
  std::string decoder_hash;
  bool failed = false;
  std::string error;
  nlohmann::json metadata;  // resolved config and run identifiers
};

void to_json(nlohmann::json& j, const EvalReport& r);

using Transcriber = std::function<std::vector<int>(const Utterance&)>;

// Transcribes every utterance and aggregates micro-averaged WER/CER.
EvalReport evaluate(const Transcriber& transcriber, std::span<const Utterance> corpus, const Vocabulary& vocab,
                    std::string variant, std::string split, int threads = 1);

struct EvalOptions {
  int threads = 1;
  int max_new_tokens = 24;
  bool with_router_stats = true;
};

// Greedy-decodes the corpus through encoder -> steering -> decoder and
// attaches router statistics for MoE states.
EvalReport evaluate(const EncoderWeights& encoder, const DecoderWeights& decoder, const SteeringState& state,
                    std::span<const Utterance> corpus, const Vocabulary& vocab, std::string variant,
                    std::string split, const EvalOptions& options = {});

// Hash of the serialized weights, used to show that every variant shares the
// same frozen backbones.
std::string backbone_hash(const EncoderWeights& encoder);
std::string backbone_hash(const DecoderWeights& decoder);

struct AblationVariant {
  std::string label;
  AdapterKind kind = AdapterKind::moe;
  int num_experts = 8;
};

struct AblationPlan {
  std::vector<AblationVariant> variants;
  SteeringConfig steering;  // shared settings (alpha_init, seed, decoder_dim)
  OptimSpec optim;          // shared budget
  AlignOptions align;
  EvalOptions eval;

  // MoE with 2, 4, 8 experts plus the static projection adapter.
  static std::vector<AblationVariant> default_variants();
};

// Trains every variant from scratch on the shared frozen backbones and
// evaluates it on `test`. A variant that throws is reported with failed set
// and the run continues.
std::vector<EvalReport> run_ablation(const AblationPlan& plan, const EncoderWeights& encoder,
                                     const DecoderWeights& decoder, std::span<const Utterance> train,
                                     std::span<const Utterance> dev, std::span<const Utterance> test,
                                     const Vocabulary& vocab);

// variant,kind,num_experts,trainable_parameters,wer,cer,failed
std::string ablation_csv(std::span<const EvalReport> reports);

struct TrendCheck {
  bool experts_ordered = false;  // MoE-8 <= MoE-4 <= MoE-2 within tolerance
  bool static_worse = false;     // static >= 2 x MoE-8
  std::string detail;
  bool passed() const { return experts_ordered && static_worse; }
};

// Directional ablation trend over reports labelled moe-2/moe-4/moe-8/static.
TrendCheck check_ablation_trend(std::span<const EvalReport> reports, double tolerance = 0.01);

}  // namespace steermoe
