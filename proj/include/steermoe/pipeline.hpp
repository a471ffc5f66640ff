#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "steermoe/config.hpp"
#include "steermoe/eval.hpp"
#include "steermoe/vocab.hpp"

namespace steermoe {

// One run directory:
//   data/{train,dev,test}.jsonl, data/vocab.txt
//   checkpoints/{encoder,decoder,steering}.ckpt
//   logs/train_log.csv
//   reports/*.json, reports/ablation.csv
//   manifest.json  (every other file with its size and SHA-256)
struct RunContext {
  RunConfig config;
  std::vector<std::string> overrides;  // as given on the command line
  std::filesystem::path run_dir;
  int threads = 1;

  std::filesystem::path data_dir() const { return run_dir / "data"; }
  std::filesystem::path checkpoint_dir() const { return run_dir / "checkpoints"; }
  std::filesystem::path log_dir() const { return run_dir / "logs"; }
  std::filesystem::path report_dir() const { return run_dir / "reports"; }

  // Resolved config plus overrides; embedded in every output.
  nlohmann::json metadata() const;
};

struct SplitData {
  Vocabulary vocab;
  std::vector<Utterance> train, dev, test;

  const std::vector<Utterance>& split(const std::string& name) const;
};

struct GenDataSummary {
  size_t train = 0, dev = 0, test = 0;
};

GenDataSummary gen_data(const RunContext& ctx);

// Reads the corpus written by gen_data. Throws FormatError if a file is
// missing or was generated from a different synth config.
SplitData load_data(const RunContext& ctx);

// Text sequences for decoder pretraining, drawn from the transcript
// distribution with the config's text seed (never from the audio corpus).
std::vector<std::vector<int>> decoder_text_corpus(const RunConfig& config, int count, std::uint64_t first_index);

enum class Backbone { encoder, decoder };

// Pretrains one backbone and writes its checkpoint. Returns dev frame
// accuracy (encoder) or dev perplexity (decoder).
double pretrain_stage(const RunContext& ctx, Backbone which);

struct AlignSummary {
  std::string encoder_hash_before, encoder_hash_after;
  std::string decoder_hash_before, decoder_hash_after;
  int steps = 0;
  int best_step = 0;
  std::optional<double> best_dev_wer;
  double first_loss = 0.0, last_loss = 0.0;
};

AlignSummary align_stage(const RunContext& ctx);

// Evaluates the aligned pipeline (or the reference-copying oracle) on a split
// and writes reports/eval_<split>.json (eval_<split>_oracle.json).
EvalReport eval_stage(const RunContext& ctx, const std::string& split, bool oracle = false);

struct AblationSummary {
  std::vector<EvalReport> reports;
  TrendCheck trend;
};

AblationSummary ablate_stage(const RunContext& ctx);

struct ProbeSummary {
  RouterStats stats;
  int num_experts = 0;
  bool untrained = false;
};

// Router usage and entropy of the aligned (or freshly initialized) state on a
// split; writes reports/probe_<split>[_untrained].json.
ProbeSummary probe_stage(const RunContext& ctx, const std::string& split, bool untrained);

// Rewrites manifest.json from the current contents of the run directory.
nlohmann::json write_manifest(const RunContext& ctx);

// Writes a file, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace steermoe
