#include "steermoe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "steermoe/checkpoint.hpp"
#include "steermoe/errors.hpp"
#include "steermoe/hashing.hpp"
#include "steermoe/training.hpp"

namespace fs = std::filesystem;

namespace steermoe {

namespace {

constexpr const char* kSplits[] = {"train", "dev", "test"};
constexpr int kDecoderDevSequences = 200;
// Dev text is drawn from indices far past any training index.
constexpr std::uint64_t kDecoderDevOffset = 1'000'000'000;

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

void require_file(const fs::path& p, const std::string& hint) {
  if (!fs::is_regular_file(p)) throw FormatError("missing " + p.string() + " (" + hint + ")");
}

fs::path encoder_path(const RunContext& ctx) { return ctx.checkpoint_dir() / "encoder.ckpt"; }
fs::path decoder_path(const RunContext& ctx) { return ctx.checkpoint_dir() / "decoder.ckpt"; }
fs::path steering_path(const RunContext& ctx) { return ctx.checkpoint_dir() / "steering.ckpt"; }

EncoderWeights load_encoder_for(const RunContext& ctx) {
  require_file(encoder_path(ctx), "run `pretrain --which encoder` first");
  return load_encoder(encoder_path(ctx));
}

DecoderWeights load_decoder_for(const RunContext& ctx) {
  require_file(decoder_path(ctx), "run `pretrain --which decoder` first");
  return load_decoder(decoder_path(ctx));
}

std::string variant_label(const SteeringConfig& c) {
  return c.kind == AdapterKind::moe ? "moe-" + std::to_string(c.num_experts) : "static";
}

AlignOptions align_options(const RunContext& ctx) {
  AlignOptions o;
  o.threads = ctx.threads;
  o.max_new_tokens = ctx.config.eval.max_new_tokens;
  o.max_frames = ctx.config.encoder.max_frames;
  o.max_text = ctx.config.data.max_text;
  o.dev_eval_limit = static_cast<size_t>(ctx.config.eval.dev_eval_limit);
  return o;
}

EvalOptions eval_options(const RunContext& ctx) {
  return EvalOptions{ctx.threads, ctx.config.eval.max_new_tokens, true};
}

}  // namespace

nlohmann::json RunContext::metadata() const {
  return {{"config", to_json(config)}, {"overrides", overrides}, {"software_version", STEERMOE_VERSION}};
}

const std::vector<Utterance>& SplitData::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "dev") return dev;
  if (name == "test") return test;
  throw FormatError("unknown split '" + name + "' (expected train, dev or test)");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed for " + path.string());
}

GenDataSummary gen_data(const RunContext& ctx) {
  const RunConfig& c = ctx.config;
  const Vocabulary vocab = Vocabulary::with_symbols(c.synth.symbols);
  const auto corpus = generate_corpus(c.synth, vocab, c.data.corpus_size);
  const CorpusSplit parts = split(corpus, c.data.split_ratios, c.data.split_seed);
  fs::create_directories(ctx.data_dir());
  vocab.save(ctx.data_dir() / "vocab.txt");
  write_corpus(ctx.data_dir() / "train.jsonl", parts.train, c.synth, vocab);
  write_corpus(ctx.data_dir() / "dev.jsonl", parts.dev, c.synth, vocab);
  write_corpus(ctx.data_dir() / "test.jsonl", parts.test, c.synth, vocab);
  return {parts.train.size(), parts.dev.size(), parts.test.size()};
}

SplitData load_data(const RunContext& ctx) {
  require_file(ctx.data_dir() / "vocab.txt", "run gen-data first");
  SplitData d;
  d.vocab = Vocabulary::load(ctx.data_dir() / "vocab.txt");
  if (d.vocab != Vocabulary::with_symbols(ctx.config.synth.symbols)) {
    throw FormatError("data/vocab.txt does not match synth.symbols; rerun gen-data");
  }
  const nlohmann::json expected = ctx.config.synth;
  for (const char* name : kSplits) {
    const fs::path p = ctx.data_dir() / (std::string(name) + ".jsonl");
    require_file(p, "run gen-data first");
    CorpusFile f = read_corpus(p, d.vocab);
    if (nlohmann::json(f.spec) != expected) {
      throw FormatError(p.string() + " was generated with a different synth config; rerun gen-data");
    }
    const std::string n = name;
    (n == "train" ? d.train : n == "dev" ? d.dev : d.test) = std::move(f.utterances);
  }
  return d;
}

std::vector<std::vector<int>> decoder_text_corpus(const RunConfig& config, int count, std::uint64_t first_index) {
  SynthSpec spec = config.synth;
  spec.seed = config.data.text_seed;
  const Vocabulary vocab = Vocabulary::with_symbols(spec.symbols);
  const Synthesizer synth(spec, vocab);
  const std::vector<int> instruction{Vocabulary::instr};
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(lm_sequence(synth.transcript(first_index + i), instruction));
  return out;
}

double pretrain_stage(const RunContext& ctx, Backbone which) {
  const RunConfig& c = ctx.config;
  fs::create_directories(ctx.checkpoint_dir());
  const nlohmann::json extra{{"run", ctx.metadata()}};
  if (which == Backbone::encoder) {
    const SplitData d = load_data(ctx);
    PretrainSpec spec = c.encoder_pretrain;
    spec.threads = ctx.threads;
    const EncoderWeights w = pretrain_encoder(c.encoder, d.train, d.dev, c.vocab_size(), spec);
    save_encoder(encoder_path(ctx), w, extra);
    return w.frame_accuracy;
  }
  PretrainSpec spec = c.decoder_pretrain;
  spec.threads = ctx.threads;
  const auto train = decoder_text_corpus(c, c.data.text_corpus_size, 0);
  const auto dev = decoder_text_corpus(c, kDecoderDevSequences, kDecoderDevOffset);
  const DecoderWeights w = pretrain_decoder(c.decoder, train, dev, spec);
  save_decoder(decoder_path(ctx), w, extra);
  return w.validation_perplexity;
}

AlignSummary align_stage(const RunContext& ctx) {
  const SplitData d = load_data(ctx);
  AlignSummary s;
  const EncoderWeights enc = load_encoder_for(ctx);
  const DecoderWeights dec = load_decoder_for(ctx);
  s.encoder_hash_before = sha256_file(encoder_path(ctx));
  s.decoder_hash_before = sha256_file(decoder_path(ctx));
  if (enc.config.num_layers != ctx.config.encoder.num_layers || enc.config.model_dim != ctx.config.encoder.model_dim ||
      dec.config.model_dim != ctx.config.decoder.model_dim) {
    throw FormatError("checkpoints do not match the encoder/decoder config; rerun pretrain");
  }

  AlignOptions opts = align_options(ctx);
  opts.on_log = [](const TrainLogEntry& e) {
    if (e.dev_wer) std::cerr << "step " << e.step << " loss " << e.loss << " dev_wer " << *e.dev_wer << "\n";
  };
  const SteeringState init = SteeringState::init(ctx.config.steering, enc.config.num_layers, enc.config.model_dim);
  const AlignResult r = align_train(enc, dec, init, d.train, d.dev, ctx.config.optim, opts);

  nlohmann::json extra{{"run", ctx.metadata()}, {"best_step", r.best_step}};
  if (r.best_dev_wer) extra["best_dev_wer"] = *r.best_dev_wer;
  save_steering(steering_path(ctx), r.state, extra);
  write_text(ctx.log_dir() / "train_log.csv", r.log.csv());

  s.encoder_hash_after = sha256_file(encoder_path(ctx));
  s.decoder_hash_after = sha256_file(decoder_path(ctx));
  s.steps = static_cast<int>(r.log.entries.size());
  s.best_step = r.best_step;
  s.best_dev_wer = r.best_dev_wer;
  if (!r.log.entries.empty()) {
    s.first_loss = r.log.entries.front().loss;
    s.last_loss = r.log.entries.back().loss;
  }
  if (s.encoder_hash_before != s.encoder_hash_after || s.decoder_hash_before != s.decoder_hash_after) {
    throw ContractError("backbone checkpoint changed during alignment");
  }

  nlohmann::json report{{"variant", variant_label(ctx.config.steering)},
                        {"steps", s.steps},
                        {"best_step", s.best_step},
                        {"best_dev_wer", s.best_dev_wer ? nlohmann::json(*s.best_dev_wer) : nlohmann::json()},
                        {"first_loss", s.first_loss},
                        {"last_loss", s.last_loss},
                        {"trainable_parameters", r.state.trainable_count()},
                        {"backbone_files",
                         {{"encoder", {{"before", s.encoder_hash_before}, {"after", s.encoder_hash_after}}},
                          {"decoder", {{"before", s.decoder_hash_before}, {"after", s.decoder_hash_after}}}}},
                        {"metadata", ctx.metadata()}};
  write_text(ctx.report_dir() / "align.json", dump(report));
  return s;
}

EvalReport eval_stage(const RunContext& ctx, const std::string& split_name, bool oracle) {
  const SplitData d = load_data(ctx);
  const auto& corpus = d.split(split_name);
  EvalReport report;
  if (oracle) {
    report = evaluate([](const Utterance& u) { return u.transcript; }, corpus, d.vocab, "oracle", split_name,
                      ctx.threads);
  } else {
    const EncoderWeights enc = load_encoder_for(ctx);
    const DecoderWeights dec = load_decoder_for(ctx);
    require_file(steering_path(ctx), "run align first");
    const SteeringState state = load_steering(steering_path(ctx));
    report = evaluate(enc, dec, state, corpus, d.vocab, variant_label(state.config), split_name, eval_options(ctx));
  }
  report.metadata = ctx.metadata();
  if (!oracle) report.metadata["steering_checkpoint_sha256"] = sha256_file(steering_path(ctx));
  const std::string file = "eval_" + split_name + (oracle ? "_oracle" : "") + ".json";
  write_text(ctx.report_dir() / file, dump(report));
  return report;
}

AblationSummary ablate_stage(const RunContext& ctx) {
  const SplitData d = load_data(ctx);
  const EncoderWeights enc = load_encoder_for(ctx);
  const DecoderWeights dec = load_decoder_for(ctx);
  AblationPlan plan;
  plan.variants = AblationPlan::default_variants();
  plan.steering = ctx.config.steering;
  plan.optim = ctx.config.optim;
  plan.align = align_options(ctx);
  plan.eval = eval_options(ctx);
  AblationSummary s;
  s.reports = run_ablation(plan, enc, dec, d.train, d.dev, d.test, d.vocab);
  s.trend = check_ablation_trend(s.reports);

  nlohmann::json reports = nlohmann::json::array();
  for (const auto& r : s.reports) {
    nlohmann::json j = r;
    j.erase("details");
    reports.push_back(std::move(j));
  }
  const nlohmann::json out{{"reports", reports},
                           {"trend",
                            {{"experts_ordered", s.trend.experts_ordered},
                             {"static_worse", s.trend.static_worse},
                             {"passed", s.trend.passed()},
                             {"detail", s.trend.detail}}},
                           {"metadata", ctx.metadata()}};
  write_text(ctx.report_dir() / "ablation.json", dump(out));
  write_text(ctx.report_dir() / "ablation.csv", ablation_csv(s.reports));
  return s;
}

ProbeSummary probe_stage(const RunContext& ctx, const std::string& split_name, bool untrained) {
  const SplitData d = load_data(ctx);
  const EncoderWeights enc = load_encoder_for(ctx);
  SteeringState state;
  if (untrained) {
    state = SteeringState::init(ctx.config.steering, enc.config.num_layers, enc.config.model_dim);
  } else {
    require_file(steering_path(ctx), "run align first, or pass --untrained");
    state = load_steering(steering_path(ctx));
  }
  ProbeSummary s;
  s.stats = router_stats(state, enc, d.split(split_name));
  s.num_experts = state.config.num_experts;
  s.untrained = untrained;
  const nlohmann::json out{{"split", split_name},
                           {"untrained", untrained},
                           {"num_experts", s.num_experts},
                           {"max_entropy", std::log(static_cast<double>(s.num_experts))},
                           {"router", s.stats},
                           {"metadata", ctx.metadata()}};
  write_text(ctx.report_dir() / ("probe_" + split_name + (untrained ? "_untrained" : "") + ".json"), dump(out));
  return s;
}

nlohmann::json write_manifest(const RunContext& ctx) {
  std::vector<fs::path> files;
  if (fs::exists(ctx.run_dir)) {
    for (const auto& e : fs::recursive_directory_iterator(ctx.run_dir)) {
      if (!e.is_regular_file()) continue;
      const fs::path rel = fs::relative(e.path(), ctx.run_dir);
      if (rel == "manifest.json") continue;
      files.push_back(rel);
    }
  }
  std::sort(files.begin(), files.end());
  nlohmann::json list = nlohmann::json::array();
  for (const auto& rel : files) {
    list.push_back({{"path", rel.generic_string()},
                    {"bytes", fs::file_size(ctx.run_dir / rel)},
                    {"sha256", sha256_file(ctx.run_dir / rel)}});
  }
  const nlohmann::json manifest{{"files", list}, {"metadata", ctx.metadata()}};
  write_text(ctx.run_dir / "manifest.json", dump(manifest));
  return manifest;
}

}  // namespace steermoe
