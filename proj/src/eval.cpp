#include "steermoe/eval.hpp"

#include <algorithm>
#include <sstream>
#include <thread>

#include "steermoe/checkpoint.hpp"
#include "steermoe/errors.hpp"
#include "steermoe/hashing.hpp"
#include "steermoe/metrics.hpp"

namespace steermoe {

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json details = nlohmann::json::array();
  for (const auto& d : r.details) {
    details.push_back({{"reference", join_symbols(d.reference)},
                       {"hypothesis", join_symbols(d.hypothesis)},
                       {"word_edits", d.word_edits},
                       {"reference_words", d.reference_words},
                       {"char_edits", d.char_edits},
                       {"reference_chars", d.reference_chars}});
  }
  j = nlohmann::json{{"variant", r.variant},
                     {"split", r.split},
                     {"wer", r.wer},
                     {"cer", r.cer},
                     {"utterances", r.utterances},
                     {"details", details},
                     {"trainable_parameters", r.trainable_parameters},
                     {"encoder_hash", r.encoder_hash},
                     {"decoder_hash", r.decoder_hash},
                     {"failed", r.failed},
                     {"error", r.error},
                     {"metadata", r.metadata}};
  j["router"] = r.router ? nlohmann::json(*r.router) : nlohmann::json(nullptr);
}

EvalReport evaluate(const Transcriber& transcriber, std::span<const Utterance> corpus, const Vocabulary& vocab,
                    std::string variant, std::string split, int threads) {
  if (corpus.empty()) throw EmptyInputError("evaluate: empty corpus");
  EvalReport report;
  report.variant = std::move(variant);
  report.split = std::move(split);
  report.utterances = static_cast<Index>(corpus.size());
  report.details.resize(corpus.size());

  auto work = [&](size_t i) {
    UtteranceResult& d = report.details[i];
    d.reference = vocab.decode(corpus[i].transcript);
    d.hypothesis = vocab.decode(transcriber(corpus[i]));
    d.word_edits = edit_distance(std::span<const std::string>(d.reference), std::span<const std::string>(d.hypothesis));
    d.reference_words = static_cast<Index>(d.reference.size());
    const std::string r = join_symbols(d.reference), h = join_symbols(d.hypothesis);
    d.char_edits = edit_distance(std::span<const char>(r), std::span<const char>(h));
    d.reference_chars = static_cast<Index>(r.size());
  };
  const size_t workers = std::min<size_t>(corpus.size(), static_cast<size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (size_t i = 0; i < corpus.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (size_t i = w; i < corpus.size(); i += workers) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  Index we = 0, wr = 0, ce = 0, cr = 0;
  for (const auto& d : report.details) {
    we += d.word_edits;
    wr += d.reference_words;
    ce += d.char_edits;
    cr += d.reference_chars;
  }
  if (wr == 0 || cr == 0) throw EmptyInputError("evaluate: empty references");
  report.wer = static_cast<double>(we) / static_cast<double>(wr);
  report.cer = static_cast<double>(ce) / static_cast<double>(cr);
  return report;
}

EvalReport evaluate(const EncoderWeights& encoder, const DecoderWeights& decoder, const SteeringState& state,
                    std::span<const Utterance> corpus, const Vocabulary& vocab, std::string variant,
                    std::string split, const EvalOptions& options) {
  EvalReport report = evaluate(
      [&](const Utterance& u) { return transcribe(u, encoder, decoder, state, options.max_new_tokens); }, corpus,
      vocab, std::move(variant), std::move(split), options.threads);
  if (options.with_router_stats && state.steers()) report.router = router_stats(state, encoder, corpus);
  report.trainable_parameters = state.trainable_count();
  report.encoder_hash = backbone_hash(encoder);
  report.decoder_hash = backbone_hash(decoder);
  return report;
}

std::string backbone_hash(const EncoderWeights& encoder) {
  return sha256_hex(serialize_checkpoint(encoder.parameters(), nlohmann::json{{"kind", "encoder"}}));
}

std::string backbone_hash(const DecoderWeights& decoder) {
  return sha256_hex(serialize_checkpoint(decoder.parameters(), nlohmann::json{{"kind", "decoder"}}));
}

std::vector<AblationVariant> AblationPlan::default_variants() {
  return {{"moe-2", AdapterKind::moe, 2},
          {"moe-4", AdapterKind::moe, 4},
          {"moe-8", AdapterKind::moe, 8},
          {"static", AdapterKind::static_projection, 8}};
}

std::vector<EvalReport> run_ablation(const AblationPlan& plan, const EncoderWeights& encoder,
                                     const DecoderWeights& decoder, std::span<const Utterance> train,
                                     std::span<const Utterance> dev, std::span<const Utterance> test,
                                     const Vocabulary& vocab) {
  std::vector<EvalReport> reports;
  for (const AblationVariant& v : plan.variants) {
    SteeringConfig cfg = plan.steering;
    cfg.kind = v.kind;
    cfg.num_experts = v.num_experts;
    try {
      SteeringState init = SteeringState::init(cfg, encoder.config.num_layers, encoder.config.model_dim);
      AlignResult trained = align_train(encoder, decoder, std::move(init), train, dev, plan.optim, plan.align);
      EvalReport r = evaluate(encoder, decoder, trained.state, test, vocab, v.label, "test", plan.eval);
      r.metadata = {{"kind", to_string(v.kind)}, {"num_experts", v.num_experts}, {"best_step", trained.best_step}};
      reports.push_back(std::move(r));
    } catch (const std::exception& e) {
      EvalReport r;
      r.variant = v.label;
      r.split = "test";
      r.failed = true;
      r.error = e.what();
      r.encoder_hash = backbone_hash(encoder);
      r.decoder_hash = backbone_hash(decoder);
      r.metadata = {{"kind", to_string(v.kind)}, {"num_experts", v.num_experts}};
      reports.push_back(std::move(r));
    }
  }
  return reports;
}

std::string ablation_csv(std::span<const EvalReport> reports) {
  std::ostringstream os;
  os.precision(17);
  os << "variant,kind,num_experts,trainable_parameters,wer,cer,failed\n";
  for (const auto& r : reports) {
    os << r.variant << ',' << r.metadata.value("kind", "") << ',' << r.metadata.value("num_experts", 0) << ','
       << r.trainable_parameters << ',' << r.wer << ',' << r.cer << ',' << (r.failed ? 1 : 0) << '\n';
  }
  return os.str();
}

TrendCheck check_ablation_trend(std::span<const EvalReport> reports, double tolerance) {
  auto find = [&](std::string_view label) -> const EvalReport* {
    for (const auto& r : reports) {
      if (r.variant == label && !r.failed) return &r;
    }
    return nullptr;
  };
  TrendCheck check;
  const EvalReport *m2 = find("moe-2"), *m4 = find("moe-4"), *m8 = find("moe-8"), *st = find("static");
  std::ostringstream os;
  if (!m2 || !m4 || !m8 || !st) {
    check.detail = "missing or failed variant";
    return check;
  }
  check.experts_ordered = m8->wer <= m4->wer + tolerance && m4->wer <= m2->wer + tolerance;
  check.static_worse = st->wer >= 2.0 * m8->wer;
  os << "moe-8=" << m8->wer << " moe-4=" << m4->wer << " moe-2=" << m2->wer << " static=" << st->wer;
  check.detail = os.str();
  return check;
}

}  // namespace steermoe
