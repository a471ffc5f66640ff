#include "steermoe/config.hpp"

#include <cmath>
#include <fstream>

#include "steermoe/errors.hpp"

namespace steermoe {

namespace {

void overlay(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  if (!patch.is_object()) throw FormatError("config: '" + where + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw FormatError("config: unknown key '" + key + "'");
    nlohmann::json& slot = base[it.key()];
    if (slot.is_object()) {
      overlay(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

nlohmann::json without(nlohmann::json j, const char* key) {
  j.erase(key);
  return j;
}

}  // namespace

void RunConfig::resolve() {
  encoder.input_dim = synth.feature_dim;
  decoder.vocab_size = vocab_size();
  steering.decoder_dim = decoder.model_dim;
}

void RunConfig::validate() const {
  synth.validate();
  encoder.validate();
  decoder.validate();
  steering.validate();
  optim.validate();
  if (data.corpus_size < 3) throw FormatError("data.corpus_size: must be >= 3");
  double total = 0.0;
  for (double r : data.split_ratios) {
    if (!(r >= 0.0)) throw FormatError("data.split_ratios: entries must be >= 0");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw FormatError("data.split_ratios: must sum to 1");
  if (data.text_corpus_size < 1) throw FormatError("data.text_corpus_size: must be >= 1");
  if (data.max_text < 3) throw FormatError("data.max_text: must be >= 3");
  for (const auto* p : {&encoder_pretrain, &decoder_pretrain}) {
    if (p->epochs < 0 || !(p->lr > 0) || p->batch_size < 1) {
      throw FormatError("*_pretrain: need epochs >= 0, lr > 0, batch_size >= 1");
    }
  }
  if (eval.max_new_tokens < 1) throw FormatError("eval.max_new_tokens: must be >= 1");
  if (eval.dev_eval_limit < 0) throw FormatError("eval.dev_eval_limit: must be >= 0");
  if (synth.frames_per_token * synth.max_tokens > encoder.max_frames) {
    throw FormatError("encoder.max_frames: shorter than the longest synthetic utterance");
  }
}

nlohmann::json to_json(const RunConfig& c) {
  return nlohmann::json{
      {"synth", c.synth},
      {"data",
       {{"corpus_size", c.data.corpus_size},
        {"split_ratios", c.data.split_ratios},
        {"split_seed", c.data.split_seed},
        {"text_corpus_size", c.data.text_corpus_size},
        {"text_seed", c.data.text_seed},
        {"max_text", c.data.max_text}}},
      {"encoder", without(c.encoder, "input_dim")},
      {"encoder_pretrain", c.encoder_pretrain},
      {"decoder", without(c.decoder, "vocab_size")},
      {"decoder_pretrain", c.decoder_pretrain},
      {"steering", without(c.steering, "decoder_dim")},
      {"optim", c.optim},
      {"eval", {{"max_new_tokens", c.eval.max_new_tokens}, {"dev_eval_limit", c.eval.dev_eval_limit}}},
  };
}

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig defaults;
  defaults.resolve();
  nlohmann::json full = to_json(defaults);
  overlay(full, j, "");
  RunConfig c;
  try {
    c.synth = full.at("synth").get<SynthSpec>();
    const auto& d = full.at("data");
    c.data.corpus_size = d.at("corpus_size").get<int>();
    c.data.split_ratios = d.at("split_ratios").get<std::array<double, 3>>();
    c.data.split_seed = d.at("split_seed").get<std::uint64_t>();
    c.data.text_corpus_size = d.at("text_corpus_size").get<int>();
    c.data.text_seed = d.at("text_seed").get<std::uint64_t>();
    c.data.max_text = d.at("max_text").get<int>();

    auto enc = full.at("encoder");
    enc["input_dim"] = c.synth.feature_dim;
    c.encoder = enc.get<EncoderConfig>();
    c.encoder_pretrain = full.at("encoder_pretrain").get<PretrainSpec>();
    auto dec = full.at("decoder");
    dec["vocab_size"] = static_cast<int>(c.synth.symbols.size()) + 4;
    c.decoder = dec.get<DecoderConfig>();
    c.decoder_pretrain = full.at("decoder_pretrain").get<PretrainSpec>();
    auto st = full.at("steering");
    st["decoder_dim"] = c.decoder.model_dim;
    c.steering = st.get<SteeringConfig>();
    c.optim = full.at("optim").get<OptimSpec>();
    c.eval.max_new_tokens = full.at("eval").at("max_new_tokens").get<int>();
    c.eval.dev_eval_limit = full.at("eval").at("dev_eval_limit").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  c.resolve();
  c.validate();
  return c;
}

void apply_override(nlohmann::json& schema, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw FormatError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json* node = &schema;
  size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw FormatError("config: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw FormatError("config: '" + key + "' is a section, not a value");
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  *node = value.is_discarded() ? nlohmann::json(text) : value;
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  RunConfig defaults;
  defaults.resolve();
  nlohmann::json full = to_json(defaults);
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config file " + path.string());
    nlohmann::json user;
    try {
      user = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("config " + path.string() + ": " + e.what());
    }
    overlay(full, user, "");
  }
  for (const auto& o : overrides) apply_override(full, o);
  return config_from_json(full);
}

RunConfig load_config(const std::vector<std::string>& overrides) { return load_config({}, overrides); }

}  // namespace steermoe
