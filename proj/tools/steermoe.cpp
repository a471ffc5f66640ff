// steermoe: data generation, backbone pretraining, steering alignment,
// evaluation, ablation and router probing over one run directory.

#include <cmath>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "steermoe/errors.hpp"
#include "steermoe/pipeline.hpp"

using namespace steermoe;

namespace {

enum Exit { kOk = 0, kUsage = 1, kNumerical = 2, kThreshold = 3 };

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string run_dir = "run";
  int threads = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "JSON config file (unknown keys are rejected)")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "Override a config value, e.g. --set optim.max_steps=500 (repeatable)");
  cmd->add_option("--run-dir", c.run_dir, "Run directory for data, checkpoints, logs and reports")
      ->capture_default_str();
  cmd->add_option("--threads", c.threads, "Worker threads; results do not depend on it")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

RunContext context(const Common& c) {
  RunContext ctx;
  ctx.config = load_config(c.config_file, c.overrides);
  ctx.overrides = c.overrides;
  ctx.run_dir = c.run_dir;
  ctx.threads = c.threads;
  return ctx;
}

std::string short_hash(const std::string& h) { return h.substr(0, 16); }

const char* kConfigHelp = R"(Config schema (JSON; every key optional, unknown keys rejected):
  synth:            symbols, frames_per_token, feature_dim, noise_std, min_tokens, max_tokens, seed
  data:             corpus_size, split_ratios [train, dev, test], split_seed,
                    text_corpus_size, text_seed, max_text
  encoder:          num_layers, model_dim, num_heads, ff_dim, max_frames
  encoder_pretrain: epochs, lr, batch_size, seed
  decoder:          num_layers, model_dim, num_heads, ff_dim, max_positions
  decoder_pretrain: epochs, lr, batch_size, seed
  steering:         kind (moe | static_projection), num_experts, alpha_init,
                    expert_init_std, projection_init_std (<0: 1/sqrt(D)), seed
  optim:            lr_base, lr_steering_vectors, lr_router, beta1, beta2, eps,
                    weight_decay, clip_norm, batch_size, max_steps, eval_interval, seed
  eval:             max_new_tokens, dev_eval_limit (0 = whole dev split)
Derived: encoder input dim = synth.feature_dim, vocab = 4 specials + symbols,
steering decoder dim = decoder.model_dim. `steermoe config` prints the resolved values.

Exit codes: 0 ok, 1 usage or config error, 2 numerical or pretraining failure,
3 acceptance threshold failed (eval --max-wer, ablate trend).)";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise MoE steering between a frozen toy encoder and a frozen toy decoder"};
  app.footer(kConfigHelp);
  app.require_subcommand(1);
  app.set_version_flag("--version", STEERMOE_VERSION);

  Common common;
  std::string which;
  std::string split = "test";
  bool oracle = false;
  bool untrained = false;
  double max_wer = -1.0;

  auto* config_cmd = app.add_subcommand("config", "Print the resolved config as JSON");
  add_common(config_cmd, common);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus and its train/dev/test split");
  add_common(gen, common);

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain and freeze one backbone");
  add_common(pretrain, common);
  pretrain->add_option("--which", which, "encoder or decoder")
      ->required()
      ->check(CLI::IsMember({"encoder", "decoder"}));

  auto* align = app.add_subcommand("align", "Train the steering module against the frozen backbones");
  add_common(align, common);

  auto* eval = app.add_subcommand("eval", "Greedy-decode a split and report WER/CER");
  add_common(eval, common);
  eval->add_option("--split", split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}))
      ->capture_default_str();
  eval->add_flag("--oracle", oracle, "Score the reference transcripts themselves (expects WER 0)");
  eval->add_option("--max-wer", max_wer, "Exit 3 when WER exceeds this value");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate MoE-2/4/8 and the static projection adapter");
  add_common(ablate, common);

  auto* probe = app.add_subcommand("probe", "Router usage and gate entropy per layer");
  add_common(probe, common);
  probe->add_option("--split", split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}))
      ->capture_default_str();
  probe->add_flag("--untrained", untrained, "Probe a freshly initialized steering state");

  CLI11_PARSE(app, argc, argv);

  try {
    const RunContext ctx = context(common);
    std::cout << std::setprecision(6);
    int code = kOk;

    if (*config_cmd) {
      std::cout << to_json(ctx.config).dump(2) << "\n";
      return kOk;
    }
    if (*gen) {
      const auto s = gen_data(ctx);
      std::cout << "train " << s.train << " dev " << s.dev << " test " << s.test << " -> "
                << ctx.data_dir().string() << "\n";
    } else if (*pretrain) {
      if (which == "encoder") {
        std::cout << "encoder frame accuracy " << pretrain_stage(ctx, Backbone::encoder) << "\n";
      } else {
        std::cout << "decoder perplexity " << pretrain_stage(ctx, Backbone::decoder) << "\n";
      }
    } else if (*align) {
      const auto s = align_stage(ctx);
      std::cout << "encoder checkpoint sha256 before " << short_hash(s.encoder_hash_before) << " after "
                << short_hash(s.encoder_hash_after) << "\n"
                << "decoder checkpoint sha256 before " << short_hash(s.decoder_hash_before) << " after "
                << short_hash(s.decoder_hash_after) << "\n"
                << "steps " << s.steps << " loss " << s.first_loss << " -> " << s.last_loss << " best step "
                << s.best_step;
      if (s.best_dev_wer) std::cout << " dev WER " << *s.best_dev_wer;
      std::cout << "\n";
    } else if (*eval) {
      const auto r = eval_stage(ctx, split, oracle);
      std::cout << r.variant << " " << r.split << " WER " << r.wer << " CER " << r.cer << " over " << r.utterances
                << " utterances\n";
      if (max_wer >= 0 && !(r.wer <= max_wer)) {
        std::cerr << "WER " << r.wer << " exceeds --max-wer " << max_wer << "\n";
        code = kThreshold;
      }
    } else if (*ablate) {
      const auto s = ablate_stage(ctx);
      for (const auto& r : s.reports) {
        std::cout << std::left << std::setw(8) << r.variant << " params " << std::setw(6) << r.trainable_parameters
                  << " WER " << (r.failed ? std::string("failed: ") + r.error : std::to_string(r.wer)) << "\n";
      }
      std::cout << "trend " << (s.trend.passed() ? "holds" : "does not hold") << ": " << s.trend.detail << "\n";
      if (!s.trend.passed()) code = kThreshold;
    } else if (*probe) {
      const auto s = probe_stage(ctx, split, untrained);
      std::cout << "ln N = " << std::log(static_cast<double>(s.num_experts)) << "\n";
      for (size_t l = 0; l < s.stats.entropy.size(); ++l) {
        std::cout << "layer " << l << " entropy " << s.stats.entropy[l] << " usage";
        for (double u : s.stats.usage[l]) std::cout << ' ' << u;
        std::cout << "\n";
      }
    }
    write_manifest(ctx);
    return code;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const PretrainingError& e) {
    std::cerr << "pretraining failed: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
}
