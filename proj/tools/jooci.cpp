// Command-line entry point. Usage errors exit 2, runtime failures exit 1.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "jooci/jooci.hpp"

using namespace jooci;
namespace fs = std::filesystem;

namespace {

std::string config_reference() {
  RunConfig defaults;
  std::string out = "Config keys (key = value lines; '#' comments; 'include <file>'), with defaults:\n";
  for (const auto& f : config_fields(defaults)) {
    std::string line = "  " + f.key + " = " + f.get();
    if (line.size() < 40) line.resize(40, ' ');
    out += line + "  " + f.doc + "\n";
  }
  return out;
}

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* app, bool config_required = false) {
    auto* c = app->add_option("--config", config, "config file (defaults apply to unset keys)");
    if (config_required) c->required();
    c->check(CLI::ExistingFile);
    app->add_option("--set", overrides, "override one config key, key=value (repeatable)");
    app->add_option("--seed", seed, "run seed (overrides the config's seed)");
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_config(config);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
      set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    if (seed) cfg.seed = *seed;
    validate(cfg.model);
    return cfg;
  }
};

std::string millions(long long n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(n) / 1e6);
  return buf;
}

void print_count_table(const RunConfig& cfg) {
  JoociModel<float> m(cfg.model, cfg.seed, /*random_init=*/false);
  auto t = count_parameters(m, CountMode::training);
  const long long sc_inf = t[Component::shared] + t[Component::content];
  const long long sc_train = sc_inf + t[Component::content_heads];
  const long long post = t[Component::post_asp] + t[Component::post_bn] + t[Component::post_fc];
  const long long other = t[Component::other];
  const long long reg = t[Component::regularizer];
  std::printf("%-28s %12s %12s\n", "component", "training", "inference");
  std::printf("%-28s %12s %12s\n", "Shared & Content encoder", millions(sc_train).c_str(), millions(sc_inf).c_str());
  std::printf("%-28s %12s %12s\n", "Other encoder", millions(other).c_str(), millions(other).c_str());
  std::printf("%-28s %12s %12s\n", "Post network", millions(post).c_str(), "-");
  std::printf("%-28s %12s %12s\n", "Regularizer", millions(reg).c_str(), "-");
  std::printf("%-28s %12s %12s\n", "Total", millions(sc_train + other + post + reg).c_str(),
              millions(sc_inf + other).c_str());
  std::printf("\nexact counts (other_dim %d):\n", m.config().other_dim);
  for (const auto& [c, n] : t) std::printf("  %-14s %lld\n", component_name(c), n);
}

int run_gradcheck(bool all, const std::string& only, int seeds, std::uint64_t base) {
  int failed = 0, ran = 0;
  for (const auto& c : gradcheck_cases()) {
    if (!all && c.name != only) continue;
    ++ran;
    double worst = 0;
    std::string where;
    for (int i = 0; i < seeds; ++i) {
      const auto r = c.run(base + static_cast<std::uint64_t>(i));
      if (r.max_rel_error >= worst) worst = r.max_rel_error, where = r.worst_tensor + "[" + std::to_string(r.worst_index) + "]";
    }
    const bool ok = worst < 1e-4;
    failed += !ok;
    std::printf("%-4s %-24s max rel error %.3e at %s\n", ok ? "ok" : "FAIL", c.name.c_str(), worst, where.c_str());
  }
  if (ran == 0) throw std::invalid_argument("no gradcheck case named '" + only + "'");
  std::printf("%d of %d cases pass (%d seeds each)\n", ran - failed, ran, seeds);
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-encoder self-supervised speech pre-training at desk scale."};
  app.footer(config_reference());
  app.require_subcommand(1);

  Common common;
  std::string corpus_dir, out_dir, ckpt, resume, task = "sid", encoder = "other", layers = "all", gc_case;
  bool gc_all = false;
  int gc_seeds = 10;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  common.add_to(gen);
  gen->add_option("--corpus-dir", corpus_dir, "output corpus directory")->required();

  auto* labels = app.add_subcommand("build-labels", "fit the k-means label dictionary for a corpus");
  common.add_to(labels);
  labels->add_option("--corpus-dir", corpus_dir, "corpus directory (labels are written alongside)")->required();

  auto* train = app.add_subcommand("train", "run two-stage pre-training");
  common.add_to(train, true);
  train->add_option("--corpus-dir", corpus_dir, "corpus directory with labels")->required();
  train->add_option("--out", out_dir, "run directory (metrics.jsonl, checkpoints)")->required();
  train->add_option("--resume", resume, "checkpoint to resume from (stem, .json or .jar)");

  auto* probe = app.add_subcommand("probe", "train one linear probe on frozen representations");
  probe->add_option("--ckpt", ckpt, "checkpoint (stem, .json or .jar)")->required();
  probe->add_option("--corpus-dir", corpus_dir, "corpus directory")->required();
  probe->add_option("--task", task, "sid | pr")->check(CLI::IsMember({"sid", "pr"}));
  probe->add_option("--encoder", encoder, "content | other")->check(CLI::IsMember({"content", "other"}));
  probe->add_option("--layers", layers, "all | last | upper | <a>-<b> | <n> | asp | bn | fc");
  probe->add_option("--out", out_dir, "report directory")->required();
  probe->add_option("--seed", common.seed, "probe seed (default: the checkpoint's seed)");

  auto* analyze_cmd = app.add_subcommand("analyze", "run every probe cell and CCA, write the CSV bundle");
  analyze_cmd->add_option("--ckpt", ckpt, "checkpoint (stem, .json or .jar)")->required();
  analyze_cmd->add_option("--corpus-dir", corpus_dir, "corpus directory")->required();
  analyze_cmd->add_option("--out", out_dir, "report directory")->required();
  analyze_cmd->add_option("--seed", common.seed, "probe seed (default: the checkpoint's seed)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks in double precision");
  auto* all_flag = gc->add_flag("--all", gc_all, "run every primitive and composite case");
  gc->add_option("--case", gc_case, "run one named case")->excludes(all_flag);
  gc->add_option("--seeds", gc_seeds, "seeds per case")->check(CLI::PositiveNumber);
  gc->add_option("--seed", common.seed, "first seed (default 1)");

  auto* count = app.add_subcommand("count-params", "per-component parameter table");
  common.add_to(count, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*gen) {
      const auto cfg = common.resolve();
      const auto corpus = generate_corpus(cfg.corpus, cfg.seed);
      save_corpus(corpus, corpus_dir);
      std::cout << "wrote " << corpus.size() << " utterances to " << corpus_dir << "\n";
    } else if (*labels) {
      const auto cfg = common.resolve();
      const auto corpus = load_corpus(corpus_dir);
      const auto dict = build_label_dictionary(cfg.model, corpus_band_features(corpus, cfg.labels.feature_bands),
                                               cfg.labels.kmeans_iters, cfg.seed);
      save_label_dictionary(dict, corpus, corpus_dir);
      std::cout << "wrote " << dict.codebooks.size() << " label sets to " << corpus_dir << "\n";
    } else if (*train) {
      const auto cfg = common.resolve();
      const auto corpus = load_corpus(corpus_dir);
      const auto dict = load_label_dictionary(corpus, corpus_dir);
      PretrainOptions po;
      if (!resume.empty()) po.resume = resume;
      const long every = std::max(1L, static_cast<long>(cfg.train.stage1.steps + cfg.train.stage2.steps) / 20);
      po.on_step = [every](long s, const LossBreakdown& l) {
        if (s % every == 0)
          std::printf("step %5ld  cl %.4f  ol %.4f  rl %.4f  total %.4f\n", s, l.cl, l.ol, l.rl, l.total);
      };
      const auto res = run_pretraining(cfg, corpus, dict, out_dir, po);
      std::cout << "final checkpoint " << res.final_checkpoint.string() << "\n";
    } else if (*probe || *analyze_cmd) {
      RunConfig cfg;
      const auto model = load_model(ckpt, &cfg);
      const std::uint64_t seed = common.seed.value_or(cfg.seed);
      const auto corpus = load_corpus(corpus_dir);
      if (*probe) {
        const auto states = extract_corpus(*model, corpus);
        const auto ctx = make_probe_context(corpus, states, cfg.probe.test_utts_per_speaker, model->config().group_size);
        const auto r = train_probe(ctx, parse_task(task), parse_encoder(encoder), layers, cfg.probe, seed);
        fs::create_directories(out_dir);
        write_probes(fs::path(out_dir) / "probes.csv", {r});
        if (!r.weights.empty()) write_layer_weights(fs::path(out_dir) / "layer_weights.csv", {r});
        std::printf("%s %s %s accuracy %.4f (train %.4f)\n", task_name(r.task), encoder_name(r.encoder),
                    r.layers.c_str(), r.accuracy, r.train_accuracy);
      } else {
        const auto a = analyze(*model, corpus, cfg.probe, seed, out_dir);
        for (const auto& r : a.probes)
          std::printf("%-3s %-8s %-6s %.4f\n", task_name(r.task), encoder_name(r.encoder), r.layers.c_str(), r.accuracy);
        std::cout << "wrote CSV bundle to " << out_dir << "\n";
      }
    } else if (*gc) {
      if (!gc_all && gc_case.empty()) {
        std::cerr << "gradcheck: pass --all or --case <name>\n\n" << gc->help();
        return 2;
      }
      return run_gradcheck(gc_all, gc_case, gc_seeds, common.seed.value_or(1));
    } else if (*count) {
      print_count_table(common.resolve());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
