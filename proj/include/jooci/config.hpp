#pragma once

// Run configuration: one flat key=value namespace covering model, stages,
// augmentation, corpus, labels and probes.
//
// File syntax: `key = value` per line, `#` starts a comment, and
// `include other.cfg` splices another file (resolved relative to the
// including file). Later assignments override earlier ones.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace jooci {

struct ModelConfig {
  int sample_rate = 16000;
  int conv_channels = 32;
  std::vector<int> conv_kernels{10, 3, 3, 3, 3, 2, 2};
  std::vector<int> conv_strides{5, 2, 2, 2, 2, 2, 2};
  int content_layers = 4;
  int content_dim = 64;
  int content_heads = 4;
  int content_ffn = 256;
  int pos_conv_kernel = 16;
  int pos_conv_groups = 16;
  int other_blocks = 4;
  int other_dim = 32;  // 0 = solve from the parameter budget
  int pool_kernel = 10;
  int group_size = 10;
  int sa_kernel = 11;
  int res2net_scale = 4;
  double mask_ratio = 0.5;
  int mask_span = 10;
  int teacher_dim = 512;
  int vocab_size = 32;
  int num_label_sets = 4;
  int label_anchor = 0;  // 0 = min(ceil(L/2)+1, L-n+1)
  int code_dim = 32;
  int reg_heads = 8;
  int reg_dim = 64;
  int reg_ffn = 128;
  double tau = 0.1;
  double grl_lambda = 1.0;
  bool other_uses_masked = false;
  bool use_regularizer = true;

  int total_stride() const {
    int s = 1;
    for (int v : conv_strides) s *= v;
    return s;
  }
  int receptive_field() const {
    int rf = 1, jump = 1;
    for (std::size_t i = 0; i < conv_kernels.size(); ++i) {
      rf += (conv_kernels[i] - 1) * jump;
      jump *= conv_strides[i];
    }
    return rf;
  }
};

struct StageConfig {
  int steps = 250;
  double lr_peak = 5e-4;
  int warmup_steps = 25;
  bool content_frozen = true;
  bool shared_frozen = false;
};

struct TrainConfig {
  StageConfig stage1{250, 2e-3, 25, true, false};
  StageConfig stage2{250, 2e-3, 25, false, false};
  double batch_seconds = 16.0;
  double crop_seconds = 2.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-6;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  int checkpoint_every = 100;
  bool compute_frozen_cl = true;
};

struct AugmentConfig {
  double apply_fraction = 0.125;
  double snr_noise_lo = 5, snr_noise_hi = 15;
  double snr_speech_lo = 13, snr_speech_hi = 20;
  double snr_music_lo = 5, snr_music_hi = 15;
  bool rir_enabled = true;
};

struct CorpusConfig {
  int num_speakers = 8;
  int utts_per_speaker = 40;
  int phone_inventory = 5;
  double min_seconds = 2.5;
  double max_seconds = 4.0;
};

struct LabelConfig {
  int kmeans_iters = 30;
  int feature_bands = 20;
  double teacher_noise = 0.1;
};

struct ProbeConfig {
  int steps = 2000;
  double lr = 1e-3;
  int batch = 256;
  int test_utts_per_speaker = 10;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  AugmentConfig augment;
  CorpusConfig corpus;
  LabelConfig labels;
  ProbeConfig probe;
  std::uint64_t seed = 1;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::size_t used = 0;
    out.push_back(std::stoi(item, &used));
    if (used != item.size()) throw std::invalid_argument("bad integer '" + item + "'");
  }
  return out;
}

}  // namespace detail

// One documented config key bound to a field of RunConfig.
struct ConfigField {
  using Ref = std::variant<int*, double*, bool*, std::uint64_t*, std::vector<int>*>;
  std::string key;
  std::string doc;
  Ref ref;

  std::string get() const {
    return std::visit(
        [](auto* p) -> std::string {
          using P = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<P, bool>) {
            return *p ? "true" : "false";
          } else if constexpr (std::is_same_v<P, std::vector<int>>) {
            std::string s;
            for (std::size_t i = 0; i < p->size(); ++i) s += (i ? "," : "") + std::to_string((*p)[i]);
            return s;
          } else if constexpr (std::is_same_v<P, double>) {
            char buf[32];  // shortest text that parses back to the same double
            const auto r = std::to_chars(buf, buf + sizeof buf, *p);
            return std::string(buf, r.ptr);
          } else {
            return std::to_string(*p);
          }
        },
        ref);
  }

  void set(const std::string& value) const {
    std::visit(
        [&](auto* p) {
          using P = std::remove_pointer_t<decltype(p)>;
          std::size_t used = 0;
          if constexpr (std::is_same_v<P, bool>) {
            if (value == "true" || value == "1") *p = true;
            else if (value == "false" || value == "0") *p = false;
            else throw std::invalid_argument("expected true/false");
            used = value.size();
          } else if constexpr (std::is_same_v<P, std::vector<int>>) {
            *p = detail::parse_int_list(value);
            used = value.size();
          } else if constexpr (std::is_same_v<P, double>) {
            *p = std::stod(value, &used);
          } else if constexpr (std::is_same_v<P, std::uint64_t>) {
            *p = std::stoull(value, &used);
          } else {
            *p = std::stoi(value, &used);
          }
          if (used != value.size()) throw std::invalid_argument("trailing characters");
        },
        ref);
  }
};

inline std::vector<ConfigField> config_fields(RunConfig& c) {
  auto& m = c.model;
  auto& t = c.train;
  auto& a = c.augment;
  auto& k = c.corpus;
  auto& l = c.labels;
  auto& p = c.probe;
  return {
      {"seed", "master seed; every random stream derives from it", &c.seed},
      {"sample_rate", "waveform sample rate in Hz", &m.sample_rate},
      {"conv_channels", "channels of every shared-encoder conv stage", &m.conv_channels},
      {"conv_kernels", "shared-encoder kernel sizes, comma separated", &m.conv_kernels},
      {"conv_strides", "shared-encoder strides, comma separated (product 320)", &m.conv_strides},
      {"content_layers", "transformer layers in the Content encoder", &m.content_layers},
      {"content_dim", "Content encoder width", &m.content_dim},
      {"content_heads", "attention heads per Content layer", &m.content_heads},
      {"content_ffn", "feed-forward width per Content layer", &m.content_ffn},
      {"pos_conv_kernel", "convolutional positional embedding kernel", &m.pos_conv_kernel},
      {"pos_conv_groups", "convolutional positional embedding groups", &m.pos_conv_groups},
      {"other_blocks", "blocks in the Other encoder", &m.other_blocks},
      {"other_dim", "Other encoder channels (0 = solve from parameter budget)", &m.other_dim},
      {"pool_kernel", "average-pool kernel and stride at the Other input", &m.pool_kernel},
      {"group_size", "Content frames per appended Other frame", &m.group_size},
      {"sa_kernel", "depthwise kernel and stride after split-and-append", &m.sa_kernel},
      {"res2net_scale", "Res2Net channel splits", &m.res2net_scale},
      {"mask_ratio", "target fraction of masked frames", &m.mask_ratio},
      {"mask_span", "frames per mask span", &m.mask_span},
      {"teacher_dim", "teacher and post-network embedding size", &m.teacher_dim},
      {"vocab_size", "pseudo-label vocabulary of the finest label set", &m.vocab_size},
      {"num_label_sets", "pseudo-label sets, one per supervised Content layer", &m.num_label_sets},
      {"label_anchor", "lowest supervised Content layer (0 = automatic)", &m.label_anchor},
      {"code_dim", "projection/codeword size for masked prediction", &m.code_dim},
      {"reg_heads", "regularizer decoder heads", &m.reg_heads},
      {"reg_dim", "regularizer decoder width", &m.reg_dim},
      {"reg_ffn", "regularizer decoder feed-forward width", &m.reg_ffn},
      {"tau", "cosine-logit temperature", &m.tau},
      {"grl_lambda", "gradient reversal coefficient", &m.grl_lambda},
      {"other_uses_masked", "feed masked instead of clean frames to the Other encoder", &m.other_uses_masked},
      {"use_regularizer", "train with the regularizer loss", &m.use_regularizer},
      {"stage1_steps", "stage-1 optimizer steps", &t.stage1.steps},
      {"stage1_lr", "stage-1 peak learning rate", &t.stage1.lr_peak},
      {"stage1_warmup", "stage-1 warmup steps", &t.stage1.warmup_steps},
      {"stage1_content_frozen", "freeze the Content encoder in stage 1", &t.stage1.content_frozen},
      {"stage1_shared_frozen", "also freeze the Shared encoder in stage 1", &t.stage1.shared_frozen},
      {"stage2_steps", "stage-2 optimizer steps", &t.stage2.steps},
      {"stage2_lr", "stage-2 peak learning rate", &t.stage2.lr_peak},
      {"stage2_warmup", "stage-2 warmup steps", &t.stage2.warmup_steps},
      {"stage2_content_frozen", "freeze the Content encoder in stage 2", &t.stage2.content_frozen},
      {"batch_seconds", "audio seconds per optimizer step", &t.batch_seconds},
      {"crop_seconds", "crop length per batch item", &t.crop_seconds},
      {"adam_beta1", "Adam first-moment decay", &t.adam_beta1},
      {"adam_beta2", "Adam second-moment decay", &t.adam_beta2},
      {"adam_eps", "Adam denominator epsilon", &t.adam_eps},
      {"weight_decay", "decoupled weight decay", &t.weight_decay},
      {"grad_clip", "global gradient-norm clip (0 = off)", &t.grad_clip},
      {"checkpoint_every", "steps between checkpoints", &t.checkpoint_every},
      {"compute_frozen_cl", "evaluate the Content loss for logging while frozen", &t.compute_frozen_cl},
      {"aug_fraction", "probability that an utterance is augmented", &a.apply_fraction},
      {"snr_noise_lo", "noise SNR range low (dB)", &a.snr_noise_lo},
      {"snr_noise_hi", "noise SNR range high (dB)", &a.snr_noise_hi},
      {"snr_speech_lo", "babble SNR range low (dB)", &a.snr_speech_lo},
      {"snr_speech_hi", "babble SNR range high (dB)", &a.snr_speech_hi},
      {"snr_music_lo", "music SNR range low (dB)", &a.snr_music_lo},
      {"snr_music_hi", "music SNR range high (dB)", &a.snr_music_hi},
      {"rir_enabled", "convolve augmented utterances with a synthetic room response", &a.rir_enabled},
      {"num_speakers", "synthetic speakers", &k.num_speakers},
      {"utts_per_speaker", "utterances per speaker", &k.utts_per_speaker},
      {"phone_inventory", "distinct synthetic phones", &k.phone_inventory},
      {"min_seconds", "shortest utterance", &k.min_seconds},
      {"max_seconds", "longest utterance", &k.max_seconds},
      {"kmeans_iters", "Lloyd iterations per codebook", &l.kmeans_iters},
      {"feature_bands", "log band energies in the clustering features", &l.feature_bands},
      {"teacher_noise", "per-utterance noise scale of the teacher embeddings", &l.teacher_noise},
      {"probe_steps", "optimizer steps per linear probe", &p.steps},
      {"probe_lr", "linear probe learning rate", &p.lr},
      {"probe_batch", "linear probe minibatch size", &p.batch},
      {"probe_test_utts", "held-out utterances per speaker for probing", &p.test_utts_per_speaker},
  };
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_fields(cfg)) {
    if (f.key != key) continue;
    try {
      f.set(value);
    } catch (const std::exception& e) {
      throw std::invalid_argument("config key '" + key + "': cannot parse '" + value + "' (" + e.what() + ")");
    }
    return;
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

namespace detail {
inline void load_config_file(RunConfig& cfg, const std::filesystem::path& path,
                             std::set<std::filesystem::path>& stack) {
  const auto canon = std::filesystem::weakly_canonical(path);
  if (stack.count(canon)) throw std::invalid_argument("config include cycle at " + path.string());
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  stack.insert(canon);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("include ", 0) == 0) {
      load_config_file(cfg, path.parent_path() / trim(line.substr(8)), stack);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  stack.erase(canon);
}
}  // namespace detail

inline RunConfig load_config(const std::filesystem::path& path) {
  RunConfig cfg;
  std::set<std::filesystem::path> stack;
  detail::load_config_file(cfg, path, stack);
  return cfg;
}

// Fully resolved config as key = value lines; load_config of the result
// reproduces the same values.
inline std::string dump_config(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::string out;
  for (const auto& f : config_fields(copy)) out += f.key + " = " + f.get() + "\n";
  return out;
}

inline std::map<std::string, std::string> config_map(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::map<std::string, std::string> out;
  for (const auto& f : config_fields(copy)) out[f.key] = f.get();
  return out;
}

}  // namespace jooci
