#pragma once

// Two-stage pre-training: stage 1 keeps the Content encoder fixed and trains
// everything else on OL + RL/10; stage 2 trains all parameters on the full
// objective. Every random draw of step s is derived from (seed, s), so a run
// resumed from a checkpoint replays the uninterrupted trajectory exactly.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "jooci/archive.hpp"
#include "jooci/config.hpp"
#include "jooci/data.hpp"
#include "jooci/labels.hpp"
#include "jooci/losses.hpp"
#include "jooci/model.hpp"
#include "jooci/optim.hpp"

namespace jooci {

inline constexpr int kCheckpointFormat = 1;

inline void validate(const StageConfig& s, const std::string& name) {
  if (s.steps < 0) throw std::invalid_argument(name + ": steps must be >= 0");
  if (s.warmup_steps < 0 || s.warmup_steps > s.steps)
    throw std::invalid_argument(name + ": warmup_steps must lie in [0, steps]");
  if (!(s.lr_peak > 0)) throw std::invalid_argument(name + ": lr_peak must be positive");
}

// Linear warmup from 0 to lr_peak, then linear decay to 0 at the stage end.
// `step` counts from the start of the stage.
inline double lr_at(long step, const StageConfig& s) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (step >= s.steps) return s.steps == s.warmup_steps && step == s.steps ? s.lr_peak : 0.0;
  if (step < s.warmup_steps) return s.lr_peak * static_cast<double>(step) / s.warmup_steps;
  return s.lr_peak * static_cast<double>(s.steps - step) / (s.steps - s.warmup_steps);
}

// One training example after cropping and augmentation.
struct TrainBatch {
  Tensor<float> wave;                        // [B, crop]
  std::vector<std::vector<int>> set_labels;  // per label set, B*T
  Tensor<float> teacher;                     // [B, teacher_dim]
  std::vector<std::size_t> utts;
  int augmented = 0;
};

struct Trainer {
  RunConfig cfg;
  const std::vector<Utterance>* corpus = nullptr;
  const LabelDictionary* labels = nullptr;
  std::unique_ptr<JoociModel<float>> model;
  AdamW<float> opt;
  TeacherOracle teacher;
  BatchSchedule schedule;
  long step = 0;  // completed steps
  int last_augmented = 0;

  Trainer(RunConfig c, const std::vector<Utterance>& corp, const LabelDictionary& dict)
      : cfg(std::move(c)),
        corpus(&corp),
        labels(&dict),
        model(std::make_unique<JoociModel<float>>(cfg.model, cfg.seed)),
        opt(cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps, cfg.train.weight_decay),
        teacher(cfg.seed, static_cast<std::size_t>(cfg.model.teacher_dim), cfg.labels.teacher_noise),
        schedule(corp, split_corpus(corp, cfg.probe.test_utts_per_speaker).train, cfg.train.batch_seconds,
                 cfg.train.crop_seconds, cfg.seed) {
    cfg.model = model->config();
    validate(cfg.train.stage1, "stage1");
    validate(cfg.train.stage2, "stage2");
    if (!cfg.train.stage1.content_frozen && cfg.train.stage1.steps > 0)
      throw std::invalid_argument("stage1 must freeze the Content encoder");
    if (cfg.train.stage2.content_frozen) throw std::invalid_argument("stage2 must train the Content encoder");
    if (dict.layers != model->label_layers() || dict.sizes != model->label_sizes())
      throw std::invalid_argument("label dictionary does not match the model's label layers and sizes");
    if (dict.labels.empty() || dict.labels[0].size() != corp.size())
      throw std::invalid_argument("label dictionary does not cover the corpus");
  }

  long total_steps() const { return cfg.train.stage1.steps + cfg.train.stage2.steps; }
  int stage_of(long s) const { return s < cfg.train.stage1.steps ? 1 : 2; }
  const StageConfig& stage_cfg(int stage) const { return stage == 1 ? cfg.train.stage1 : cfg.train.stage2; }
  double lr_for(long s) const {
    const int st = stage_of(s);
    return lr_at(st == 1 ? s : s - cfg.train.stage1.steps, stage_cfg(st));
  }

  TrainBatch make_batch(long s) const {
    const auto items = schedule.items(static_cast<std::uint64_t>(s));
    const std::size_t B = items.size(), N = schedule.crop_samples(), T = schedule.crop_frames();
    const std::size_t E = static_cast<std::size_t>(cfg.model.teacher_dim);
    TrainBatch b;
    b.wave = Tensor<float>(Shape{B, N});
    b.teacher = Tensor<float>(Shape{B, E});
    b.set_labels.assign(labels->labels.size(), {});
    for (std::size_t i = 0; i < B; ++i) {
      const auto& u = (*corpus)[items[i].utt];
      b.utts.push_back(items[i].utt);
      auto w = crop_wave(u.wave, items[i].offset, N);
      Rng rng(derive_seed(cfg.seed, Stream::augment, s, i));
      auto aug = augment(w, cfg.augment, rng);
      b.augmented += aug.applied;
      std::copy(aug.wave.begin(), aug.wave.end(), b.wave.data().begin() + static_cast<long>(i * N));
      for (std::size_t set = 0; set < labels->labels.size(); ++set) {
        const auto l = crop_frames(labels->labels[set][items[i].utt], items[i].offset, T);
        b.set_labels[set].insert(b.set_labels[set].end(), l.begin(), l.end());
      }
      const auto e = teacher.embed(u.speaker, u.id);
      std::copy(e.begin(), e.end(), b.teacher.data().begin() + static_cast<long>(i * E));
    }
    return b;
  }

  bool trainable(const NamedParam<float>& p, int stage) const {
    const auto& st = stage_cfg(stage);
    if (st.content_frozen && is_content_side(p.component)) return false;
    if (!cfg.model.use_regularizer && p.component == Component::regularizer) return false;
    return !(st.shared_frozen && p.component == Component::shared);
  }

  // Runs step `step` and advances. Throws on a non-finite loss.
  LossBreakdown train_step() {
    const int stage = stage_of(step);
    const bool frozen = stage_cfg(stage).content_frozen;
    const double lr = lr_for(step);
    const auto batch = make_batch(step);
    last_augmented = batch.augmented;
    LossBreakdown out;
    Tape<float> tape;
    ForwardOptions fo;
    fo.mask_seed = derive_seed(cfg.seed, Stream::mask, step);
    fo.content_grad = !frozen;
    fo.regularizer = cfg.model.use_regularizer;
    auto f = model->forward(batch.wave, fo);

    Tensor<float> cl;
    const bool want_cl = !frozen || cfg.train.compute_frozen_cl;
    if (want_cl) {
      std::optional<NoGrad<float>> guard;
      if (frozen) guard.emplace();
      cl = mmpl(f.content_layers, f.mask, *model, batch.set_labels, &out.per_layer_mpl);
    } else {
      cl = Tensor<float>::scalar(0.0f);
    }
    auto ol = other_loss(f.post->fc, batch.teacher);
    Tensor<float> rl = Tensor<float>::scalar(0.0f);
    if (fo.regularizer) {
      const auto& logits = f.reg_logits;
      rl = regularizer_loss(reshape(logits, Shape{logits.dim(0) * logits.dim(1), logits.dim(2)}),
                            batch.set_labels[labels->finest()]);
    }
    auto total = total_loss(cl, ol, rl);
    out.cl = cl.item();
    out.ol = ol.item();
    out.rl = rl.item();
    out.total = total.item();
    if (!std::isfinite(out.cl) || !std::isfinite(out.ol) || !std::isfinite(out.rl) || !std::isfinite(out.total)) {
      std::ostringstream os;
      os << "non-finite loss at step " << step << " (stage " << stage << "): cl=" << out.cl << " ol=" << out.ol
         << " rl=" << out.rl << " total=" << out.total;
      for (const auto& [layer, v] : out.per_layer_mpl) os << " mpl[" << layer << "]=" << v;
      throw std::runtime_error(os.str());
    }
    backward(tape, frozen ? add(ol, divide(rl, 10.0f)) : total);

    auto& params = model->registry().params();
    double sq = 0;
    for (auto& p : params)
      if (trainable(p, stage) && p.tensor.has_grad())
        for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    const double clip = cfg.train.grad_clip > 0 && norm > cfg.train.grad_clip ? cfg.train.grad_clip / norm : 1.0;
    for (auto& p : params) {
      if (trainable(p, stage)) {
        if (clip != 1.0 && p.tensor.has_grad())
          for (auto& g : p.tensor.mutable_grad()) g = static_cast<float>(g * clip);
        opt.step(p.name, p.tensor, lr);
      }
      p.tensor.zero_grad();
    }
    ++step;
    return out;
  }

  // ------------------------------------------------------------------ I/O

  Archive state_archive() const {
    Archive ar;
    for (const auto& p : model->registry().params()) ar.put("param." + p.name, p.tensor);
    for (const auto& b : model->registry().buffers()) {
      const Shape s{b.state->running_mean.size()};
      ar.put("buffer." + b.name + ".running_mean", s, b.state->running_mean);
      ar.put("buffer." + b.name + ".running_var", s, b.state->running_var);
    }
    for (const auto& [name, slot] : opt.slots()) {
      const Shape s{slot.m.size()};
      ar.put("adam." + name + ".m", s, slot.m);
      ar.put("adam." + name + ".v", s, slot.v);
      ar.put("adam." + name + ".t", Shape{}, std::vector<std::uint64_t>{slot.t});
    }
    return ar;
  }

  // Writes <path>.jar and <path>.json.
  void save_checkpoint(const std::filesystem::path& path) const {
    auto jar = path;
    jar += ".jar";
    auto manifest = path;
    manifest += ".json";
    state_archive().save(jar);
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : model->registry().params())
      params.push_back({{"name", p.name}, {"component", component_name(p.component)}, {"shape", p.tensor.shape()}});
    write_json(manifest, {{"format_version", kCheckpointFormat},
                          {"step", step},
                          {"stage", step == 0 ? 1 : stage_of(step - 1)},
                          {"archive", jar.filename().string()},
                          {"config", config_map(cfg)},
                          {"parameters", params}});
  }

  void load_state(const Archive& ar, long at_step) {
    for (auto& p : model->registry().params()) ar.get_into("param." + p.name, p.tensor);
    for (auto& b : model->registry().buffers()) {
      const auto m = ar.get<float>("buffer." + b.name + ".running_mean");
      const auto v = ar.get<float>("buffer." + b.name + ".running_var");
      if (m.size() != b.state->running_mean.size() || v.size() != b.state->running_var.size())
        throw std::runtime_error("checkpoint buffer " + b.name + " has the wrong size");
      b.state->running_mean = m;
      b.state->running_var = v;
    }
    opt.slots().clear();
    for (const auto& p : model->registry().params()) {
      if (!ar.has("adam." + p.name + ".m")) continue;
      auto& s = opt.slots()[p.name];
      s.m = ar.get<float>("adam." + p.name + ".m");
      s.v = ar.get<float>("adam." + p.name + ".v");
      s.t = ar.get<std::uint64_t>("adam." + p.name + ".t").at(0);
    }
    step = at_step;
  }
};

// Reads a checkpoint manifest's resolved configuration.
inline RunConfig checkpoint_config(const std::filesystem::path& manifest_path) {
  const auto j = read_json(manifest_path);
  if (j.at("format_version").get<int>() != kCheckpointFormat)
    throw std::runtime_error(manifest_path.string() + ": unsupported checkpoint format");
  RunConfig cfg;
  for (const auto& [k, v] : j.at("config").items()) set_config_value(cfg, k, v.get<std::string>());
  return cfg;
}

// Path stem of a checkpoint given either stem, .json or .jar.
inline std::filesystem::path checkpoint_stem(std::filesystem::path p) {
  if (p.extension() == ".json" || p.extension() == ".jar") p.replace_extension();
  return p;
}

// Loads a checkpoint's model for evaluation.
inline std::unique_ptr<JoociModel<float>> load_model(const std::filesystem::path& ckpt, RunConfig* cfg_out = nullptr) {
  const auto stem = checkpoint_stem(ckpt);
  auto manifest = stem;
  manifest += ".json";
  auto jar = stem;
  jar += ".jar";
  const auto cfg = checkpoint_config(manifest);
  auto model = std::make_unique<JoociModel<float>>(cfg.model, cfg.seed);
  const auto ar = Archive::load(jar);
  for (auto& p : model->registry().params()) ar.get_into("param." + p.name, p.tensor);
  for (auto& b : model->registry().buffers()) {
    b.state->running_mean = ar.get<float>("buffer." + b.name + ".running_mean");
    b.state->running_var = ar.get<float>("buffer." + b.name + ".running_var");
  }
  if (cfg_out) *cfg_out = cfg;
  return model;
}

inline nlohmann::json metrics_json(long step, int stage, const LossBreakdown& l, double lr, int augmented) {
  nlohmann::json per_layer = nlohmann::json::object();
  for (const auto& [layer, v] : l.per_layer_mpl) per_layer[std::to_string(layer)] = v;
  return {{"step", step}, {"stage", stage},     {"cl", l.cl},  {"ol", l.ol},
          {"rl", l.rl},   {"total", l.total},   {"per_layer_mpl", per_layer},
          {"lr", lr},     {"augmented", augmented}};
}

struct PretrainResult {
  std::filesystem::path final_checkpoint;
  std::vector<LossBreakdown> losses;  // steps run in this invocation
};

struct PretrainOptions {
  std::optional<std::filesystem::path> resume;  // checkpoint stem, .json or .jar
  long stop_after = -1;                         // stop once this many steps are complete (for tests)
  std::function<void(long, const LossBreakdown&)> on_step;
};

// Runs both stages, writing to out_dir:
//   metrics.jsonl             one line per step
//   ckpt_<step>.{jar,json}    every checkpoint_every steps, at the stage
//                             boundary and at the end
//   final.{jar,json}          copy of the last checkpoint
// A resumed run truncates metrics.jsonl to the steps before the checkpoint.
inline PretrainResult run_pretraining(const RunConfig& cfg, const std::vector<Utterance>& corpus,
                                      const LabelDictionary& dict, const std::filesystem::path& out_dir,
                                      const PretrainOptions& opts = {}) {
  std::filesystem::create_directories(out_dir);
  Trainer tr(cfg, corpus, dict);
  const auto metrics_path = out_dir / "metrics.jsonl";
  std::vector<std::string> kept;
  if (opts.resume) {
    const auto stem = checkpoint_stem(*opts.resume);
    auto manifest = stem;
    manifest += ".json";
    auto jar = stem;
    jar += ".jar";
    const auto j = read_json(manifest);
    const auto saved = checkpoint_config(manifest);
    if (config_map(saved) != config_map(tr.cfg))
      throw std::runtime_error("resume: checkpoint configuration differs from the requested run");
    tr.load_state(Archive::load(jar), j.at("step").get<long>());
    std::ifstream in(metrics_path);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty() && nlohmann::json::parse(line).at("step").get<long>() < tr.step) kept.push_back(line);
  }
  {
    std::ofstream m(metrics_path, std::ios::trunc);
    for (const auto& l : kept) m << l << "\n";
  }
  std::ofstream metrics(metrics_path, std::ios::app);
  PretrainResult res;
  auto checkpoint = [&] {
    char name[32];
    std::snprintf(name, sizeof name, "ckpt_%06ld", tr.step);
    tr.save_checkpoint(out_dir / name);
    res.final_checkpoint = out_dir / name;
  };
  if (!opts.resume) checkpoint();
  const long end = opts.stop_after >= 0 ? std::min(opts.stop_after, tr.total_steps()) : tr.total_steps();
  while (tr.step < end) {
    const long s = tr.step;
    const int stage = tr.stage_of(s);
    const double lr = tr.lr_for(s);
    const auto loss = tr.train_step();
    metrics << metrics_json(s, stage, loss, lr, tr.last_augmented).dump() << "\n";
    metrics.flush();
    res.losses.push_back(loss);
    if (opts.on_step) opts.on_step(s, loss);
    const bool boundary = tr.step == cfg.train.stage1.steps || tr.step == tr.total_steps();
    if (boundary || (cfg.train.checkpoint_every > 0 && tr.step % cfg.train.checkpoint_every == 0)) checkpoint();
  }
  if (tr.step == tr.total_steps()) tr.save_checkpoint(out_dir / "final");
  return res;
}

}  // namespace jooci
