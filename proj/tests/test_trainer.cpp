#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "jooci/trainer.hpp"
#include "micro.hpp"

using namespace jooci;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run() {
  RunConfig c;
  c.model = jooci::testing::micro_config();
  c.corpus.num_speakers = 2;
  c.corpus.utts_per_speaker = 4;
  c.corpus.min_seconds = 2.5;
  c.corpus.max_seconds = 3.0;
  c.probe.test_utts_per_speaker = 1;
  c.train.batch_seconds = 1.0;
  c.train.crop_seconds = 0.5;
  c.train.stage1 = {3, 1e-2, 1, true, false};
  c.train.stage2 = {3, 1e-2, 1, false, false};
  c.train.checkpoint_every = 2;
  c.augment.apply_fraction = 0.5;
  c.labels.kmeans_iters = 10;
  c.seed = 3;
  return c;
}

struct Fixture {
  RunConfig cfg = tiny_run();
  std::vector<Utterance> corpus = generate_corpus(cfg.corpus, cfg.seed);
  LabelDictionary dict = build_label_dictionary(cfg.model, corpus_band_features(corpus, cfg.labels.feature_bands),
                                                cfg.labels.kmeans_iters, cfg.seed);
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / "jooci_test_trainer" / name;
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::vector<float>> snapshot(const Trainer& t) {
  std::map<std::string, std::vector<float>> out;
  for (const auto& p : t.model->registry().params()) out[p.name].assign(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

}  // namespace

TEST(Schedule, WarmupThenLinearDecay) {
  const StageConfig s{10, 1.0, 4, true, false};
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(2, s), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(4, s), 1.0);
  EXPECT_DOUBLE_EQ(lr_at(7, s), 0.5);
  EXPECT_EQ(lr_at(10, s), 0.0);
  EXPECT_EQ(lr_at(11, s), 0.0);
  const StageConfig flat{5, 2.0, 0, true, false};
  EXPECT_DOUBLE_EQ(lr_at(0, flat), 2.0);
  EXPECT_THROW(lr_at(-1, s), std::invalid_argument);
}

TEST(Schedule, RejectsInvalidStages) {
  EXPECT_THROW(validate(StageConfig{-1, 1e-3, 0, true, false}, "s"), std::invalid_argument);
  EXPECT_THROW(validate(StageConfig{5, 1e-3, 6, true, false}, "s"), std::invalid_argument);
  EXPECT_THROW(validate(StageConfig{5, 0.0, 1, true, false}, "s"), std::invalid_argument);
  EXPECT_NO_THROW(validate(StageConfig{0, 1e-3, 0, true, false}, "s"));
}

TEST(Trainer, ConstructorChecksStageRolesAndDictionary) {
  const auto& f = fixture();
  auto c = f.cfg;
  c.train.stage1.content_frozen = false;
  EXPECT_THROW((Trainer{c, f.corpus, f.dict}), std::invalid_argument);
  c = f.cfg;
  c.train.stage2.content_frozen = true;
  EXPECT_THROW((Trainer{c, f.corpus, f.dict}), std::invalid_argument);
  c = f.cfg;
  c.model.vocab_size = 8;
  EXPECT_THROW((Trainer{c, f.corpus, f.dict}), std::invalid_argument);
}

TEST(Trainer, BatchShapesAndLabels) {
  const auto& f = fixture();
  Trainer t(f.cfg, f.corpus, f.dict);
  const auto b = t.make_batch(0);
  EXPECT_EQ(b.wave.shape(), (Shape{2, 8000}));
  EXPECT_EQ(b.teacher.shape(), (Shape{2, 6}));
  ASSERT_EQ(b.set_labels.size(), 2u);
  for (const auto& l : b.set_labels) EXPECT_EQ(l.size(), 50u);
  const auto test = split_corpus(f.corpus, 1).test;
  for (auto u : b.utts) EXPECT_EQ(std::count(test.begin(), test.end(), u), 0) << "held-out utterance in training";
}

TEST(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
  const auto& f = fixture();
  Trainer t(f.cfg, f.corpus, f.dict);
  ASSERT_EQ(t.lr_for(0), 0.0);
  const auto before = snapshot(t);
  t.train_step();
  EXPECT_EQ(snapshot(t), before);
  EXPECT_EQ(t.step, 1);
}

TEST(Trainer, FirstStageKeepsContentFixed) {
  const auto& f = fixture();
  for (bool shared_frozen : {false, true}) {
    auto c = f.cfg;
    c.train.stage1.shared_frozen = shared_frozen;
    Trainer t(c, f.corpus, f.dict);
    t.train_step();  // lr 0
    const auto before = snapshot(t);
    t.train_step();
    const auto after = snapshot(t);
    for (const auto& p : t.model->registry().params()) {
      const bool moved = before.at(p.name) != after.at(p.name);
      if (is_content_side(p.component) || (shared_frozen && p.component == Component::shared)) {
        EXPECT_FALSE(moved) << p.name;
      } else if (p.component == Component::shared || p.component == Component::post_fc) {
        EXPECT_TRUE(moved) << p.name;
      }
    }
  }
}

TEST(Trainer, SecondStageTrainsContent) {
  const auto& f = fixture();
  Trainer t(f.cfg, f.corpus, f.dict);
  while (t.step < f.cfg.train.stage1.steps + 1) t.train_step();  // stage-2 warmup step has lr 0
  const auto before = snapshot(t);
  t.train_step();
  const auto after = snapshot(t);
  for (const auto& p : t.model->registry().params())
    if (is_content_side(p.component)) {
      EXPECT_NE(before.at(p.name), after.at(p.name)) << p.name;
    }
}

TEST(Trainer, TotalIsWeightedSumOfTerms) {
  const auto& f = fixture();
  Trainer t(f.cfg, f.corpus, f.dict);
  while (t.step < t.total_steps()) {
    const auto l = t.train_step();
    EXPECT_NEAR(l.total, total_loss(l.cl, l.ol, l.rl), 1e-6 * std::max(1.0, std::abs(l.total)));
    EXPECT_GT(l.cl, 0.0);
    EXPECT_GT(l.rl, 0.0);
  }
}

TEST(Trainer, NonFiniteLossAborts) {
  const auto& f = fixture();
  Trainer t(f.cfg, f.corpus, f.dict);
  for (auto& p : t.model->registry().params())
    if (p.name == "post.fc.bias") p.tensor[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    t.train_step();
    FAIL() << "expected an exception";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite loss at step 0"), std::string::npos) << e.what();
  }
}

TEST(Trainer, DisabledRegularizerReportsZero) {
  const auto& f = fixture();
  auto c = f.cfg;
  c.model.use_regularizer = false;
  Trainer t(c, f.corpus, f.dict);
  const auto before = snapshot(t);
  t.train_step();
  const auto l = t.train_step();
  EXPECT_EQ(l.rl, 0.0);
  EXPECT_NEAR(l.total, l.cl + l.ol, 1e-6 * std::abs(l.total));
  const auto after = snapshot(t);
  for (const auto& p : t.model->registry().params())
    if (p.component == Component::regularizer) {
      EXPECT_EQ(before.at(p.name), after.at(p.name)) << p.name;
    }
}

TEST(Pretraining, IdenticalSeedsGiveIdenticalLogs) {
  const auto& f = fixture();
  const auto a = scratch("det_a"), b = scratch("det_b");
  run_pretraining(f.cfg, f.corpus, f.dict, a);
  run_pretraining(f.cfg, f.corpus, f.dict, b);
  EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
  EXPECT_EQ(slurp(a / "final.jar"), slurp(b / "final.jar"));
  EXPECT_FALSE(slurp(a / "metrics.jsonl").empty());
}

TEST(Pretraining, ResumeReplaysUninterruptedRun) {
  const auto& f = fixture();
  const auto full = scratch("full"), part = scratch("part");
  run_pretraining(f.cfg, f.corpus, f.dict, full);
  PretrainOptions stop;
  stop.stop_after = 5;
  run_pretraining(f.cfg, f.corpus, f.dict, part, stop);
  EXPECT_FALSE(fs::exists(part / "final.json"));
  ASSERT_TRUE(fs::exists(part / "ckpt_000002.json"));
  PretrainOptions resume;
  resume.resume = part / "ckpt_000002.json";
  run_pretraining(f.cfg, f.corpus, f.dict, part, resume);
  EXPECT_EQ(slurp(full / "metrics.jsonl"), slurp(part / "metrics.jsonl"));
  EXPECT_EQ(slurp(full / "final.jar"), slurp(part / "final.jar"));
}

TEST(Pretraining, ResumeRejectsChangedConfig) {
  const auto& f = fixture();
  const auto dir = scratch("changed");
  PretrainOptions stop;
  stop.stop_after = 2;
  run_pretraining(f.cfg, f.corpus, f.dict, dir, stop);
  auto c = f.cfg;
  c.train.stage2.lr_peak *= 2;
  PretrainOptions resume;
  resume.resume = dir / "ckpt_000002";
  EXPECT_THROW(run_pretraining(c, f.corpus, f.dict, dir, resume), std::runtime_error);
}

TEST(Pretraining, ZeroStepsWritesInitialModel) {
  const auto& f = fixture();
  auto c = f.cfg;
  c.train.stage1 = {0, 1e-3, 0, true, false};
  c.train.stage2 = {0, 1e-3, 0, false, false};
  const auto dir = scratch("zero");
  const auto res = run_pretraining(c, f.corpus, f.dict, dir);
  EXPECT_TRUE(res.losses.empty());
  EXPECT_TRUE(slurp(dir / "metrics.jsonl").empty());
  EXPECT_EQ(slurp(dir / "final.jar"), slurp(dir / "ckpt_000000.jar"));
  Trainer fresh(c, f.corpus, f.dict);
  EXPECT_EQ(slurp(dir / "final.jar"), fresh.state_archive().serialize());
}

TEST(Checkpoint, ManifestAndModelRoundTrip) {
  const auto& f = fixture();
  const auto dir = scratch("ckpt");
  run_pretraining(f.cfg, f.corpus, f.dict, dir);
  const auto j = read_json(dir / "final.json");
  EXPECT_EQ(j.at("format_version").get<int>(), kCheckpointFormat);
  EXPECT_EQ(j.at("step").get<long>(), 6);
  EXPECT_EQ(j.at("stage").get<int>(), 2);
  RunConfig loaded;
  auto m = load_model(dir / "final.jar", &loaded);
  EXPECT_EQ(config_map(loaded), config_map([&] {
              auto c = f.cfg;
              validate(c.model);
              return c;
            }()));
  const auto ar = Archive::load(dir / "final.jar");
  for (const auto& p : m->registry().params()) {
    const auto v = ar.get<float>("param." + p.name);
    EXPECT_TRUE(std::equal(v.begin(), v.end(), p.tensor.data().begin())) << p.name;
  }
}

TEST(Checkpoint, CorruptArchiveRejected) {
  const auto& f = fixture();
  const auto dir = scratch("corrupt");
  PretrainOptions stop;
  stop.stop_after = 0;
  run_pretraining(f.cfg, f.corpus, f.dict, dir, stop);
  auto bytes = slurp(dir / "ckpt_000000.jar");
  bytes[bytes.size() / 2] ^= 0x5a;
  std::ofstream(dir / "ckpt_000000.jar", std::ios::binary) << bytes;
  EXPECT_THROW(load_model(dir / "ckpt_000000"), std::runtime_error);
}

TEST(Metrics, OneLinePerStepWithAllTerms) {
  const auto& f = fixture();
  const auto dir = scratch("metrics");
  run_pretraining(f.cfg, f.corpus, f.dict, dir);
  std::ifstream in(dir / "metrics.jsonl");
  std::string line;
  long expect = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<long>(), expect);
    EXPECT_EQ(j.at("stage").get<int>(), expect < 3 ? 1 : 2);
    for (const char* k : {"cl", "ol", "rl", "total", "lr", "augmented", "per_layer_mpl"}) EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(j.at("per_layer_mpl").size(), 2u);
    ++expect;
  }
  EXPECT_EQ(expect, 6);
}
