#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "jooci/gradcheck.hpp"
#include "jooci/model.hpp"
#include "micro.hpp"

using namespace jooci;
using jooci::testing::micro_config;
using jooci::testing::project;
using jooci::testing::random_tensor;

namespace {

ModelConfig toy_config() { return ModelConfig{}; }

double frac(const std::vector<std::uint8_t>& m) {
  return std::accumulate(m.begin(), m.end(), 0.0) / static_cast<double>(m.size());
}

// Length of one conv stage.
std::size_t stage_len(std::size_t n, std::size_t k, std::size_t s) { return (n - k) / s + 1; }

}  // namespace

TEST(Model, FrameCountComposesStageFormulas) {
  JoociModel<float> m(toy_config(), 1);
  const ModelConfig& c = m.config();
  for (std::size_t n : {16000u, 32000u, 320u, 12345u}) {
    // independent oracle: pad 40 both sides, then the seven stage formulas
    std::size_t len = n + 80;
    for (std::size_t i = 0; i < c.conv_kernels.size(); ++i)
      len = stage_len(len, static_cast<std::size_t>(c.conv_kernels[i]), static_cast<std::size_t>(c.conv_strides[i]));
    auto y = m.shared_encode(Tensor<float>(Shape{1, n}, 0.1f));
    EXPECT_EQ(y.dim(1), len) << n;
    EXPECT_EQ(y.dim(1), n / 320) << n;
  }
  EXPECT_EQ(m.shared_encode(Tensor<float>(Shape{2, 16000})).dim(1), 50u);
  EXPECT_EQ(m.shared_encode(Tensor<float>(Shape{2, 32000})).dim(1), 100u);
}

TEST(Model, ShortWaveformNamesMinimum) {
  JoociModel<float> m(toy_config(), 1);
  try {
    m.shared_encode(Tensor<float>(Shape{1, 319}));
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("320"), std::string::npos);
  }
}

TEST(Model, ZeroWaveformIsFinite) {
  JoociModel<float> m(toy_config(), 1);
  auto out = m.forward(Tensor<float>(Shape{2, 16000}), {});
  for (const auto& l : out.content_layers)
    for (float v : l.data()) ASSERT_TRUE(std::isfinite(v));
  for (const auto& l : out.other_layers)
    for (float v : l.data()) ASSERT_TRUE(std::isfinite(v));
  for (float v : out.post->fc.data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Model, InvalidConfigsRejected) {
  auto c = toy_config();
  c.conv_strides = {5, 2, 2, 2, 2, 2, 1};
  EXPECT_THROW(JoociModel<float>(c, 1), std::invalid_argument);
  c = toy_config();
  c.sa_kernel = 10;
  EXPECT_THROW(JoociModel<float>(c, 1), std::invalid_argument);
  c = toy_config();
  c.pool_kernel = 5;
  EXPECT_THROW(JoociModel<float>(c, 1), std::invalid_argument);
}

TEST(Masking, DegenerateRatios) {
  EXPECT_EQ(frac(make_mask(3, 50, 0.0, 10, 1)), 0.0);
  EXPECT_EQ(frac(make_mask(3, 50, 1.0, 10, 1)), 1.0);
}

TEST(Masking, RealizedRatioOverSeeds) {
  double total = 0;
  for (std::uint64_t s = 0; s < 100; ++s) total += frac(make_mask(1, 1000, 0.5, 10, s));
  EXPECT_GE(total / 100, 0.45);
  EXPECT_LE(total / 100, 0.55);
}

TEST(Masking, SpansAreContiguousRuns) {
  auto m = make_mask(1, 200, 0.5, 10, 3);
  // every run that does not touch the end has length >= span
  std::size_t t = 0;
  while (t < m.size()) {
    if (!m[t]) { ++t; continue; }
    std::size_t e = t;
    while (e < m.size() && m[e]) ++e;
    if (e < m.size()) { EXPECT_GE(e - t, 10u); }
    t = e;
  }
}

TEST(Masking, FullMaskReplacesEveryFrame) {
  JoociModel<float> m(toy_config(), 1);
  auto frames = random_tensor<float>({2, 30, 64}, 5);
  auto [masked, mask] = m.apply_mask(frames, 7, 1.0);
  for (std::size_t r = 0; r < 60; ++r)
    for (std::size_t j = 0; j < 64; ++j) ASSERT_EQ(masked[r * 64 + j], m.mask_embedding()[j]);
  auto [same, none] = m.apply_mask(frames, 7, 0.0);
  for (std::size_t i = 0; i < frames.numel(); ++i) ASSERT_EQ(same[i], frames[i]);
}

TEST(Content, LayerCountAndZeroLayerConfig) {
  JoociModel<float> m(toy_config(), 1);
  auto x = random_tensor<float>({2, 20, 64}, 1);
  EXPECT_EQ(m.content_encode(x).size(), 5u);
  auto c = toy_config();
  c.content_layers = 0;
  JoociModel<float> m0(c, 1);
  auto layers = m0.content_encode(x);
  ASSERT_EQ(layers.size(), 1u);
  EXPECT_EQ(layers[0].shape(), x.shape());
}

TEST(Content, BatchEquivariance) {
  JoociModel<double> m(micro_config(), 2);
  auto a = random_tensor<double>({1, 12, 8}, 3), b = random_tensor<double>({1, 12, 8}, 4);
  auto ab = m.content_encode(concat<double>({a, b}, 0)).back();
  auto ba = m.content_encode(concat<double>({b, a}, 0)).back();
  for (std::size_t i = 0; i < 12 * 8; ++i) {
    EXPECT_EQ(ab[i], ba[96 + i]);
    EXPECT_EQ(ab[96 + i], ba[i]);
  }
}

TEST(Content, MaskLocalityAtLayerZeroInput) {
  // Changing the mask vector only changes masked rows of the Content input.
  JoociModel<double> m(micro_config(), 2);
  auto x = random_tensor<double>({1, 12, 8}, 3);
  std::vector<std::uint8_t> mask(12, 0);
  mask[2] = mask[3] = 1;
  auto y1 = masked_replace(x, mask, random_tensor<double>({8}, 1));
  auto y2 = masked_replace(x, mask, random_tensor<double>({8}, 2));
  for (std::size_t t = 0; t < 12; ++t)
    for (std::size_t j = 0; j < 8; ++j)
      if (!mask[t]) { EXPECT_EQ(y1[t * 8 + j], y2[t * 8 + j]); }
}

TEST(Other, BlockPreservesLengthForAnyS) {
  JoociModel<double> m(micro_config(), 2);
  for (std::size_t S : {1u, 2u, 5u}) {
    auto x = random_tensor<double>({2, 8, S}, S);
    auto tap = random_tensor<double>({2, S * 10, 8}, S + 10);
    EXPECT_EQ(m.other_block(1, x, tap, true).shape(), (Shape{2, 8, S}));
  }
}

TEST(Other, ZeroWeightsGiveResidualPath) {
  JoociModel<double> m(micro_config(), 2);
  for (auto& p : m.registry().params()) {
    if (p.name.rfind("other.block1.", 0) != 0) continue;
    const bool bn_gamma = p.name.find(".bn.gamma") != std::string::npos;
    std::fill(p.tensor.data().begin(), p.tensor.data().end(), bn_gamma ? 1.0 : 0.0);
  }
  auto x = random_tensor<double>({2, 8, 3}, 1);
  auto tap = random_tensor<double>({2, 30, 8}, 2);
  auto y = m.other_block(1, x, tap, false);  // eval BN: running mean 0, var 1
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1 + 1e-5), 1e-12);
}

TEST(Other, LayerLengthsAndZeroBlocks) {
  JoociModel<float> m(toy_config(), 1);
  auto out = m.forward(random_tensor<float>({2, 32000}, 1, 0.1), {});
  ASSERT_EQ(out.other_layers.size(), 5u);
  for (const auto& l : out.other_layers) EXPECT_EQ(l.dim(2), 10u);
  auto out2 = m.forward(random_tensor<float>({2, 16000 + 320 * 3}, 1, 0.1), {});
  for (const auto& l : out2.other_layers) EXPECT_EQ(l.dim(2), 6u);  // 53 frames padded to 60
  auto c = toy_config();
  c.other_blocks = 0;
  JoociModel<float> m0(c, 1);
  EXPECT_EQ(m0.forward(random_tensor<float>({2, 16000}, 1, 0.1), {}).other_layers.size(), 1u);
}

TEST(Other, ZeroTapsStayFinite) {
  JoociModel<float> m(toy_config(), 1);
  auto frames = m.shared_encode(random_tensor<float>({2, 16000}, 1, 0.1));
  std::vector<Tensor<float>> taps(5, Tensor<float>(frames.shape(), 0.0f));
  for (const auto& l : m.other_encode(frames, taps, true))
    for (float v : l.data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Other, TapPairingIsDepthMatched) {
  EXPECT_EQ(tap_layer(1, 12, 12), 1);
  EXPECT_EQ(tap_layer(12, 12, 12), 12);
  EXPECT_EQ(tap_layer(1, 4, 4), 1);
  EXPECT_EQ(tap_layer(1, 2, 4), 1);  // ceil(2/4)
  EXPECT_EQ(tap_layer(3, 2, 4), 2);  // ceil(6/4)
  EXPECT_EQ(tap_layer(3, 0, 4), 0);
}

TEST(Post, UniformAttentionGivesTemporalMean) {
  JoociModel<double> m(micro_config(), 2);
  for (auto& p : m.registry().params())
    if (p.name.rfind("post.asp.score", 0) == 0) std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
  auto h = random_tensor<double>({3, 8, 5}, 1);
  auto out = m.post_network(h, true);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < 8; ++c) {
      double mu = 0;
      for (std::size_t t = 0; t < 5; ++t) mu += h[(b * 8 + c) * 5 + t] / 5;
      EXPECT_NEAR(out.asp[b * 16 + c], mu, 1e-12);
    }
  EXPECT_EQ(out.fc.shape(), (Shape{3, 6}));
}

TEST(Post, SingleFrameHasGuardedZeroStd) {
  JoociModel<double> m(micro_config(), 2);
  auto out = m.post_network(random_tensor<double>({3, 8, 1}, 1), true);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 8; c < 16; ++c) EXPECT_LE(out.asp[b * 16 + c], 1e-6 + 1e-12);
  EXPECT_THROW(m.post_network(Tensor<double>(Shape{3, 8, 0}), true), std::invalid_argument);
}

TEST(Post, FcIs512AtToyScale) {
  JoociModel<float> m(toy_config(), 1);
  auto out = m.forward(random_tensor<float>({2, 16000}, 1, 0.1), {});
  EXPECT_EQ(out.post->fc.shape(), (Shape{2, 512}));
}

TEST(Regularizer, LogitsShape) {
  JoociModel<float> m(toy_config(), 1);
  auto out = m.forward(random_tensor<float>({2, 16000}, 1, 0.1), {});
  EXPECT_EQ(out.reg_logits.shape(), (Shape{2, 50, 32}));
}

TEST(Model, ForwardIsDeterministic) {
  JoociModel<float> m1(toy_config(), 9), m2(toy_config(), 9);
  auto w = random_tensor<float>({2, 16000}, 1, 0.1);
  ForwardOptions o;
  o.mask_seed = 4;
  auto a = m1.forward(w, o), b = m2.forward(w, o);
  for (std::size_t i = 0; i < a.post->fc.numel(); ++i) ASSERT_EQ(a.post->fc[i], b.post->fc[i]);
  for (std::size_t i = 0; i < a.reg_logits.numel(); ++i) ASSERT_EQ(a.reg_logits[i], b.reg_logits[i]);
}

TEST(Model, EvalBatchNormIndependentOfBatchComposition) {
  JoociModel<float> m(toy_config(), 3);
  auto a = random_tensor<float>({1, 16000}, 1, 0.1), b = random_tensor<float>({1, 16000}, 2, 0.1);
  ForwardOptions o;
  o.training = false;
  o.mask = false;
  auto solo = m.forward(a, o);
  auto pair = m.forward(concat<float>({a, b}, 0), o);
  const auto& x = solo.other_layers.back();
  const auto& y = pair.other_layers.back();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x[i], y[i], 1e-5);
}

TEST(Labels, DictionaryLayers) {
  EXPECT_EQ(dictionary_layers(12, 6), (std::vector<int>{7, 8, 9, 10, 11, 12}));
  EXPECT_EQ(dictionary_layers(6, 6), (std::vector<int>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(dictionary_layers(12, 1), (std::vector<int>{12}));
  EXPECT_EQ(dictionary_layers(4, 4), (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(dictionary_layers(12, 3), (std::vector<int>{7, 10, 12}));
  EXPECT_THROW(dictionary_layers(4, 6), std::invalid_argument);
}

TEST(Labels, SizeLadderEndsAtVocab) {
  EXPECT_EQ(label_set_sizes(1005, 6), (std::vector<int>{178, 251, 355, 503, 711, 1005}));
  EXPECT_EQ(label_set_sizes(32, 4), (std::vector<int>{11, 16, 23, 32}));
}

// ---------------------------------------------------------------------------
// Parameter accounting. The oracle below counts from the architecture
// description without touching the model code.

namespace {

struct Oracle {
  long long shared = 0, content = 0, heads = 0, other = 0, post = 0, reg = 0;
};

Oracle count_oracle(const ModelConfig& c, int other_dim) {
  Oracle o;
  const long long C0 = c.conv_channels, D = c.content_dim, F = c.content_ffn, Co = other_dim, R = c.reg_dim;
  for (std::size_t i = 0; i < c.conv_kernels.size(); ++i) o.shared += (i ? C0 : 1) * C0 * c.conv_kernels[i];
  o.shared += 2 * C0 /* conv0 norm */ + 2 * C0 /* LN */ + C0 * D + D;
  o.content = D /* mask */ + D * (D / c.pos_conv_groups) * c.pos_conv_kernel + D + 2 * D;
  o.content += c.content_layers * (4 * (D * D + D) + 2 * D + (D * F + F) + (F * D + D) + 2 * D);
  const auto sizes = label_set_sizes(c.vocab_size, c.num_label_sets);
  for (int k : sizes) o.heads += D * c.code_dim + c.code_dim + static_cast<long long>(k) * c.code_dim;
  const long long w = Co / c.res2net_scale, br = c.res2net_scale - 1;
  const long long block = br * (w * w + w + 2 * w) + (D * Co + Co) + (Co * c.sa_kernel + Co) +
                          br * (3 * w * w + w + 2 * w) + 2 * Co;
  o.other = D * Co + Co + c.other_blocks * block;
  o.post = (Co * (Co / 2) + Co / 2) + (Co / 2 + 1) + 2 * 2 * Co + (2 * Co * c.teacher_dim + c.teacher_dim);
  o.reg = (Co * R + R) + 4 * (R * R + R) + 2 * (R * R + R) + 2 * (Co * R + R) + (R * c.reg_ffn + c.reg_ffn) +
          (c.reg_ffn * R + R) + 3 * 2 * R + (R * c.vocab_size + c.vocab_size);
  return o;
}

ModelConfig paper_config() {
  ModelConfig c;
  c.conv_channels = 512;
  c.content_layers = 12;
  c.content_dim = 768;
  c.content_heads = 12;
  c.content_ffn = 3072;
  c.pos_conv_kernel = 128;
  c.pos_conv_groups = 16;
  c.other_blocks = 12;
  c.other_dim = 0;
  c.vocab_size = 1005;
  c.num_label_sets = 6;
  c.code_dim = 256;
  c.reg_dim = 768;
  c.reg_ffn = 3072;
  c.reg_heads = 8;
  return c;
}

}  // namespace

TEST(Accounting, RegistryMatchesOracleAtToyScale) {
  for (auto cfg : {toy_config(), micro_config()}) {
    JoociModel<float> m(cfg, 1);
    auto t = count_parameters(m, CountMode::training);
    auto o = count_oracle(m.config(), m.config().other_dim);
    EXPECT_EQ(t[Component::shared], o.shared);
    EXPECT_EQ(t[Component::content], o.content);
    EXPECT_EQ(t[Component::content_heads], o.heads);
    EXPECT_EQ(t[Component::other], o.other);
    EXPECT_EQ(t[Component::post_asp] + t[Component::post_bn] + t[Component::post_fc], o.post);
    EXPECT_EQ(t[Component::regularizer], o.reg);
    EXPECT_EQ(other_encoder_parameter_count(m.config(), m.config().other_dim), o.other);
  }
}

TEST(Accounting, TrainingEqualsInferencePlusPretrainingOnly) {
  JoociModel<float> m(toy_config(), 1);
  auto t = count_parameters(m, CountMode::training);
  auto i = count_parameters(m, CountMode::inference);
  long long tt = 0, ii = 0;
  for (auto& [k, v] : t) tt += v;
  for (auto& [k, v] : i) ii += v;
  EXPECT_EQ(tt, ii + t[Component::content_heads] + t[Component::regularizer] + t[Component::post_asp] +
                    t[Component::post_bn] + t[Component::post_fc]);
}

TEST(Accounting, PaperScaleWithinPublishedBands) {
  JoociModel<float> m(paper_config(), 1, /*random_init=*/false);
  auto t = count_parameters(m, CountMode::training);
  const double inference = static_cast<double>(t[Component::shared] + t[Component::content]);
  const double training = inference + static_cast<double>(t[Component::content_heads]);
  EXPECT_NEAR(inference / 94.68e6, 1.0, 0.005);
  EXPECT_NEAR(training / 96.18e6, 1.0, 0.005);
  EXPECT_NEAR(static_cast<double>(t[Component::regularizer]) / 9.3e6, 1.0, 0.05);
  EXPECT_GE(t[Component::other], 3'120'000);
  EXPECT_LE(t[Component::other], 3'520'000);
  auto o = count_oracle(m.config(), m.config().other_dim);
  EXPECT_EQ(t[Component::regularizer], o.reg);
  EXPECT_EQ(t[Component::other], o.other);
}
