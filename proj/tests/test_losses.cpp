#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "jooci/gradcheck.hpp"
#include "jooci/losses.hpp"
#include "micro.hpp"

using namespace jooci;
using namespace jooci::testing;
using TD = Tensor<double>;

namespace {

double abs_grad(const NamedParam<double>& p) {
  if (!p.tensor.has_grad()) return 0.0;
  double s = 0;
  for (double g : p.tensor.grad()) s += std::abs(g);
  return s;
}

// Sum of |grad| per component after backpropagating `term` alone.
template <class F>
std::map<Component, double> grads_of(JoociModel<double>& m, F term) {
  for (auto& p : m.registry().params()) p.tensor.zero_grad();
  {
    Tape<double> tape;
    backward(tape, term());
  }
  std::map<Component, double> out;
  for (auto& p : m.registry().params()) out[p.component] += abs_grad(p);
  for (auto& p : m.registry().params()) p.tensor.zero_grad();
  return out;
}

std::vector<std::pair<std::string, TD>> params_where(JoociModel<double>& m, bool (*keep)(Component)) {
  std::vector<std::pair<std::string, TD>> in;
  for (auto& p : m.registry().params())
    if (keep(p.component)) in.emplace_back(p.name, p.tensor);
  return in;
}

bool content_path(Component c) { return c == Component::shared || is_content_side(c); }
bool other_path(Component c) { return c == Component::other || c == Component::post_asp || c == Component::post_bn || c == Component::post_fc; }
bool reg_path(Component c) { return c == Component::other || c == Component::regularizer; }

GradCheckOptions sampled(std::uint64_t seed) {
  GradCheckOptions o;
  o.samples_per_tensor = 4;
  o.seed = seed;
  return o;
}

}  // namespace

TEST(TotalLoss, WeightsRegularizerByTenth) {
  EXPECT_DOUBLE_EQ(total_loss(1.0, 2.0, 30.0), 6.0);
  auto t = total_loss(TD::scalar(0.25), TD::scalar(0.5), TD::scalar(3.0));
  EXPECT_DOUBLE_EQ(t.item(), total_loss(0.25, 0.5, 3.0));
}

TEST(Mpl, MatchesDirectOracle) {
  ParamRegistry<double> reg(11, true);
  Linear<double> proj(reg, "p", Component::content_heads, 3, 2);
  TD codewords = random_tensor<double>({4, 2}, 12);
  TD states = random_tensor<double>({5, 3}, 13);
  const std::vector<std::size_t> rows{0, 2, 4};
  const std::vector<int> labels{3, 0, 1};
  const double tau = 0.1;
  const double got = mpl(states, rows, labels, proj, codewords, tau).item();

  double want = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    double z[2];
    for (int o = 0; o < 2; ++o) {
      z[o] = proj.bias[o];
      for (int i = 0; i < 3; ++i) z[o] += proj.weight[o * 3 + i] * states[rows[r] * 3 + i];
    }
    double logits[4], mx = -1e300;
    for (int c = 0; c < 4; ++c) {
      const double e0 = codewords[c * 2], e1 = codewords[c * 2 + 1];
      const double cos = (z[0] * e0 + z[1] * e1) / ((std::hypot(z[0], z[1]) + 1e-8) * (std::hypot(e0, e1) + 1e-8));
      logits[c] = cos / tau;
      mx = std::max(mx, logits[c]);
    }
    double lse = 0;
    for (double l : logits) lse += std::exp(l - mx);
    want += mx + std::log(lse) - logits[labels[r]];
  }
  want /= static_cast<double>(rows.size());
  EXPECT_NEAR(got, want, 1e-12);
}

TEST(Mpl, RejectsEmptyMaskAndBadTau) {
  ParamRegistry<double> reg(1, true);
  Linear<double> proj(reg, "p", Component::content_heads, 3, 2);
  TD cw = random_tensor<double>({4, 2}, 2), s = random_tensor<double>({5, 3}, 3);
  EXPECT_THROW(mpl(s, {}, {}, proj, cw, 0.1), std::invalid_argument);
  EXPECT_THROW(mpl(s, {0}, {1}, proj, cw, 0.0), std::invalid_argument);
  EXPECT_THROW(mpl(s, {0, 1}, {1}, proj, cw, 0.1), std::invalid_argument);
}

TEST(Mpl, MaskedRowsSkipUnlabelledFrames) {
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0};
  const std::vector<int> labels{2, 3, -1, 0, 1};
  EXPECT_EQ(masked_rows(mask, labels), (std::vector<std::size_t>{0, 3}));
  EXPECT_THROW(masked_rows(mask, {1, 2}), std::invalid_argument);
}

TEST(OtherLoss, CosineDistanceOracle) {
  TD s(Shape{2, 2}, std::vector<double>{1, 0, 0, 2});
  TD t(Shape{2, 2}, std::vector<double>{3, 0, 0, -1});
  // rows: cos = 1 and cos = -1, up to the 1e-8 norm guard
  EXPECT_NEAR(other_loss(s, t).item(), 1.0, 1e-7);
  EXPECT_NEAR(other_loss(s, s).item(), 0.0, 1e-7);
  TD u(Shape{2}, std::vector<double>{1, 1}), v(Shape{2}, std::vector<double>{1, 0});
  const double guarded = 1.0 / ((std::sqrt(2.0) + 1e-8) * (1.0 + 1e-8));
  EXPECT_NEAR(other_loss(u, v).item(), 1.0 - guarded, 1e-15);
}

TEST(RegularizerLoss, IgnoresPaddedFrames) {
  TD logits = random_tensor<double>({3, 4}, 21);
  const double a = regularizer_loss(logits, {1, -1, 2}).item();
  TD two(Shape{2, 4});
  for (int c = 0; c < 4; ++c) two[c] = logits[c], two[4 + c] = logits[8 + c];
  EXPECT_DOUBLE_EQ(a, regularizer_loss(two, {1, 2}).item());
}

class LossSeparation : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(LossSeparation, EachTermTouchesOnlyItsSide) {
  JoociModel<double> m(micro_config(), GetParam());
  const auto b = micro_batch(m, GetParam());
  const auto cl = grads_of(m, [&] { return micro_losses(m, b).cl; });
  const auto ol = grads_of(m, [&] { return micro_losses(m, b).ol; });
  const auto rl = grads_of(m, [&] { return micro_losses(m, b).rl; });
  for (const auto& [c, g] : cl)
    if (is_other_side(c)) {
      EXPECT_EQ(g, 0.0) << "CL reached " << component_name(c);
    }
  for (const auto& [c, g] : ol) {
    if (is_content_side(c) || c == Component::regularizer) {
      EXPECT_EQ(g, 0.0) << "OL reached " << component_name(c);
    }
  }
  for (const auto& [c, g] : rl) {
    if (is_content_side(c) || c == Component::post_asp || c == Component::post_bn || c == Component::post_fc) {
      EXPECT_EQ(g, 0.0) << "RL reached " << component_name(c);
    }
  }
  EXPECT_GT(cl.at(Component::shared), 0.0);
  EXPECT_GT(cl.at(Component::content), 0.0);
  EXPECT_GT(ol.at(Component::shared), 0.0);
  EXPECT_GT(ol.at(Component::other), 0.0);
  EXPECT_GT(rl.at(Component::shared), 0.0);
  EXPECT_GT(rl.at(Component::regularizer), 0.0);
}

// Flipping the reversal coefficient negates every gradient upstream of the
// regularizer and leaves the regularizer's own gradients unchanged.
TEST_P(LossSeparation, ReversalFlipsUpstreamGradients) {
  auto cfg = micro_config();
  JoociModel<double> a(cfg, GetParam());
  cfg.grl_lambda = -1.0;
  JoociModel<double> b(cfg, GetParam());
  const auto batch = micro_batch(a, GetParam());
  for (auto* m : {&a, &b}) {
    Tape<double> tape;
    backward(tape, micro_losses(*m, batch).rl);
  }
  auto& pa = a.registry().params();
  auto& pb = b.registry().params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!pa[i].tensor.has_grad()) {
      EXPECT_FALSE(pb[i].tensor.has_grad() && abs_grad(pb[i]) > 0) << pa[i].name;
      continue;
    }
    const double sign = pa[i].component == Component::regularizer ? 1.0 : -1.0;
    for (std::size_t k = 0; k < pa[i].tensor.numel(); ++k)
      ASSERT_EQ(pa[i].tensor.grad()[k], sign * pb[i].tensor.grad()[k])
          << pa[i].name << "[" << k << "]";
  }
}

// Finite differences over every parameter each term is meant to train.
// The reversal is turned into an identity for RL so that the numeric and
// analytic derivatives agree.
TEST_P(LossSeparation, MicroModelGradcheck) {
  auto cfg = micro_config();
  JoociModel<double> m(cfg, GetParam());
  const auto b = micro_batch(m, GetParam());
  auto r = grad_check([&] { return micro_losses(m, b).cl; }, params_where(m, content_path), sampled(GetParam()));
  EXPECT_LT(r.max_rel_error, 1e-4) << "CL " << r.worst_tensor << "[" << r.worst_index << "]";
  r = grad_check([&] { return micro_losses(m, b).ol; }, params_where(m, other_path), sampled(GetParam()));
  EXPECT_LT(r.max_rel_error, 1e-4) << "OL " << r.worst_tensor << "[" << r.worst_index << "]";
  cfg.grl_lambda = -1.0;
  JoociModel<double> id(cfg, GetParam());
  r = grad_check([&] { return micro_losses(id, b).rl; }, params_where(id, reg_path), sampled(GetParam()));
  EXPECT_LT(r.max_rel_error, 1e-4) << "RL " << r.worst_tensor << "[" << r.worst_index << "]";
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossSeparation, ::testing::Values(1, 2, 3));

TEST(Mmpl, SumsOneTermPerLabelSet) {
  JoociModel<double> m(micro_config(), 4);
  const auto b = micro_batch(m, 4);
  ForwardOptions fo;
  fo.mask_seed = 5;
  auto f = m.forward(b.wave, fo);
  std::map<int, double> per_layer;
  const double total = mmpl(f.content_layers, f.mask, m, b.labels, &per_layer).item();
  double sum = 0;
  for (auto [layer, v] : per_layer) sum += v;
  EXPECT_EQ(per_layer.size(), m.label_layers().size());
  EXPECT_NEAR(total, sum, 1e-12);
  EXPECT_THROW(mmpl(f.content_layers, f.mask, m, {b.labels[0]}), std::invalid_argument);
}
