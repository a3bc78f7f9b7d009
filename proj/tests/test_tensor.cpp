#include <gtest/gtest.h>

#include <cstdint>

#include "jooci/gradcheck.hpp"
#include "jooci/ops.hpp"

using namespace jooci;

TEST(Tensor, CopiesAliasStorage) {
  Tensor<float> a(Shape{2, 3}, 1.0f);
  Tensor<float> b = a;
  b[4] = 7.0f;
  EXPECT_EQ(a[4], 7.0f);
  auto c = a.clone();
  c[4] = 0.0f;
  EXPECT_EQ(a[4], 7.0f);
}

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), std::invalid_argument);
}

TEST(Tape, NoRecordingWithoutTape) {
  Tensor<double> a(Shape{3}, 2.0);
  a.set_requires_grad(true);
  auto s = sum(mul(a, a));
  EXPECT_FALSE(s.requires_grad());
  EXPECT_DOUBLE_EQ(s.item(), 12.0);
}

TEST(Tape, BackwardAccumulatesThroughSharedInputs) {
  Tensor<double> a(Shape{3}, std::vector<double>{1, 2, 3});
  a.set_requires_grad(true);
  Tape<double> tape;
  auto y = sum(add(mul(a, a), a));  // d/da = 2a + 1
  backward(tape, y);
  ASSERT_TRUE(a.has_grad());
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], 5.0);
  EXPECT_DOUBLE_EQ(a.grad()[2], 7.0);
}

TEST(Tape, NoGradSuspendsRecording) {
  Tensor<double> a(Shape{2}, 1.0);
  a.set_requires_grad(true);
  Tape<double> tape;
  {
    NoGrad<double> guard;
    auto y = sum(a);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
  auto z = sum(a);
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Tape, NonScalarLossRejected) {
  Tensor<double> a(Shape{2}, 1.0);
  a.set_requires_grad(true);
  Tape<double> tape;
  auto y = scale(a, 2.0);
  EXPECT_THROW(backward(tape, y), std::invalid_argument);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tensor<double> a(Shape{2}, 1.0), c(Shape{2}, 3.0);
  a.set_requires_grad(true);
  Tape<double> tape;
  backward(tape, sum(mul(a, c)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
}

TEST(Tensor, StorageIsCacheLineAligned) {
  for (std::size_t n : {1u, 3u, 17u, 1000u}) {
    Tensor<float> t(Shape{n});
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.data().data()) % 64, 0u);
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.mutable_grad().data()) % 64, 0u);
  }
}

TEST(GradCheck, DetectsWrongGradient) {
  Tensor<double> x(Shape{3}, std::vector<double>{0.5, -1.0, 2.0});
  auto r = grad_check([&] { return sum(mul(grad_reverse(x), x)); }, {{"x", x}});
  EXPECT_NEAR(r.max_rel_error, 1.0, 1e-6);  // analytic 0 vs numeric 2x
}

// x^4 at x = 1: the three-point stencil is off by 4 eps^2, the five-point one
// is exact for quartics up to rounding.
TEST(GradCheck, FivePointStencilRemovesCurvatureError) {
  Tensor<double> x(Shape{1}, 1.0);
  auto quartic = [&] { auto sq = mul(x, x); return sum(mul(sq, sq)); };
  GradCheckOptions o;
  o.eps = 1e-2;
  auto r = grad_check(quartic, {{"x", x}}, o);
  EXPECT_NEAR(r.numeric, 4.0 + 4e-4, 1e-9);
  o.fourth_order = true;
  r = grad_check(quartic, {{"x", x}}, o);
  EXPECT_NEAR(r.numeric, 4.0, 1e-9);
  EXPECT_LT(r.max_rel_error, 1e-9);
}
