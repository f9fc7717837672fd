#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "gradient_cases.hpp"
#include "natf/autograd.hpp"
#include "natf/optim.hpp"

namespace natf {
namespace {

Var<double> row(std::initializer_list<double> v, bool grad = false) {
  return Var<double>::leaf(Tensor<double>(Shape{1, v.size()}, std::vector<double>(v)), grad);
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), UsageError);
  EXPECT_THROW(Tensor<float>(Shape{0, 3}), UsageError);
  const auto m = Tensor<float>::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(m(1, 0), 3.0f);
  EXPECT_EQ(m.rows(), 2u);
}

TEST(Softmax, SymmetricPair) {
  Graph<double> g;
  const auto out = g.softmax(row({0, 0}), 1).value();
  EXPECT_DOUBLE_EQ(out[0], 0.5);
  EXPECT_DOUBLE_EQ(out[1], 0.5);
}

TEST(Softmax, ReferenceValues) {
  Graph<double> g;
  const auto out = g.softmax(row({1, 2, 3}), 1).value();
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(out[0], 0.09003, 1e-5);
  EXPECT_NEAR(out[1], 0.24473, 1e-5);
  EXPECT_NEAR(out[2], 0.66524, 1e-5);
  EXPECT_NEAR(out[2], std::exp(3.0) / z, 1e-12);
}

TEST(Softmax, ShiftInvariantAndStochastic) {
  Graph<float> g;
  Rng rng(3);
  Tensor<float> x(Shape{4, 7});
  for (auto& v : x.storage()) v = static_cast<float>(rng.uniform(-5, 5));
  Tensor<float> shifted = x;
  for (auto& v : shifted.storage()) v += 1000.0f;
  const auto a = g.softmax(g.constant(x), 1).value();
  const auto b = g.softmax(g.constant(shifted), 1).value();
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      s += a(r, c);
      EXPECT_GE(a(r, c), 0.0f);
      EXPECT_NEAR(a(r, c), b(r, c), 1e-4);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, NonFiniteInputThrows) {
  Graph<double> g;
  EXPECT_THROW(g.softmax(row({1.0, std::numeric_limits<double>::quiet_NaN()}), 1), NumericError);
  EXPECT_THROW(g.log_softmax(row({std::numeric_limits<double>::infinity(), 0.0})), NumericError);
  EXPECT_THROW(g.softmax(row({1.0, 2.0}), 2), UsageError);
}

TEST(LayerNorm, Examples) {
  Graph<double> g;
  const auto one = Var<double>::leaf(Tensor<double>(Shape{2}, 1.0));
  const auto zero = Var<double>::leaf(Tensor<double>(Shape{2}, 0.0));
  const auto a = g.layer_norm(row({1, -1}), one, zero, 1e-5).value();
  EXPECT_NEAR(a[0], 1.0, 1e-5);
  EXPECT_NEAR(a[1], -1.0, 1e-5);
  const auto b = g.layer_norm(row({5, 5}), one, zero, 1e-5).value();
  EXPECT_NEAR(b[0], 0.0, 1e-9);
  EXPECT_NEAR(b[1], 0.0, 1e-9);

  const auto two = Var<double>::leaf(Tensor<double>(Shape{3}, 2.0));
  const auto bias = Var<double>::leaf(Tensor<double>(Shape{3}, 1.0));
  const auto c = g.layer_norm(row({0, 2, 4}), two, bias, 1e-5).value();
  const double var = 8.0 / 3.0;
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(c[i], 2.0 * (2.0 * i - 2.0) / std::sqrt(var + 1e-5) + 1.0, 1e-12);
  }
}

TEST(CrossEntropy, OneHotAndUniform) {
  Graph<double> g;
  const auto onehot = Var<double>::leaf(Tensor<double>::matrix(1, 3, {-1e9, 0.0, -1e9}));
  const std::vector<std::int32_t> t1{1};
  EXPECT_DOUBLE_EQ(g.cross_entropy(onehot, t1, -1).item(), 0.0);

  const double lv = -std::log(5.0);
  const auto uni = Var<double>::leaf(Tensor<double>(Shape{3, 5}, lv));
  const std::vector<std::int32_t> t3{1, 4, 2};
  EXPECT_NEAR(g.cross_entropy(uni, t3, -1).item(), std::log(5.0), 1e-12);
}

TEST(CrossEntropy, HandComputedTwoPositions) {
  Graph<double> g;
  const auto lp = Var<double>::leaf(
      Tensor<double>::matrix(2, 3, {std::log(0.2), std::log(0.5), std::log(0.3), std::log(0.6), std::log(0.1), std::log(0.3)}));
  const std::vector<std::int32_t> t{1, 0};
  EXPECT_NEAR(g.cross_entropy(lp, t, -1).item(), -(std::log(0.5) + std::log(0.6)) / 2.0, 1e-12);
  EXPECT_NEAR(g.cross_entropy(lp, t, -1, Reduction::kSum).item(), -(std::log(0.5) + std::log(0.6)), 1e-12);
}

TEST(CrossEntropy, PadExcludedAndRangeChecked) {
  Graph<double> g;
  const auto lp = Var<double>::leaf(Tensor<double>::matrix(2, 3, {-1, -2, -3, -4, -5, -6}));
  const std::vector<std::int32_t> t{2, 0};
  EXPECT_DOUBLE_EQ(g.cross_entropy(lp, t, 0).item(), 3.0);
  const std::vector<std::int32_t> bad{3, 1};
  EXPECT_THROW(g.cross_entropy(lp, bad, 0), UsageError);
}

TEST(Backward, SumGivesOnes) {
  Graph<double> g;
  auto x = Var<double>::leaf(Tensor<double>(Shape{2, 3}, 0.5), true);
  g.backward(g.sum(x));
  const Tensor<double> grad = x.grad();
  for (double v : grad.values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, IdentityChainPassesUpstream) {
  Graph<double> g;
  auto x = Var<double>::leaf(Tensor<double>(Shape{3}, 2.0), true);
  const Tensor<double> w(Shape{3}, std::vector<double>{1.0, -2.0, 0.5});
  g.backward(g.dot(g.scale(g.scale(x, 1.0), 1.0), w));
  EXPECT_EQ(x.grad().storage(), w.storage());
}

TEST(Backward, TwiceDoublesGradients) {
  Graph<double> g;
  auto x = Var<double>::leaf(Tensor<double>(Shape{2}, std::vector<double>{1.0, 3.0}), true);
  const auto loss = g.sum(g.mul(x, x));
  g.backward(loss);
  const auto once = x.grad();
  g.backward(loss);
  EXPECT_EQ(x.grad()[0], 2.0 * once[0]);
  EXPECT_EQ(x.grad()[1], 2.0 * once[1]);
}

TEST(Backward, NonScalarLossThrows) {
  Graph<double> g;
  auto x = Var<double>::leaf(Tensor<double>(Shape{2}, 1.0), true);
  EXPECT_THROW(g.backward(g.scale(x, 2.0)), UsageError);
}

TEST(Backward, DeterministicReductions) {
  auto run = [] {
    Rng rng(11);
    Graph<float> g;
    Tensor<float> x(Shape{16, 33});
    for (auto& v : x.storage()) v = static_cast<float>(rng.normal());
    auto xv = Var<float>::leaf(x, true);
    const auto loss = g.sum(g.softmax(g.matmul(xv, g.constant(x.reshaped({33, 16}))), 1));
    g.backward(loss);
    return std::pair{loss.item(), xv.grad().storage()};
  };
  EXPECT_EQ(run(), run());
}

TEST(GradientCheck, PrimitiveOps) {
  for (const auto& c : testing::primitive_gradient_cases()) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      EXPECT_LT(c.run(seed).max_relative_error, 1e-4) << c.name << " seed " << seed;
    }
  }
}

TEST(GradientCheck, Blocks) {
  for (const auto& c : testing::block_gradient_cases()) {
    const auto r = c.run(5);
    EXPECT_LT(r.max_relative_error, 1e-4) << c.name << " param " << r.worst_param;
  }
}

TEST(Adam, WarmupSchedule) {
  EXPECT_LT(warmup_rate(1.0, 1, 746), warmup_rate(1.0, 746, 746));
  for (std::size_t t = 747; t < 2000; t += 50) {
    EXPECT_GT(warmup_rate(1.0, t, 746), warmup_rate(1.0, t + 1, 746));
  }
  EXPECT_DOUBLE_EQ(warmup_rate(2.0, 746, 746), 2.0 / std::sqrt(746.0));
}

TEST(Adam, HandComputedScalarStep) {
  auto p = Var<float>::leaf(Tensor<float>::scalar(0.5f), true);
  p.node()->grad_buffer()[0] = 1.0f;
  AdamConfig cfg;
  AdamWarmup<float> opt({p}, cfg);
  opt.step();
  // m = 0.1, v = 0.02; bias corrected m_hat = 1, v_hat = 1
  const double rate = std::min(1.0, std::pow(746.0, -1.5));
  const double expected = 0.5 - rate * 1.0 / (1.0 + 1e-9);
  EXPECT_NEAR(p.item(), expected, 1e-7);
  EXPECT_DOUBLE_EQ(opt.last_rate(), rate);
  EXPECT_EQ(opt.t(), 1u);
  EXPECT_NEAR(opt.moments()[0].first[0], 0.1, 1e-12);
  EXPECT_NEAR(opt.moments()[0].second[0], 0.02, 1e-12);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<float> param(3), grad(2);
  AdamMoments<float> m;
  m.first.assign(3, 0.0);
  m.second.assign(3, 0.0);
  EXPECT_THROW(adam_update<float>(param, grad, m, 1, 0.1, AdamConfig{}), UsageError);
}

}  // namespace
}  // namespace natf
