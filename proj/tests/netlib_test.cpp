#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include <reff/grad_check.hpp>
#include <reff/nn/annotator.hpp>
#include <reff/nn/classifier.hpp>
#include <reff/nn/loss.hpp>
#include <reff/nn/optim.hpp>

#include "test_util.hpp"

using namespace reff;
using namespace reff::nn;
using reff::test::random_tensor;

namespace {
// Zero biases plus dead units give exact zeros, i.e. points on relu kinks.
template <class P>
void randomize_biases(P params, Rng& rng) {
  for (auto& p : params)
    if (p.name.ends_with(".bias"))
      for (auto& v : p.value->mutable_data()) v = rng.uniform(0.05, 0.3);
}
}  // namespace

TEST(Classifier, ZeroInputGivesUniformLogits) {
  ClassifierNet<float> net(ClassifierConfig{}, 0);
  auto out = net.forward(Tensor<float>({2, 3, 32, 32}));
  for (std::size_t i = 0; i < out.logits.size(); ++i) EXPECT_EQ(out.logits[i], out.logits[0]);
  Tensor<float> p = softmax(out.logits);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], 0.1f, 1e-6);
}

TEST(Classifier, TapShapesFollowStrideArithmetic) {
  ClassifierNet<float> net(ClassifierConfig{}, 0);
  Rng rng(1);
  auto out = net.forward(random_tensor<float>(rng, {2, 3, 64, 64}, 0, 1));
  EXPECT_EQ(out.logits.shape(), (Shape{2, 10}));
  const std::size_t widths[] = {16, 32, 64, 128};
  ASSERT_EQ(out.taps.size(), 4u);
  for (int l = 1; l <= 4; ++l)
    EXPECT_EQ(out.tap(l).shape(), (Shape{2, widths[l - 1], 64u >> l, 64u >> l}));
}

TEST(Classifier, TapSubsetAndErrors) {
  ClassifierConfig cfg;
  cfg.taps = {4};
  ClassifierNet<float> net(cfg, 0);
  auto out = net.forward(Tensor<float>({1, 3, 16, 16}));
  ASSERT_EQ(out.taps.size(), 1u);
  EXPECT_THROW(out.tap(2), ValueError);
  EXPECT_THROW(net.forward(Tensor<float>({1, 3, 24, 24})), ShapeError);
  EXPECT_THROW(net.forward(Tensor<float>({1, 1, 16, 16})), ShapeError);
  cfg.taps = {5};
  EXPECT_THROW(ClassifierNet<float>(cfg, 0), ConfigError);
}

TEST(Classifier, DeterministicForFixedSeed) {
  ClassifierConfig cfg;
  cfg.widths = {8, 8};
  cfg.taps = {1, 2};
  Rng rng(2);
  Tensor<float> x = random_tensor<float>(rng, {1, 3, 4, 4}, 0, 1);
  auto a = ClassifierNet<float>(cfg, 0).forward(x).logits;
  auto b = ClassifierNet<float>(cfg, 0).forward(x).logits;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Classifier, DefaultParameterCountIsPinned) {
  ClassifierNet<float> net(ClassifierConfig{}, 0);
  // 3->16, 16->32, 32->64, 64->128 3x3 convs with bias, then 128->10 dense.
  EXPECT_EQ(parameter_count(net.parameters()), 98730u);
}

TEST(Classifier, ComposedGradientsMatchCentralDifferences) {
  ClassifierConfig cfg;
  cfg.widths = {3, 4};
  cfg.num_classes = 3;
  cfg.taps = {1, 2};
  ClassifierNet<double> net(cfg, 3);
  Rng rng(4);
  randomize_biases(net.parameters(), rng);
  Tensor<double> x = random_tensor(rng, {2, 3, 8, 8}, 0, 1);
  const std::vector<int> y{0, 2};
  auto params = net.parameters();
  for (auto& p : params) {
    Tensor<double> saved = p.value->clone();
    auto f = [&](const Tensor<double>& v) {
      *p.value = v;
      Tensor<double> loss = cross_entropy(net.forward(x).logits, std::span<const int>(y));
      return loss;
    };
    auto r = grad_check(f, saved, 1e-5, 1e-4);
    *p.value = saved;
    EXPECT_TRUE(r.passed) << p.name << " rel " << r.max_rel_error;
  }
}

TEST(CrossEntropy, UniformLogits) {
  Tensor<double> z({4, 10}, 0.3);
  const std::vector<int> y{0, 3, 9, 5};
  EXPECT_NEAR(cross_entropy(z, std::span<const int>(y)).item(), std::log(10.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginApproachesZero) {
  // loss = log(1 + (C-1) e^-20): below 1e-8 for C <= 5.
  for (std::size_t C : {2u, 5u}) {
    Tensor<double> z({1, C}, 0.0);
    z.mutable_data()[1] = 20.0;
    const std::vector<int> y{1};
    EXPECT_LT(cross_entropy(z, std::span<const int>(y)).item(), 1e-8) << C;
  }
}

TEST(CrossEntropy, MatchesExplicitFormula) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> z = random_tensor(rng, {6, 10}, -5, 5);
    std::vector<int> y(6);
    for (auto& v : y) v = static_cast<int>(rng.below(10));
    double oracle = 0;
    for (std::size_t b = 0; b < 6; ++b) {
      double den = 0;
      for (std::size_t c = 0; c < 10; ++c) den += std::exp(z[b * 10 + c]);
      oracle += -std::log(std::exp(z[b * 10 + static_cast<std::size_t>(y[b])]) / den);
    }
    EXPECT_NEAR(cross_entropy(z, std::span<const int>(y)).item(), oracle / 6, 1e-6);
  }
}

TEST(CrossEntropy, RejectsOutOfRangeLabel) {
  const std::vector<int> y{10};
  EXPECT_THROW(cross_entropy(Tensor<double>({1, 10}), std::span<const int>(y)), ValueError);
}

namespace {
std::vector<ParamRef<double>> single(Tensor<double>& p) { return {{"p", &p}}; }
}  // namespace

TEST(Optimizer, PlainSgdStep) {
  Tensor<double> p({1}, 1.0);
  auto params = single(p);
  Optimizer<double> opt(MomentumSgdConfig{0.1, 0.0, 0.0});
  opt.step(params, {Tensor<double>({1}, 1.0)});
  EXPECT_NEAR(p[0], 0.9, 1e-15);
}

TEST(Optimizer, MomentumRecurrence) {
  Tensor<double> p({1}, 0.0);
  auto params = single(p);
  Optimizer<double> opt(MomentumSgdConfig{1.0, 0.8, 0.0});
  opt.step(params, {Tensor<double>({1}, 1.0)});
  EXPECT_NEAR(opt.state_a()[0][0], 1.0, 1e-15);
  opt.step(params, {Tensor<double>({1}, 1.0)});
  EXPECT_NEAR(opt.state_a()[0][0], 1.8, 1e-15);
  EXPECT_NEAR(p[0], -2.8, 1e-15);
}

TEST(Optimizer, WeightDecayEntersVelocity) {
  Tensor<double> p({1}, 2.0);
  auto params = single(p);
  Optimizer<double> opt(MomentumSgdConfig{0.5, 0.0, 0.1});
  opt.step(params, {Tensor<double>({1}, 0.0)});
  EXPECT_NEAR(p[0], 2.0 - 0.5 * 0.2, 1e-15);
}

TEST(Optimizer, AdamFirstStep) {
  Tensor<double> p({1}, 1.0);
  auto params = single(p);
  Optimizer<double> opt(AdamConfig{});
  opt.step(params, {Tensor<double>({1}, 1.0)});
  // mhat = 1, vhat = 1: step = lr / (1 + eps).
  EXPECT_NEAR(p[0] - 1.0, -2e-4, 1e-6);
  EXPECT_NEAR(p[0] - 1.0, -2e-4 / (1 + 1e-8), 1e-15);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Optimizer, ShapeMismatch) {
  Tensor<double> p({2}, 1.0);
  auto params = single(p);
  Optimizer<double> opt(MomentumSgdConfig{});
  EXPECT_THROW(opt.step(params, {Tensor<double>({3})}), ShapeError);
  EXPECT_THROW(opt.step(params, {}), ShapeError);
}

TEST(Training, SmallStepDecreasesCrossEntropy) {
  int failures = 0;
  ClassifierConfig cfg;
  cfg.widths = {8, 16};
  cfg.taps = {2};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ClassifierNet<float> net(cfg, seed);
    Rng rng(seed + 100);
    Tensor<float> x = random_tensor<float>(rng, {8, 3, 16, 16}, 0, 1);
    std::vector<int> y(8);
    for (auto& v : y) v = static_cast<int>(rng.below(10));
    auto params = net.parameters();
    Optimizer<float> opt(MomentumSgdConfig{1e-3, 0.8, 1e-5});
    float before;
    {
      Tape<float> tape;
      Bound<float> bound(params, tape);
      Tensor<float> loss = cross_entropy(net.forward(x).logits, std::span<const int>(y));
      before = loss.item();
      auto grads = tape.grad(loss, std::span<const Tensor<float>>(bound.tracked()));
      opt.step(params, grads);
    }
    const float after = cross_entropy(net.forward(x).logits, std::span<const int>(y)).item();
    if (!(after < before)) ++failures;
  }
  EXPECT_LE(failures, 2);
}

TEST(Annotator, OutputInUnitIntervalAndShape) {
  AnnotatorNet<float> net(AnnotatorConfig{}, 0);
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<float> x = random_tensor<float>(rng, {2, 3, 32, 32}, -10, 10);
    Tensor<float> m = net.forward(x);
    ASSERT_EQ(m.shape(), (Shape{2, 1, 32, 32}));
    for (float v : m.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
  EXPECT_THROW(net.forward(Tensor<float>({1, 3, 12, 12})), ShapeError);
}

TEST(Annotator, GradientsMatchCentralDifferences) {
  AnnotatorConfig cfg;
  cfg.widths = {2, 3};
  AnnotatorNet<double> net(cfg, 1);
  Rng rng(8);
  randomize_biases(net.parameters(), rng);
  Tensor<double> x = random_tensor(rng, {1, 3, 4, 4}, 0, 1);
  Tensor<double> s = random_tensor(rng, {1, 1, 4, 4}, 0, 1);
  for (auto& p : net.parameters()) {
    Tensor<double> saved = p.value->clone();
    auto f = [&](const Tensor<double>& v) {
      *p.value = v;
      return add(bce_with_logits(net.logits(x), s), l1_loss(net.forward(x), s));
    };
    auto r = grad_check(f, saved);
    *p.value = saved;
    EXPECT_TRUE(r.passed) << p.name << " " << r.max_rel_error;
  }
}

TEST(Losses, BceMatchesFormula) {
  Rng rng(9);
  Tensor<double> z = random_tensor(rng, {1, 1, 3, 3}, -30, 30);
  Tensor<double> s = random_tensor(rng, {1, 1, 3, 3}, 0, 1);
  double oracle = 0;
  for (std::size_t i = 0; i < 9; ++i) {
    const double p = 1 / (1 + std::exp(-z[i]));
    oracle -= s[i] * std::log(p) + (1 - s[i]) * std::log1p(-p);
  }
  EXPECT_NEAR(bce_with_logits(z, s).item(), oracle / 9, 1e-6);
}

TEST(Discriminator, ChannelScheduleAndOutputMap) {
  PatchDiscriminator<float> d(3, 0);
  const std::size_t expect[] = {64, 128, 256, 512, 1};
  ASSERT_EQ(d.layers().size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(d.layers()[i].weight.dim(0), expect[i]);
  auto out = d.forward(Tensor<float>({2, 3, 32, 32}), Tensor<float>({2, 1, 32, 32}));
  EXPECT_EQ(out.rank(), 4u);
  EXPECT_EQ(out.dim(1), 1u);
  EXPECT_GT(out.dim(2), 1u);
}
