#include <gtest/gtest.h>

#include <cmath>

#include <reff/gradcam.hpp>

#include "test_util.hpp"

using namespace reff;
using reff::test::random_tensor;
using reff::test::tensor_of;

namespace {

// Direct loops over the definitions, independent of the tensor ops.
std::vector<double> cam_oracle(const Tensor<double>& a, const Tensor<double>& alpha) {
  const std::size_t B = a.dim(0), K = a.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<double> out(B * hw, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += alpha[b * K + k] * a[(b * K + k) * hw + p];
      out[b * hw + p] = s > 0 ? s : 0;
    }
  return out;
}

double bilinear_oracle(const Tensor<double>& m, std::size_t plane, std::size_t H, std::size_t W, std::size_t y,
                       std::size_t x) {
  const std::size_t h = m.dim(2), w = m.dim(3);
  auto src = [](std::size_t i, std::size_t in, std::size_t out) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  const double sy = src(y, h, H), sx = src(x, w, W);
  const std::size_t y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
  auto at = [&](std::size_t i, std::size_t j) { return m[plane * h * w + i * w + j]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace

TEST(Alpha, LinearProbeRecoversCoefficient) {
  Rng rng(3);
  for (double c : {0.5, -2.0, 3.25}) {
    Tape<double> tape;
    Tensor<double> a = tape.variable(random_tensor(rng, {1, 2, 3, 3}));
    // logit 0 = c * sum of channel 0, logit 1 ignores A entirely.
    Tensor<double> l0 = reshape(scale(sum(slice(a, 1, 0, 1)), c), {1, 1});
    Tensor<double> l1 = reshape(scale(sum(a), 0.0), {1, 1});
    Tensor<double> logits = concat(l0, l1, 1);
    const int y0[] = {0};
    Tensor<double> alpha = compute_alpha(tape, logits, y0, a);
    ASSERT_EQ(alpha.shape(), (Shape{1, 2}));
    EXPECT_NEAR(alpha[0], c, 1e-12);
    EXPECT_EQ(alpha[1], 0.0);
    const int y1[] = {1};
    Tensor<double> zero = compute_alpha(tape, logits, y1, a);
    EXPECT_EQ(zero[0], 0.0);
    EXPECT_EQ(zero[1], 0.0);
  }
}

TEST(Alpha, MatchesFiniteDifferenceMeanGradient) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    nn::Conv2d<double> conv(3, 4, 3, Conv2dParams{1, 1}, rng);
    nn::Dense<double> head(4, 3, rng);
    auto score = [&](const Tensor<double>& a) { return head(nn::global_avg_pool(relu(conv(a)))); };
    Tensor<double> a0 = random_tensor(rng, {1, 3, 4, 4});
    const int y[] = {static_cast<int>(seed % 3)};

    Tape<double> tape;
    Tensor<double> a = tape.variable(a0);
    Tensor<double> alpha = compute_alpha(tape, score(a), y, a);

    const double h = 1e-6;
    for (std::size_t k = 0; k < 3; ++k) {
      double mean = 0;
      for (std::size_t p = 0; p < 16; ++p) {
        Tensor<double> ap = a0.clone(), am = a0.clone();
        ap.mutable_data()[k * 16 + p] += h;
        am.mutable_data()[k * 16 + p] -= h;
        mean += (score(ap)[y[0]] - score(am)[y[0]]) / (2 * h);
      }
      EXPECT_NEAR(alpha[k], mean / 16, 1e-6) << "seed " << seed << " channel " << k;
    }
  }
}

TEST(Alpha, RejectsUntrackedMapsAndFullModeOnFirstOrderTape) {
  Tape<double> tape;
  Tensor<double> a = tape.variable(Tensor<double>({1, 1, 2, 2}, 1.0));
  Tensor<double> logits = reshape(sum(a), {1, 1});
  const int y[] = {0};
  EXPECT_THROW(compute_alpha(tape, logits, y, Tensor<double>({1, 1, 2, 2})), TapeError);
  EXPECT_THROW(compute_alpha(tape, logits, y, a, CamOptions{DiffMode::Full}), TapeError);
}

TEST(Cam, HandCases) {
  Tensor<double> a = tensor_of<double>({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> cam = compute_cam(a, tensor_of<double>({1, 1}, {1}));
  Tensor<double> n = normalize_cam(cam);
  const double want[] = {0.1, 0.2, 0.3, 0.4};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(n[i], want[i], 1e-15);

  Tensor<double> neg = compute_cam(a, tensor_of<double>({1, 1}, {-1}));
  for (double v : neg.data()) EXPECT_EQ(v, 0.0);
  Tensor<double> nn = normalize_cam(neg);
  for (double v : nn.data()) EXPECT_EQ(v, 0.0);

  // Two channels that cancel exactly.
  Tensor<double> two = tensor_of<double>({1, 2, 1, 2}, {1, 2, 1, 2});
  Tensor<double> zero = compute_cam(two, tensor_of<double>({1, 2}, {1, -1}));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(Cam, MatchesLoopOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 1 + rng.below(3), K = 1 + rng.below(5), h = 1 + rng.below(6), w = 1 + rng.below(6);
    Tensor<double> a = random_tensor(rng, {B, K, h, w}, 0, 2);
    Tensor<double> alpha = random_tensor(rng, {B, K});
    Tensor<double> cam = compute_cam(a, alpha);
    ASSERT_EQ(cam.shape(), (Shape{B, 1, h, w}));
    auto want = cam_oracle(a, alpha);
    for (std::size_t i = 0; i < want.size(); ++i) {
      EXPECT_NEAR(cam[i], want[i], 1e-12);
      EXPECT_GE(cam[i], 0.0);
    }
  }
}

TEST(Cam, RejectsMismatchedWeights) {
  EXPECT_THROW(compute_cam(Tensor<double>({1, 3, 2, 2}), Tensor<double>({1, 2})), ShapeError);
  EXPECT_THROW(compute_cam(Tensor<double>({2, 3, 2, 2}), Tensor<double>({1, 3})), ShapeError);
}

TEST(Normalize, SumsToOneOrStaysZero) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 1 + rng.below(4), h = 1 + rng.below(8), w = 1 + rng.below(8);
    Tensor<double> cam = random_tensor(rng, {B, 1, h, w}, 0, 3);
    if (trial % 5 == 0)
      for (std::size_t i = 0; i < h * w; ++i) cam.mutable_data()[i] = 0;
    Tensor<double> n = normalize_cam(cam);
    for (std::size_t b = 0; b < B; ++b) {
      double s = 0, raw = 0;
      for (std::size_t i = 0; i < h * w; ++i) {
        s += n[b * h * w + i];
        raw += cam[b * h * w + i];
        EXPECT_GE(n[b * h * w + i], 0.0);
      }
      if (raw == 0)
        EXPECT_EQ(s, 0.0);
      else
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Normalize, RejectsNegativeEntries) {
  EXPECT_THROW(normalize_cam(tensor_of<double>({1, 1, 1, 2}, {1, -0.5})), ValueError);
}

TEST(Normalize, InvariantToPositiveRescaling) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> a = random_tensor(rng, {2, 4, 3, 3}, 0, 1);
    Tensor<double> alpha = random_tensor(rng, {2, 4});
    const double c = rng.uniform(0.1, 10.0);
    Tensor<double> base = normalize_cam(compute_cam(a, alpha));
    Tensor<double> scaled = normalize_cam(compute_cam(scale(a, c), scale(alpha, 1 / c)));
    Tensor<double> scaled2 = normalize_cam(compute_cam(a, scale(alpha, c)));
    for (std::size_t i = 0; i < base.size(); ++i) {
      EXPECT_NEAR(base[i], scaled[i], 1e-6);
      EXPECT_NEAR(base[i], scaled2[i], 1e-6);
    }
  }
}

TEST(Resize, ConstantAndSinglePixel) {
  Tensor<double> c({1, 1, 3, 5}, 0.25);
  Tensor<double> r = resize_cam(c, 64, 64);
  for (double v : r.data()) EXPECT_NEAR(v, 0.25, 1e-15);
  Tensor<double> one = resize_cam(tensor_of<double>({1, 1, 1, 1}, {0.7}), 5, 9);
  for (double v : one.data()) EXPECT_NEAR(v, 0.7, 1e-15);
}

TEST(Resize, TwoByTwoToFourByFour) {
  Tensor<double> m = tensor_of<double>({1, 1, 2, 2}, {0, 1, 2, 3});
  Tensor<double> r = resize_cam(m, 4, 4);
  // Source coordinates per axis: -0.25 -> 0, 0.25, 0.75, 1.25 -> 1.
  const double t[] = {0, 0.25, 0.75, 1};
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_NEAR(r[y * 4 + x], 2 * t[y] + t[x], 1e-15) << y << "," << x;
}

TEST(Resize, MatchesOracleAndPreservesRange) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t h = 1 + rng.below(6), w = 1 + rng.below(6);
    const std::size_t H = h + rng.below(20), W = w + rng.below(20);
    Tensor<double> m = random_tensor(rng, {2, 1, h, w}, 0, 1);
    Tensor<double> r = resize_cam(m, H, W);
    double lo = 1e9, hi = -1e9;
    for (double v : m.data()) lo = std::min(lo, v), hi = std::max(hi, v);
    for (std::size_t p = 0; p < 2; ++p)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double v = r[(p * H + y) * W + x];
          EXPECT_NEAR(v, bilinear_oracle(m, p, H, W, y, x), 1e-12);
          EXPECT_GE(v, lo - 1e-12);
          EXPECT_LE(v, hi + 1e-12);
        }
  }
}

TEST(Resize, RejectsBadTargets) {
  Tensor<double> m({1, 1, 4, 4});
  EXPECT_THROW(resize_cam(m, 0, 8), ShapeError);
  EXPECT_THROW(resize_cam(m, 2, 8), ShapeError);
}

TEST(Explain, ProbePeakLandsOnReceptiveFieldCenter) {
  // 16 channels on a 4x4 grid; channel k is an indicator of cell k scaled by
  // the image mean. Logit y reads cell (i, j) of its own channel.
  for (std::size_t cell : {0u, 5u, 10u, 15u}) {
    Tape<double> tape;
    Rng rng(cell);
    Tensor<double> x = tape.variable(random_tensor(rng, {1, 3, 64, 64}, 0.5, 1));
    Tensor<double> onehot({1, 16, 4, 4});
    for (std::size_t k = 0; k < 16; ++k) onehot.mutable_data()[k * 16 + k] = 1;
    Tensor<double> a4 = mul(onehot, expand(reshape(mean(x), {1, 1, 1, 1}), onehot.shape()));
    Tensor<double> flat = reshape(a4, {1, 256});
    const std::vector<std::size_t> idx{cell * 16 + cell};
    Tensor<double> logits = gather_flat(flat, std::make_shared<const std::vector<std::size_t>>(idx), Shape{1, 1});
    nn::ClassifierOutput<double> out{logits, {{4, a4}}};
    const int y[] = {0};
    auto maps = explain_output(tape, out, y, {4}, 64, 64);
    ASSERT_EQ(maps.size(), 1u);
    const auto& r = maps[0].resized;
    double peak = 0;
    for (double v : r.data()) peak = std::max(peak, v);
    const std::size_t ci = cell / 4, cj = cell % 4;
    // The cell center sits between pixels 16c + 7 and 16c + 8; edge cells
    // plateau out to the border because sampling clamps there.
    double center = 0;
    for (std::size_t dy : {7u, 8u})
      for (std::size_t dx : {7u, 8u}) center = std::max(center, r[(16 * ci + dy) * 64 + 16 * cj + dx]);
    EXPECT_NEAR(center, peak, 1e-12);
    for (std::size_t i = 0; i < r.size(); ++i)
      if (r[i] == peak) {
        EXPECT_EQ(i / 64 / 16, ci);
        EXPECT_EQ(i % 64 / 16, cj);
      }
  }
}

TEST(Explain, EmptyTapsAndIdenticalImages) {
  nn::ClassifierNet<double> net(nn::ClassifierConfig{}, 2);
  Rng rng(2);
  Tensor<double> one = random_tensor(rng, {1, 3, 32, 32}, 0, 1);
  const int y1[] = {3};
  EXPECT_TRUE(explain(net, one, y1, {}).empty());

  Tensor<double> two = concat(one, one, 0);
  const int y2[] = {3, 3};
  auto maps = explain(net, two, y2, {1, 2, 3, 4});
  ASSERT_EQ(maps.size(), 4u);
  for (const auto& m : maps) {
    EXPECT_EQ(m.resized.shape(), (Shape{2, 1, 32, 32}));
    EXPECT_FALSE(m.resized.tracked());
    const std::size_t n = 32 * 32;
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(m.resized[i], m.resized[n + i]);
  }
}

TEST(Explain, ProbabilityTargetScalesLogitWeights) {
  // d p_y / d A = p_y (d z_y / d A - sum_c p_c d z_c / d A); for a single
  // class output p_y = 1 and the weights vanish.
  nn::ClassifierConfig cfg;
  cfg.num_classes = 1;
  cfg.widths = {4, 4};
  cfg.taps = {2};
  nn::ClassifierNet<double> net(cfg, 1);
  Rng rng(4);
  Tensor<double> x = random_tensor(rng, {1, 3, 8, 8}, 0, 1);
  const int y[] = {0};
  auto maps = explain(net, x, y, {2}, CamOptions{DiffMode::Detached, CamTarget::Probability});
  for (double v : maps[0].raw.data()) EXPECT_EQ(v, 0.0);
}
