#include <gtest/gtest.h>

#include <cmath>

#include "g2c/grad_check.hpp"
#include "g2c/losses.hpp"
#include "oracles.hpp"

using namespace g2c;
using test::random_tensor;

namespace {

// Plain cross-entropy oracle in double precision.
double ce_oracle(const Tensor& logits, const std::vector<int>& labels) {
  const int n = logits.dim(0), k = logits.dim(1);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double mx = logits[static_cast<std::int64_t>(i) * k];
    for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(logits[static_cast<std::int64_t>(i) * k + j]));
    double lse = 0.0;
    for (int j = 0; j < k; ++j) lse += std::exp(logits[static_cast<std::int64_t>(i) * k + j] - mx);
    total += -(logits[static_cast<std::int64_t>(i) * k + labels[static_cast<std::size_t>(i)]] - mx - std::log(lse));
  }
  return total / n;
}

}  // namespace

TEST(FocalLoss, GammaZeroEqualsCrossEntropy) {
  Rng rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor logits = random_tensor({8, 5}, rng, -3.0f, 3.0f);
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) labels.push_back(static_cast<int>(rng.below(5)));
    LossConfig cfg;
    cfg.gamma = 0.0f;
    Tensor loss = focal_loss(logits, labels, cfg);
    EXPECT_NEAR(loss.item(), ce_oracle(logits, labels), 1e-6);
  }
}

TEST(FocalLoss, HandComputedValue) {
  // Single sample with p_y = 0.9 exactly: logits {ln 9, 0} give softmax {0.9, 0.1};
  // loss = 1 * (1 - 0.9)^2 * (-ln 0.9) = 0.01 * 0.105361 = 0.00105361.
  Tensor logits({1, 2}, {std::log(9.0f), 0.0f});
  LossConfig cfg;
  cfg.gamma = 2.0f;
  Tensor loss = focal_loss(logits, {0}, cfg);
  EXPECT_NEAR(loss.item(), 0.00105361, 1e-6);
}

TEST(FocalLoss, VanishesFasterThanCrossEntropy) {
  LossConfig focal;
  focal.gamma = 2.0f;
  LossConfig ce;
  ce.gamma = 0.0f;
  double prev_ratio = 1.0;
  for (float margin : {1.0f, 2.0f, 4.0f, 8.0f}) {
    Tensor logits({1, 2}, {margin, 0.0f});
    const double f = focal_loss(logits, {0}, focal).item();
    const double c = focal_loss(logits, {0}, ce).item();
    const double ratio = f / c;
    EXPECT_LT(ratio, prev_ratio);  // focal/CE ratio shrinks as p_y -> 1
    prev_ratio = ratio;
  }
}

TEST(FocalLoss, MonotoneDecreasingInConfidence) {
  LossConfig cfg;
  double prev = 1e9;
  for (float margin = -2.0f; margin < 6.0f; margin += 0.5f) {
    Tensor logits({1, 2}, {margin, 0.0f});
    const double v = focal_loss(logits, {0}, cfg).item();
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(FocalLoss, RejectsBadLabels) {
  Tensor logits = Tensor::zeros({2, 3});
  EXPECT_THROW(focal_loss(logits, {0, 3}, LossConfig{}), std::invalid_argument);
  EXPECT_THROW(focal_loss(logits, {-1, 0}, LossConfig{}), std::invalid_argument);
}

TEST(FocalLoss, InverseFrequencyAlphaBalancesClasses) {
  // Imbalanced synthetic batch: class 0 has 9x the samples of class 1. With
  // inverse-frequency alpha and identical per-class confidence the two
  // classes contribute equally to the total loss.
  const std::vector<std::int64_t> counts = {90, 10};
  auto alpha = inverse_frequency_alpha(counts);
  EXPECT_NEAR(alpha[0] + alpha[1], 2.0, 1e-6);  // mean 1
  EXPECT_NEAR(alpha[1] / alpha[0], 9.0, 1e-5);

  LossConfig cfg;
  cfg.gamma = 2.0f;
  cfg.alpha = alpha;
  const float m = 1.2f;  // same confidence for every sample
  double contrib0 = 0.0, contrib1 = 0.0;
  for (int i = 0; i < 90; ++i) {
    Tensor logits({1, 2}, {m, 0.0f});
    contrib0 += focal_loss(logits, {0}, cfg).item();
  }
  for (int i = 0; i < 10; ++i) {
    Tensor logits({1, 2}, {0.0f, m});
    contrib1 += focal_loss(logits, {1}, cfg).item();
  }
  EXPECT_NEAR(contrib0, contrib1, 1e-3 * contrib0);
}

TEST(Lsgan, PerfectDiscriminator) {
  Tensor d_real = Tensor::full({2, 1, 3, 3}, 1.0f);
  Tensor d_fake = Tensor::zeros({2, 1, 3, 3});
  auto pair = lsgan_losses(d_real, d_fake);
  EXPECT_FLOAT_EQ(pair.d_loss.item(), 0.0f);
  EXPECT_FLOAT_EQ(pair.g_loss.item(), 1.0f);
}

TEST(Lsgan, PerfectGenerator) {
  Tensor d_real = Tensor::full({1, 1, 2, 2}, 0.3f);
  Tensor d_fake = Tensor::full({1, 1, 2, 2}, 1.0f);
  auto pair = lsgan_losses(d_real, d_fake);
  EXPECT_FLOAT_EQ(pair.g_loss.item(), 0.0f);
}

TEST(Lsgan, MatchesDirectFormula) {
  Rng rng(103);
  Tensor d_real = random_tensor({2, 1, 4, 4}, rng, -2.0f, 2.0f);
  Tensor d_fake = random_tensor({2, 1, 4, 4}, rng, -2.0f, 2.0f);
  double dr = 0.0, df = 0.0, gf = 0.0;
  for (std::int64_t i = 0; i < d_real.numel(); ++i) {
    dr += (d_real[i] - 1.0) * (d_real[i] - 1.0) / d_real.numel();
    df += static_cast<double>(d_fake[i]) * d_fake[i] / d_fake.numel();
    gf += (d_fake[i] - 1.0) * (d_fake[i] - 1.0) / d_fake.numel();
  }
  auto pair = lsgan_losses(d_real, d_fake);
  EXPECT_NEAR(pair.d_loss.item(), dr + df, 1e-6);
  EXPECT_NEAR(pair.g_loss.item(), gf, 1e-6);
}

TEST(CycleLoss, PerfectCycleIsZero) {
  Rng rng(107);
  Tensor x = random_tensor({1, 3, 4, 4}, rng);
  EXPECT_FLOAT_EQ(cycle_loss(x, x, 10.0f).item(), 0.0f);
}

TEST(CycleLoss, ConstantOffset) {
  Tensor x = Tensor::full({1, 3, 4, 4}, 0.5f);
  Tensor y = Tensor::full({1, 3, 4, 4}, 0.6f);
  EXPECT_NEAR(cycle_loss(x, y, 10.0f).item(), 1.0f, 1e-6);
  EXPECT_THROW(cycle_loss(x, Tensor::zeros({1, 3, 4, 5}), 10.0f), std::invalid_argument);
}

TEST(CycleLoss, GradientIsSignOverSize) {
  Rng rng(109);
  Tensor x = random_tensor({1, 1, 2, 2}, rng);
  Tensor y = random_tensor({1, 1, 2, 2}, rng);
  Tape tape;
  tape.watch(y);
  Tensor loss = cycle_loss(x, y, 10.0f, &tape);
  tape.backward(loss);
  Tensor g = tape.grad(y);
  for (std::int64_t i = 0; i < 4; ++i) {
    const float expect = (y[i] > x[i] ? 1.0f : -1.0f) * 10.0f / 4.0f;
    EXPECT_NEAR(g[i], expect, 1e-5);
  }
}

TEST(Losses, GradCheckAll) {
  Rng rng(113);
  {
    Tensor logits = random_tensor({4, 3}, rng, -2.0f, 2.0f);
    LossConfig cfg;
    cfg.gamma = 2.0f;
    cfg.alpha = {1.2f, 0.9f, 0.9f};
    auto f = [cfg](Tape* t, const std::vector<Tensor>& p) {
      return focal_loss(p[0], {0, 2, 1, 0}, cfg, t);
    };
    auto report = grad_check(f, {logits}, 1e-3, 1e-2);
    EXPECT_TRUE(report.pass) << "focal: " << report.worst;
  }
  {
    Tensor d_real = random_tensor({1, 1, 4, 4}, rng);
    Tensor d_fake = random_tensor({1, 1, 4, 4}, rng);
    auto fd = [](Tape* t, const std::vector<Tensor>& p) {
      return lsgan_losses(p[0], p[1], t).d_loss;
    };
    auto fg = [](Tape* t, const std::vector<Tensor>& p) {
      return lsgan_losses(p[0], p[1], t).g_loss;
    };
    EXPECT_TRUE(grad_check(fd, {d_real, d_fake}, 1e-3, 1e-2).pass);
    EXPECT_TRUE(grad_check(fg, {d_real, d_fake}, 1e-3, 1e-2).pass);
  }
  {
    Tensor x = random_tensor({1, 2, 3, 3}, rng);
    Tensor y = random_tensor({1, 2, 3, 3}, rng);
    auto f = [x](Tape* t, const std::vector<Tensor>& p) { return cycle_loss(x, p[0], 10.0f, t); };
    EXPECT_TRUE(grad_check(f, {y}, 1e-3, 1e-2).pass);
  }
}
