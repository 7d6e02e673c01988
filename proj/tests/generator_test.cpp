#include <gtest/gtest.h>

#include <cmath>

#include "g2c/generator.hpp"
#include "g2c/grad_check.hpp"
#include "oracles.hpp"

using namespace g2c;
using test::random_tensor;

namespace {

// Closed-form parameter count walked from the layer shapes, independent of the
// params() registry.
std::int64_t expected_generator_params(int b, int res_blocks) {
  auto conv = [](int out, int in, int k) { return static_cast<std::int64_t>(out) * in * k * k + out; };
  auto norm = [](int ch) { return static_cast<std::int64_t>(2) * ch; };
  std::int64_t n = conv(b, 3, 7) + norm(b);
  n += conv(2 * b, b, 3) + norm(2 * b);
  n += conv(4 * b, 2 * b, 3) + norm(4 * b);
  n += res_blocks * (2 * (conv(4 * b, 4 * b, 3) + norm(4 * b)));
  n += conv(2 * b, 4 * b, 4) + norm(2 * b);  // tconv shapes transpose in/out only
  n += conv(b, 2 * b, 4) + norm(b);
  n += conv(3, b, 7);
  return n;
}

}  // namespace

TEST(Generator, ResidualBlocksOperateAtQuarterResolution) {
  GeneratorParams g = build_generator(16, 64, 1);
  ASSERT_EQ(g.res.size(), 6u);
  // Residual conv widths are 4*base = 64 channels; spatial checked via forward.
  EXPECT_EQ(g.res[0].c1.conv.w.shape(), (std::vector<int>{64, 64, 3, 3}));
  // Probe the down path: after two stride-2 convs a 64px input is 16px.
  Tensor x = Tensor::zeros({1, 3, 64, 64});
  Tensor h = reflect_pad2d(x, 3);
  h = conv2d(h, g.entry.conv.w, g.entry.conv.b, 1, 0);
  for (const ConvNorm& d : g.down) h = conv2d(h, d.conv.w, d.conv.b, 2, 1);
  EXPECT_EQ(h.shape(), (std::vector<int>{1, 64, 16, 16}));
}

TEST(Generator, ParameterCountMatchesShapeWalker) {
  for (int b : {4, 8, 16}) {
    GeneratorParams g = build_generator(b, 32, 5);
    EXPECT_EQ(total_params(g.params()), expected_generator_params(b, 6)) << "base " << b;
  }
}

TEST(Generator, SameSeedSameBytes) {
  GeneratorParams a = build_generator(8, 32, 42);
  GeneratorParams b = build_generator(8, 32, 42);
  auto ra = a.params(), rb = b.params();
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i)
    EXPECT_TRUE(ra[i].tensor->same_values(*rb[i].tensor)) << ra[i].name;
  GeneratorParams c = build_generator(8, 32, 43);
  bool all_equal = true;
  auto rc = c.params();
  for (std::size_t i = 0; i < ra.size(); ++i)
    all_equal = all_equal && ra[i].tensor->same_values(*rc[i].tensor);
  EXPECT_FALSE(all_equal);
}

TEST(Generator, RejectsBadImageSize) {
  EXPECT_THROW(build_generator(8, 30, 1), std::invalid_argument);
  EXPECT_THROW(build_generator(2, 32, 1), std::invalid_argument);
}

TEST(Generator, ForwardPreservesResolution) {
  GeneratorParams g = build_generator(8, 64, 7);
  Rng rng(7);
  for (int n : {1, 4}) {
    Tensor x = random_tensor({n, 3, 64, 64}, rng);
    Tensor y = generator_forward(g, x);
    EXPECT_EQ(y.shape(), x.shape());
  }
  Tensor wrong = random_tensor({1, 3, 32, 32}, rng);
  EXPECT_THROW(generator_forward(g, wrong), std::invalid_argument);
}

TEST(Generator, FreshOutputsFiniteAndCentered) {
  GeneratorParams g = build_generator(8, 32, 11);
  Rng rng(11);
  Tensor x = random_tensor({2, 3, 32, 32}, rng);
  Tensor y = generator_forward(g, x);
  EXPECT_TRUE(y.all_finite());
  double mean = 0.0;
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    EXPECT_GT(y[i], -1.0f);
    EXPECT_LT(y[i], 1.0f);
    mean += y[i] / static_cast<double>(y.numel());
  }
  EXPECT_LT(std::fabs(mean), 0.5);
}

TEST(Generator, ForwardIsDeterministic) {
  GeneratorParams g = build_generator(8, 32, 13);
  Rng rng(13);
  Tensor x = random_tensor({1, 3, 32, 32}, rng);
  Tensor y1 = generator_forward(g, x);
  Tensor y2 = generator_forward(g, x);
  EXPECT_TRUE(y1.same_values(y2));
}

TEST(Generator, GradCheckOnMiniature) {
  GeneratorParams g = build_generator(4, 8, 17, 0, 1, 2);
  Rng rng(17);
  Tensor x = random_tensor({1, 3, 8, 8}, rng, -0.9f, 0.9f);
  Tensor readout = random_tensor({1, 3, 8, 8}, rng, 0.4f, 1.6f);
  auto refs = g.params();
  std::vector<Tensor> init;
  for (auto& r : refs) init.push_back(*r.tensor);
  auto f = [&g, &x, &readout, &refs](Tape* t, const std::vector<Tensor>& p) {
    for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].tensor = p[i];
    return mean(mul(generator_forward(g, x, t), readout, t), t);
  };
  // At the 0.02 init scale a 1e-3 step is a 5% kick that straddles relu
  // kinks; 3e-4 keeps the probes on one linear piece.
  auto report = grad_check(f, init, 3e-4, 1e-2, 999, 8);
  EXPECT_TRUE(report.pass) << report.worst << " max_rel=" << report.max_rel_err
                           << " unverifiable=" << report.coords_unverifiable;
}

TEST(Discriminator, ScoreMapIsSixteenthResolution) {
  DiscriminatorParams d = build_discriminator(8, 64, 3);
  Rng rng(3);
  Tensor x = random_tensor({2, 3, 64, 64}, rng);
  Tensor s = discriminator_forward(d, x);
  EXPECT_EQ(s.shape(), (std::vector<int>{2, 1, 4, 4}));
}

TEST(Discriminator, ZeroFinalLayerGivesZeroScores) {
  DiscriminatorParams d = build_discriminator(8, 32, 5);
  std::fill(d.score.w.mut()->begin(), d.score.w.mut()->end(), 0.0f);
  Rng rng(5);
  Tensor x = random_tensor({1, 3, 32, 32}, rng);
  Tensor s = discriminator_forward(d, x);
  for (std::int64_t i = 0; i < s.numel(); ++i) EXPECT_FLOAT_EQ(s[i], 0.0f);
}

TEST(Discriminator, ScoresRespondToLocalPatches) {
  // Two inputs differing only in one 16x16 corner: the far-corner score cell
  // must be untouched while the near-corner cell changes.
  DiscriminatorParams d = build_discriminator(8, 64, 7);
  Rng rng(7);
  Tensor x1 = random_tensor({1, 3, 64, 64}, rng);
  Tensor x2({1, 3, 64, 64}, std::vector<float>(x1.data(), x1.data() + x1.numel()));
  for (int c = 0; c < 3; ++c)
    for (int h = 0; h < 16; ++h)
      for (int w = 0; w < 16; ++w)
        (*x2.mut())[(static_cast<std::size_t>(c) * 64 + h) * 64 + w] += 0.5f;
  Tensor s1 = discriminator_forward(d, x1);
  Tensor s2 = discriminator_forward(d, x2);
  // top-left cell sees the perturbed corner
  EXPECT_GT(std::fabs(s1[0] - s2[0]), 1e-6);
  // bottom-right cell (3,3) has a receptive field covering rows/cols 17..63
  EXPECT_FLOAT_EQ(s1[15], s2[15]);
}
