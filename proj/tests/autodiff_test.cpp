#include <gtest/gtest.h>

#include <cmath>

#include "g2c/grad_check.hpp"
#include "g2c/ops.hpp"
#include "oracles.hpp"

using namespace g2c;
using test::max_abs_diff;
using test::random_tensor;

TEST(Backward, SumGivesOnes) {
  Rng rng(1);
  Tensor x = random_tensor({3, 4}, rng);
  Tape tape;
  tape.watch(x);
  Tensor loss = sum(x, &tape);
  tape.backward(loss);
  Tensor g = tape.grad(x);
  for (std::int64_t i = 0; i < g.numel(); ++i) EXPECT_FLOAT_EQ(g[i], 1.0f);
}

TEST(Backward, RequiresScalarLoss) {
  Rng rng(2);
  Tensor x = random_tensor({2, 2}, rng);
  Tape tape;
  tape.watch(x);
  Tensor y = relu(x, &tape);
  EXPECT_THROW(tape.backward(y), std::invalid_argument);
}

TEST(Backward, UnreachableParameterGetsZeroGradient) {
  Rng rng(3);
  Tensor used = random_tensor({4}, rng);
  Tensor unused = random_tensor({5}, rng);
  Tape tape;
  tape.watch(used);
  tape.watch(unused);
  Tensor loss = mean(square(used, &tape), &tape);
  tape.backward(loss);
  Tensor gu = tape.grad(unused);
  for (std::int64_t i = 0; i < gu.numel(); ++i) EXPECT_FLOAT_EQ(gu[i], 0.0f);
  Tensor g = tape.grad(used);
  for (std::int64_t i = 0; i < g.numel(); ++i) EXPECT_NEAR(g[i], 2.0f * used[i] / 4.0f, 1e-6);
}

TEST(Backward, ConvLossMatchesFiniteDifferences) {
  Rng rng(5);
  Tensor x = random_tensor({1, 2, 6, 6}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, -0.5f, 0.5f);
  Tensor b = random_tensor({3}, rng, -0.1f, 0.1f);
  auto f = [&](Tape* t, const std::vector<Tensor>& p) {
    Tensor y = conv2d(p[0], p[1], p[2], 1, 1, t);
    return affine(mean(square(y, t), t), 0.5f, 0.0f, t);
  };
  auto report = grad_check(f, {x, w, b}, 1e-3, 1e-2);
  EXPECT_TRUE(report.pass) << report.worst << " max_rel_err=" << report.max_rel_err;
}

// Every primitive with parameters gets a finite-difference pass.
TEST(GradCheck, PerPrimitive) {
  Rng rng(7);
  struct Case {
    const char* name;
    ScalarFn fn;
    std::vector<Tensor> params;
  };
  std::vector<Case> cases;

  {
    Tensor x = random_tensor({2, 3, 5, 5}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng, -0.5f, 0.5f);
    Tensor b = random_tensor({4}, rng, -0.2f, 0.2f);
    cases.push_back({"conv2d", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(conv2d(p[0], p[1], p[2], 2, 1, t), t), t);
                     },
                     {x, w, b}});
  }
  {
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor w = random_tensor({3, 2, 4, 4}, rng, -0.4f, 0.4f);
    Tensor b = random_tensor({2}, rng, -0.2f, 0.2f);
    cases.push_back({"conv2d_transpose", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(conv2d_transpose(p[0], p[1], p[2], 2, 1, t), t), t);
                     },
                     {x, w, b}});
  }
  {
    Tensor x = random_tensor({2, 2, 4, 4}, rng);
    Tensor gamma = random_tensor({2}, rng, 0.5f, 1.5f);
    Tensor beta = random_tensor({2}, rng, -0.5f, 0.5f);
    // Linear readout: a plain mean of squares is invariant to the input by
    // construction of the normalization, so it cannot exercise dL/dx.
    Tensor crand = random_tensor({2, 2, 4, 4}, rng, 0.4f, 1.6f);
    cases.push_back({"instance_norm", [crand](Tape* t, const std::vector<Tensor>& p) {
                       return mean(mul(instance_norm(p[0], p[1], p[2], 1e-5f, t), crand, t), t);
                     },
                     {x, gamma, beta}});
  }
  {
    Tensor x = random_tensor({3, 6}, rng);
    Tensor w = random_tensor({4, 6}, rng, -0.5f, 0.5f);
    Tensor b = random_tensor({4}, rng, -0.2f, 0.2f);
    cases.push_back({"fully_connected", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(fully_connected(p[0], p[1], p[2], t), t), t);
                     },
                     {x, w, b}});
  }
  {
    Tensor x = random_tensor({2, 2, 4, 4}, rng, 0.2f, 1.0f);  // away from the relu kink
    cases.push_back({"relu", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(relu(p[0], t), t), t);
                     },
                     {x}});
    cases.push_back({"leaky_relu", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(leaky_relu(p[0], 0.2f, t), t), t);
                     },
                     {x}});
    cases.push_back({"max_pool2d", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(max_pool2d(p[0], 2, 2, t), t), t);
                     },
                     {x}});
    cases.push_back({"global_avg_pool", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(global_avg_pool(p[0], t), t), t);
                     },
                     {x}});
    cases.push_back({"reflect_pad2d", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(reflect_pad2d(p[0], 2, t), t), t);
                     },
                     {x}});
  }
  {
    Tensor x = random_tensor({2, 8}, rng);
    cases.push_back({"sigmoid", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(sigmoid(p[0], t), t), t);
                     },
                     {x}});
    cases.push_back({"tanh", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(g2c::tanh(p[0], t), t), t);
                     },
                     {x}});
    cases.push_back({"exp", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(g2c::exp(p[0], t), t), t);
                     },
                     {x}});
    cases.push_back({"log_softmax", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(log_softmax(p[0], t), t), t);
                     },
                     {x}});
    cases.push_back({"affine", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(affine(p[0], 1.7f, -0.3f, t), t), t);
                     },
                     {x}});
    cases.push_back({"narrow", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(narrow(p[0], 1, 2, 4, t), t), t);
                     },
                     {x}});
  }
  {
    Tensor x = random_tensor({2, 6}, rng, 0.3f, 0.9f);
    cases.push_back({"abs", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(g2c::abs(affine(p[0], 1.0f, -0.6f, t), t), t);
                     },
                     {x}});
    cases.push_back({"pow_const", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(pow_const(p[0], 2.5f, t), t);
                     },
                     {x}});
  }
  {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    cases.push_back({"add_sub_mul", [](Tape* t, const std::vector<Tensor>& p) {
                       Tensor s = add(p[0], p[1], t);
                       Tensor d = sub(p[0], p[1], t);
                       return mean(square(mul(s, d, t), t), t);
                     },
                     {a, b}});
  }
  {
    Tensor a = random_tensor({2, 2, 3, 3}, rng);
    Tensor b = random_tensor({2, 3, 3, 3}, rng);
    cases.push_back({"concat", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(concat({p[0], p[1]}, 1, t), t), t);
                     },
                     {a, b}});
  }
  {
    Tensor x = random_tensor({2, 3, 3, 3}, rng);
    Tensor s = random_tensor({2, 3}, rng, 0.1f, 1.0f);
    cases.push_back({"scale_channels", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(scale_channels(p[0], p[1], t), t), t);
                     },
                     {x, s}});
  }
  {
    Tensor x = random_tensor({3, 5}, rng);
    cases.push_back({"gather_rows", [](Tape* t, const std::vector<Tensor>& p) {
                       return mean(square(gather_rows(p[0], {1, 4, 0}, t), t), t);
                     },
                     {x}});
  }

  for (auto& c : cases) {
    auto report = grad_check(c.fn, c.params, 1e-3, 1e-2);
    EXPECT_TRUE(report.pass) << c.name << ": " << report.worst
                             << " max_rel_err=" << report.max_rel_err;
  }
}

// A chain of depth >= 10 mixing most primitives.
TEST(GradCheck, DeepComposedChain) {
  Rng rng(9);
  Tensor x = random_tensor({1, 2, 8, 8}, rng);
  Tensor w1 = random_tensor({4, 2, 3, 3}, rng, -0.4f, 0.4f);
  Tensor b1 = random_tensor({4}, rng, -0.1f, 0.1f);
  Tensor g1 = random_tensor({4}, rng, 0.8f, 1.2f);
  Tensor be1 = random_tensor({4}, rng, -0.1f, 0.1f);
  Tensor w2 = random_tensor({4, 2, 4, 4}, rng, -0.3f, 0.3f);
  Tensor b2 = random_tensor({2}, rng, -0.1f, 0.1f);
  Tensor wf = random_tensor({3, 2}, rng, -0.5f, 0.5f);
  Tensor bf = random_tensor({3}, rng, -0.1f, 0.1f);
  auto f = [](Tape* t, const std::vector<Tensor>& p) {
    Tensor h = reflect_pad2d(p[0], 1, t);
    h = conv2d(h, p[1], p[2], 1, 0, t);
    h = instance_norm(h, p[3], p[4], 1e-5f, t);
    h = g2c::tanh(h, t);
    h = conv2d_transpose(h, p[5], p[6], 2, 1, t);
    h = sigmoid(h, t);
    h = max_pool2d(h, 2, 2, t);
    Tensor v = global_avg_pool(h, t);
    v = fully_connected(v, p[7], p[8], t);
    v = log_softmax(v, t);
    return mean(square(v, t), t);
  };
  auto report = grad_check(f, {x, w1, b1, g1, be1, w2, b2, wf, bf}, 1e-3, 1e-2);
  EXPECT_TRUE(report.pass) << report.worst << " max_rel_err=" << report.max_rel_err;
}

TEST(GradCheck, QuadraticFormIsExact) {
  Rng rng(11);
  Tensor a = random_tensor({4, 4}, rng);
  Tensor x = random_tensor({1, 4}, rng);
  // x A x^T via two dense layers with zero bias.
  auto f = [&](Tape* t, const std::vector<Tensor>& p) {
    Tensor ax = fully_connected(p[0], a, Tensor::zeros({4}), t);  // rows: x A^T
    return mean(mul(ax, p[0], t), t);
  };
  // The quadratic has no truncation error, so the widest step minimizes
  // float32 rounding noise in the differences.
  auto report = grad_check(f, {x}, 1e-2, 1e-2);
  EXPECT_TRUE(report.pass) << report.worst;
  EXPECT_LT(report.max_rel_err, 1e-4);
}

TEST(GradCheck, InstanceNormSigmoidChain) {
  Rng rng(13);
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  Tensor gamma = random_tensor({2}, rng, 0.7f, 1.3f);
  Tensor beta = random_tensor({2}, rng, -0.3f, 0.3f);
  auto f = [](Tape* t, const std::vector<Tensor>& p) {
    return mean(sigmoid(instance_norm(p[0], p[1], p[2], 1e-5f, t), t), t);
  };
  auto report = grad_check(f, {x, gamma, beta}, 1e-3, 1e-2);
  EXPECT_TRUE(report.pass) << report.worst;
}

// Negative control: a deliberately corrupted rule must be detected.
TEST(GradCheck, DetectsCorruptedBackward) {
  Rng rng(15);
  Tensor x = random_tensor({2, 4}, rng, 0.2f, 1.0f);
  auto corrupted_sigmoid = [](const Tensor& x, Tape* tape) {
    Tensor y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i)
      (*y.mut())[static_cast<std::size_t>(i)] = 1.0f / (1.0f + std::exp(-x[i]));
    if (tape && tape->on_tape(x)) {
      const TapeId xid = x.tape_id;
      Tensor yc = y;
      tape->record("bad_sigmoid", {xid}, y, [yc, xid](Tape& t, std::span<const float> g) {
        float* gx = t.grad_buffer(xid).data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yc[static_cast<std::int64_t>(i)];  // missing (1-y)
      });
    }
    return y;
  };
  auto f = [&](Tape* t, const std::vector<Tensor>& p) {
    return mean(square(corrupted_sigmoid(p[0], t), t), t);
  };
  auto report = grad_check(f, {x}, 1e-3, 1e-2);
  EXPECT_FALSE(report.pass);
}

TEST(GradCheck, ReportsNonFiniteFunctions) {
  Tensor x = Tensor::full({2}, 2.0f);
  auto f = [](Tape* t, const std::vector<Tensor>& p) {
    Tensor big = affine(p[0], 1e30f, 0.0f, t);
    return mean(mul(big, big, t), t);  // overflows to inf
  };
  auto report = grad_check(f, {x}, 1e-3, 1e-2);
  EXPECT_FALSE(report.pass);
  EXPECT_FALSE(report.finite);
}

TEST(Tape, StaleIdsFromOtherTapesAreIgnored) {
  Rng rng(17);
  Tensor x = random_tensor({2, 2}, rng);
  Tape first;
  first.watch(x);
  Tensor y1 = relu(x, &first);
  ASSERT_TRUE(first.on_tape(y1));
  Tape second;
  Tensor y2 = relu(x, &second);  // x was watched on `first`, not `second`
  EXPECT_FALSE(second.on_tape(y2));
  EXPECT_EQ(second.node_count(), 0u);
}

TEST(Tape, FrozenParametersAreNotRecorded) {
  Rng rng(19);
  Tensor x = random_tensor({1, 4}, rng);
  Tensor w = random_tensor({4, 4}, rng);
  Tape tape;
  tape.watch(x);
  Tensor y = fully_connected(x, w, Tensor::zeros({4}), &tape);
  Tensor loss = mean(y, &tape);
  tape.backward(loss);
  EXPECT_THROW(tape.grad(w), std::invalid_argument);  // never watched
  Tensor gx = tape.grad(x);
  EXPECT_GT(static_cast<double>(std::fabs(gx[0])) + std::fabs(gx[1]), 0.0);
}
