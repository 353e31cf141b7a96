#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mssr/autodiff/gradcheck.hpp"
#include "mssr/autodiff/ops.hpp"
#include "mssr/autodiff/sgd.hpp"
#include "mssr/autodiff/tape.hpp"
#include "mssr/error.hpp"
#include "mssr/parallel.hpp"

using namespace mssr;
using namespace mssr::ad;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = d(rng);
  return t;
}

template <typename Fn>
Tensor run_backward(Fn&& fn) {
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = fn();
  }
  tape.backward(loss);
  return loss;
}

}  // namespace

TEST(Primitives, FiniteDifferenceAgreement) {
  for (const auto& check : primitive_gradchecks(7)) {
    EXPECT_TRUE(check.passed()) << check.name << " rel err " << check.max_rel_error;
  }
}

TEST(Primitives, CorruptedAdjointIsDetected) {
  set_corrupted_adjoint("conv2d");
  bool caught = false;
  for (const auto& check : primitive_gradchecks(7)) {
    if (check.name == "conv2d") caught = !check.passed();
  }
  set_corrupted_adjoint("");
  EXPECT_TRUE(caught);
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  const std::size_t classes = 5;
  Tensor logits = Tensor(Shape{1, classes}, 0.3).set_requires_grad(true);
  const std::vector<int> label = {2};
  const Tensor loss = run_backward([&] { return softmax_cross_entropy(logits, label); });
  EXPECT_NEAR(loss.item(), std::log(5.0), 1e-12);
  const auto g = std::as_const(logits).grad();
  for (std::size_t c = 0; c < classes; ++c) EXPECT_NEAR(g[c], 0.2 - (c == 2 ? 1.0 : 0.0), 1e-12);
}

TEST(Conv2d, IdentityKernel) {
  const Tensor x = random_tensor({2, 3, 4, 5}, 1);
  Tensor w(Shape{3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  const Tensor y = conv2d(x, w, Tensor{}, {1, 0});
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv1d, FftMatchesDirect) {
  const Tensor x = random_tensor({3, 1, 700}, 2);
  const Tensor w = random_tensor({5, 1, 251}, 3);
  const Tensor direct = conv1d(x, w, Tensor{}, {125, ConvAlgo::Direct});
  const Tensor fft = conv1d(x, w, Tensor{}, {125, ConvAlgo::Fft});
  ASSERT_EQ(direct.shape(), fft.shape());
  for (std::size_t i = 0; i < direct.numel(); ++i) EXPECT_NEAR(direct[i], fft[i], 1e-10);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = random_tensor({3, 4}, 4).set_requires_grad(true);
  run_backward([&] { return sum(x); });
  for (double g : std::as_const(x).grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, Square) {
  Tensor x = Tensor(Shape{1}, 3.0).set_requires_grad(true);
  run_backward([&] { return sum(mul(x, x)); });
  EXPECT_EQ(std::as_const(x).grad()[0], 6.0);
}

TEST(Backward, FanOutMatchesFiniteDifference) {
  Tensor x = random_tensor({2, 6}, 5);
  Tensor w = random_tensor({6, 6}, 6);
  auto loss = [=] { return sum(add(leaky_relu(matmul(x, w), 0.2), mul(x, x))); };
  const auto check = check_gradients("fan_out", loss, {x}, 1e-6, 1e-5);
  EXPECT_TRUE(check.passed()) << check.max_rel_error;
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x = random_tensor({4}, 7).set_requires_grad(true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum(scale(x, 2.0));
  }
  tape.backward(loss);
  tape.backward(loss);
  for (double g : std::as_const(x).grad()) EXPECT_EQ(g, 4.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x = random_tensor({3}, 8).set_requires_grad(true);
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = scale(x, 2.0);
  }
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Errors, ShapeMismatchNamesOpAndShapes) {
  try {
    add(Tensor(Shape{2, 3}), Tensor(Shape{3, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("add"), std::string::npos);
    EXPECT_NE(what.find("(2, 3)"), std::string::npos);
    EXPECT_NE(what.find("(3, 2)"), std::string::npos);
  }
}

TEST(Sgd, VanillaStep) {
  Tensor p = Tensor(Shape{1}, 1.0).set_requires_grad(true);
  p.grad()[0] = 1.0;
  Sgd opt({p}, 0.0);
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(p[0], 0.9);
  EXPECT_EQ(std::as_const(p).grad()[0], 0.0);
}

TEST(Sgd, MomentumRecurrence) {
  const double lr = 0.1, g = 0.5;
  Tensor p = Tensor(Shape{1}, 0.0).set_requires_grad(true);
  Sgd opt({p}, 0.9);
  for (int i = 0; i < 2; ++i) {
    p.grad()[0] = g;
    opt.step(lr);
  }
  EXPECT_NEAR(-p[0], lr * g * (1.0 + 1.9), 1e-15);
}

TEST(Sgd, QuadraticBowlDescendsMonotonically) {
  // f(p) = 0.5 * sum(d_i p_i^2); plain gradient descent is stable while lr * max(d) < 2.
  const std::vector<double> d = {1.0, 3.0, 0.5, 2.0};
  Tensor p(Shape{4}, std::vector<double>{1.0, -2.0, 0.5, 1.5});
  p.set_requires_grad(true);
  const Tensor diag(Shape{4}, d);
  Sgd opt({p}, 0.0);
  double prev = 1e300;
  for (int step = 0; step < 100; ++step) {
    const Tensor loss = run_backward([&] { return scale(sum(mul(diag, mul(p, p))), 0.5); });
    EXPECT_LT(loss.item(), prev);
    prev = loss.item();
    opt.step(0.1);
  }
}

TEST(BatchNorm, TrainingOutputIsStandardized) {
  const Tensor x = random_tensor({4, 3, 50}, 9);
  BatchNorm bn(3);
  const Tensor y = batch_norm_1d(x, bn, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 50; ++i) {
        const double v = y[(b * 3 + c) * 50 + i];
        mean += v;
        sq += v * v;
      }
    mean /= 200.0;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq / 200.0 - mean * mean, 1.0, 1e-3);
  }
}

TEST(BatchNorm, InferenceUsesRunningStatistics) {
  const Tensor x = random_tensor({2, 2, 7}, 10);
  BatchNorm bn(2);
  bn.running_mean[0] = 0.5;
  bn.running_var[1] = 4.0;
  const Tensor a = batch_norm_1d(x, bn, false);
  const Tensor b = batch_norm_1d(x, bn, false);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_NEAR(a[0], (x[0] - 0.5) / std::sqrt(1.0 + 1e-5), 1e-15);
  EXPECT_NEAR(a[7], x[7] / std::sqrt(4.0 + 1e-5), 1e-15);
}

TEST(Determinism, GradientsIndependentOfThreadCount) {
  auto grads = [](std::size_t threads) {
    set_num_threads(threads);
    Tensor x = random_tensor({3, 2, 9, 11}, 11);
    Tensor w = random_tensor({4, 2, 3, 3}, 12).set_requires_grad(true);
    BatchNorm bn(4);
    run_backward([&] {
      const Tensor y = relu(batch_norm_2d(conv2d(x, w, Tensor{}, {2, 1}), bn, true));
      return weighted_sum(y, std::vector<double>(y.numel(), 0.37));
    });
    std::vector<double> out(std::as_const(w).grad().begin(), std::as_const(w).grad().end());
    set_num_threads(0);
    return out;
  };
  EXPECT_EQ(grads(1), grads(4));
}

TEST(Pooling, AdaptiveBinsFollowFloorCeilRule) {
  Tensor x(Shape{1, 1, 5}, std::vector<double>{1, 2, 3, 4, 5});
  const Tensor y = adaptive_avg_pool_1d(x, 2);
  EXPECT_DOUBLE_EQ(y[0], 2.0);  // [0, 3)
  EXPECT_DOUBLE_EQ(y[1], 4.0);  // [2, 5)
  EXPECT_THROW(adaptive_avg_pool_1d(x, 6), ShapeError);
}
