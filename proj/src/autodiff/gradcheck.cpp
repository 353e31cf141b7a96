#include "mssr/autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mssr/autodiff/ops.hpp"
#include "mssr/autodiff/tape.hpp"
#include "mssr/error.hpp"

namespace mssr::ad {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) throw ShapeError("relative_error: length mismatch");
  double scale = 0.0;
  for (double n : numeric) scale = std::max(scale, std::abs(n));
  const double floor = std::max(1e-3 * scale, 1e-300);
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

namespace {

std::vector<double> analytic_grad(const std::function<Tensor()>& loss, Tensor& input) {
  Tape tape;
  Tensor value;
  {
    TapeScope scope(tape);
    value = loss();
  }
  tape.backward(value);
  auto g = std::as_const(input).grad();
  std::vector<double> out(input.numel(), 0.0);
  if (input.has_grad()) std::copy(g.begin(), g.end(), out.begin());
  return out;
}

std::vector<double> numeric_grad(const std::function<Tensor()>& loss, Tensor& input, double step) {
  NoGradScope no_grad;
  std::vector<double> out(input.numel());
  auto v = input.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double saved = v[i];
    v[i] = saved + step;
    const double up = loss().item();
    v[i] = saved - step;
    const double down = loss().item();
    v[i] = saved;
    out[i] = (up - down) / (2.0 * step);
  }
  return out;
}

}  // namespace

GradPair gradient_pair(const std::function<Tensor()>& loss, Tensor input, double step) {
  input.set_requires_grad(true);
  input.zero_grad();
  GradPair pair;
  pair.analytic = analytic_grad(loss, input);
  input.zero_grad();
  pair.numeric = numeric_grad(loss, input, step);
  return pair;
}

GradCheck check_gradients(std::string name, const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                          double step, double threshold) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  // One backward pass gives every input's gradient.
  Tape tape;
  Tensor value;
  {
    TapeScope scope(tape);
    value = loss();
  }
  tape.backward(value);

  GradCheck result{std::move(name), 0.0, threshold};
  for (auto& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) {
      auto g = std::as_const(t).grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    const auto numeric = numeric_grad(loss, t, step);
    result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic, numeric));
    t.zero_grad();
  }
  return result;
}

namespace {

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape, double sd = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, sd);
    for (double& v : t.values()) v = dist(rng_);
    return t;
  }

  // Entries bounded away from zero, for ops with a kink at the origin.
  Tensor away_from_zero(Shape shape) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> mag(0.1, 1.5);
    std::bernoulli_distribution sign(0.5);
    for (double& v : t.values()) v = sign(rng_) ? mag(rng_) : -mag(rng_);
    return t;
  }

  std::vector<double> weights(std::size_t n) {
    std::vector<double> w(n);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (double& v : w) v = dist(rng_);
    return w;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

std::vector<GradCheck> primitive_gradchecks(std::uint64_t seed, double threshold) {
  constexpr double kStep = 1e-6;
  Sampler s(seed);
  std::vector<GradCheck> out;

  auto probe = [&](const char* name, std::function<Tensor()> op, std::vector<Tensor> inputs) {
    Tensor sample;
    {
      NoGradScope ng;
      sample = op();
    }
    auto w = s.weights(sample.numel());
    auto loss = [op, w]() { return weighted_sum(op(), w); };
    out.push_back(check_gradients(name, loss, std::move(inputs), kStep, threshold));
  };

  {
    Tensor a = s.normal({3, 4}), b = s.normal({3, 4});
    probe("add", [=] { return add(a, b); }, {a, b});
    probe("mul", [=] { return mul(a, b); }, {a, b});
    probe("residual_add", [=] { return residual_add(a, b); }, {a, b});
    probe("scale", [=] { return scale(a, -1.7); }, {a});
  }
  {
    Tensor a = s.normal({3, 5}), b = s.normal({5, 4});
    probe("matmul", [=] { return matmul(a, b); }, {a, b});
  }
  {
    Tensor x = s.normal({2, 6}), w = s.normal({4, 6}), b = s.normal({4});
    probe("fully_connected", [=] { return fully_connected(x, w, b); }, {x, w, b});
  }
  {
    Tensor x = s.normal({2, 3, 17}), w = s.normal({4, 3, 5}), b = s.normal({4});
    probe("conv1d", [=] { return conv1d(x, w, b, {2, ConvAlgo::Direct}); }, {x, w, b});
  }
  {
    Tensor x = s.normal({2, 1, 150}), w = s.normal({3, 1, 65}, 0.2);
    probe("conv1d_fft", [=] { return conv1d(x, w, Tensor{}, {32, ConvAlgo::Fft}); }, {x, w});
  }
  {
    Tensor x = s.normal({2, 3, 7, 9}), w = s.normal({4, 3, 3, 3}), b = s.normal({4});
    probe("conv2d", [=] { return conv2d(x, w, b, {2, 1}); }, {x, w, b});
  }
  {
    Tensor x = s.normal({3, 4, 6});
    auto bn = std::make_shared<BatchNorm>(4);
    bn->gamma = s.normal({4}).set_requires_grad(true);
    bn->beta = s.normal({4}).set_requires_grad(true);
    probe("batch_norm_1d", [=] { return batch_norm_1d(x, *bn, true); }, {x, bn->gamma, bn->beta});
  }
  {
    Tensor x = s.normal({3, 4});
    auto bn = std::make_shared<BatchNorm>(4);
    bn->running_mean = s.normal({4});
    bn->running_var = Tensor(Shape{4}, 0.7);
    bn->gamma = s.normal({4}).set_requires_grad(true);
    probe("batch_norm_1d_inference", [=] { return batch_norm_1d(x, *bn, false); }, {x, bn->gamma, bn->beta});
  }
  {
    Tensor x = s.normal({2, 3, 4, 5});
    auto bn = std::make_shared<BatchNorm>(3);
    bn->gamma = s.normal({3}).set_requires_grad(true);
    probe("batch_norm_2d", [=] { return batch_norm_2d(x, *bn, true); }, {x, bn->gamma, bn->beta});
  }
  {
    Tensor x = s.normal({2, 3, 8}), g = s.normal({3}), b = s.normal({3});
    probe("layer_norm", [=] { return layer_norm(x, g, b); }, {x, g, b});
  }
  {
    Tensor x = s.away_from_zero({2, 3, 5});
    probe("relu", [=] { return relu(x); }, {x});
    probe("leaky_relu", [=] { return leaky_relu(x, 0.2); }, {x});
  }
  {
    Tensor x = s.normal({2, 3, 23});
    probe("adaptive_avg_pool_1d", [=] { return adaptive_avg_pool_1d(x, 5); }, {x});
    probe("max_pool_1d", [=] { return max_pool_1d(x, 3, 3); }, {x});
  }
  {
    Tensor x = s.normal({2, 2, 5, 7});
    probe("adaptive_avg_pool_2d", [=] { return adaptive_avg_pool_2d(x, 2, 3); }, {x});
    probe("max_pool_2d", [=] { return max_pool_2d(x, 3, 2, 1); }, {x});
    probe("flatten", [=] { return flatten(x); }, {x});
  }
  {
    Tensor a = s.normal({2, 2, 3}), b = s.normal({2, 1, 3});
    probe("concat", [=] {
      const Tensor parts[] = {a, b};
      return concat(parts, 1);
    }, {a, b});
  }
  {
    Tensor logits = s.normal({4, 5});
    const std::vector<int> labels = {0, 3, 4, 1};
    auto loss = [=] { return softmax_cross_entropy(logits, labels); };
    out.push_back(check_gradients("softmax_cross_entropy", loss, {logits}, kStep, threshold));
  }
  {
    Tensor x = s.normal({3, 4});
    out.push_back(check_gradients("sum", [=] { return sum(x); }, {x}, kStep, threshold));
  }
  return out;
}

}  // namespace mssr::ad
