#pragma once

// Differentiable primitives. Every op records an adjoint on the active tape
// when at least one input requires a gradient. Batch dimension first.

#include <cstddef>
#include <span>
#include <vector>

#include "mssr/autodiff/tensor.hpp"

namespace mssr::ad {

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// Shortcut join of a residual block; same contract as add().
Tensor residual_add(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);
// sum(a * weights) with constant weights: a scalar probe used by gradient checks.
Tensor weighted_sum(const Tensor& a, std::span<const double> weights);

// (M, K) x (K, N) -> (M, N)
Tensor matmul(const Tensor& a, const Tensor& b);

// x: (B, in), weight: (out, in), bias: (out) -> (B, out)
Tensor fully_connected(const Tensor& x, const Tensor& weight, const Tensor& bias);

enum class ConvAlgo { Automatic, Direct, Fft };

struct Conv1dOptions {
  std::size_t padding = 0;
  ConvAlgo algo = ConvAlgo::Automatic;
};

// Cross-correlation, stride 1, zero padding.
// x: (B, Cin, N), weight: (Cout, Cin, L), bias: (Cout) or undefined
// -> (B, Cout, N + 2*padding - L + 1)
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv1dOptions& opt);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x: (B, Cin, H, W), weight: (Cout, Cin, kh, kw), bias: (Cout) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt);

// Per-channel normalization with learnable affine and running statistics.
struct BatchNorm {
  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels);

  std::size_t channels() const { return gamma.numel(); }

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;
};

// Channel axis 1. Training mode normalizes with batch statistics (biased
// variance) and updates the running estimates (unbiased variance); inference
// mode uses the running estimates.
Tensor batch_norm(const Tensor& x, BatchNorm& bn, bool training);
// (B, C) or (B, C, L)
Tensor batch_norm_1d(const Tensor& x, BatchNorm& bn, bool training);
// (B, C, H, W)
Tensor batch_norm_2d(const Tensor& x, BatchNorm& bn, bool training);

// Per-sample normalization over all non-batch entries, then per-channel
// (axis 1) affine. gamma/beta: (C).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);

// Output bin i covers [floor(i*N/M), ceil((i+1)*N/M)).
// (B, C, N) -> (B, C, M), requires 1 <= M <= N.
Tensor adaptive_avg_pool_1d(const Tensor& x, std::size_t bins);
// (B, C, H, W) -> (B, C, rows, cols). Grids larger than the map are allowed;
// the bins then overlap.
Tensor adaptive_avg_pool_2d(const Tensor& x, std::size_t rows, std::size_t cols);

// (B, C, N) -> (B, C, floor((N - kernel) / stride) + 1)
Tensor max_pool_1d(const Tensor& x, std::size_t kernel, std::size_t stride);
// Padding cells never win the max.
Tensor max_pool_2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding);

Tensor reshape(const Tensor& x, Shape shape);
// (B, ...) -> (B, prod(...))
Tensor flatten(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);

// Mean over the batch of -log softmax(logits)[label]. logits: (B, C).
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Row-wise softmax of a (B, C) tensor, no tape.
std::vector<std::vector<double>> softmax_rows(const Tensor& logits);

}  // namespace mssr::ad
