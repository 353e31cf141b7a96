#include <algorithm>
#include <cmath>
#include <limits>

#include "internal.hpp"
#include "mssr/autodiff/ops.hpp"
#include "mssr/error.hpp"
#include "mssr/parallel.hpp"

namespace mssr::ad {
namespace {

struct Bin {
  std::size_t begin;
  std::size_t end;
};

Bin adaptive_bin(std::size_t i, std::size_t in, std::size_t out) {
  const std::size_t begin = (i * in) / out;
  const std::size_t end = ((i + 1) * in + out - 1) / out;
  return {begin, end};
}

Tensor leaky_impl(const char* op, const Tensor& x, double slope) {
  Tensor out(x.shape());
  auto xv = x.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > 0.0 ? xv[i] : slope * xv[i];
  detail::finished(op, out);
  if (should_record({&x})) {
    detail::record(op, out, [x = Tensor(x), out, slope]() mutable {
      const auto g = std::as_const(out).grad();
      const auto xv = std::as_const(x).values();
      auto xg = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) xg[i] += xv[i] > 0.0 ? g[i] : slope * g[i];
    });
  }
  return out;
}

}  // namespace

Tensor relu(const Tensor& x) { return leaky_impl("relu", x, 0.0); }
Tensor leaky_relu(const Tensor& x, double slope) { return leaky_impl("leaky_relu", x, slope); }

Tensor adaptive_avg_pool_1d(const Tensor& x, std::size_t bins) {
  expect_rank("adaptive_avg_pool_1d", x, 3);
  const std::size_t rows = x.dim(0) * x.dim(1), n = x.dim(2);
  if (bins < 1 || bins > n) {
    throw ShapeError("adaptive_avg_pool_1d: " + std::to_string(bins) + " bins for input " + shape_str(x.shape()));
  }
  Tensor out(Shape{x.dim(0), x.dim(1), bins});
  const double* xv = x.data();
  double* o = out.data();
  parallel_for(0, rows, [&](std::size_t r) {
    for (std::size_t i = 0; i < bins; ++i) {
      const Bin bin = adaptive_bin(i, n, bins);
      double s = 0.0;
      for (std::size_t j = bin.begin; j < bin.end; ++j) s += xv[r * n + j];
      o[r * bins + i] = s / static_cast<double>(bin.end - bin.begin);
    }
  });
  detail::finished("adaptive_avg_pool_1d", out);
  if (should_record({&x})) {
    detail::record("adaptive_avg_pool_1d", out, [x = Tensor(x), out, rows, n, bins]() mutable {
      const double* g = std::as_const(out).grad().data();
      double* xg = x.grad().data();
      parallel_for(0, rows, [&](std::size_t r) {
        for (std::size_t i = 0; i < bins; ++i) {
          const Bin bin = adaptive_bin(i, n, bins);
          const double share = g[r * bins + i] / static_cast<double>(bin.end - bin.begin);
          for (std::size_t j = bin.begin; j < bin.end; ++j) xg[r * n + j] += share;
        }
      });
    });
  }
  return out;
}

Tensor adaptive_avg_pool_2d(const Tensor& x, std::size_t rows, std::size_t cols) {
  expect_rank("adaptive_avg_pool_2d", x, 4);
  if (rows < 1 || cols < 1) throw ShapeError("adaptive_avg_pool_2d: empty output grid");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(Shape{x.dim(0), x.dim(1), rows, cols});
  const double* xv = x.data();
  double* o = out.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t r = 0; r < rows; ++r) {
      const Bin rb = adaptive_bin(r, h, rows);
      for (std::size_t c = 0; c < cols; ++c) {
        const Bin cb = adaptive_bin(c, w, cols);
        double s = 0.0;
        for (std::size_t i = rb.begin; i < rb.end; ++i)
          for (std::size_t j = cb.begin; j < cb.end; ++j) s += xv[(p * h + i) * w + j];
        o[(p * rows + r) * cols + c] = s / static_cast<double>((rb.end - rb.begin) * (cb.end - cb.begin));
      }
    }
  }
  detail::finished("adaptive_avg_pool_2d", out);
  if (should_record({&x})) {
    detail::record("adaptive_avg_pool_2d", out, [x = Tensor(x), out, planes, h, w, rows, cols]() mutable {
      const double* g = std::as_const(out).grad().data();
      double* xg = x.grad().data();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t r = 0; r < rows; ++r) {
          const Bin rb = adaptive_bin(r, h, rows);
          for (std::size_t c = 0; c < cols; ++c) {
            const Bin cb = adaptive_bin(c, w, cols);
            const double share = g[(p * rows + r) * cols + c] /
                                 static_cast<double>((rb.end - rb.begin) * (cb.end - cb.begin));
            for (std::size_t i = rb.begin; i < rb.end; ++i)
              for (std::size_t j = cb.begin; j < cb.end; ++j) xg[(p * h + i) * w + j] += share;
          }
        }
      }
    });
  }
  return out;
}

Tensor max_pool_1d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  expect_rank("max_pool_1d", x, 3);
  const std::size_t rows = x.dim(0) * x.dim(1), n = x.dim(2);
  if (kernel < 1 || stride < 1 || n < kernel) {
    throw ShapeError("max_pool_1d: kernel " + std::to_string(kernel) + " on input " + shape_str(x.shape()));
  }
  const std::size_t m = (n - kernel) / stride + 1;
  Tensor out(Shape{x.dim(0), x.dim(1), m});
  std::vector<std::size_t> argmax(rows * m);
  const double* xv = x.data();
  double* o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t best = r * n + i * stride;
      for (std::size_t j = 1; j < kernel; ++j) {
        const std::size_t idx = r * n + i * stride + j;
        if (xv[idx] > xv[best]) best = idx;
      }
      argmax[r * m + i] = best;
      o[r * m + i] = xv[best];
    }
  }
  detail::finished("max_pool_1d", out);
  if (should_record({&x})) {
    detail::record("max_pool_1d", out, [x = Tensor(x), out, argmax = std::move(argmax)]() mutable {
      const auto g = std::as_const(out).grad();
      auto xg = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) xg[argmax[i]] += g[i];
    });
  }
  return out;
}

Tensor max_pool_2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  expect_rank("max_pool_2d", x, 4);
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel < 1 || stride < 1 || h + 2 * padding < kernel || w + 2 * padding < kernel || padding >= kernel) {
    throw ShapeError("max_pool_2d: kernel " + std::to_string(kernel) + " on input " + shape_str(x.shape()));
  }
  const std::size_t oh = (h + 2 * padding - kernel) / stride + 1;
  const std::size_t ow = (w + 2 * padding - kernel) / stride + 1;
  Tensor out(Shape{x.dim(0), x.dim(1), oh, ow});
  std::vector<std::size_t> argmax(planes * oh * ow);
  const double* xv = x.data();
  double* o = out.data();
  parallel_for(0, planes, [&](std::size_t p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t di = 0; di < kernel; ++di) {
          const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * stride + di) - static_cast<std::ptrdiff_t>(padding);
          if (r < 0 || r >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t dj = 0; dj < kernel; ++dj) {
            const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(j * stride + dj) - static_cast<std::ptrdiff_t>(padding);
            if (c < 0 || c >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t idx = (p * h + static_cast<std::size_t>(r)) * w + static_cast<std::size_t>(c);
            if (xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        }
        argmax[(p * oh + i) * ow + j] = best_idx;
        o[(p * oh + i) * ow + j] = best;
      }
    }
  });
  detail::finished("max_pool_2d", out);
  if (should_record({&x})) {
    detail::record("max_pool_2d", out, [x = Tensor(x), out, argmax = std::move(argmax)]() mutable {
      const auto g = std::as_const(out).grad();
      auto xg = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) xg[argmax[i]] += g[i];
    });
  }
  return out;
}

BatchNorm::BatchNorm(std::size_t channels)
    : gamma(Shape{channels}, 1.0),
      beta(Shape{channels}, 0.0),
      running_mean(Shape{channels}, 0.0),
      running_var(Shape{channels}, 1.0) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

Tensor batch_norm(const Tensor& x, BatchNorm& bn, bool training) {
  if (x.rank() < 2) throw ShapeError("batch_norm: expected (B, C, ...), got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t inner = x.numel() / (batch * channels);
  if (bn.channels() != channels) {
    throw ShapeError("batch_norm: input " + shape_str(x.shape()) + " vs " + std::to_string(bn.channels()) +
                     " channels");
  }
  const std::size_t count = batch * inner;
  if (training && count < 2) throw ShapeError("batch_norm: training mode needs more than one value per channel");

  Tensor out(x.shape());
  std::vector<double> mean(channels), invstd(channels);
  std::vector<double> xhat(x.numel());
  const double* xv = x.data();
  const double* gamma = bn.gamma.data();
  const double* beta = bn.beta.data();
  double* o = out.data();

  parallel_for(0, channels, [&](std::size_t c) {
    double mu = 0.0, var = 0.0;
    if (training) {
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = xv + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) mu += row[i];
      }
      mu /= static_cast<double>(count);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = xv + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) var += (row[i] - mu) * (row[i] - mu);
      }
      var /= static_cast<double>(count);
    } else {
      mu = bn.running_mean[c];
      var = bn.running_var[c];
    }
    mean[c] = mu;
    invstd[c] = 1.0 / std::sqrt(var + bn.eps);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double h = (xv[base + i] - mu) * invstd[c];
        xhat[base + i] = h;
        o[base + i] = gamma[c] * h + beta[c];
      }
    }
    if (training) {
      const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mu;
      bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * unbiased;
    }
  });
  detail::finished("batch_norm", out);

  Tensor gamma_t = bn.gamma, beta_t = bn.beta;
  if (should_record({&x, &gamma_t, &beta_t})) {
    detail::record("batch_norm", out,
                   [x = Tensor(x), gamma_t, beta_t, out, xhat = std::move(xhat), invstd = std::move(invstd), batch, channels, inner, count, training]() mutable {
                     const double* g = std::as_const(out).grad().data();
                     const double* gm = std::as_const(gamma_t).data();
                     double* xg = x.requires_grad() ? x.grad().data() : nullptr;
                     double* gg = gamma_t.requires_grad() ? gamma_t.grad().data() : nullptr;
                     double* bg = beta_t.requires_grad() ? beta_t.grad().data() : nullptr;
                     parallel_for(0, channels, [&](std::size_t c) {
                       double sum_g = 0.0, sum_gh = 0.0;
                       for (std::size_t b = 0; b < batch; ++b) {
                         const std::size_t base = (b * channels + c) * inner;
                         for (std::size_t i = 0; i < inner; ++i) {
                           sum_g += g[base + i];
                           sum_gh += g[base + i] * xhat[base + i];
                         }
                       }
                       if (gg) gg[c] += sum_gh;
                       if (bg) bg[c] += sum_g;
                       if (!xg) return;
                       const double k = gm[c] * invstd[c];
                       const double n = static_cast<double>(count);
                       for (std::size_t b = 0; b < batch; ++b) {
                         const std::size_t base = (b * channels + c) * inner;
                         for (std::size_t i = 0; i < inner; ++i) {
                           if (training) {
                             xg[base + i] += k * (g[base + i] - sum_g / n - xhat[base + i] * sum_gh / n);
                           } else {
                             xg[base + i] += k * g[base + i];
                           }
                         }
                       }
                     });
                   });
  }
  return out;
}

Tensor batch_norm_1d(const Tensor& x, BatchNorm& bn, bool training) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("batch_norm_1d: expected (B, C) or (B, C, L), got " + shape_str(x.shape()));
  }
  return batch_norm(x, bn, training);
}

Tensor batch_norm_2d(const Tensor& x, BatchNorm& bn, bool training) {
  expect_rank("batch_norm_2d", x, 4);
  return batch_norm(x, bn, training);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 2) throw ShapeError("layer_norm: expected (B, C, ...), got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t per = x.numel() / batch, inner = per / channels;
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " vs affine " + shape_str(gamma.shape()));
  }
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel()), invstd(batch);
  const double* xv = x.data();
  double* o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = xv + b * per;
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < per; ++i) mu += row[i];
    mu /= static_cast<double>(per);
    for (std::size_t i = 0; i < per; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(per);
    invstd[b] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t c = i / inner;
      xhat[b * per + i] = (row[i] - mu) * invstd[b];
      o[b * per + i] = gamma[c] * xhat[b * per + i] + beta[c];
    }
  }
  detail::finished("layer_norm", out);
  if (should_record({&x, &gamma, &beta})) {
    detail::record("layer_norm", out,
                   [x = Tensor(x), gamma = Tensor(gamma), beta = Tensor(beta), out, xhat = std::move(xhat), invstd = std::move(invstd), batch, per, inner]() mutable {
                     const double* g = std::as_const(out).grad().data();
                     const double* gm = std::as_const(gamma).data();
                     if (gamma.requires_grad() || beta.requires_grad()) {
                       double* gg = gamma.requires_grad() ? gamma.grad().data() : nullptr;
                       double* bg = beta.requires_grad() ? beta.grad().data() : nullptr;
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t i = 0; i < per; ++i) {
                           const std::size_t c = i / inner;
                           if (gg) gg[c] += g[b * per + i] * xhat[b * per + i];
                           if (bg) bg[c] += g[b * per + i];
                         }
                       }
                     }
                     if (!x.requires_grad()) return;
                     double* xg = x.grad().data();
                     const double n = static_cast<double>(per);
                     for (std::size_t b = 0; b < batch; ++b) {
                       double sum_d = 0.0, sum_dh = 0.0;
                       for (std::size_t i = 0; i < per; ++i) {
                         const double d = g[b * per + i] * gm[i / inner];
                         sum_d += d;
                         sum_dh += d * xhat[b * per + i];
                       }
                       for (std::size_t i = 0; i < per; ++i) {
                         const double d = g[b * per + i] * gm[i / inner];
                         xg[b * per + i] += invstd[b] * (d - sum_d / n - xhat[b * per + i] * sum_dh / n);
                       }
                     }
                   });
  }
  return out;
}

}  // namespace mssr::ad
