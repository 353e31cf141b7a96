#include <algorithm>
#include <cmath>
#include <limits>

#include "internal.hpp"
#include "mssr/autodiff/ops.hpp"
#include "mssr/error.hpp"

namespace mssr::ad {

namespace detail {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p * m + i];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void transpose(std::size_t rows, std::size_t cols, const double* in, double* out) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t r1 = std::min(rows, r0 + kBlock), c1 = std::min(cols, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
    }
  }
}

}  // namespace detail

namespace {

Tensor add_impl(const char* op, const Tensor& a, const Tensor& b) {
  expect_same_shape(op, a, b);
  Tensor out(a.shape());
  auto o = out.values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  detail::finished(op, out);
  if (should_record({&a, &b})) {
    detail::record(op, out, [a = Tensor(a), b = Tensor(b), out]() mutable {
      const auto g = std::as_const(out).grad();
      for (Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto tg = t->grad();
        for (std::size_t i = 0; i < g.size(); ++i) tg[i] += g[i];
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_impl("add", a, b); }
Tensor residual_add(const Tensor& a, const Tensor& b) { return add_impl("residual_add", a, b); }

Tensor mul(const Tensor& a, const Tensor& b) {
  expect_same_shape("mul", a, b);
  Tensor out(a.shape());
  auto o = out.values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  detail::finished("mul", out);
  if (should_record({&a, &b})) {
    detail::record("mul", out, [a = Tensor(a), b = Tensor(b), out]() mutable {
      const auto g = std::as_const(out).grad();
      if (a.requires_grad()) {
        auto ag = a.grad();
        auto bv = std::as_const(b).values();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto bg = b.grad();
        auto av = std::as_const(a).values();
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out(a.shape());
  auto o = out.values();
  auto av = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * factor;
  detail::finished("scale", out);
  if (should_record({&a})) {
    detail::record("scale", out, [a = Tensor(a), out, factor]() mutable {
      const auto g = std::as_const(out).grad();
      auto ag = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out(Shape{1});
  double s = 0.0;
  for (double v : a.values()) s += v;
  out[0] = s;
  detail::finished("sum", out);
  if (should_record({&a})) {
    detail::record("sum", out, [a = Tensor(a), out]() mutable {
      const double g = std::as_const(out).grad()[0];
      for (double& x : a.grad()) x += g;
    });
  }
  return out;
}

Tensor weighted_sum(const Tensor& a, std::span<const double> weights) {
  if (weights.size() != a.numel()) {
    throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for shape " +
                     shape_str(a.shape()));
  }
  Tensor out(Shape{1});
  double s = 0.0;
  auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * weights[i];
  out[0] = s;
  detail::finished("weighted_sum", out);
  if (should_record({&a})) {
    std::vector<double> w(weights.begin(), weights.end());
    detail::record("weighted_sum", out, [a = Tensor(a), out, w = std::move(w)]() mutable {
      const double g = std::as_const(out).grad()[0];
      auto ag = a.grad();
      for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += g * w[i];
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  expect_rank("matmul", a, 2);
  expect_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  detail::gemm_nn(m, n, k, a.data(), b.data(), out.data(), false);
  detail::finished("matmul", out);
  if (should_record({&a, &b})) {
    detail::record("matmul", out, [a = Tensor(a), b = Tensor(b), out, m, n, k]() mutable {
      const double* g = std::as_const(out).grad().data();
      if (a.requires_grad()) {
        std::vector<double> bt(n * k);
        detail::transpose(k, n, std::as_const(b).data(), bt.data());
        detail::gemm_nn(m, k, n, g, bt.data(), a.grad().data(), true);
      }
      if (b.requires_grad()) detail::gemm_tn(k, n, m, std::as_const(a).data(), g, b.grad().data(), true);
    });
  }
  return out;
}

Tensor fully_connected(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  expect_rank("fully_connected", x, 2);
  expect_rank("fully_connected", weight, 2);
  const std::size_t batch = x.dim(0), in = x.dim(1), outn = weight.dim(0);
  if (weight.dim(1) != in || bias.numel() != outn) {
    throw ShapeError("fully_connected: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()));
  }
  Tensor out(Shape{batch, outn});
  std::vector<double> wt(in * outn);
  detail::transpose(outn, in, weight.data(), wt.data());
  auto o = out.values();
  auto bv = bias.values();
  for (std::size_t b = 0; b < batch; ++b) std::copy(bv.begin(), bv.end(), o.begin() + b * outn);
  detail::gemm_nn(batch, outn, in, x.data(), wt.data(), out.data(), true);
  detail::finished("fully_connected", out);
  if (should_record({&x, &weight, &bias})) {
    detail::record("fully_connected", out, [x = Tensor(x), weight = Tensor(weight), bias = Tensor(bias), out, batch, in, outn]() mutable {
      const double* g = std::as_const(out).grad().data();
      if (x.requires_grad()) detail::gemm_nn(batch, in, outn, g, std::as_const(weight).data(), x.grad().data(), true);
      if (weight.requires_grad()) detail::gemm_tn(outn, in, batch, g, std::as_const(x).data(), weight.grad().data(), true);
      if (bias.requires_grad()) {
        auto bg = bias.grad();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t j = 0; j < outn; ++j) bg[j] += g[b * outn + j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto v = x.values();
  Tensor out(std::move(shape), std::vector<double>(v.begin(), v.end()));
  if (should_record({&x})) {
    detail::record("reshape", out, [x = Tensor(x), out]() mutable {
      const auto g = std::as_const(out).grad();
      auto xg = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
    });
  }
  return out;
}

Tensor flatten(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("flatten: scalar input");
  return reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)});
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
      }
    }
    shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  Tensor out(shape);
  const std::size_t out_stride = shape[axis] * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data() + o * chunk, chunk, out.data() + o * out_stride + offset);
    }
    offset += chunk;
  }

  bool any = false;
  for (const auto& p : parts) any = any || should_record({&p});
  if (any) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    detail::record("concat", out, [inputs, out, outer, inner, axis, out_stride]() mutable {
      const double* g = std::as_const(out).grad().data();
      std::size_t offset = 0;
      for (auto& p : inputs) {
        const std::size_t chunk = p.dim(axis) * inner;
        if (p.requires_grad()) {
          double* pg = p.grad().data();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < chunk; ++i) pg[o * chunk + i] += g[o * out_stride + offset + i];
        }
        offset += chunk;
      }
    });
  }
  return out;
}

std::vector<std::vector<double>> softmax_rows(const Tensor& logits) {
  expect_rank("softmax", logits, 2);
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<std::vector<double>> rows(batch, std::vector<double>(classes));
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = logits.data() + b * classes;
    const double zmax = *std::max_element(z, z + classes);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += rows[b][c] = std::exp(z[c] - zmax);
    for (double& p : rows[b]) p /= total;
  }
  return rows;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  expect_rank("softmax_cross_entropy", logits, 2);
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(l) + " out of range for " +
                       std::to_string(classes) + " classes");
    }
  }
  auto probs = softmax_rows(logits);
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = logits.data() + b * classes;
    const double zmax = *std::max_element(z, z + classes);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(z[c] - zmax);
    loss += zmax + std::log(total) - z[labels[b]];
  }
  Tensor out(Shape{1});
  out[0] = loss / static_cast<double>(batch);
  detail::finished("softmax_cross_entropy", out);
  if (should_record({&logits})) {
    std::vector<int> lab(labels.begin(), labels.end());
    detail::record("softmax_cross_entropy", out,
                   [logits = Tensor(logits), out, probs = std::move(probs), lab = std::move(lab), batch, classes]() mutable {
                     const double g = std::as_const(out).grad()[0] / static_cast<double>(batch);
                     auto lg = logits.grad();
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t c = 0; c < classes; ++c) {
                         const double target = static_cast<int>(c) == lab[b] ? 1.0 : 0.0;
                         lg[b * classes + c] += g * (probs[b][c] - target);
                       }
                     }
                   });
  }
  return out;
}

}  // namespace mssr::ad
