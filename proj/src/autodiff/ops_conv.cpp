#include <algorithm>
#include <complex>
#include <cstring>

#include "internal.hpp"
#include "mssr/autodiff/ops.hpp"
#include "mssr/error.hpp"
#include "mssr/fft.hpp"
#include "mssr/parallel.hpp"

namespace mssr::ad {
namespace {

using cplx = std::complex<double>;

// Kernels at least this long go through the FFT path under ConvAlgo::Automatic.
constexpr std::size_t kFftMinTaps = 64;

struct Conv1dGeom {
  std::size_t batch, cin, n, cout, taps, pad, nout;
};

// Valid output range [lo, hi) for tap j: input index n + j - pad must lie in [0, N).
inline void tap_range(const Conv1dGeom& g, std::size_t j, std::size_t& lo, std::size_t& hi) {
  lo = j < g.pad ? g.pad - j : 0;
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(g.n + g.pad) - static_cast<std::ptrdiff_t>(j);
  hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(h, 0, static_cast<std::ptrdiff_t>(g.nout)));
  if (lo > hi) lo = hi;
}

void conv1d_direct_forward(const Conv1dGeom& g, const double* x, const double* w, double* y) {
  parallel_for(0, g.batch * g.cout, [&](std::size_t bo) {
    const std::size_t b = bo / g.cout, o = bo % g.cout;
    double* out = y + bo * g.nout;
    for (std::size_t c = 0; c < g.cin; ++c) {
      const double* xin = x + (b * g.cin + c) * g.n;
      const double* wk = w + (o * g.cin + c) * g.taps;
      for (std::size_t j = 0; j < g.taps; ++j) {
        std::size_t lo, hi;
        tap_range(g, j, lo, hi);
        const double wj = wk[j];
        const double* src = xin + (lo + j - g.pad);
        double* dst = out + lo;
        for (std::size_t n = 0; n < hi - lo; ++n) dst[n] += wj * src[n];
      }
    }
  });
}

void conv1d_direct_backward(const Conv1dGeom& g, const double* x, const double* w, const double* gy, double* gx,
                            double* gw) {
  if (gx) {
    parallel_for(0, g.batch * g.cin, [&](std::size_t bc) {
      const std::size_t b = bc / g.cin, c = bc % g.cin;
      double* dst = gx + bc * g.n;
      for (std::size_t o = 0; o < g.cout; ++o) {
        const double* dy = gy + (b * g.cout + o) * g.nout;
        const double* wk = w + (o * g.cin + c) * g.taps;
        for (std::size_t j = 0; j < g.taps; ++j) {
          std::size_t lo, hi;
          tap_range(g, j, lo, hi);
          const double wj = wk[j];
          double* d = dst + (lo + j - g.pad);
          const double* src = dy + lo;
          for (std::size_t n = 0; n < hi - lo; ++n) d[n] += wj * src[n];
        }
      }
    });
  }
  if (gw) {
    parallel_for(0, g.cout * g.cin, [&](std::size_t oc) {
      const std::size_t o = oc / g.cin, c = oc % g.cin;
      for (std::size_t j = 0; j < g.taps; ++j) {
        std::size_t lo, hi;
        tap_range(g, j, lo, hi);
        double acc = 0.0;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* dy = gy + (b * g.cout + o) * g.nout + lo;
          const double* src = x + (b * g.cin + c) * g.n + (lo + j - g.pad);
          for (std::size_t n = 0; n < hi - lo; ++n) acc += dy[n] * src[n];
        }
        gw[oc * g.taps + j] += acc;
      }
    });
  }
}

// Single input channel, FFT-based. Linear correlation is embedded in a
// circular one of length nfft >= N + L - 1 (and >= N + 2*pad), which leaves
// every needed lag free of wrap-around.
struct FftConv1d {
  Conv1dGeom g;
  std::size_t nfft;
  std::size_t nspec;
  std::vector<cplx> x_spec;  // batch x nspec

  explicit FftConv1d(const Conv1dGeom& geom) : g(geom) {
    nfft = fft::good_size(std::max(g.n + g.taps - 1, g.n + 2 * g.pad));
    nspec = nfft / 2 + 1;
  }

  void transform_inputs(const double* x) {
    x_spec.assign(g.batch * nspec, cplx{});
    parallel_for(0, g.batch, [&](std::size_t b) {
      auto buf = fft::alloc_real(nfft);
      auto spec = fft::alloc_complex(nspec);
      std::memcpy(buf.get(), x + b * g.n, g.n * sizeof(double));
      std::fill(buf.get() + g.n, buf.get() + nfft, 0.0);
      fft::forward(nfft, buf.get(), spec.get());
      std::copy_n(spec.get(), nspec, x_spec.begin() + b * nspec);
    });
  }

  // Spectra of the kernels, reversed for correlation or as-is for convolution.
  std::vector<cplx> kernel_spectra(const double* w, bool reversed) const {
    std::vector<cplx> out(g.cout * nspec);
    parallel_for(0, g.cout, [&](std::size_t o) {
      auto buf = fft::alloc_real(nfft);
      auto spec = fft::alloc_complex(nspec);
      std::fill(buf.get(), buf.get() + nfft, 0.0);
      for (std::size_t j = 0; j < g.taps; ++j) buf[reversed ? g.taps - 1 - j : j] = w[o * g.taps + j];
      fft::forward(nfft, buf.get(), spec.get());
      std::copy_n(spec.get(), nspec, out.begin() + o * nspec);
    });
    return out;
  }

  void forward(const double* w, double* y) const {
    const auto k_spec = kernel_spectra(w, true);
    const double norm = 1.0 / static_cast<double>(nfft);
    const std::size_t shift = g.taps - 1 - g.pad;
    parallel_for(0, g.batch * g.cout, [&](std::size_t bo) {
      const std::size_t b = bo / g.cout, o = bo % g.cout;
      auto spec = fft::alloc_complex(nspec);
      auto buf = fft::alloc_real(nfft);
      const cplx* xs = x_spec.data() + b * nspec;
      const cplx* ks = k_spec.data() + o * nspec;
      for (std::size_t i = 0; i < nspec; ++i) spec[i] = xs[i] * ks[i];
      fft::inverse(nfft, spec.get(), buf.get());
      double* out = y + bo * g.nout;
      for (std::size_t n = 0; n < g.nout; ++n) out[n] += buf[n + shift] * norm;
    });
  }

  void backward(const double* w, const double* gy, double* gx, double* gw) const {
    const double norm = 1.0 / static_cast<double>(nfft);
    if (gw) {
      parallel_for(0, g.cout, [&](std::size_t o) {
        auto buf = fft::alloc_real(nfft);
        auto spec = fft::alloc_complex(nspec);
        std::vector<cplx> acc(nspec, cplx{});
        for (std::size_t b = 0; b < g.batch; ++b) {
          std::memcpy(buf.get(), gy + (b * g.cout + o) * g.nout, g.nout * sizeof(double));
          std::fill(buf.get() + g.nout, buf.get() + nfft, 0.0);
          fft::forward(nfft, buf.get(), spec.get());
          const cplx* xs = x_spec.data() + b * nspec;
          for (std::size_t i = 0; i < nspec; ++i) acc[i] += std::conj(spec[i]) * xs[i];
        }
        std::copy(acc.begin(), acc.end(), spec.get());
        fft::inverse(nfft, spec.get(), buf.get());
        for (std::size_t j = 0; j < g.taps; ++j) {
          const std::size_t lag = j >= g.pad ? j - g.pad : nfft - (g.pad - j);
          gw[o * g.taps + j] += buf[lag] * norm;
        }
      });
    }
    if (gx) {
      const auto w_spec = kernel_spectra(w, false);
      parallel_for(0, g.batch, [&](std::size_t b) {
        auto buf = fft::alloc_real(nfft);
        auto spec = fft::alloc_complex(nspec);
        std::vector<cplx> acc(nspec, cplx{});
        for (std::size_t o = 0; o < g.cout; ++o) {
          std::memcpy(buf.get(), gy + (b * g.cout + o) * g.nout, g.nout * sizeof(double));
          std::fill(buf.get() + g.nout, buf.get() + nfft, 0.0);
          fft::forward(nfft, buf.get(), spec.get());
          const cplx* ws = w_spec.data() + o * nspec;
          for (std::size_t i = 0; i < nspec; ++i) acc[i] += spec[i] * ws[i];
        }
        std::copy(acc.begin(), acc.end(), spec.get());
        fft::inverse(nfft, spec.get(), buf.get());
        for (std::size_t m = 0; m < g.n; ++m) gx[b * g.n + m] += buf[m + g.pad] * norm;
      });
    }
  }
};

void add_bias(const Tensor& bias, std::size_t batch, std::size_t channels, std::size_t inner, double* y) {
  if (!bias.defined()) return;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      double* row = y + (b * channels + c) * inner;
      std::fill(row, row + inner, bias[c]);
    }
}

void bias_grad(Tensor& bias, const double* g, std::size_t batch, std::size_t channels, std::size_t inner) {
  if (!bias.defined() || !bias.requires_grad()) return;
  auto bg = bias.grad();
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const double* row = g + (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) acc += row[i];
    }
    bg[c] += acc;
  }
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv1dOptions& opt) {
  expect_rank("conv1d", x, 3);
  expect_rank("conv1d", weight, 3);
  Conv1dGeom g{x.dim(0), x.dim(1), x.dim(2), weight.dim(0), weight.dim(2), opt.padding, 0};
  if (weight.dim(1) != g.cin) {
    throw ShapeError("conv1d: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != g.cout) {
    throw ShapeError("conv1d: bias " + shape_str(bias.shape()) + " for weight " + shape_str(weight.shape()));
  }
  if (g.n + 2 * g.pad < g.taps || g.pad >= g.taps) {
    throw ShapeError("conv1d: kernel " + shape_str(weight.shape()) + " too long for input " + shape_str(x.shape()) +
                     " with padding " + std::to_string(g.pad));
  }
  g.nout = g.n + 2 * g.pad - g.taps + 1;

  bool use_fft = opt.algo == ConvAlgo::Fft || (opt.algo == ConvAlgo::Automatic && g.taps >= kFftMinTaps);
  if (g.cin != 1) use_fft = false;

  Tensor out(Shape{g.batch, g.cout, g.nout});
  add_bias(bias, g.batch, g.cout, g.nout, out.data());
  std::shared_ptr<FftConv1d> plan;
  if (use_fft) {
    plan = std::make_shared<FftConv1d>(g);
    plan->transform_inputs(x.data());
    plan->forward(weight.data(), out.data());
  } else {
    conv1d_direct_forward(g, x.data(), weight.data(), out.data());
  }
  detail::finished("conv1d", out);

  if (should_record({&x, &weight, &bias})) {
    detail::record("conv1d", out, [x = Tensor(x), weight = Tensor(weight), bias = Tensor(bias), out, g, plan]() mutable {
      const double* gy = std::as_const(out).grad().data();
      double* gx = x.requires_grad() ? x.grad().data() : nullptr;
      double* gw = weight.requires_grad() ? weight.grad().data() : nullptr;
      if (plan) {
        plan->backward(std::as_const(weight).data(), gy, gx, gw);
      } else {
        conv1d_direct_backward(g, std::as_const(x).data(), std::as_const(weight).data(), gy, gx, gw);
      }
      bias_grad(bias, gy, g.batch, g.cout, g.nout);
    });
  }
  return out;
}

namespace {

struct Conv2dGeom {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
  std::size_t ckk() const { return cin * kh * kw; }
  std::size_t spatial() const { return oh * ow; }
};

void im2col(const Conv2dGeom& g, const double* x, double* col) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * g.spatial();
        for (std::size_t i = 0; i < g.oh; ++i) {
          const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + i * g.ow;
          if (r < 0 || r >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(r)) * g.w;
          for (std::size_t j = 0; j < g.ow; ++j) {
            const std::ptrdiff_t cc =
                static_cast<std::ptrdiff_t>(j * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            dst[j] = (cc < 0 || cc >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[cc];
          }
        }
      }
    }
  }
}

void col2im(const Conv2dGeom& g, const double* col, double* x) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * g.spatial();
        for (std::size_t i = 0; i < g.oh; ++i) {
          const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (r < 0 || r >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = x + (c * g.h + static_cast<std::size_t>(r)) * g.w;
          for (std::size_t j = 0; j < g.ow; ++j) {
            const std::ptrdiff_t cc =
                static_cast<std::ptrdiff_t>(j * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (cc >= 0 && cc < static_cast<std::ptrdiff_t>(g.w)) dst[cc] += row[i * g.ow + j];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt) {
  expect_rank("conv2d", x, 4);
  expect_rank("conv2d", weight, 4);
  Conv2dGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3),
               opt.stride, opt.padding, 0, 0};
  if (weight.dim(1) != g.cin) {
    throw ShapeError("conv2d: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != g.cout) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for weight " + shape_str(weight.shape()));
  }
  if (g.stride < 1 || g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " does not fit input " + shape_str(x.shape()));
  }
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  Tensor out(Shape{g.batch, g.cout, g.oh, g.ow});
  add_bias(bias, g.batch, g.cout, g.spatial(), out.data());
  const double* xv = x.data();
  const double* wv = weight.data();
  double* ov = out.data();
  parallel_for(0, g.batch, [&](std::size_t b) {
    std::vector<double> col(g.ckk() * g.spatial());
    im2col(g, xv + b * g.cin * g.h * g.w, col.data());
    detail::gemm_nn(g.cout, g.spatial(), g.ckk(), wv, col.data(), ov + b * g.cout * g.spatial(), true);
  });
  detail::finished("conv2d", out);

  if (should_record({&x, &weight, &bias})) {
    detail::record("conv2d", out, [x = Tensor(x), weight = Tensor(weight), bias = Tensor(bias), out, g]() mutable {
      const double* gy = std::as_const(out).grad().data();
      const double* xv = std::as_const(x).data();
      const double* wv = std::as_const(weight).data();
      double* gx = x.requires_grad() ? x.grad().data() : nullptr;
      const bool want_w = weight.requires_grad();
      const std::size_t wsize = g.cout * g.ckk();
      std::vector<double> partial(want_w ? g.batch * wsize : 0, 0.0);
      parallel_for(0, g.batch, [&](std::size_t b) {
        const double* dy = gy + b * g.cout * g.spatial();
        if (want_w) {
          std::vector<double> col(g.ckk() * g.spatial()), colt(g.spatial() * g.ckk());
          im2col(g, xv + b * g.cin * g.h * g.w, col.data());
          detail::transpose(g.ckk(), g.spatial(), col.data(), colt.data());
          detail::gemm_nn(g.cout, g.ckk(), g.spatial(), dy, colt.data(), partial.data() + b * wsize, false);
        }
        if (gx) {
          std::vector<double> dcol(g.ckk() * g.spatial());
          detail::gemm_tn(g.ckk(), g.spatial(), g.cout, wv, dy, dcol.data(), false);
          col2im(g, dcol.data(), gx + b * g.cin * g.h * g.w);
        }
      });
      if (want_w) {
        auto gw = weight.grad();
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t i = 0; i < wsize; ++i) gw[i] += partial[b * wsize + i];
      }
      bias_grad(bias, gy, g.batch, g.cout, g.spatial());
    });
  }
  return out;
}

}  // namespace mssr::ad
