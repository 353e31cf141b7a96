#pragma once

// Learnable sinc band-pass filter banks and the multi-scale front end that
// turns a waveform into a (scales, K, M) representation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "mssr/autodiff/gradcheck.hpp"
#include "mssr/autodiff/ops.hpp"
#include "mssr/autodiff/tensor.hpp"

namespace mssr::sinc {

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Normalized cut-offs (cycles per sample).
struct Cutoffs {
  std::vector<double> f1;
  std::vector<double> f2;
};

// K contiguous bands between K+1 mel-equidistant points over [f_low, f_high] Hz.
Cutoffs init_mel_cutoffs(std::size_t k, double sample_rate, double f_low = 30.0, double f_high = 0.0);

enum class Window {
  Hamming,           // 0.54 - 0.46 cos(2 pi n / L)
  HammingSymmetric,  // denominator L - 1, exactly even about the center tap
};

double window_value(Window window, std::size_t n, std::size_t length);

// g[t] * w[n] with t = n - (L-1)/2. Requires odd L and f1 <= f2.
std::vector<double> build_kernel(double f1, double f2, std::size_t length, Window window = Window::Hamming);

struct KernelGrads {
  std::vector<double> d_f1;
  std::vector<double> d_f2;
};
KernelGrads kernel_param_grads(double f1, double f2, std::size_t length, Window window = Window::Hamming);

// Raw learnable pair (a, b) per filter maps to
//   f1 = min(f_min + |a|, 0.5 - min_band)
//   f2 = min(f1 + min_band + |b|, 0.5)
// which keeps 0 < f1 < f2 <= 0.5 for every real (a, b).
struct Constraint {
  double f_min = 0.0;
  double min_band = 0.0;

  static Constraint for_rate(double sample_rate);
};

std::pair<double, double> map_cutoffs(double a, double b, const Constraint& c);
// Inverse on the unclamped branch: raw values reproducing admissible cut-offs.
std::pair<double, double> raw_from_cutoffs(double f1, double f2, const Constraint& c);

// Differentiable constraint mapping: low, band (K) -> cut-offs (2, K), row 0 = f1.
ad::Tensor sinc_cutoffs(const ad::Tensor& low, const ad::Tensor& band, const Constraint& c);
// Differentiable kernel construction: cut-offs (2, K) -> kernels (K, 1, L).
ad::Tensor sinc_kernels(const ad::Tensor& cutoffs, std::size_t length, Window window = Window::Hamming);

// "Same" cross-correlation of one signal with K kernels: (K, L) -> (K, N).
// Requires N >= L.
std::vector<std::vector<double>> conv1d_bank(std::span<const double> x, const std::vector<std::vector<double>>& kernels);

// Bin i averages [floor(i N / M), ceil((i + 1) N / M)). Requires 1 <= M <= N.
std::vector<double> adaptive_avg_pool1d(std::span<const double> x, std::size_t bins);

struct FrontendConfig {
  std::size_t filters = 160;
  std::vector<std::size_t> kernel_lengths = {251, 501, 1001};
  std::size_t bins = 1024;
  double sample_rate = 16000.0;
  double f_low = 30.0;
  double f_high = 0.0;  // 0 means sample_rate / 2
  Window window = Window::Hamming;
  ad::ConvAlgo conv_algo = ad::ConvAlgo::Automatic;

  void validate() const;
};

struct Scale {
  std::size_t length = 0;
  ad::Tensor low;   // raw a, (K)
  ad::Tensor band;  // raw b, (K)
  ad::BatchNorm bn;
};

// Per scale: sinc conv -> batch norm -> ReLU -> adaptive pool; scales stacked
// on axis 1.
class Frontend {
 public:
  explicit Frontend(FrontendConfig cfg);

  const FrontendConfig& config() const { return cfg_; }
  const Constraint& constraint() const { return constraint_; }
  std::vector<Scale>& scales() { return scales_; }
  const std::vector<Scale>& scales() const { return scales_; }

  // Effective cut-offs of one scale as a (2, K) tensor (recorded on the tape).
  ad::Tensor cutoffs(std::size_t scale) const;
  Cutoffs effective_cutoffs(std::size_t scale) const;

  // x: (B, 1, N) -> (B, scales, K, M)
  ad::Tensor forward(const ad::Tensor& x, bool training);
  // Same computation driven by explicit cut-off tensors, one (2, K) per scale.
  ad::Tensor forward_from_cutoffs(const ad::Tensor& x, std::span<const ad::Tensor> cutoffs, bool training);

 private:
  FrontendConfig cfg_;
  Constraint constraint_;
  std::vector<Scale> scales_;
};

// ---- export ----------------------------------------------------------------

// P5, 8-bit, min-max scaled over the whole matrix. rows x cols, row-major.
void write_pgm(const std::filesystem::path& path, std::span<const double> data, std::size_t rows, std::size_t cols);

// 24-byte header: "MSRP", u32 version (1), u32 scales, u32 K, u32 M,
// u32 bytes per value (8); then f64 little-endian data.
void write_msrp(const std::filesystem::path& path, const ad::Tensor& rep);
ad::Tensor read_msrp(const std::filesystem::path& path);

// ---- gradient checks -------------------------------------------------------

// Per-tap closed-form kernel gradients vs central differences of build_kernel.
ad::GradCheck kernel_tap_gradcheck(std::uint64_t seed, double threshold = 1e-4);
// sinc_cutoffs and sinc_kernels as tape ops, on small random inputs.
std::vector<ad::GradCheck> sinc_op_gradchecks(std::uint64_t seed, double threshold = 1e-5);
// Scalar probe of the full front end w.r.t. every effective f1/f2. The probe
// is a fixed weighted sum of the output, so the finite differences of each
// filter only need that filter's channel recomputed. Differences hold the ReLU
// pattern of the unperturbed point fixed.
ad::GradCheck frontend_gradcheck(const FrontendConfig& cfg, std::size_t batch, std::size_t samples,
                                 std::uint64_t seed, double threshold = 1e-3);

}  // namespace mssr::sinc
