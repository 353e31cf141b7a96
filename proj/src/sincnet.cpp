#include "mssr/sincnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <string>

#include "mssr/autodiff/tape.hpp"
#include "mssr/error.hpp"

namespace mssr::sinc {

using ad::Shape;
using ad::Tensor;

namespace {

constexpr double kPi = std::numbers::pi;

void require_odd(std::size_t length) {
  if (length == 0 || length % 2 == 0) {
    throw ShapeError("sinc kernel length must be odd, got " + std::to_string(length));
  }
}

void require_band(double f1, double f2) {
  if (f1 > f2) {
    throw ShapeError("sinc kernel needs f1 <= f2, got f1=" + std::to_string(f1) + " f2=" + std::to_string(f2));
  }
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Cutoffs init_mel_cutoffs(std::size_t k, double sample_rate, double f_low, double f_high) {
  if (k == 0) throw ConfigError("filter count must be >= 1");
  if (f_high <= 0.0) f_high = sample_rate / 2.0;
  if (!(f_low > 0.0) || !(f_low < f_high) || f_high > sample_rate / 2.0) {
    throw ConfigError("mel init needs 0 < f_low < f_high <= sample_rate / 2");
  }
  const double m_lo = hz_to_mel(f_low), m_hi = hz_to_mel(f_high);
  std::vector<double> edges(k + 1);
  for (std::size_t i = 0; i <= k; ++i) {
    const double mel = m_lo + (m_hi - m_lo) * static_cast<double>(i) / static_cast<double>(k);
    edges[i] = mel_to_hz(mel);
  }
  // The endpoints are exact, not round-tripped through the mel formula.
  edges.front() = f_low;
  edges.back() = f_high;
  Cutoffs c;
  for (std::size_t i = 0; i < k; ++i) {
    c.f1.push_back(edges[i] / sample_rate);
    c.f2.push_back(edges[i + 1] / sample_rate);
  }
  return c;
}

double window_value(Window window, std::size_t n, std::size_t length) {
  if (window == Window::Hamming) {
    return 0.54 - 0.46 * std::cos(2.0 * kPi * static_cast<double>(n) / static_cast<double>(length));
  }
  if (length < 2) return 1.0;
  // Mirrored index so both halves evaluate the identical expression.
  const std::size_t m = std::min(n, length - 1 - n);
  return 0.54 - 0.46 * std::cos(2.0 * kPi * static_cast<double>(m) / static_cast<double>(length - 1));
}

std::vector<double> build_kernel(double f1, double f2, std::size_t length, Window window) {
  require_odd(length);
  require_band(f1, f2);
  const auto half = static_cast<std::ptrdiff_t>((length - 1) / 2);
  std::vector<double> g(length);
  for (std::size_t n = 0; n < length; ++n) {
    const auto t = static_cast<double>(static_cast<std::ptrdiff_t>(n) - half);
    const double band = t == 0.0 ? 2.0 * (f2 - f1)
                                 : (std::sin(2.0 * kPi * f2 * t) - std::sin(2.0 * kPi * f1 * t)) / (kPi * t);
    g[n] = band * window_value(window, n, length);
  }
  return g;
}

KernelGrads kernel_param_grads(double f1, double f2, std::size_t length, Window window) {
  require_odd(length);
  require_band(f1, f2);
  const auto half = static_cast<std::ptrdiff_t>((length - 1) / 2);
  KernelGrads out{std::vector<double>(length), std::vector<double>(length)};
  for (std::size_t n = 0; n < length; ++n) {
    const auto t = static_cast<double>(static_cast<std::ptrdiff_t>(n) - half);
    const double w = window_value(window, n, length);
    out.d_f1[n] = -2.0 * std::cos(2.0 * kPi * f1 * t) * w;
    out.d_f2[n] = 2.0 * std::cos(2.0 * kPi * f2 * t) * w;
  }
  return out;
}

Constraint Constraint::for_rate(double sample_rate) {
  if (!(sample_rate > 0.0)) throw ConfigError("sample rate must be positive");
  return Constraint{30.0 / sample_rate, 1.0 / sample_rate};
}

namespace {

struct MappedPair {
  double f1, f2;
  double df1_da, df2_da, df2_db;
};

MappedPair map_with_derivatives(double a, double b, const Constraint& c) {
  const double sa = a < 0.0 ? -1.0 : 1.0;
  const double sb = b < 0.0 ? -1.0 : 1.0;
  MappedPair m{};
  const double f1_cap = 0.5 - c.min_band;
  const double u1 = c.f_min + std::abs(a);
  const bool clamp1 = u1 > f1_cap;
  m.f1 = clamp1 ? f1_cap : u1;
  m.df1_da = clamp1 ? 0.0 : sa;
  const double u2 = m.f1 + c.min_band + std::abs(b);
  const bool clamp2 = u2 > 0.5;
  m.f2 = clamp2 ? 0.5 : u2;
  m.df2_da = clamp2 ? 0.0 : m.df1_da;
  m.df2_db = clamp2 ? 0.0 : sb;
  return m;
}

}  // namespace

std::pair<double, double> map_cutoffs(double a, double b, const Constraint& c) {
  const auto m = map_with_derivatives(a, b, c);
  return {m.f1, m.f2};
}

std::pair<double, double> raw_from_cutoffs(double f1, double f2, const Constraint& c) {
  return {std::max(0.0, f1 - c.f_min), std::max(0.0, f2 - f1 - c.min_band)};
}

Tensor sinc_cutoffs(const Tensor& low, const Tensor& band, const Constraint& c) {
  ad::expect_rank("sinc_cutoffs", low, 1);
  ad::expect_same_shape("sinc_cutoffs", low, band);
  const std::size_t k = low.numel();
  Tensor out(Shape{2, k});
  std::vector<MappedPair> maps(k);
  for (std::size_t i = 0; i < k; ++i) {
    maps[i] = map_with_derivatives(low[i], band[i], c);
    out[i] = maps[i].f1;
    out[k + i] = maps[i].f2;
  }
  if (ad::should_record({&low, &band})) {
    out.set_requires_grad(true);
    ad::active_tape()->record("sinc_cutoffs", out, [low = Tensor(low), band = Tensor(band), out, maps, k]() mutable {
      const auto g = std::as_const(out).grad();
      if (low.requires_grad()) {
        auto gl = low.grad();
        for (std::size_t i = 0; i < k; ++i) gl[i] += g[i] * maps[i].df1_da + g[k + i] * maps[i].df2_da;
      }
      if (band.requires_grad()) {
        auto gb = band.grad();
        for (std::size_t i = 0; i < k; ++i) gb[i] += g[k + i] * maps[i].df2_db;
      }
    });
  }
  return out;
}

Tensor sinc_kernels(const Tensor& cutoffs, std::size_t length, Window window) {
  ad::expect_rank("sinc_kernels", cutoffs, 2);
  if (cutoffs.dim(0) != 2) throw ShapeError("sinc_kernels: cut-offs must be (2, K), got " + ad::shape_str(cutoffs.shape()));
  const std::size_t k = cutoffs.dim(1);
  Tensor out(Shape{k, 1, length});
  for (std::size_t i = 0; i < k; ++i) {
    const auto g = build_kernel(cutoffs[i], cutoffs[k + i], length, window);
    std::copy(g.begin(), g.end(), out.data() + i * length);
  }
  if (ad::should_record({&cutoffs})) {
    out.set_requires_grad(true);
    ad::active_tape()->record("sinc_kernels", out, [cutoffs = Tensor(cutoffs), out, k, length, window]() mutable {
      const auto g = std::as_const(out).grad();
      auto gc = cutoffs.grad();
      for (std::size_t i = 0; i < k; ++i) {
        const auto d = kernel_param_grads(cutoffs[i], cutoffs[k + i], length, window);
        const double* gi = g.data() + i * length;
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t n = 0; n < length; ++n) {
          s1 += gi[n] * d.d_f1[n];
          s2 += gi[n] * d.d_f2[n];
        }
        gc[i] += s1;
        gc[k + i] += s2;
      }
    });
  }
  return out;
}

std::vector<std::vector<double>> conv1d_bank(std::span<const double> x, const std::vector<std::vector<double>>& kernels) {
  if (kernels.empty()) throw ShapeError("conv1d_bank: no kernels");
  const std::size_t length = kernels.front().size();
  require_odd(length);
  if (x.size() < length) {
    throw ShapeError("conv1d_bank: signal length " + std::to_string(x.size()) + " is shorter than kernel length " +
                     std::to_string(length));
  }
  Tensor xt(Shape{1, 1, x.size()}, std::vector<double>(x.begin(), x.end()));
  Tensor w(Shape{kernels.size(), 1, length});
  for (std::size_t k = 0; k < kernels.size(); ++k) {
    if (kernels[k].size() != length) throw ShapeError("conv1d_bank: kernels differ in length");
    std::copy(kernels[k].begin(), kernels[k].end(), w.data() + k * length);
  }
  ad::NoGradScope no_grad;
  const Tensor y = ad::conv1d(xt, w, Tensor{}, {(length - 1) / 2, ad::ConvAlgo::Direct});
  std::vector<std::vector<double>> out(kernels.size());
  for (std::size_t k = 0; k < kernels.size(); ++k) {
    out[k].assign(y.data() + k * x.size(), y.data() + (k + 1) * x.size());
  }
  return out;
}

std::vector<double> adaptive_avg_pool1d(std::span<const double> x, std::size_t bins) {
  Tensor xt(Shape{1, 1, x.size()}, std::vector<double>(x.begin(), x.end()));
  ad::NoGradScope no_grad;
  const Tensor y = ad::adaptive_avg_pool_1d(xt, bins);
  return {y.values().begin(), y.values().end()};
}

void FrontendConfig::validate() const {
  if (filters == 0) throw ConfigError("K (filters) must be >= 1");
  if (kernel_lengths.empty()) throw ConfigError("kernel_lengths must not be empty");
  for (std::size_t l : kernel_lengths) {
    if (l == 0 || l % 2 == 0) throw ConfigError("kernel_lengths must all be odd, got " + std::to_string(l));
  }
  if (bins == 0) throw ConfigError("rep_bins must be >= 1");
  if (!(sample_rate > 0.0)) throw ConfigError("sample_rate must be positive");
}

Frontend::Frontend(FrontendConfig cfg) : cfg_(std::move(cfg)), constraint_(Constraint::for_rate(cfg_.sample_rate)) {
  cfg_.validate();
  const Cutoffs init = init_mel_cutoffs(cfg_.filters, cfg_.sample_rate, cfg_.f_low, cfg_.f_high);
  for (std::size_t length : cfg_.kernel_lengths) {
    Scale s;
    s.length = length;
    s.low = Tensor(Shape{cfg_.filters});
    s.band = Tensor(Shape{cfg_.filters});
    for (std::size_t k = 0; k < cfg_.filters; ++k) {
      const auto [a, b] = raw_from_cutoffs(init.f1[k], init.f2[k], constraint_);
      s.low[k] = a;
      s.band[k] = b;
    }
    s.low.set_requires_grad(true);
    s.band.set_requires_grad(true);
    s.bn = ad::BatchNorm(cfg_.filters);
    scales_.push_back(std::move(s));
  }
}

Tensor Frontend::cutoffs(std::size_t scale) const {
  const Scale& s = scales_.at(scale);
  return sinc_cutoffs(s.low, s.band, constraint_);
}

Cutoffs Frontend::effective_cutoffs(std::size_t scale) const {
  ad::NoGradScope no_grad;
  const Tensor c = cutoffs(scale);
  const std::size_t k = c.dim(1);
  Cutoffs out;
  out.f1.assign(c.data(), c.data() + k);
  out.f2.assign(c.data() + k, c.data() + 2 * k);
  return out;
}

Tensor Frontend::forward(const Tensor& x, bool training) {
  std::vector<Tensor> cuts;
  for (std::size_t s = 0; s < scales_.size(); ++s) cuts.push_back(cutoffs(s));
  return forward_from_cutoffs(x, cuts, training);
}

Tensor Frontend::forward_from_cutoffs(const Tensor& x, std::span<const Tensor> cutoffs, bool training) {
  ad::expect_rank("frontend", x, 3);
  if (x.dim(1) != 1) throw ShapeError("frontend: input must be (B, 1, N), got " + ad::shape_str(x.shape()));
  if (cutoffs.size() != scales_.size()) throw ShapeError("frontend: one cut-off tensor per scale expected");
  const std::size_t batch = x.dim(0), n = x.dim(2);
  std::vector<Tensor> maps;
  for (std::size_t s = 0; s < scales_.size(); ++s) {
    Scale& sc = scales_[s];
    if (n < sc.length) {
      throw ShapeError("frontend: clip length " + std::to_string(n) + " is shorter than kernel length " +
                       std::to_string(sc.length));
    }
    const Tensor kernels = sinc_kernels(cutoffs[s], sc.length, cfg_.window);
    Tensor y = ad::conv1d(x, kernels, Tensor{}, {(sc.length - 1) / 2, cfg_.conv_algo});
    y = ad::batch_norm_1d(y, sc.bn, training);
    y = ad::relu(y);
    y = ad::adaptive_avg_pool_1d(y, cfg_.bins);
    maps.push_back(ad::reshape(y, Shape{batch, 1, cfg_.filters, cfg_.bins}));
  }
  if (maps.size() == 1) return maps.front();
  return ad::concat(maps, 1);
}

// ---- export ----------------------------------------------------------------

void write_pgm(const std::filesystem::path& path, std::span<const double> data, std::size_t rows, std::size_t cols) {
  if (data.size() != rows * cols) throw ShapeError("write_pgm: data size does not match rows x cols");
  const auto [lo_it, hi_it] = std::minmax_element(data.begin(), data.end());
  const double lo = data.empty() ? 0.0 : *lo_it, hi = data.empty() ? 0.0 : *hi_it;
  const double span = hi - lo;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << cols << " " << rows << "\n255\n";
  std::vector<unsigned char> bytes(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double v = span > 0.0 ? (data[i] - lo) / span : 0.0;
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(const unsigned char* b) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void write_msrp(const std::filesystem::path& path, const Tensor& rep) {
  ad::expect_rank("write_msrp", rep, 3);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write("MSRP", 4);
  put_u32(out, 1);
  for (std::size_t a = 0; a < 3; ++a) put_u32(out, static_cast<std::uint32_t>(rep.dim(a)));
  put_u32(out, 8);
  for (double v : rep.values()) put_f64(out, v);
}

Tensor read_msrp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 24 || std::memcmp(bytes.data(), "MSRP", 4) != 0) throw DataError(path.string() + ": not an MSRP file");
  if (get_u32(bytes.data() + 4) != 1) throw DataError(path.string() + ": unsupported MSRP version");
  const Shape shape{get_u32(bytes.data() + 8), get_u32(bytes.data() + 12), get_u32(bytes.data() + 16)};
  if (get_u32(bytes.data() + 20) != 8) throw DataError(path.string() + ": unsupported value width");
  const std::size_t count = ad::shape_numel(shape);
  if (bytes.size() != 24 + 8 * count) throw DataError(path.string() + ": truncated MSRP data");
  Tensor t(shape);
  for (std::size_t i = 0; i < count; ++i) t[i] = get_f64(bytes.data() + 24 + 8 * i);
  return t;
}

// ---- gradient checks -------------------------------------------------------

ad::GradCheck kernel_tap_gradcheck(std::uint64_t seed, double threshold) {
  constexpr double kStep = 1e-6;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> lo(0.002, 0.2), width(0.005, 0.25);
  ad::GradCheck result{"sinc_kernel_taps", 0.0, threshold};
  for (std::size_t length : {std::size_t{251}, std::size_t{501}, std::size_t{1001}}) {
    for (int trial = 0; trial < 8; ++trial) {
      const double f1 = lo(rng), f2 = std::min(0.5, f1 + width(rng));
      const auto d = kernel_param_grads(f1, f2, length);
      std::vector<double> n1(length), n2(length);
      const auto a1 = build_kernel(f1 + kStep, f2, length), b1 = build_kernel(f1 - kStep, f2, length);
      const auto a2 = build_kernel(f1, f2 + kStep, length), b2 = build_kernel(f1, f2 - kStep, length);
      for (std::size_t i = 0; i < length; ++i) {
        n1[i] = (a1[i] - b1[i]) / (2.0 * kStep);
        n2[i] = (a2[i] - b2[i]) / (2.0 * kStep);
      }
      result.max_rel_error = std::max({result.max_rel_error, ad::relative_error(d.d_f1, n1),
                                       ad::relative_error(d.d_f2, n2)});
    }
  }
  return result;
}

std::vector<ad::GradCheck> sinc_op_gradchecks(std::uint64_t seed, double threshold) {
  constexpr double kStep = 1e-6;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> mag(0.01, 0.1);
  std::bernoulli_distribution sign(0.5);
  auto weights = [&](std::size_t n) {
    std::vector<double> w(n);
    for (double& v : w) v = normal(rng);
    return w;
  };
  std::vector<ad::GradCheck> out;

  {
    // Raw values kept away from the |.| kink and from the clamps.
    const Constraint c = Constraint::for_rate(16000.0);
    Tensor a(Shape{6}), b(Shape{6});
    for (std::size_t i = 0; i < 6; ++i) {
      a[i] = sign(rng) ? mag(rng) : -mag(rng);
      b[i] = sign(rng) ? mag(rng) : -mag(rng);
    }
    const auto w = weights(12);
    auto loss = [=] { return ad::weighted_sum(sinc_cutoffs(a, b, c), w); };
    out.push_back(ad::check_gradients("sinc_cutoffs", loss, {a, b}, kStep, threshold));
  }
  {
    Tensor cut(Shape{2, 4});
    for (std::size_t i = 0; i < 4; ++i) {
      cut[i] = 0.02 + 0.1 * static_cast<double>(i);
      cut[4 + i] = cut[i] + mag(rng);
    }
    const auto w = weights(4 * 31);
    auto loss = [=] { return ad::weighted_sum(sinc_kernels(cut, 31), w); };
    out.push_back(ad::check_gradients("sinc_kernels", loss, {cut}, kStep, threshold));
  }
  return out;
}

ad::GradCheck frontend_gradcheck(const FrontendConfig& cfg, std::size_t batch, std::size_t samples,
                                 std::uint64_t seed, double threshold) {
  constexpr double kStep = 1e-6;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Frontend fe(cfg);
  const std::size_t scales = fe.scales().size(), k_count = cfg.filters, bins = cfg.bins;
  for (auto& s : fe.scales()) {
    for (double& g : s.bn.gamma.values()) g = 1.0 + 0.2 * normal(rng);
    for (double& b : s.bn.beta.values()) b = 0.2 * normal(rng);
  }
  Tensor x(Shape{batch, 1, samples});
  for (double& v : x.values()) v = normal(rng);
  std::vector<double> w(batch * scales * k_count * bins);
  for (double& v : w) v = normal(rng);

  std::vector<Tensor> cuts;
  for (std::size_t s = 0; s < scales; ++s) {
    ad::NoGradScope no_grad;
    cuts.push_back(fe.cutoffs(s).detach().set_requires_grad(true));
  }
  {
    ad::Tape tape;
    Tensor loss;
    {
      ad::TapeScope scope(tape);
      loss = ad::weighted_sum(fe.forward_from_cutoffs(x, cuts, true), w);
    }
    tape.backward(loss);
  }

  ad::GradCheck result{"frontend_cutoffs", 0.0, threshold};
  ad::NoGradScope no_grad;
  for (std::size_t s = 0; s < scales; ++s) {
    const Scale& sc = fe.scales()[s];
    std::vector<double> analytic(2 * k_count), numeric(2 * k_count);
    const auto g = std::as_const(cuts[s]).grad();
    std::copy(g.begin(), g.end(), analytic.begin());

    for (std::size_t k = 0; k < k_count; ++k) {
      // Channel k of scale s in isolation: its own kernel, BN channel and probe weights.
      ad::BatchNorm bn(1);
      bn.gamma[0] = sc.bn.gamma[k];
      bn.beta[0] = sc.bn.beta[k];
      std::vector<double> wk(batch * bins);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* src = w.data() + ((b * scales + s) * k_count + k) * bins;
        std::copy(src, src + bins, wk.begin() + static_cast<std::ptrdiff_t>(b * bins));
      }
      auto normalized = [&](double f1, double f2) {
        const Tensor c(Shape{2, 1}, std::vector<double>{f1, f2});
        const Tensor kern = sinc_kernels(c, sc.length, cfg.window);
        return ad::batch_norm_1d(ad::conv1d(x, kern, Tensor{}, {(sc.length - 1) / 2, cfg.conv_algo}), bn, true);
      };
      const double f1 = cuts[s][k], f2 = cuts[s][k_count + k];
      // ReLU pattern of the unperturbed point; differences stay on one linear piece.
      Tensor mask = normalized(f1, f2);
      for (double& v : mask.values()) v = v > 0.0 ? 1.0 : 0.0;
      auto channel_loss = [&](double g1, double g2) {
        const Tensor y = ad::mul(normalized(g1, g2), mask);
        return ad::weighted_sum(ad::adaptive_avg_pool_1d(y, bins), wk).item();
      };
      numeric[k] = (channel_loss(f1 + kStep, f2) - channel_loss(f1 - kStep, f2)) / (2.0 * kStep);
      numeric[k_count + k] = (channel_loss(f1, f2 + kStep) - channel_loss(f1, f2 - kStep)) / (2.0 * kStep);
    }
    result.max_rel_error = std::max(result.max_rel_error, ad::relative_error(analytic, numeric));
  }
  return result;
}

}  // namespace mssr::sinc
