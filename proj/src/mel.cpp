#include "mssr/mel.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <string>

#include "mssr/error.hpp"
#include "mssr/fft.hpp"
#include "mssr/sincnet.hpp"

namespace mssr::mel {
namespace {

void validate(const MelConfig& cfg) {
  if (cfg.n_fft < 2 || cfg.hop == 0 || cfg.n_mels == 0) throw ConfigError("mel: n_fft >= 2, hop >= 1, n_mels >= 1 required");
  if (!(cfg.f_low >= 0.0) || !(cfg.f_low < cfg.f_high) || cfg.f_high > cfg.sample_rate / 2.0) {
    throw ConfigError("mel: need 0 <= f_low < f_high <= sample_rate / 2");
  }
}

double edge_hz(std::size_t i, const MelConfig& cfg) {
  const double lo = sinc::hz_to_mel(cfg.f_low), hi = sinc::hz_to_mel(cfg.f_high);
  return sinc::mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
}

}  // namespace

std::size_t frame_count(std::size_t samples, const MelConfig& cfg) {
  if (samples < cfg.n_fft) return 0;
  return (samples - cfg.n_fft) / cfg.hop + 1;
}

double band_center_hz(std::size_t m, const MelConfig& cfg) { return edge_hz(m + 1, cfg); }

std::vector<std::vector<double>> filter_bank(const MelConfig& cfg) {
  validate(cfg);
  const std::size_t bins = cfg.n_fft / 2 + 1;
  std::vector<std::vector<double>> bank(cfg.n_mels, std::vector<double>(bins, 0.0));
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double left = edge_hz(m, cfg), center = edge_hz(m + 1, cfg), right = edge_hz(m + 2, cfg);
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / static_cast<double>(cfg.n_fft);
      if (f > left && f < center) {
        bank[m][k] = (f - left) / (center - left);
      } else if (f >= center && f < right) {
        bank[m][k] = (right - f) / (right - center);
      }
    }
  }
  return bank;
}

Spectrogram mel_spectrogram(std::span<const double> samples, const MelConfig& cfg) {
  validate(cfg);
  if (samples.size() < cfg.n_fft) {
    throw DataError("mel_spectrogram: " + std::to_string(samples.size()) + " samples, need at least n_fft = " +
                    std::to_string(cfg.n_fft));
  }
  const std::size_t bins = cfg.n_fft / 2 + 1;
  const auto bank = filter_bank(cfg);
  std::vector<double> window(cfg.n_fft);
  for (std::size_t n = 0; n < cfg.n_fft; ++n) {
    window[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(cfg.n_fft));
  }

  Spectrogram out;
  out.rows = cfg.n_mels;
  out.cols = frame_count(samples.size(), cfg);
  out.data.assign(out.rows * out.cols, 0.0);
  auto frame = fft::alloc_real(cfg.n_fft);
  auto spec = fft::alloc_complex(bins);
  std::vector<double> power(bins);
  for (std::size_t t = 0; t < out.cols; ++t) {
    const double* src = samples.data() + t * cfg.hop;
    for (std::size_t n = 0; n < cfg.n_fft; ++n) frame[n] = src[n] * window[n];
    fft::forward(cfg.n_fft, frame.get(), spec.get());
    for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(spec[k]);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += bank[m][k] * power[k];
      out.data[m * out.cols + t] = std::log1p(e);
    }
  }
  return out;
}

}  // namespace mssr::mel
