#pragma once

// Log-Mel spectrogram used as the hand-crafted baseline representation.

#include <cstddef>
#include <span>
#include <vector>

namespace mssr::mel {

struct MelConfig {
  double sample_rate = 16000.0;
  std::size_t n_fft = 512;
  std::size_t hop = 128;
  std::size_t n_mels = 160;
  double f_low = 30.0;
  double f_high = 8000.0;
};

struct Spectrogram {
  std::size_t rows = 0;  // mel bands
  std::size_t cols = 0;  // frames
  std::vector<double> data;  // row-major
};

std::size_t frame_count(std::size_t samples, const MelConfig& cfg);

// Triangular filters between n_mels + 2 mel-equidistant edges; filter m rises
// from edge m to edge m+1 and falls to edge m+2. (n_mels, n_fft/2 + 1).
std::vector<std::vector<double>> filter_bank(const MelConfig& cfg);
// Centre frequency of band m in Hz.
double band_center_hz(std::size_t m, const MelConfig& cfg);

// Periodic Hann window, |STFT|^2, Mel filter bank, log(1 + P).
// Requires at least n_fft samples.
Spectrogram mel_spectrogram(std::span<const double> samples, const MelConfig& cfg = {});

}  // namespace mssr::mel
