#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "mssr/error.hpp"
#include "mssr/mel.hpp"

using namespace mssr;
using namespace mssr::mel;

TEST(Mel, DefaultClipShape) {
  const std::vector<double> clip(48000, 0.1);
  const Spectrogram s = mel_spectrogram(clip);
  EXPECT_EQ(s.rows, 160u);
  EXPECT_EQ(s.cols, 372u);
  EXPECT_EQ(frame_count(48000, MelConfig{}), 372u);
}

TEST(Mel, SilenceGivesZeros) {
  const Spectrogram s = mel_spectrogram(std::vector<double>(4000, 0.0));
  for (double v : s.data) EXPECT_EQ(v, 0.0);
}

TEST(Mel, BandCentreToneDominatesItsBand) {
  const MelConfig cfg;
  // Bands above ~1 kHz are wider than two FFT bins, so a tone at the centre
  // must peak in its own row.
  for (std::size_t m : {80u, 110u, 140u}) {
    const double f = band_center_hz(m, cfg);
    std::vector<double> x(4096);
    for (std::size_t n = 0; n < x.size(); ++n) {
      x[n] = std::sin(2.0 * std::numbers::pi * f * static_cast<double>(n) / cfg.sample_rate);
    }
    const Spectrogram s = mel_spectrogram(x, cfg);
    const std::size_t t = s.cols / 2;
    std::size_t best = 0;
    for (std::size_t r = 1; r < s.rows; ++r) {
      if (s.data[r * s.cols + t] > s.data[best * s.cols + t]) best = r;
    }
    EXPECT_EQ(best, m) << f << " Hz";
  }
}

TEST(Mel, FilterBankRowsAreTriangles) {
  const MelConfig cfg;
  const auto bank = filter_bank(cfg);
  ASSERT_EQ(bank.size(), 160u);
  for (const auto& row : bank) {
    ASSERT_EQ(row.size(), 257u);
    for (double w : row) {
      EXPECT_GE(w, 0.0);
      EXPECT_LE(w, 1.0);
    }
    const auto peak = std::max_element(row.begin(), row.end());
    EXPECT_TRUE(std::is_sorted(row.begin(), peak + 1) || *peak == 0.0);
  }
}

TEST(Mel, ShortInputRejected) { EXPECT_THROW(mel_spectrogram(std::vector<double>(511, 0.0)), DataError); }
