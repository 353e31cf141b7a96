#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <random>

#include "mssr/audio.hpp"
#include "mssr/error.hpp"

using namespace mssr;
using namespace mssr::audio;

namespace {

std::vector<std::uint8_t> pcm_file(const std::vector<std::int16_t>& pcm, std::uint16_t channels, std::uint32_t rate) {
  std::vector<double> scaled;
  for (auto s : pcm) scaled.push_back(s / 32768.0);
  if (channels == 1) return encode_wav(scaled, rate);
  std::vector<double> l, r;
  for (std::size_t i = 0; i + 1 < scaled.size(); i += 2) {
    l.push_back(scaled[i]);
    r.push_back(scaled[i + 1]);
  }
  return encode_wav_stereo(l, r, rate);
}

// Magnitude of the DFT of x at integer bin k (direct sum).
double dft_mag(const std::vector<double>& x, double cycles_per_sample) {
  std::complex<double> acc = 0.0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    acc += x[n] * std::polar(1.0, -2.0 * std::numbers::pi * cycles_per_sample * static_cast<double>(n));
  }
  return std::abs(acc);
}

std::string expect_data_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_wav(bytes);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Wav, DecodesMonoPcm) {
  const auto bytes = pcm_file({0, 16384, -16384, 32767}, 1, 16000);
  const AudioTrack t = decode_wav(bytes);
  EXPECT_EQ(t.sample_rate, 16000u);
  ASSERT_EQ(t.samples.size(), 4u);
  EXPECT_EQ(t.samples[0], 0.0);
  EXPECT_EQ(t.samples[1], 0.5);
  EXPECT_EQ(t.samples[2], -0.5);
  EXPECT_EQ(t.samples[3], 32767.0 / 32768.0);
}

TEST(Wav, StereoIsAveraged) {
  const auto bytes = pcm_file({32767, 0, -16384, 0}, 2, 22050);
  const AudioTrack t = decode_wav(bytes);
  ASSERT_EQ(t.samples.size(), 2u);
  EXPECT_EQ(t.samples[0], 32767.0 / 32768.0 / 2.0);
  EXPECT_EQ(t.samples[1], -0.25);
}

TEST(Wav, RoundTripIsExact) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> d(-32768, 32767);
  std::vector<std::int16_t> pcm(1000);
  for (auto& s : pcm) s = static_cast<std::int16_t>(d(rng));
  const AudioTrack t = decode_wav(pcm_file(pcm, 1, 16000));
  const auto again = encode_wav(t.samples, 16000);
  EXPECT_EQ(again, pcm_file(pcm, 1, 16000));
  for (std::size_t i = 0; i < pcm.size(); ++i) EXPECT_EQ(t.samples[i] * 32768.0, pcm[i]);
}

TEST(Wav, ErrorsNameTheField) {
  auto bytes = pcm_file({1, 2, 3}, 1, 16000);
  EXPECT_NE(expect_data_error({bytes.begin(), bytes.begin() + 10}).find("malformed RIFF header"), std::string::npos);

  auto bad_bits = bytes;
  bad_bits[34] = 24;
  EXPECT_NE(expect_data_error(bad_bits).find("bits per sample"), std::string::npos);

  auto bad_codec = bytes;
  bad_codec[20] = 3;
  EXPECT_NE(expect_data_error(bad_codec).find("format tag"), std::string::npos);

  auto bad_channels = bytes;
  bad_channels[22] = 6;
  EXPECT_NE(expect_data_error(bad_channels).find("channel count"), std::string::npos);
}

TEST(Resample, IdentityWhenRatesMatch) {
  AudioTrack t;
  t.sample_rate = 16000;
  t.samples = {0.1, -0.2, 0.3};
  EXPECT_EQ(resample(t, 16000).samples, t.samples);
}

TEST(Resample, OutputLengthFollowsRateRatio) {
  AudioTrack t;
  t.sample_rate = 22050;
  t.samples.assign(22050 * 3 + 7, 0.0);
  const auto out = resample(t, 16000);
  EXPECT_EQ(out.sample_rate, 16000u);
  EXPECT_EQ(out.samples.size(), static_cast<std::size_t>(std::llround(t.samples.size() * 16000.0 / 22050.0)));
}

TEST(Resample, ToneKeepsItsFrequencyAndSidelobesStayLow) {
  AudioTrack t;
  t.sample_rate = 48000;
  t.samples.resize(48000);
  for (std::size_t n = 0; n < t.samples.size(); ++n) t.samples[n] = 0.5 * std::sin(2.0 * std::numbers::pi * 1000.0 * n / 48000.0);
  const auto out = resample(t, 16000);
  ASSERT_EQ(out.samples.size(), 16000u);
  // One second at 16 kHz: bin k sits at k Hz, so 1 kHz is bin-centred.
  const double peak = dft_mag(out.samples, 1000.0 / 16000.0);
  double worst = 0.0;
  for (int hz = 100; hz < 8000; hz += 50) {
    if (std::abs(hz - 1000) < 20) continue;
    worst = std::max(worst, dft_mag(out.samples, hz / 16000.0));
  }
  EXPECT_GT(peak, 0.0);
  EXPECT_LE(20.0 * std::log10(worst / peak), -40.0);
}

TEST(Segment, ClipCountExamples) {
  AudioTrack t;
  t.id = "x";
  t.sample_rate = 16000;
  t.samples.assign(480000, 0.0);
  EXPECT_EQ(segment_clips(t, 48000, 8000).size(), 55u);
  t.samples.assign(48000, 0.0);
  ASSERT_EQ(segment_clips(t, 48000, 8000).size(), 1u);
  EXPECT_EQ(segment_clips(t, 48000, 8000)[0].offset, 0u);
  t.samples.assign(48000 + 8000 - 1, 0.0);
  EXPECT_EQ(segment_clips(t, 48000, 8000).size(), 1u);
  t.samples.assign(100, 0.0);
  EXPECT_THROW(segment_clips(t, 48000, 8000), DataError);
}

TEST(Segment, CountMatchesClosedFormProperty) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> clip(1, 400), hop(1, 200), extra(0, 2000);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t c = clip(rng), h = hop(rng), len = c + extra(rng);
    AudioTrack t;
    t.samples.assign(len, 0.0);
    const auto clips = segment_clips(t, c, h);
    ASSERT_EQ(clips.size(), (len - c) / h + 1);
    EXPECT_LE(clips.back().offset + c, len);
    for (const auto& cl : clips) EXPECT_EQ(cl.samples.size(), c);
  }
}

TEST(LayerNorm, Examples) {
  const auto two = layer_normalize(std::vector<double>{1.0, 3.0});
  EXPECT_NEAR(two[0], -1.0, 1e-5);
  EXPECT_NEAR(two[1], 1.0, 1e-5);
  for (double v : layer_normalize(std::vector<double>(10, 4.2))) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, RandomClipStatisticsAndIdempotence) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> d(0.3, 2.0);
  std::vector<double> x(48000);
  for (double& v : x) v = d(rng);
  const auto y = layer_normalize(x);
  double mean = 0.0, var = 0.0;
  for (double v : y) mean += v;
  mean /= y.size();
  for (double v : y) var += (v - mean) * (v - mean);
  var /= y.size();
  EXPECT_LT(std::abs(mean), 1e-6);
  EXPECT_LT(std::abs(var - 1.0), 1e-3);
  // A second pass rescales by about 1 / sqrt(1 + eps (1 - 1 / var(x))), so the
  // only drift beyond round-off is proportional to eps * |y|.
  const auto z = layer_normalize(y);
  for (std::size_t i = 0; i < y.size(); ++i) ASSERT_LE(std::abs(z[i] - y[i]), 1e-6 + kLayerNormEps * std::abs(y[i]));
  const auto y0 = layer_normalize(x, 0.0);
  const auto z0 = layer_normalize(y0, 0.0);
  for (std::size_t i = 0; i < y0.size(); ++i) ASSERT_NEAR(z0[i], y0[i], 1e-6);
}

TEST(Augment, DisabledAndIdentityConfigs) {
  Clip c;
  c.samples = {0.1, -0.4, 0.7};
  std::mt19937_64 rng(1);
  AugmentConfig off;
  off.enabled = false;
  EXPECT_EQ(augment(c, off, rng).samples, c.samples);
  AugmentConfig unit{1.0, 1.0, 0.0, true};
  EXPECT_EQ(augment(c, unit, rng).samples, c.samples);
}

TEST(Augment, UpperAmplitudeBound) {
  Clip c;
  c.samples = {0.1, -0.4, 0.7};
  std::mt19937_64 rng(1);
  const auto out = augment(c, AugmentConfig{1.1, 1.1, 0.0, true}, rng);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out.samples[i], c.samples[i] * 1.1);
}

TEST(Augment, NoiseStdAndReproducibility) {
  Clip c;
  c.samples.assign(100000, 0.0);
  std::mt19937_64 a(9), b(9);
  const auto x = augment(c, AugmentConfig{}, a);
  EXPECT_EQ(x.samples, augment(c, AugmentConfig{}, b).samples);
  double sq = 0.0, mean = 0.0;
  for (double v : x.samples) mean += v;
  mean /= x.samples.size();
  for (double v : x.samples) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / x.samples.size());
  EXPECT_NEAR(sd, 0.02, 0.02 * 0.05);
}

TEST(Synth, CountsLabelsAndDeterminism) {
  const auto a = synth_dataset(4, 10, 1.0, 42);
  ASSERT_EQ(a.size(), 40u);
  std::vector<int> counts(4, 0);
  for (const auto& t : a) ++counts[static_cast<std::size_t>(*t.label)];
  for (int c : counts) EXPECT_EQ(c, 10);
  const auto b = synth_dataset(4, 10, 1.0, 42);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].samples, b[i].samples);
  EXPECT_THROW(synth_dataset(1, 10, 1.0, 42), DataError);
}

TEST(Synth, ClassesPeakAtDistinctFundamentals) {
  const SynthConfig cfg;
  const auto tracks = synth_dataset(2, 1, 1.0, 7, cfg);
  std::vector<int> peak_hz;
  for (const auto& t : tracks) {
    int best = 0;
    double best_mag = -1.0;
    for (int hz = 50; hz < 1000; ++hz) {
      const double m = dft_mag(t.samples, hz / static_cast<double>(cfg.sample_rate));
      if (m > best_mag) {
        best_mag = m;
        best = hz;
      }
    }
    peak_hz.push_back(best);
  }
  EXPECT_NEAR(peak_hz[0], class_fundamental_hz(cfg, 0), class_fundamental_hz(cfg, 0) * 0.03);
  EXPECT_NEAR(peak_hz[1], class_fundamental_hz(cfg, 1), class_fundamental_hz(cfg, 1) * 0.03);
  EXPECT_NE(peak_hz[0], peak_hz[1]);
}

TEST(Dataset, WriteAndLoadLayout) {
  const auto root = std::filesystem::temp_directory_path() / "mssr_test_dataset";
  std::filesystem::remove_all(root);
  Dataset ds;
  ds.class_names = default_class_names(3);
  ds.tracks = synth_dataset(3, 2, 0.25, 1);
  write_dataset(root, ds);
  const Dataset back = load_dataset(root);
  EXPECT_EQ(back.class_names, ds.class_names);
  ASSERT_EQ(back.tracks.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(back.tracks[i].label, ds.tracks[i].label);
    EXPECT_EQ(back.tracks[i].id, ds.tracks[i].id);
    ASSERT_EQ(back.tracks[i].samples.size(), ds.tracks[i].samples.size());
    for (std::size_t n = 0; n < ds.tracks[i].samples.size(); ++n) {
      EXPECT_NEAR(back.tracks[i].samples[n], ds.tracks[i].samples[n], 1.0 / 32768.0);
    }
  }
  std::filesystem::remove_all(root);
}
