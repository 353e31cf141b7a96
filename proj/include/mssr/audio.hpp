#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mssr/kv.hpp"

namespace mssr::audio {

struct AudioTrack {
  std::vector<double> samples;
  std::uint32_t sample_rate = 0;
  std::optional<int> label;
  std::string id;
};

struct Clip {
  std::vector<double> samples;
  std::string source_id;
  std::size_t offset = 0;
};

struct AugmentConfig {
  double amp_low = 0.9;
  double amp_high = 1.1;
  double noise_sigma = 0.02;
  bool enabled = true;

  void validate() const;
};

// ---- WAV -------------------------------------------------------------------

// RIFF/WAVE, PCM 16-bit, mono or stereo. Samples are scaled by 1/32768 and
// stereo is averaged to mono. Throws DataError naming the offending field.
AudioTrack decode_wav(std::span<const std::uint8_t> bytes);
// Mono PCM16; samples are clamped to [-1, 1) and rounded to the nearest code.
std::vector<std::uint8_t> encode_wav(std::span<const double> samples, std::uint32_t sample_rate);
// Interleaved stereo PCM16 from two equal-length channels.
std::vector<std::uint8_t> encode_wav_stereo(std::span<const double> left, std::span<const double> right,
                                            std::uint32_t sample_rate);

AudioTrack read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const AudioTrack& track);

// ---- signal preparation ----------------------------------------------------

// Windowed-sinc polyphase resampler (Kaiser window, 64 taps per phase).
// Output length is round(N * target / source).
AudioTrack resample(const AudioTrack& track, std::uint32_t target_rate);

// Clips at offsets 0, hop, 2*hop, ...; count = floor((len - clip_len) / hop) + 1.
// Tracks shorter than one clip are rejected (DataError).
std::vector<Clip> segment_clips(const AudioTrack& track, std::size_t clip_len, std::size_t hop);
std::size_t clip_count(std::size_t length, std::size_t clip_len, std::size_t hop);

inline constexpr double kLayerNormEps = 1e-5;

// (x - mean) / sqrt(var + eps), population variance.
std::vector<double> layer_normalize(std::span<const double> x, double eps = kLayerNormEps);
Clip layer_normalize(const Clip& clip, double eps = kLayerNormEps);

// r * x + n with r ~ U[amp_low, amp_high] per clip and n ~ N(0, sigma^2) per sample.
Clip augment(const Clip& clip, const AugmentConfig& cfg, std::mt19937_64& rng);

// ---- datasets --------------------------------------------------------------

struct SynthConfig {
  std::uint32_t sample_rate = 16000;
  double base_hz = 110.0;        // fundamental of class 0
  double class_ratio = 1.5;      // fundamental of class c = base_hz * class_ratio^c
  double pitch_jitter = 0.015;   // per-track relative detune, uniform +-
  std::size_t harmonics = 6;
  double am_base_hz = 1.0;       // amplitude-modulation rate of class 0
  double am_step_hz = 0.75;      // added per class
  double am_depth = 0.5;
  double noise_base = 0.01;      // band-limited noise level of class 0
  double noise_step = 0.01;      // added per class
  double noise_cutoff_hz = 2000.0;
  double peak = 0.6;             // target absolute peak of the tonal part
};

// Class c mixes harmonics of a fundamental unique to c with a class-specific
// AM rate and noise floor. Deterministic given the seed.
std::vector<AudioTrack> synth_dataset(std::size_t num_classes, std::size_t tracks_per_class, double duration_s,
                                      std::uint64_t seed, const SynthConfig& cfg = {});

double class_fundamental_hz(const SynthConfig& cfg, std::size_t cls);

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<AudioTrack> tracks;
};

// One subdirectory per class, every *.wav inside is a track; class index is
// the lexicographic rank of the subdirectory name.
Dataset load_dataset(const std::filesystem::path& root);
void write_dataset(const std::filesystem::path& root, const Dataset& dataset);

std::vector<std::string> default_class_names(std::size_t num_classes);

// ---- configuration ---------------------------------------------------------

template <typename Visitor, typename Cfg>
void visit(Visitor&& v, Cfg& c) {
  v("augment", c.enabled, "apply random amplitude scaling and Gaussian noise to training clips");
  v("amp_low", c.amp_low, "lower bound of the random amplitude ratio");
  v("amp_high", c.amp_high, "upper bound of the random amplitude ratio");
  v("noise_sigma", c.noise_sigma, "standard deviation of the additive Gaussian noise");
}

}  // namespace mssr::audio
