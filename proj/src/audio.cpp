#include "mssr/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "mssr/error.hpp"
#include "mssr/seed.hpp"

namespace mssr::audio {
namespace {

std::uint16_t read_u16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

std::uint32_t read_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

bool tag_is(std::span<const std::uint8_t> b, std::size_t at, const char* tag) {
  return std::memcmp(b.data() + at, tag, 4) == 0;
}

std::int16_t to_pcm16(double x) {
  const double scaled = std::round(x * 32768.0);
  return static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
}

std::vector<std::uint8_t> encode_pcm16(std::span<const std::int16_t> interleaved, std::uint16_t channels,
                                       std::uint32_t sample_rate) {
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(interleaved.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, channels);
  put_u32(out, sample_rate);
  put_u32(out, sample_rate * channels * 2);
  put_u16(out, static_cast<std::uint16_t>(channels * 2));
  put_u16(out, 16);
  put_tag(out, "data");
  put_u32(out, data_bytes);
  for (std::int16_t s : interleaved) put_u16(out, static_cast<std::uint16_t>(s));
  return out;
}

}  // namespace

void AugmentConfig::validate() const {
  if (!(amp_low > 0.0) || !(amp_low <= amp_high)) {
    throw ConfigError("augment: need 0 < amp_low <= amp_high");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("augment: noise_sigma must be >= 0");
}

AudioTrack decode_wav(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || !tag_is(bytes, 0, "RIFF") || !tag_is(bytes, 8, "WAVE")) {
    throw DataError("malformed RIFF header");
  }
  std::optional<std::size_t> fmt_at, data_at;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t size = read_u32(bytes, pos + 4);
    if (tag_is(bytes, pos, "fmt ")) {
      if (size < 16 || pos + 8 + size > bytes.size()) throw DataError("malformed fmt chunk (size " + std::to_string(size) + ")");
      fmt_at = pos + 8;
    } else if (tag_is(bytes, pos, "data")) {
      if (pos + 8 + size > bytes.size()) throw DataError("truncated data chunk");
      data_at = pos + 8;
      data_size = size;
    }
    pos += 8 + size + (size & 1u);
  }
  if (!fmt_at) throw DataError("malformed RIFF header: missing fmt chunk");
  if (!data_at) throw DataError("malformed RIFF header: missing data chunk");

  const std::uint16_t format = read_u16(bytes, *fmt_at);
  const std::uint16_t channels = read_u16(bytes, *fmt_at + 2);
  const std::uint32_t rate = read_u32(bytes, *fmt_at + 4);
  const std::uint16_t bits = read_u16(bytes, *fmt_at + 14);
  if (format != 1) throw DataError("unsupported audio format tag " + std::to_string(format) + " (need PCM = 1)");
  if (bits != 16) throw DataError("unsupported bits per sample " + std::to_string(bits) + " (need 16)");
  if (channels != 1 && channels != 2) throw DataError("unsupported channel count " + std::to_string(channels));
  if (rate == 0) throw DataError("invalid sample rate 0");

  const std::size_t frames = data_size / (2u * channels);
  if (frames == 0) throw DataError("empty data chunk");
  AudioTrack track;
  track.sample_rate = rate;
  track.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const auto raw = static_cast<std::int16_t>(read_u16(bytes, *data_at + 2 * (f * channels + c)));
      acc += static_cast<double>(raw) / 32768.0;
    }
    track.samples[f] = acc / channels;
  }
  return track;
}

std::vector<std::uint8_t> encode_wav(std::span<const double> samples, std::uint32_t sample_rate) {
  std::vector<std::int16_t> pcm(samples.size());
  std::transform(samples.begin(), samples.end(), pcm.begin(), to_pcm16);
  return encode_pcm16(pcm, 1, sample_rate);
}

std::vector<std::uint8_t> encode_wav_stereo(std::span<const double> left, std::span<const double> right,
                                            std::uint32_t sample_rate) {
  if (left.size() != right.size()) throw DataError("encode_wav_stereo: channel lengths differ");
  std::vector<std::int16_t> pcm(2 * left.size());
  for (std::size_t i = 0; i < left.size(); ++i) {
    pcm[2 * i] = to_pcm16(left[i]);
    pcm[2 * i + 1] = to_pcm16(right[i]);
  }
  return encode_pcm16(pcm, 2, sample_rate);
}

AudioTrack read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    AudioTrack track = decode_wav(bytes);
    track.id = path.filename().string();
    return track;
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_wav(const std::filesystem::path& path, const AudioTrack& track) {
  const auto bytes = encode_wav(track.samples, track.sample_rate);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

AudioTrack resample(const AudioTrack& track, std::uint32_t target_rate) {
  if (target_rate == 0) throw DataError("resample: target rate must be positive");
  if (track.sample_rate == 0 || track.samples.empty()) throw DataError("resample: invalid track");
  if (track.sample_rate == target_rate) return track;

  constexpr std::ptrdiff_t kHalf = 32;  // 64 taps per phase
  constexpr double kBeta = 8.6;
  const std::uint64_t g = std::gcd<std::uint64_t, std::uint64_t>(track.sample_rate, target_rate);
  const std::uint64_t up = target_rate / g, down = track.sample_rate / g;
  const double ratio = static_cast<double>(target_rate) / static_cast<double>(track.sample_rate);
  // Cut-off in cycles per input sample, slightly inside the narrower Nyquist band.
  const double cutoff = 0.5 * std::min(1.0, ratio) * 0.9;
  const double i0_beta = std::cyl_bessel_i(0.0, kBeta);

  auto phase_taps = [&](double frac, double* taps) {
    double total = 0.0;
    for (std::ptrdiff_t j = -kHalf + 1; j <= kHalf; ++j) {
      const double tau = static_cast<double>(j) - frac;
      const double arg = 2.0 * cutoff * tau;
      const double sinc = tau == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
      const double r = std::clamp(tau / static_cast<double>(kHalf), -1.0, 1.0);
      const double win = std::cyl_bessel_i(0.0, kBeta * std::sqrt(1.0 - r * r)) / i0_beta;
      taps[j + kHalf - 1] = 2.0 * cutoff * sinc * win;
      total += taps[j + kHalf - 1];
    }
    for (std::ptrdiff_t j = 0; j < 2 * kHalf; ++j) taps[j] /= total;
  };

  const bool tabulate = up <= 4096;
  std::vector<double> table;
  if (tabulate) {
    table.resize(up * 2 * kHalf);
    for (std::uint64_t p = 0; p < up; ++p) {
      phase_taps(static_cast<double>(p) / static_cast<double>(up), table.data() + p * 2 * kHalf);
    }
  }

  const std::size_t n_in = track.samples.size();
  const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(n_in) * ratio));
  AudioTrack out;
  out.sample_rate = target_rate;
  out.label = track.label;
  out.id = track.id;
  out.samples.resize(n_out);
  std::vector<double> scratch(2 * kHalf);
  for (std::size_t m = 0; m < n_out; ++m) {
    const std::uint64_t num = static_cast<std::uint64_t>(m) * down;
    const auto base = static_cast<std::ptrdiff_t>(num / up);
    const std::uint64_t phase = num % up;
    const double* taps;
    if (tabulate) {
      taps = table.data() + phase * 2 * kHalf;
    } else {
      phase_taps(static_cast<double>(phase) / static_cast<double>(up), scratch.data());
      taps = scratch.data();
    }
    double acc = 0.0;
    for (std::ptrdiff_t j = -kHalf + 1; j <= kHalf; ++j) {
      const std::ptrdiff_t idx = base + j;
      if (idx < 0 || idx >= static_cast<std::ptrdiff_t>(n_in)) continue;
      acc += taps[j + kHalf - 1] * track.samples[static_cast<std::size_t>(idx)];
    }
    out.samples[m] = acc;
  }
  return out;
}

std::size_t clip_count(std::size_t length, std::size_t clip_len, std::size_t hop) {
  if (clip_len == 0 || hop == 0) throw DataError("segment_clips: clip_len and hop must be positive");
  if (length < clip_len) return 0;
  return (length - clip_len) / hop + 1;
}

std::vector<Clip> segment_clips(const AudioTrack& track, std::size_t clip_len, std::size_t hop) {
  const std::size_t count = clip_count(track.samples.size(), clip_len, hop);
  if (count == 0) {
    throw DataError("track '" + track.id + "' has " + std::to_string(track.samples.size()) +
                    " samples, shorter than one clip (" + std::to_string(clip_len) +
                    "); pad or drop it before segmenting");
  }
  std::vector<Clip> clips(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t offset = i * hop;
    clips[i].offset = offset;
    clips[i].source_id = track.id;
    clips[i].samples.assign(track.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                            track.samples.begin() + static_cast<std::ptrdiff_t>(offset + clip_len));
  }
  return clips;
}

std::vector<double> layer_normalize(std::span<const double> x, double eps) {
  if (x.empty()) return {};
  if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) return std::vector<double>(x.size(), 0.0);
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv;
  return out;
}

Clip layer_normalize(const Clip& clip, double eps) {
  Clip out = clip;
  out.samples = layer_normalize(clip.samples, eps);
  return out;
}

Clip augment(const Clip& clip, const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (!cfg.enabled) return clip;
  cfg.validate();
  Clip out = clip;
  std::uniform_real_distribution<double> amp(cfg.amp_low, cfg.amp_high);
  const double r = cfg.amp_low == cfg.amp_high ? cfg.amp_low : amp(rng);
  for (double& v : out.samples) v *= r;
  if (cfg.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (double& v : out.samples) v += noise(rng);
  }
  return out;
}

double class_fundamental_hz(const SynthConfig& cfg, std::size_t cls) {
  return cfg.base_hz * std::pow(cfg.class_ratio, static_cast<double>(cls));
}

std::vector<std::string> default_class_names(std::size_t num_classes) {
  const int width = num_classes > 100 ? 3 : 2;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::string idx = std::to_string(c);
    names.push_back("class_" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(idx.size()))), '0') + idx);
  }
  return names;
}

std::vector<AudioTrack> synth_dataset(std::size_t num_classes, std::size_t tracks_per_class, double duration_s,
                                      std::uint64_t seed, const SynthConfig& cfg) {
  if (num_classes < 2) throw DataError("synth_dataset: need at least 2 classes");
  if (!(duration_s > 0.0)) throw DataError("synth_dataset: duration must be positive");
  const auto names = default_class_names(num_classes);
  const double fs = cfg.sample_rate;
  const auto n = static_cast<std::size_t>(std::llround(duration_s * fs));
  constexpr double kTwoPi = 2.0 * std::numbers::pi;

  std::vector<AudioTrack> tracks;
  tracks.reserve(num_classes * tracks_per_class);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t t = 0; t < tracks_per_class; ++t) {
      std::mt19937_64 rng(derive_seed(seed, c, t));
      std::uniform_real_distribution<double> unit(0.0, 1.0);

      const double f0 = class_fundamental_hz(cfg, c) * (1.0 + cfg.pitch_jitter * (2.0 * unit(rng) - 1.0));
      const double am_rate = cfg.am_base_hz + cfg.am_step_hz * static_cast<double>(c);
      const double am_phase = kTwoPi * unit(rng);
      std::vector<double> amps, phases, freqs;
      for (std::size_t h = 1; h <= cfg.harmonics; ++h) {
        const double f = f0 * static_cast<double>(h);
        const double a = (0.6 + 0.4 * unit(rng)) / static_cast<double>(h);
        const double ph = kTwoPi * unit(rng);
        if (f >= 0.45 * fs) continue;
        freqs.push_back(f);
        amps.push_back(a);
        phases.push_back(ph);
      }

      std::vector<double> tone(n, 0.0);
      double peak = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double time = static_cast<double>(i) / fs;
        double s = 0.0;
        for (std::size_t h = 0; h < freqs.size(); ++h) s += amps[h] * std::sin(kTwoPi * freqs[h] * time + phases[h]);
        s *= (1.0 + cfg.am_depth * std::sin(kTwoPi * am_rate * time + am_phase)) / (1.0 + cfg.am_depth);
        tone[i] = s;
        peak = std::max(peak, std::abs(s));
      }

      // One-pole low-pass on white noise, then scaled to unit RMS.
      std::normal_distribution<double> white(0.0, 1.0);
      const double alpha = 1.0 - std::exp(-kTwoPi * cfg.noise_cutoff_hz / fs);
      std::vector<double> noise(n);
      double state = 0.0, energy = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        state += alpha * (white(rng) - state);
        noise[i] = state;
        energy += state * state;
      }
      const double rms = std::sqrt(energy / static_cast<double>(std::max<std::size_t>(n, 1)));
      const double level = cfg.noise_base + cfg.noise_step * static_cast<double>(c);

      AudioTrack track;
      track.sample_rate = cfg.sample_rate;
      track.label = static_cast<int>(c);
      track.id = names[c] + "/" + names[c] + "_" + std::to_string(t);
      track.samples.resize(n);
      const double tone_gain = peak > 0.0 ? cfg.peak / peak : 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double nz = rms > 0.0 ? noise[i] / rms : 0.0;
        track.samples[i] = std::clamp(tone[i] * tone_gain + level * nz, -1.0, 1.0);
      }
      tracks.push_back(std::move(track));
    }
  }
  return tracks;
}

Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("dataset root '" + root.string() + "' is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  if (class_dirs.size() < 2) throw DataError("dataset '" + root.string() + "' needs at least 2 class directories");

  Dataset ds;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    const std::string name = class_dirs[c].filename().string();
    ds.class_names.push_back(name);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
      if (entry.is_regular_file() && entry.path().extension() == ".wav") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      AudioTrack t = read_wav(f);
      t.label = static_cast<int>(c);
      t.id = name + "/" + f.stem().string();
      ds.tracks.push_back(std::move(t));
    }
  }
  return ds;
}

void write_dataset(const std::filesystem::path& root, const Dataset& dataset) {
  namespace fs = std::filesystem;
  for (const auto& name : dataset.class_names) fs::create_directories(root / name);
  for (const auto& t : dataset.tracks) {
    if (!t.label || static_cast<std::size_t>(*t.label) >= dataset.class_names.size()) {
      throw DataError("write_dataset: track '" + t.id + "' has no valid label");
    }
    const auto& cls = dataset.class_names[static_cast<std::size_t>(*t.label)];
    std::string stem = t.id;
    if (const auto slash = stem.rfind('/'); slash != std::string::npos) stem = stem.substr(slash + 1);
    write_wav(root / cls / (stem + ".wav"), t);
  }
}

}  // namespace mssr::audio
