#include "mssr/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include <json.hpp>

#include "mssr/autodiff/tape.hpp"
#include "mssr/error.hpp"
#include "mssr/seed.hpp"
#include "mssr/sincnet.hpp"

namespace mssr::eval {

int vote(std::span<const std::vector<double>> clip_probs) {
  if (clip_probs.empty()) throw DataError("vote: no clips");
  const std::size_t classes = clip_probs.front().size();
  if (classes == 0) throw DataError("vote: empty probability vector");
  std::vector<std::size_t> counts(classes, 0);
  std::vector<std::vector<double>> mass(classes);
  for (const auto& p : clip_probs) {
    if (p.size() != classes) throw DataError("vote: clips disagree on the class count");
    const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    ++counts[best];
    for (std::size_t c = 0; c < classes; ++c) mass[c].push_back(p[c]);
  }
  // Sorting before summation makes the tie-break independent of clip order.
  std::vector<double> summed(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    std::sort(mass[c].begin(), mass[c].end());
    for (double v : mass[c]) summed[c] += v;
  }
  std::size_t winner = 0;
  for (std::size_t c = 1; c < classes; ++c) {
    if (counts[c] > counts[winner] || (counts[c] == counts[winner] && summed[c] > summed[winner])) winner = c;
  }
  return static_cast<int>(winner);
}

std::vector<double> ModelClassifier::logits(const ad::Tensor& clips) {
  ad::NoGradScope no_grad;
  const ad::Tensor out = model_.forward(clips, false);
  return std::vector<double>(out.values().begin(), out.values().end());
}

namespace {

std::vector<double> softmax(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - m));
  for (double& v : p) v /= s;
  return p;
}

}  // namespace

EvalReport evaluate(ClipClassifier& classifier, std::span<const audio::AudioTrack> tracks, const EvalOptions& opt) {
  if (opt.batch_size == 0) throw ConfigError("evaluate: batch_size must be >= 1");
  EvalReport report;
  report.num_classes = classifier.num_classes();
  const std::size_t n = opt.clip_samples, classes = report.num_classes;
  for (const auto& track : tracks) {
    if (!track.label) throw DataError("evaluate: track '" + track.id + "' has no label");
    if (*track.label < 0 || static_cast<std::size_t>(*track.label) >= classes) {
      throw DataError("evaluate: track '" + track.id + "' label out of range");
    }
    const auto clips = audio::segment_clips(track, n, opt.hop_samples);
    TrackResult result;
    result.id = track.id;
    result.label = *track.label;
    for (std::size_t start = 0; start < clips.size(); start += opt.batch_size) {
      const std::size_t b = std::min(opt.batch_size, clips.size() - start);
      ad::Tensor batch(ad::Shape{b, n});
      for (std::size_t i = 0; i < b; ++i) {
        const auto norm = audio::layer_normalize(clips[start + i].samples);
        std::copy(norm.begin(), norm.end(), batch.data() + i * n);
      }
      const auto z = classifier.logits(batch);
      if (z.size() != b * classes) throw ShapeError("evaluate: classifier returned the wrong number of logits");
      for (std::size_t i = 0; i < b; ++i) {
        auto p = softmax(std::span<const double>(z).subspan(i * classes, classes));
        result.clip_labels.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
        result.clip_probs.push_back(std::move(p));
      }
    }
    result.voted = vote(result.clip_probs);
    report.tracks.push_back(std::move(result));
  }
  summarize(report);
  return report;
}

void summarize(EvalReport& report) {
  const std::size_t classes = report.num_classes;
  report.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t clips = 0, clip_hits = 0, track_hits = 0;
  for (const auto& t : report.tracks) {
    for (int c : t.clip_labels) {
      ++clips;
      clip_hits += c == t.label;
    }
    track_hits += t.voted == t.label;
    ++report.confusion[static_cast<std::size_t>(t.label)][static_cast<std::size_t>(t.voted)];
  }
  report.clip_accuracy = clips ? static_cast<double>(clip_hits) / static_cast<double>(clips) : 0.0;
  report.track_accuracy =
      report.tracks.empty() ? 0.0 : static_cast<double>(track_hits) / static_cast<double>(report.tracks.size());
}

namespace {

std::string class_name(std::span<const std::string> names, int c) {
  return static_cast<std::size_t>(c) < names.size() ? names[static_cast<std::size_t>(c)] : std::to_string(c);
}

}  // namespace

std::string report_json(const EvalReport& report, std::span<const std::string> class_names) {
  nlohmann::ordered_json j;
  j["fold"] = report.fold;
  j["num_classes"] = report.num_classes;
  j["class_names"] = std::vector<std::string>(class_names.begin(), class_names.end());
  j["clip_accuracy"] = report.clip_accuracy;
  j["track_accuracy"] = report.track_accuracy;
  j["confusion"] = report.confusion;
  auto& tracks = j["tracks"] = nlohmann::ordered_json::array();
  for (const auto& t : report.tracks) {
    tracks.push_back({{"id", t.id},
                      {"label", t.label},
                      {"voted", t.voted},
                      {"clip_labels", t.clip_labels},
                      {"clip_probs", t.clip_probs}});
  }
  return j.dump(1) + "\n";
}

std::string report_csv(const EvalReport& report, std::span<const std::string> class_names) {
  std::string out = "track,label,voted,clips,clip_hits\n";
  for (const auto& t : report.tracks) {
    const auto hits = std::count(t.clip_labels.begin(), t.clip_labels.end(), t.label);
    out += t.id + "," + class_name(class_names, t.label) + "," + class_name(class_names, t.voted) + "," +
           std::to_string(t.clip_labels.size()) + "," + std::to_string(hits) + "\n";
  }
  return out;
}

void write_report(const std::filesystem::path& dir, const EvalReport& report,
                  std::span<const std::string> class_names) {
  std::filesystem::create_directories(dir);
  const auto write_text = [](const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + p.string());
    out << s;
  };
  write_text(dir / "report.json", report_json(report, class_names));
  write_text(dir / "tracks.csv", report_csv(report, class_names));
  const std::size_t c = report.num_classes;
  std::vector<double> heat(c * c, 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t k = 0; k < c; ++k) heat[i * c + k] = static_cast<double>(report.confusion[i][k]);
  }
  sinc::write_pgm(dir / "confusion.pgm", heat, c, c);
}

namespace {

std::map<int, std::vector<std::size_t>> shuffled_classes(std::span<const int> labels, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (auto& [c, members] : by_class) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    std::shuffle(members.begin(), members.end(), rng);
  }
  return by_class;
}

}  // namespace

std::vector<Fold> kfold_split(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold: k must be >= 2");
  const auto by_class = shuffled_classes(labels, seed);
  for (const auto& [c, members] : by_class) {
    if (members.size() < k) {
      throw DataError("class smaller than k: class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                      " tracks, k = " + std::to_string(k));
    }
  }
  std::vector<std::size_t> fold_of(labels.size());
  std::size_t next = 0;
  for (const auto& [c, members] : by_class) {
    for (std::size_t idx : members) fold_of[idx] = next++ % k;
  }
  std::vector<Fold> folds(k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t f = 0; f < k; ++f) (f == fold_of[i] ? folds[f].test : folds[f].train).push_back(i);
  }
  return folds;
}

Fold holdout_split(std::span<const int> labels, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("holdout fraction must lie in (0, 1)");
  Fold split;
  std::vector<bool> held(labels.size(), false);
  for (const auto& [c, members] : shuffled_classes(labels, seed)) {
    if (members.size() < 2) throw DataError("class " + std::to_string(c) + " needs at least 2 tracks to hold one out");
    const auto want = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    const std::size_t take = std::clamp<std::size_t>(want, 1, members.size() - 1);
    for (std::size_t i = 0; i < take; ++i) held[members[i]] = true;
  }
  for (std::size_t i = 0; i < labels.size(); ++i) (held[i] ? split.test : split.train).push_back(i);
  return split;
}

}  // namespace mssr::eval
