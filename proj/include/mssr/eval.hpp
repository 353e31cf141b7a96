#pragma once

// Clip classification, per-track voting, stratified splits and reports.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mssr/audio.hpp"
#include "mssr/model.hpp"

namespace mssr::eval {

// Plurality over per-clip argmax labels; ties go to the larger summed
// probability over the tied classes, then to the lowest class index.
// Each row is one clip's softmax vector. Throws DataError on empty input.
int vote(std::span<const std::vector<double>> clip_probs);

// Maps layer-normalized clips to logits.
class ClipClassifier {
 public:
  virtual ~ClipClassifier() = default;
  virtual std::size_t num_classes() const = 0;
  // clips: (B, N) -> logits (B, num_classes), row-major.
  virtual std::vector<double> logits(const ad::Tensor& clips) = 0;
};

// Inference-mode forward (running batch-norm statistics, no tape).
class ModelClassifier : public ClipClassifier {
 public:
  explicit ModelClassifier(model::Model& m) : model_(m) {}
  std::size_t num_classes() const override { return model_.config().num_classes; }
  std::vector<double> logits(const ad::Tensor& clips) override;

 private:
  model::Model& model_;
};

struct TrackResult {
  std::string id;
  int label = -1;
  int voted = -1;
  std::vector<int> clip_labels;
  std::vector<std::vector<double>> clip_probs;
};

struct EvalReport {
  std::size_t num_classes = 0;
  int fold = -1;
  std::vector<TrackResult> tracks;
  double clip_accuracy = 0.0;
  double track_accuracy = 0.0;
  // confusion[true][voted], counted over tracks.
  std::vector<std::vector<std::size_t>> confusion;
};

struct EvalOptions {
  std::size_t clip_samples = 48000;
  std::size_t hop_samples = 8000;
  std::size_t batch_size = 16;
};

// Segments every track into its full clip set, layer-normalizes each clip,
// classifies in batches and votes. Tracks must be labeled.
EvalReport evaluate(ClipClassifier& classifier, std::span<const audio::AudioTrack> tracks, const EvalOptions& opt);

// Recomputes both accuracies and the confusion matrix from the per-clip dump.
void summarize(EvalReport& report);

std::string report_json(const EvalReport& report, std::span<const std::string> class_names);
std::string report_csv(const EvalReport& report, std::span<const std::string> class_names);
// report.json, tracks.csv and confusion.pgm inside `dir`.
void write_report(const std::filesystem::path& dir, const EvalReport& report,
                  std::span<const std::string> class_names);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Stratified: within every class, shuffled members are dealt round-robin,
// continuing from where the previous class stopped so fold sizes stay
// balanced. Throws DataError "class smaller than k" if any class has < k.
std::vector<Fold> kfold_split(std::span<const int> labels, std::size_t k, std::uint64_t seed);

// Stratified hold-out: round(fraction * n_c) tracks of each class (at least
// one, at most n_c - 1) go to `test`.
Fold holdout_split(std::span<const int> labels, double fraction, std::uint64_t seed);

}  // namespace mssr::eval
