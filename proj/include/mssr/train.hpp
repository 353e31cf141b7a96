#pragma once

// Warm-up / step-decay SGD training on randomly drawn clips with per-track
// voted validation and resumable checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mssr/audio.hpp"
#include "mssr/eval.hpp"
#include "mssr/model.hpp"

namespace mssr::train {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  std::size_t clips_per_track = 4;
  std::size_t warmup_epochs = 5;
  double warmup_lr = 1e-5;
  double base_lr = 0.005;
  std::size_t decay_interval = 30;
  double decay_factor = 0.5;
  double momentum = 0.9;
  // Multiplies the learning rate of the sinc cut-off parameters.
  double sinc_lr_scale = 0.01;
  std::uint64_t seed = 1;
  std::size_t clip_samples = 48000;  // 3 s at 16 kHz
  std::size_t hop_samples = 8000;    // 0.5 s at 16 kHz
  audio::AugmentConfig augment;

  void validate() const;
};

template <typename Visitor, typename Cfg>
void visit(Visitor&& v, Cfg& c) {
  v("epochs", c.epochs, "training epochs");
  v("batch_size", c.batch_size, "clips per SGD step");
  v("clips_per_track_per_epoch", c.clips_per_track, "clips drawn from every track each epoch");
  v("warmup_epochs", c.warmup_epochs, "epochs trained at warmup_lr");
  v("warmup_lr", c.warmup_lr, "learning rate during warm-up");
  v("base_lr", c.base_lr, "learning rate of the first epoch after warm-up");
  v("decay_interval", c.decay_interval, "epochs between learning-rate decays");
  v("decay_factor", c.decay_factor, "multiplier applied at every decay");
  v("momentum", c.momentum, "SGD momentum");
  v("sinc_lr_scale", c.sinc_lr_scale, "learning-rate multiplier for the sinc cut-off parameters");
  v("seed", c.seed, "seed for initialization, sampling and augmentation");
  v("clip_samples", c.clip_samples, "clip length in samples (3 s at 16 kHz)");
  v("hop_samples", c.hop_samples, "hop between clip offsets in samples (0.5 s at 16 kHz)");
  audio::visit(v, c.augment);
}

// 1-based epoch. Warm-up epochs get warmup_lr; afterwards
// base_lr * decay_factor^floor((epoch - warmup - 1) / decay_interval).
double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

struct ClipRef {
  std::size_t track = 0;
  std::size_t clip = 0;
};

// `per_track` clips from every track, without replacement when the track has
// at least that many clips and with replacement otherwise, then one global
// shuffle. Depends only on (seed, epoch, clip_counts).
std::vector<ClipRef> sample_epoch_clips(std::span<const std::size_t> clip_counts, std::size_t per_track,
                                        std::uint64_t seed, std::size_t epoch);

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_clip_acc = 0.0;
  double val_vote_acc = 0.0;
};

inline constexpr const char* kMetricsHeader = "epoch,lr,train_loss,val_clip_acc,val_vote_acc";
std::string metrics_row(const EpochMetrics& m);

struct FitOptions {
  std::filesystem::path out_dir;
  // Continue from this checkpoint (normally out_dir/last.ckpt).
  std::optional<std::filesystem::path> resume;
  // Stop after this epoch (0 = run to cfg.epochs); used to test resumption.
  std::size_t stop_after = 0;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct FitResult {
  std::vector<EpochMetrics> history;
  double best_vote_acc = -1.0;
  std::size_t best_epoch = 0;
  eval::EvalReport last_report;
};

// Writes metrics.csv, best.ckpt (highest voted validation accuracy, earliest
// on ties) and last.ckpt to out_dir. Throws NumericError naming the epoch and
// batch when the loss stops being finite.
FitResult fit(const audio::Dataset& train_set, const audio::Dataset& val_set, const model::ModelConfig& model_cfg,
              const TrainConfig& cfg, const FitOptions& opt);

// Seed used to initialize the model's weights for a training run.
std::uint64_t init_seed(const TrainConfig& cfg);

// Writes one checkpoint holding the model state, optimizer velocity and the
// progress counters needed to continue the run.
void save_training_checkpoint(const std::filesystem::path& path, const model::Model& model,
                              const std::vector<std::vector<double>>& velocity, const TrainConfig& cfg,
                              std::size_t epoch, double best_vote_acc, std::size_t best_epoch);

std::string config_text(const TrainConfig& cfg);

}  // namespace mssr::train
