#include "mssr/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "mssr/autodiff/sgd.hpp"
#include "mssr/autodiff/tape.hpp"
#include "mssr/error.hpp"
#include "mssr/seed.hpp"

namespace mssr::train {

namespace {

// Stream tags keep the derived RNG streams of one seed disjoint.
enum Stream : std::uint64_t { kInit = 1, kSample = 2, kAugment = 3 };

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0 || clips_per_track == 0 || decay_interval == 0) {
    throw ConfigError("epochs, batch_size, clips_per_track_per_epoch and decay_interval must be >= 1");
  }
  if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be smaller than epochs");
  if (!(warmup_lr >= 0.0) || !(base_lr >= 0.0)) throw ConfigError("learning rates must be non-negative");
  if (!(decay_factor > 0.0)) throw ConfigError("decay_factor must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(sinc_lr_scale >= 0.0)) throw ConfigError("sinc_lr_scale must be non-negative");
  if (clip_samples == 0 || hop_samples == 0) throw ConfigError("clip_samples and hop_samples must be >= 1");
  augment.validate();
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch == 0) throw ConfigError("lr_schedule: epochs are 1-based");
  if (epoch <= cfg.warmup_epochs) return cfg.warmup_lr;
  const std::size_t decays = (epoch - cfg.warmup_epochs - 1) / cfg.decay_interval;
  double lr = cfg.base_lr;
  for (std::size_t i = 0; i < decays; ++i) lr *= cfg.decay_factor;
  return lr;
}

std::vector<ClipRef> sample_epoch_clips(std::span<const std::size_t> clip_counts, std::size_t per_track,
                                        std::uint64_t seed, std::size_t epoch) {
  std::mt19937_64 rng(derive_seed(seed, kSample, epoch));
  std::vector<ClipRef> out;
  out.reserve(clip_counts.size() * per_track);
  std::vector<std::size_t> pool;
  for (std::size_t t = 0; t < clip_counts.size(); ++t) {
    const std::size_t n = clip_counts[t];
    if (n == 0) throw DataError("sample_epoch_clips: track " + std::to_string(t) + " yields no clips");
    if (n >= per_track) {
      // Partial Fisher-Yates: the first per_track slots are a uniform sample.
      pool.resize(n);
      for (std::size_t i = 0; i < n; ++i) pool[i] = i;
      for (std::size_t i = 0; i < per_track; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(pool[i], pool[pick(rng)]);
        out.push_back({t, pool[i]});
      }
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t i = 0; i < per_track; ++i) out.push_back({t, pick(rng)});
    }
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

std::string metrics_row(const EpochMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.6f,%.6f", m.epoch, m.lr, m.train_loss, m.val_clip_acc,
                m.val_vote_acc);
  return buf;
}

std::string config_text(const TrainConfig& cfg) {
  std::string out;
  visit(kv::WriteVisitor{out}, cfg);
  return out;
}

std::uint64_t init_seed(const TrainConfig& cfg) { return derive_seed(cfg.seed, kInit); }

void save_training_checkpoint(const std::filesystem::path& path, const model::Model& model,
                              const std::vector<std::vector<double>>& velocity, const TrainConfig& cfg,
                              std::size_t epoch, double best_vote_acc, std::size_t best_epoch) {
  model::Checkpoint ckpt;
  ckpt.config_text = model::config_text(model.config());
  // Every random stream is derived from (seed, epoch, position), so the seed
  // and the epoch counter are the complete RNG state.
  ckpt.meta_text = "epoch = " + std::to_string(epoch) + "\nbest_vote_acc = " + kv::format_double(best_vote_acc) +
                   "\nbest_epoch = " + std::to_string(best_epoch) + "\n" + config_text(cfg);
  ckpt.tensors = model::state_tensors(model);
  std::size_t p = 0;
  for (const auto& n : model.state()) {
    if (!n.learnable) continue;
    ckpt.tensors.emplace_back("opt/" + n.name, ad::Tensor(n.tensor.shape(), velocity.at(p++)));
  }
  model::save_checkpoint(path, ckpt);
}

namespace {

struct ResumeState {
  std::size_t epoch = 0;
  double best_vote_acc = -1.0;
  std::size_t best_epoch = 0;
};

ResumeState restore(const std::filesystem::path& path, model::Model& model, ad::Sgd& opt, const TrainConfig& cfg) {
  const model::Checkpoint ckpt = model::load_checkpoint(path);
  if (ckpt.config_text != model::config_text(model.config())) {
    throw CheckpointError(CheckpointError::Kind::Mismatch, "checkpoint/config mismatch: " + path.string() +
                                                              " was written for a different model configuration");
  }
  model::load_state(model, ckpt);
  std::size_t p = 0;
  for (const auto& n : model.state()) {
    if (!n.learnable) continue;
    const std::string name = "opt/" + n.name;
    const auto it = std::find_if(ckpt.tensors.begin(), ckpt.tensors.end(), [&](const auto& e) { return e.first == name; });
    if (it == ckpt.tensors.end()) throw CheckpointError(CheckpointError::Kind::Mismatch, "checkpoint lacks " + name);
    const auto v = it->second.values();
    if (v.size() != opt.velocity().at(p).size()) throw CheckpointError(CheckpointError::Kind::Mismatch, "bad shape for " + name);
    opt.velocity()[p++].assign(v.begin(), v.end());
  }
  const auto meta = kv::parse(ckpt.meta_text);
  kv::Reader r(meta);
  ResumeState s;
  TrainConfig stored;
  visit(kv::ReadVisitor{r}, stored);
  if (config_text(stored) != config_text(cfg)) {
    // Only the epoch budget may change between a run and its continuation.
    stored.epochs = cfg.epochs;
    if (config_text(stored) != config_text(cfg)) {
      throw CheckpointError(CheckpointError::Kind::Mismatch,
                            "checkpoint/config mismatch: training settings differ from " + path.string());
    }
  }
  if (!r.read("epoch", s.epoch)) throw CheckpointError(CheckpointError::Kind::Mismatch, "checkpoint lacks an epoch counter");
  r.read("best_vote_acc", s.best_vote_acc);
  r.read("best_epoch", s.best_epoch);
  return s;
}

// Keeps the header and the rows of epochs <= last.
std::string read_metrics_prefix(const std::filesystem::path& path, std::size_t last) {
  std::ifstream in(path);
  std::string line, out = std::string(kMetricsHeader) + "\n";
  if (!in) return out;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoul(line.substr(0, line.find(','))) <= last) out += line + "\n";
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

FitResult fit(const audio::Dataset& train_set, const audio::Dataset& val_set, const model::ModelConfig& model_cfg,
              const TrainConfig& cfg, const FitOptions& opt) {
  cfg.validate();
  model_cfg.validate();
  if (train_set.tracks.empty()) throw DataError("training set is empty");
  if (val_set.tracks.empty()) throw DataError("validation set is empty");
  std::filesystem::create_directories(opt.out_dir);

  const std::size_t n = cfg.clip_samples;
  std::vector<std::size_t> clip_counts;
  for (const auto& t : train_set.tracks) {
    if (!t.label || *t.label < 0 || static_cast<std::size_t>(*t.label) >= model_cfg.num_classes) {
      throw DataError("track '" + t.id + "' has a missing or out-of-range label");
    }
    const std::size_t c = audio::clip_count(t.samples.size(), n, cfg.hop_samples);
    if (c == 0) {
      throw DataError("track '" + t.id + "' is shorter than one clip (" + std::to_string(t.samples.size()) + " < " +
                      std::to_string(n) + " samples); pad or drop it");
    }
    clip_counts.push_back(c);
  }

  model::Model model(model_cfg, init_seed(cfg));
  ad::Sgd sgd(model.parameters(), cfg.momentum);
  {
    std::size_t i = 0;
    for (const auto& n : model.state()) {
      if (!n.learnable) continue;
      if (n.name.ends_with(".low") || n.name.ends_with(".band")) sgd.set_lr_scale(i, cfg.sinc_lr_scale);
      ++i;
    }
  }
  FitResult result;
  std::size_t start = 1;
  const auto metrics_path = opt.out_dir / "metrics.csv";
  std::string metrics = std::string(kMetricsHeader) + "\n";
  if (opt.resume) {
    const ResumeState s = restore(*opt.resume, model, sgd, cfg);
    start = s.epoch + 1;
    result.best_vote_acc = s.best_vote_acc;
    result.best_epoch = s.best_epoch;
    metrics = read_metrics_prefix(metrics_path, s.epoch);
  }
  write_text(metrics_path, metrics);

  const std::size_t last_epoch = opt.stop_after ? std::min(opt.stop_after, cfg.epochs) : cfg.epochs;
  eval::EvalOptions eval_opt{n, cfg.hop_samples, cfg.batch_size};
  for (std::size_t epoch = start; epoch <= last_epoch; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    const auto refs = sample_epoch_clips(clip_counts, cfg.clips_per_track, cfg.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t first = 0, batch_id = 0; first < refs.size(); first += cfg.batch_size, ++batch_id) {
      const std::size_t b = std::min(cfg.batch_size, refs.size() - first);
      ad::Tensor clips(ad::Shape{b, n});
      std::vector<int> labels(b);
      for (std::size_t i = 0; i < b; ++i) {
        const ClipRef ref = refs[first + i];
        const auto& track = train_set.tracks[ref.track];
        audio::Clip clip;
        clip.samples.assign(track.samples.begin() + static_cast<std::ptrdiff_t>(ref.clip * cfg.hop_samples),
                            track.samples.begin() + static_cast<std::ptrdiff_t>(ref.clip * cfg.hop_samples + n));
        if (cfg.augment.enabled) {
          std::mt19937_64 rng(derive_seed(cfg.seed, kAugment, epoch, first + i));
          clip = audio::augment(clip, cfg.augment, rng);
        }
        const auto norm = audio::layer_normalize(clip.samples);
        std::copy(norm.begin(), norm.end(), clips.data() + i * n);
        labels[i] = *track.label;
      }
      ad::Tape tape;
      ad::Tensor loss;
      {
        ad::TapeScope scope(tape);
        loss = ad::softmax_cross_entropy(model.forward(clips, true), labels);
      }
      if (!std::isfinite(loss.item())) {
        throw NumericError("loss diverged (non-finite) at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_id));
      }
      tape.backward(loss);
      sgd.step(lr);
      loss_sum += loss.item() * static_cast<double>(b);
    }

    eval::ModelClassifier classifier(model);
    eval::EvalReport report = eval::evaluate(classifier, val_set.tracks, eval_opt);
    EpochMetrics m{epoch, lr, loss_sum / static_cast<double>(refs.size()), report.clip_accuracy,
                   report.track_accuracy};
    result.history.push_back(m);
    metrics += metrics_row(m) + "\n";
    write_text(metrics_path, metrics);
    if (m.val_vote_acc > result.best_vote_acc) {
      result.best_vote_acc = m.val_vote_acc;
      result.best_epoch = epoch;
      save_training_checkpoint(opt.out_dir / "best.ckpt", model, sgd.velocity(), cfg, epoch, result.best_vote_acc,
                               result.best_epoch);
    }
    save_training_checkpoint(opt.out_dir / "last.ckpt", model, sgd.velocity(), cfg, epoch, result.best_vote_acc,
                             result.best_epoch);
    result.last_report = std::move(report);
    if (opt.on_epoch) opt.on_epoch(m);
  }
  return result;
}

}  // namespace mssr::train
