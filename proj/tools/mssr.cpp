// mssr: dataset synthesis, training, evaluation, representation extraction
// and gradient checking for MS-SincResNet.
//
// Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric divergence,
// 5 gradient-check failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "mssr/audio.hpp"
#include "mssr/autodiff/gradcheck.hpp"
#include "mssr/autodiff/tape.hpp"
#include "mssr/error.hpp"
#include "mssr/eval.hpp"
#include "mssr/mel.hpp"
#include "mssr/model.hpp"
#include "mssr/parallel.hpp"
#include "mssr/sincnet.hpp"
#include "mssr/train.hpp"

namespace fs = std::filesystem;
using namespace mssr;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4, kGradcheck = 5 };

// Union of model and training settings read from one flat config file.
struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  double val_fraction = 0.1;
};

template <typename Visitor, typename Cfg>
void visit_run(Visitor&& v, Cfg& c) {
  model::visit(v, c.model);
  train::visit(v, c.train);
  v("val_fraction", c.val_fraction, "fraction of each class held out for validation");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

RunConfig parse_run_config(const std::string& text) {
  const auto map = kv::parse(text);
  kv::Reader reader(map);
  RunConfig cfg;
  visit_run(kv::ReadVisitor{reader}, cfg);
  reader.reject_unknown();
  cfg.model.validate();
  cfg.train.validate();
  if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  return cfg;
}

std::string run_config_text(const RunConfig& cfg) {
  std::string out;
  visit_run(kv::WriteVisitor{out}, cfg);
  return out;
}

std::string key_reference() {
  std::vector<kv::KeyDoc> docs;
  RunConfig defaults;
  visit_run(kv::DocVisitor{docs}, defaults);
  std::string out = "Config keys (key = default  help):\n";
  for (const auto& d : docs) out += "  " + d.key + " = " + d.default_value + "\n      " + d.help + "\n";
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

audio::Dataset subset(const audio::Dataset& d, const std::vector<std::size_t>& idx) {
  audio::Dataset out;
  out.class_names = d.class_names;
  for (std::size_t i : idx) out.tracks.push_back(d.tracks[i]);
  return out;
}

std::vector<int> labels_of(const audio::Dataset& d) {
  std::vector<int> labels;
  for (const auto& t : d.tracks) labels.push_back(t.label.value_or(-1));
  return labels;
}

// Resamples every track to the model rate.
audio::Dataset load_for(const fs::path& dir, const model::ModelConfig& cfg) {
  audio::Dataset d = audio::load_dataset(dir);
  const auto rate = static_cast<std::uint32_t>(std::lround(cfg.sample_rate));
  for (auto& t : d.tracks) {
    if (t.sample_rate != rate) t = audio::resample(t, rate);
  }
  if (d.class_names.size() > cfg.num_classes) {
    throw ConfigError("dataset has " + std::to_string(d.class_names.size()) + " classes but num_classes = " +
                      std::to_string(cfg.num_classes));
  }
  return d;
}

// Model settings from the checkpoint, training settings from its metadata.
RunConfig run_config_from_checkpoint(const model::Checkpoint& ckpt) {
  RunConfig cfg;
  cfg.model = model::parse_model_config(ckpt.config_text);
  const auto meta = kv::parse(ckpt.meta_text);
  kv::Reader r(meta);
  train::visit(kv::ReadVisitor{r}, cfg.train);
  return cfg;
}

void print_epoch(const train::EpochMetrics& m) {
  std::printf("epoch %zu  lr %.6g  train_loss %.5f  val_clip_acc %.4f  val_vote_acc %.4f\n", m.epoch, m.lr,
              m.train_loss, m.val_clip_acc, m.val_vote_acc);
  std::fflush(stdout);
}

// ---- commands ----------------------------------------------------------------

struct SynthArgs {
  std::size_t classes = 4;
  std::size_t per_class = 10;
  double duration = 10.0;
  std::uint64_t seed = 1;
  fs::path out;
  bool force = false;
};

int cmd_synth(const SynthArgs& a) {
  if (a.classes < 2) throw ConfigError("--classes must be at least 2");
  if (a.per_class < 1) throw ConfigError("--per-class must be at least 1");
  if (!(a.duration > 0.0)) throw ConfigError("--duration must be positive");
  if (fs::exists(a.out) && !fs::is_empty(a.out)) {
    if (!a.force) throw ConfigError("output directory " + a.out.string() + " is not empty (use --force)");
    fs::remove_all(a.out);
  }
  audio::Dataset d;
  d.class_names = audio::default_class_names(a.classes);
  d.tracks = audio::synth_dataset(a.classes, a.per_class, a.duration, a.seed);
  audio::write_dataset(a.out, d);
  for (const auto& t : d.tracks) {
    std::printf("%s.wav  class %d  %zu samples @ %u Hz\n", t.id.c_str(), *t.label, t.samples.size(), t.sample_rate);
  }
  std::printf("wrote %zu tracks in %zu classes to %s\n", d.tracks.size(), a.classes, a.out.string().c_str());
  return kOk;
}

struct TrainArgs {
  fs::path config, data, out, val_data;
  bool resume = false;
  std::size_t stop_after = 0;
};

int cmd_train(const TrainArgs& a) {
  const RunConfig cfg = a.config.empty() ? RunConfig{} : parse_run_config(read_file(a.config));
  const audio::Dataset all = load_for(a.data, cfg.model);
  audio::Dataset train_set, val_set;
  if (!a.val_data.empty()) {
    train_set = all;
    val_set = load_for(a.val_data, cfg.model);
  } else {
    const auto split = eval::holdout_split(labels_of(all), cfg.val_fraction, cfg.train.seed);
    train_set = subset(all, split.train);
    val_set = subset(all, split.test);
  }
  std::printf("training on %zu tracks, validating on %zu\n", train_set.tracks.size(), val_set.tracks.size());
  fs::create_directories(a.out);
  write_text(a.out / "config.txt", run_config_text(cfg));
  train::FitOptions opt;
  opt.out_dir = a.out;
  opt.stop_after = a.stop_after;
  opt.on_epoch = print_epoch;
  if (a.resume) {
    opt.resume = a.out / "last.ckpt";
    if (!fs::exists(*opt.resume)) throw ConfigError("--resume: no " + opt.resume->string());
  }
  const auto result = train::fit(train_set, val_set, cfg.model, cfg.train, opt);
  eval::write_report(a.out / "eval", result.last_report, all.class_names);
  std::printf("best val_vote_acc %.4f at epoch %zu; checkpoints in %s\n", result.best_vote_acc, result.best_epoch,
              a.out.string().c_str());
  return kOk;
}

struct EvalArgs {
  fs::path ckpt, data, out, config;
  std::size_t kfold = 0;
};

int cmd_eval(const EvalArgs& a) {
  if (a.kfold == 0) {
    if (a.ckpt.empty()) throw ConfigError("eval needs --ckpt (or --kfold K to train per fold)");
    const model::Checkpoint ckpt = model::load_checkpoint(a.ckpt);
    const RunConfig cfg = run_config_from_checkpoint(ckpt);
    model::Model m(cfg.model, 0);
    model::load_state(m, ckpt);
    const audio::Dataset d = load_for(a.data, cfg.model);
    eval::ModelClassifier classifier(m);
    const auto report = eval::evaluate(classifier, d.tracks,
                                       {cfg.train.clip_samples, cfg.train.hop_samples, cfg.train.batch_size});
    if (!a.out.empty()) eval::write_report(a.out, report, d.class_names);
    std::printf("tracks %zu  clip_accuracy %.4f  voted_accuracy %.4f\n", report.tracks.size(), report.clip_accuracy,
                report.track_accuracy);
    return kOk;
  }

  RunConfig cfg;
  if (!a.config.empty()) {
    cfg = parse_run_config(read_file(a.config));
  } else if (!a.ckpt.empty()) {
    cfg = run_config_from_checkpoint(model::load_checkpoint(a.ckpt));
  }
  const audio::Dataset d = load_for(a.data, cfg.model);
  const auto folds = eval::kfold_split(labels_of(d), a.kfold, cfg.train.seed);
  const fs::path out = a.out.empty() ? fs::path("kfold") : a.out;
  nlohmann::ordered_json summary;
  std::vector<double> accs;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const audio::Dataset pool = subset(d, folds[f].train);
    const auto split = eval::holdout_split(labels_of(pool), cfg.val_fraction, cfg.train.seed);
    train::FitOptions opt;
    opt.out_dir = out / ("fold_" + std::to_string(f));
    opt.on_epoch = print_epoch;
    std::printf("fold %zu: train %zu, validation %zu, test %zu\n", f, split.train.size(), split.test.size(),
                folds[f].test.size());
    train::fit(subset(pool, split.train), subset(pool, split.test), cfg.model, cfg.train, opt);
    const model::Checkpoint best = model::load_checkpoint(opt.out_dir / "best.ckpt");
    model::Model m(cfg.model, 0);
    model::load_state(m, best);
    eval::ModelClassifier classifier(m);
    const audio::Dataset test = subset(d, folds[f].test);
    auto report = eval::evaluate(classifier, test.tracks,
                                 {cfg.train.clip_samples, cfg.train.hop_samples, cfg.train.batch_size});
    report.fold = static_cast<int>(f);
    eval::write_report(opt.out_dir / "eval", report, d.class_names);
    std::printf("fold %zu voted_accuracy %.4f clip_accuracy %.4f\n", f, report.track_accuracy, report.clip_accuracy);
    accs.push_back(report.track_accuracy);
    summary["folds"].push_back(
        {{"fold", f}, {"voted_accuracy", report.track_accuracy}, {"clip_accuracy", report.clip_accuracy}});
  }
  const double mean = std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(accs.size());
  summary["mean_voted_accuracy"] = mean;
  write_text(out / "kfold.json", summary.dump(1) + "\n");
  std::printf("mean voted_accuracy over %zu folds %.4f\n", accs.size(), mean);
  return kOk;
}

struct ExtractArgs {
  fs::path ckpt, wav, out;
};

int cmd_extract(const ExtractArgs& a) {
  RunConfig cfg;
  std::optional<model::Checkpoint> ckpt;
  if (!a.ckpt.empty()) {
    ckpt = model::load_checkpoint(a.ckpt);
    cfg = run_config_from_checkpoint(*ckpt);
  } else {
    std::printf("no --ckpt given: using fresh Mel-initialized parameters\n");
  }
  if (cfg.model.variant != model::Variant::MsSincResNet && cfg.model.variant != model::Variant::SincResNetSingleScale) {
    throw ConfigError("extract needs a model with a sinc front end");
  }
  model::Model m(cfg.model, train::init_seed(cfg.train));
  if (ckpt) model::load_state(m, *ckpt);

  audio::AudioTrack track = audio::read_wav(a.wav);
  const auto rate = static_cast<std::uint32_t>(std::lround(cfg.model.sample_rate));
  if (track.sample_rate != rate) track = audio::resample(track, rate);
  const std::size_t n = cfg.train.clip_samples;
  if (track.samples.size() < n) {
    throw DataError(a.wav.string() + " is shorter than one clip (" + std::to_string(track.samples.size()) + " < " +
                    std::to_string(n) + " samples)");
  }
  const auto clip = audio::layer_normalize(std::span<const double>(track.samples.data(), n));
  ad::Tensor x(ad::Shape{1, n}, clip);
  ad::NoGradScope no_grad;
  const ad::Tensor rep = m.representation(x, false);
  fs::create_directories(a.out);
  const std::size_t scales = rep.dim(1), k = rep.dim(2), bins = rep.dim(3);
  sinc::write_msrp(a.out / "representation.msrp",
                   ad::Tensor(ad::Shape{scales, k, bins}, std::vector<double>(rep.values().begin(), rep.values().end())));
  const auto lengths = cfg.model.scale_lengths();
  for (std::size_t s = 0; s < scales; ++s) {
    // Row 0 of the image is the highest band so low frequencies sit at the bottom.
    std::vector<double> img(k * bins);
    for (std::size_t r = 0; r < k; ++r) {
      std::copy_n(rep.data() + (s * k + r) * bins, bins, img.data() + (k - 1 - r) * bins);
    }
    const std::string name = "scale" + std::to_string(s) + "_L" + std::to_string(lengths[s]) + ".pgm";
    sinc::write_pgm(a.out / name, img, k, bins);
    std::printf("%s  %zu x %zu\n", name.c_str(), k, bins);
  }
  const auto mel_cfg = cfg.model.mel_config();
  const auto spec = mel::mel_spectrogram(clip, mel_cfg);
  std::vector<double> img(spec.data.size());
  for (std::size_t r = 0; r < spec.rows; ++r) {
    std::copy_n(spec.data.data() + r * spec.cols, spec.cols, img.data() + (spec.rows - 1 - r) * spec.cols);
  }
  sinc::write_pgm(a.out / "mel.pgm", img, spec.rows, spec.cols);
  sinc::write_msrp(a.out / "mel.msrp", ad::Tensor(ad::Shape{1, spec.rows, spec.cols}, spec.data));
  std::printf("mel.pgm  %zu x %zu\n", spec.rows, spec.cols);
  return kOk;
}

struct GradcheckArgs {
  std::uint64_t seed = 1;
  std::string size = "tiny";
  std::string corrupt;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  if (!a.corrupt.empty()) ad::set_corrupted_adjoint(a.corrupt);
  std::vector<ad::GradCheck> checks;
  if (a.size == "tiny") {
    checks = ad::primitive_gradchecks(a.seed);
    for (auto& c : sinc::sinc_op_gradchecks(a.seed)) checks.push_back(c);
    checks.push_back(sinc::kernel_tap_gradcheck(a.seed));
  } else if (a.size == "full-frontend") {
    sinc::FrontendConfig fe;
    fe.bins = 128;
    checks.push_back(sinc::frontend_gradcheck(fe, 2, 1200, a.seed));
  } else {
    throw ConfigError("--size must be tiny or full-frontend");
  }
  std::vector<std::string> failing;
  for (const auto& c : checks) {
    std::printf("%-28s max_rel_error %.3e  threshold %.0e  %s\n", c.name.c_str(), c.max_rel_error, c.threshold,
                c.passed() ? "ok" : "FAIL");
    if (!c.passed()) failing.push_back(c.name);
  }
  if (!failing.empty()) {
    std::string list;
    for (const auto& f : failing) list += (list.empty() ? "" : ", ") + f;
    std::fprintf(stderr, "gradcheck failed: %s\n", list.c_str());
    return kGradcheck;
  }
  std::printf("all %zu checks passed\n", checks.size());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MS-SincResNet music genre classification"};
  app.require_subcommand(1);
  app.footer(key_reference());
  std::size_t threads = 0;
  app.add_option("--threads", threads, "worker threads (default: MSSR_THREADS or logical cores)");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth-data", "write a synthetic class-per-directory WAV dataset");
  s->add_option("--classes", synth.classes, "number of classes")->capture_default_str();
  s->add_option("--per-class", synth.per_class, "tracks per class")->capture_default_str();
  s->add_option("--duration", synth.duration, "track length in seconds")->capture_default_str();
  s->add_option("--seed", synth.seed, "random seed")->capture_default_str();
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_flag("--force", synth.force, "replace a non-empty output directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model; writes metrics.csv, best.ckpt, last.ckpt and eval/");
  t->add_option("--config", tr.config, "config file (flat key = value)");
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--val-data", tr.val_data, "separate validation dataset (default: stratified hold-out)");
  t->add_option("--out", tr.out, "output directory")->required();
  t->add_flag("--resume", tr.resume, "continue from OUT/last.ckpt");
  t->add_option("--stop-after", tr.stop_after, "stop after this epoch");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint, or run k-fold training and evaluation");
  e->add_option("--ckpt", ev.ckpt, "checkpoint");
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--kfold", ev.kfold, "train and evaluate K stratified folds");
  e->add_option("--config", ev.config, "config for --kfold (default: taken from --ckpt)");
  e->add_option("--out", ev.out, "report directory");

  ExtractArgs ex;
  auto* x = app.add_subcommand("extract", "dump learned multi-scale representations and the Mel spectrogram");
  x->add_option("--ckpt", ex.ckpt, "checkpoint (default: fresh Mel-initialized front end)");
  x->add_option("--wav", ex.wav, "input WAV")->required();
  x->add_option("--out", ex.out, "output directory")->required();

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "finite-difference checks of every differentiable op");
  g->add_option("--seed", gc.seed, "random seed")->capture_default_str();
  g->add_option("--size", gc.size, "tiny | full-frontend")->capture_default_str();
#ifdef MSSR_FAULT_INJECTION
  g->add_option("--corrupt-adjoint", gc.corrupt, "scale the adjoint of this op by 1.01");
#endif

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kConfig;
  }

  try {
    retain_freed_memory();
    if (threads > 0) set_num_threads(threads);
    if (s->parsed()) return cmd_synth(synth);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev);
    if (x->parsed()) return cmd_extract(ex);
    if (g->parsed()) return cmd_gradcheck(gc);
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return kConfig;
  } catch (const CheckpointError& err) {
    std::fprintf(stderr, "checkpoint error: %s\n", err.what());
    return err.kind() == CheckpointError::Kind::Mismatch ? kConfig : kData;
  } catch (const DataError& err) {
    std::fprintf(stderr, "data error: %s\n", err.what());
    return kData;
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numeric divergence: %s\n", err.what());
    return kNumeric;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kFailure;
  }
  return kFailure;
}
