#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "mssr/autodiff/sgd.hpp"
#include "mssr/autodiff/tape.hpp"
#include "mssr/error.hpp"
#include "mssr/train.hpp"

using namespace mssr;
using namespace mssr::train;

namespace {

model::ModelConfig small_model() {
  model::ModelConfig c;
  c.backbone = model::Backbone::Tiny;
  c.num_classes = 4;
  c.filters = 64;
  c.rep_bins = 64;
  c.fc_hidden = 32;
  c.kernel_lengths = {63, 127, 255};
  return c;
}

TrainConfig small_train() {
  TrainConfig t;
  t.epochs = 4;
  t.warmup_epochs = 1;
  t.batch_size = 8;
  t.clip_samples = 8000;
  t.hop_samples = 2000;
  t.seed = 5;
  return t;
}

struct Data {
  audio::Dataset train, val;
};

const Data& small_data() {
  static const Data data = [] {
    Data d;
    const auto tracks = audio::synth_dataset(4, 4, 1.0, 77);
    d.train.class_names = d.val.class_names = audio::default_class_names(4);
    for (std::size_t i = 0; i < tracks.size(); ++i) (i % 4 == 3 ? d.val : d.train).tracks.push_back(tracks[i]);
    return d;
  }();
  return data;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mssr_train_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(Schedule, Anchors) {
  const TrainConfig cfg;
  EXPECT_EQ(lr_schedule(3, cfg), 1e-5);
  EXPECT_EQ(lr_schedule(6, cfg), 0.005);
  EXPECT_EQ(lr_schedule(36, cfg), 0.0025);
  EXPECT_EQ(lr_schedule(66, cfg), 0.00125);
  EXPECT_EQ(lr_schedule(35, cfg), 0.005);
  EXPECT_EQ(lr_schedule(5, cfg), 1e-5);
  EXPECT_THROW(lr_schedule(0, cfg), ConfigError);
}

TEST(Schedule, PiecewiseConstantAndNonincreasingAfterWarmup) {
  const TrainConfig cfg;
  std::set<double> values;
  for (std::size_t e = cfg.warmup_epochs + 1; e < 200; ++e) {
    EXPECT_LE(lr_schedule(e + 1, cfg), lr_schedule(e, cfg));
    values.insert(lr_schedule(e, cfg));
  }
  // 194 epochs after warm-up span ceil(194 / 30) = 7 plateaus.
  EXPECT_EQ(values.size(), 7u);
}

TEST(Sampling, FourClipsFromEveryTrack) {
  const std::vector<std::size_t> counts(40, 15);
  const auto refs = sample_epoch_clips(counts, 4, 1, 1);
  EXPECT_EQ(refs.size(), 160u);
  std::map<std::size_t, std::set<std::size_t>> per_track;
  for (const auto& r : refs) per_track[r.track].insert(r.clip);
  ASSERT_EQ(per_track.size(), 40u);
  for (const auto& [t, clips] : per_track) {
    EXPECT_EQ(clips.size(), 4u) << "track " << t;  // distinct: without replacement
    for (std::size_t c : clips) EXPECT_LT(c, 15u);
  }
}

TEST(Sampling, ShortTrackDrawnWithReplacement) {
  const std::vector<std::size_t> counts = {2, 1, 9};
  const auto refs = sample_epoch_clips(counts, 4, 3, 2);
  std::vector<std::size_t> n(3, 0);
  for (const auto& r : refs) {
    ++n[r.track];
    EXPECT_LT(r.clip, counts[r.track]);
  }
  EXPECT_EQ(n, (std::vector<std::size_t>{4, 4, 4}));
}

TEST(Sampling, DeterministicPerSeedAndEpoch) {
  const std::vector<std::size_t> counts(10, 20);
  const auto a = sample_epoch_clips(counts, 4, 8, 3), b = sample_epoch_clips(counts, 4, 8, 3);
  const auto c = sample_epoch_clips(counts, 4, 8, 4);
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].track, b[i].track);
    EXPECT_EQ(a[i].clip, b[i].clip);
    differs |= a[i].track != c[i].track || a[i].clip != c[i].clip;
  }
  EXPECT_TRUE(differs);
}

TEST(Sampling, UniformFrequencyOverManyEpochs) {
  const std::vector<std::size_t> counts = {55};
  std::vector<std::size_t> hits(55, 0);
  for (std::size_t e = 1; e <= 100000; ++e) {
    for (const auto& r : sample_epoch_clips(counts, 4, 21, e)) ++hits[r.clip];
  }
  // Binomial sd is about 1.1% of the mean, so 10% is a ~9 sd band.
  const double expected = 100000.0 * 4.0 / 55.0;
  for (std::size_t i = 0; i < 55; ++i) {
    EXPECT_NEAR(static_cast<double>(hits[i]), expected, 0.1 * expected) << "clip " << i;
  }
}

TEST(Sgd, StepChangesExactlyTensorsWithGradient) {
  model::Model m(small_model(), 3);
  ad::Sgd sgd(m.parameters(), 0.9);
  ad::Tensor clips(ad::Shape{2, 8000});
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d;
  for (double& v : clips.values()) v = d(rng);
  ad::Tape tape;
  ad::Tensor loss;
  {
    ad::TapeScope scope(tape);
    loss = ad::softmax_cross_entropy(m.forward(clips, true), std::vector<int>{1, 2});
  }
  tape.backward(loss);
  auto params = m.parameters();
  params[1].zero_grad();  // this tensor must stay put
  std::vector<std::vector<double>> before;
  std::vector<bool> has_grad;
  for (auto& p : params) {
    before.emplace_back(p.values().begin(), p.values().end());
    const auto g = std::as_const(p).grad();
    has_grad.push_back(std::any_of(g.begin(), g.end(), [](double x) { return x != 0.0; }));
  }
  sgd.step(0.01);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto v = params[i].values();
    const bool changed = !std::equal(v.begin(), v.end(), before[i].begin());
    EXPECT_EQ(changed, has_grad[i]) << i;
  }
  EXPECT_FALSE(has_grad[1]);
}

TEST(Sgd, LearningRateScaleMultipliesTheStep) {
  ad::Tensor a(ad::Shape{3}), b(ad::Shape{3});
  ad::Sgd sgd({a, b}, 0.0);
  sgd.set_lr_scale(1, 0.25);
  for (auto* t : {&a, &b}) {
    auto g = t->grad();
    for (double& x : g) x = 2.0;
  }
  sgd.step(0.5);
  for (double v : a.values()) EXPECT_EQ(v, -1.0);
  for (double v : b.values()) EXPECT_EQ(v, -0.25);
}

TEST(Fit, ZeroLearningRateLeavesParametersBitIdentical) {
  TrainConfig cfg = small_train();
  cfg.warmup_lr = 0.0;
  cfg.base_lr = 0.0;
  const auto dir = fresh_dir("zero_lr");
  fit(small_data().train, small_data().val, small_model(), cfg, {dir, {}, 2, {}});
  const model::Checkpoint ckpt = model::load_checkpoint(dir / "last.ckpt");
  const model::Model fresh(small_model(), init_seed(cfg));
  std::map<std::string, ad::Tensor> stored(ckpt.tensors.begin(), ckpt.tensors.end());
  for (const auto& n : fresh.state()) {
    if (!n.learnable) continue;
    const auto a = n.tensor.values(), b = std::as_const(stored.at(n.name)).values();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << n.name;
  }
  std::filesystem::remove_all(dir);
}

TEST(Fit, LossBelowUniformAfterFirstEpoch) {
  TrainConfig cfg = small_train();
  cfg.warmup_lr = cfg.base_lr;  // a warm-up at 1e-5 would make epoch 1 a no-op
  const auto dir = fresh_dir("loss");
  const auto result = fit(small_data().train, small_data().val, small_model(), cfg, {dir, {}, 1, {}});

  // Mean cross-entropy over every training clip with the weights after epoch 1.
  const model::Checkpoint ckpt = model::load_checkpoint(dir / "last.ckpt");
  model::Model m(small_model(), 0);
  model::load_state(m, ckpt);
  ad::NoGradScope ng;
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& t : small_data().train.tracks) {
    for (const auto& clip : audio::segment_clips(t, cfg.clip_samples, cfg.hop_samples)) {
      ad::Tensor x(ad::Shape{1, cfg.clip_samples}, audio::layer_normalize(clip.samples));
      sum += ad::softmax_cross_entropy(m.forward(x, false), std::vector<int>{*t.label}).item();
      ++count;
    }
  }
  EXPECT_LT(sum / static_cast<double>(count), std::log(4.0)) << "epoch-1 running loss " << result.history[0].train_loss;
  std::filesystem::remove_all(dir);
}

TEST(Fit, SameSeedGivesIdenticalMetrics) {
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  fit(small_data().train, small_data().val, small_model(), small_train(), {a, {}, 3, {}});
  fit(small_data().train, small_data().val, small_model(), small_train(), {b, {}, 3, {}});
  const std::string ma = slurp(a / "metrics.csv");
  EXPECT_EQ(ma, slurp(b / "metrics.csv"));
  EXPECT_EQ(ma.substr(0, ma.find('\n')), kMetricsHeader);
  EXPECT_EQ(std::count(ma.begin(), ma.end(), '\n'), 4);
  EXPECT_EQ(slurp(a / "last.ckpt"), slurp(b / "last.ckpt"));
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST(Fit, ResumeContinuesIdentically) {
  const auto full = fresh_dir("full"), split = fresh_dir("split");
  fit(small_data().train, small_data().val, small_model(), small_train(), {full, {}, 0, {}});
  fit(small_data().train, small_data().val, small_model(), small_train(), {split, {}, 2, {}});
  fit(small_data().train, small_data().val, small_model(), small_train(), {split, split / "last.ckpt", 0, {}});
  EXPECT_EQ(slurp(full / "metrics.csv"), slurp(split / "metrics.csv"));
  EXPECT_EQ(slurp(full / "last.ckpt"), slurp(split / "last.ckpt"));
  EXPECT_EQ(slurp(full / "best.ckpt"), slurp(split / "best.ckpt"));
  std::filesystem::remove_all(full);
  std::filesystem::remove_all(split);
}

TEST(Fit, ResumeRejectsDifferentModel) {
  const auto dir = fresh_dir("mismatch");
  fit(small_data().train, small_data().val, small_model(), small_train(), {dir, {}, 1, {}});
  model::ModelConfig other = small_model();
  other.fc_hidden = 16;
  try {
    fit(small_data().train, small_data().val, other, small_train(), {dir, dir / "last.ckpt", 0, {}});
    FAIL() << "no error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::Mismatch);
  }
  std::filesystem::remove_all(dir);
}

TEST(Fit, NonFiniteLossNamesEpochAndBatch) {
  Data bad = small_data();
  bad.train.tracks[0].samples[100] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg = small_train();
  cfg.augment.enabled = false;
  const auto dir = fresh_dir("nan");
  try {
    fit(bad.train, bad.val, small_model(), cfg, {dir, {}, 0, {}});
    FAIL() << "no error";
  } catch (const NumericError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("epoch 1"), std::string::npos) << what;
    EXPECT_NE(what.find("batch"), std::string::npos) << what;
  }
  std::filesystem::remove_all(dir);
}

TEST(Fit, ShortTrackRejected) {
  Data bad = small_data();
  bad.train.tracks[2].samples.resize(100);
  const auto dir = fresh_dir("short");
  EXPECT_THROW(fit(bad.train, bad.val, small_model(), small_train(), {dir, {}, 0, {}}), DataError);
  std::filesystem::remove_all(dir);
}

TEST(Config, TrainKeysRoundTrip) {
  TrainConfig cfg;
  cfg.epochs = 7;
  cfg.momentum = 0.5;
  cfg.augment.noise_sigma = 0.0;
  const std::string text = config_text(cfg);
  const auto map = kv::parse(text);
  kv::Reader r(map);
  TrainConfig back;
  visit(kv::ReadVisitor{r}, back);
  r.reject_unknown();
  EXPECT_EQ(config_text(back), text);
  TrainConfig bad;
  bad.warmup_epochs = bad.epochs;
  EXPECT_THROW(bad.validate(), ConfigError);
}
