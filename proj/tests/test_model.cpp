#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mssr/autodiff/gradcheck.hpp"
#include "mssr/autodiff/tape.hpp"
#include "mssr/error.hpp"
#include "mssr/model.hpp"

using namespace mssr;
using namespace mssr::model;
using ad::Shape;
using ad::Tensor;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  for (double& v : t.values()) v = d(rng);
  return t;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.backbone = Backbone::Tiny;
  c.num_classes = 4;
  c.filters = 64;
  c.rep_bins = 64;
  c.fc_hidden = 16;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mssr_model_" + name);
}

}  // namespace

TEST(ShapeChain, DefaultsFromConfigAlone) {
  const ShapeChain chain = shape_chain(ModelConfig{}, 48000);
  EXPECT_EQ(chain.representation, (Shape{3, 160, 1024}));
  EXPECT_EQ(chain.backbone, (Shape{512, 5, 32}));
  EXPECT_EQ(chain.feature, 2560u);
  EXPECT_EQ(chain.hidden, 1024u);
  EXPECT_EQ(chain.logits, 10u);
}

TEST(ShapeChain, SpatialDimsDivisibleBy32AreDividedExactly) {
  for (std::size_t k : {32u, 64u, 96u, 160u, 320u}) {
    for (std::size_t m : {32u, 128u, 1024u}) {
      ModelConfig c;
      c.filters = k;
      c.rep_bins = m;
      c.spp_grids = {{1, 1}};
      const ShapeChain chain = shape_chain(c, 48000);
      EXPECT_EQ(chain.backbone, (Shape{512, k / 32, m / 32})) << k << "x" << m;
    }
  }
}

TEST(ShapeChain, SppOfDisabledIsChannelCount) {
  ModelConfig c;
  c.spp_enabled = false;
  EXPECT_EQ(shape_chain(c, 48000).feature, 512u);
}

TEST(ShapeChain, OversizedGridRejected) {
  ModelConfig c = tiny_config();
  c.filters = 32;  // 1 x 2 backbone output
  EXPECT_THROW(shape_chain(c, 48000), ConfigError);
  EXPECT_THROW(Model(c, 1), ConfigError);
}

TEST(Backbone, ResNet18OnDefaultRepresentation) {
  Model model(ModelConfig{}, 3);
  ad::NoGradScope ng;
  const Tensor f = model.backbone_features(random_tensor({1, 3, 160, 1024}, 5), false);
  EXPECT_EQ(f.shape(), (Shape{1, 512, 5, 32}));
}

TEST(Backbone, TinyWidthEighth) {
  ModelConfig c;
  c.backbone = Backbone::Tiny;
  Model model(c, 3);
  EXPECT_EQ(c.stage_widths(), (std::vector<std::size_t>{8, 16, 32, 64}));
  ad::NoGradScope ng;
  const Tensor f = model.backbone_features(random_tensor({1, 3, 160, 1024}, 5), false);
  EXPECT_EQ(f.shape(), (Shape{1, 64, 5, 32}));
}

TEST(Forward, TinyBatchShapesMatchChain) {
  const ModelConfig c = tiny_config();
  Model model(c, 11);
  const ShapeChain chain = shape_chain(c, 4000);
  ad::NoGradScope ng;
  const Tensor clips = random_tensor({4, 4000}, 2);
  const Tensor rep = model.representation(clips, false);
  EXPECT_EQ(rep.shape(), (Shape{4, 3, 64, 64}));
  const Tensor f = model.backbone_features(rep, false);
  EXPECT_EQ(f.shape(), (Shape{4, chain.backbone[0], chain.backbone[1], chain.backbone[2]}));
  EXPECT_EQ(model.pooled(f).shape(), (Shape{4, chain.feature}));
  const Tensor logits = model.forward(clips, false);
  EXPECT_EQ(logits.shape(), (Shape{4, 4}));
  for (double v : logits.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, VariantsBuildTheirRepresentation) {
  ModelConfig single = tiny_config();
  single.variant = Variant::SincResNetSingleScale;
  Model a(single, 1);
  ASSERT_NE(a.frontend(), nullptr);
  ASSERT_EQ(a.frontend()->scales().size(), 3u);
  for (const auto& s : a.frontend()->scales()) EXPECT_EQ(s.length, 251u);

  ModelConfig mel = tiny_config();
  mel.variant = Variant::ResNetOnMel;
  EXPECT_EQ(shape_chain(mel, 48000).representation, (Shape{3, 160, 372}));
  Model b(mel, 1);
  EXPECT_EQ(b.frontend(), nullptr);
  ad::NoGradScope ng;
  const Tensor rep = b.representation(random_tensor({2, 8000}, 4), false);
  ASSERT_EQ(rep.shape(), (Shape{2, 3, 160, 59}));
  const std::size_t plane = 160 * 59;
  for (std::size_t i = 0; i < plane; ++i) {
    EXPECT_EQ(rep[i], rep[plane + i]);
    EXPECT_EQ(rep[i], rep[2 * plane + i]);
  }
}

TEST(Spp, DefaultLengthIs2560) {
  const Tensor out = spp(random_tensor({2, 512, 5, 32}, 1), {{1, 1}, {2, 2}});
  EXPECT_EQ(out.shape(), (Shape{2, 2560}));
}

TEST(Spp, ConstantMapGivesConstant) {
  const Tensor out = spp(Tensor(Shape{1, 3, 5, 32}, 2.5), {{1, 1}, {2, 2}, {3, 4}});
  for (double v : out.values()) EXPECT_EQ(v, 2.5);
}

TEST(Spp, OverlappingBinsMatchPerBinMean) {
  const Tensor x = random_tensor({1, 2, 5, 32}, 9);
  const Tensor out = spp(x, {{2, 2}});
  // rows [0,3) and [2,5); cols [0,16) and [16,32)
  const std::size_t rows[2][2] = {{0, 3}, {2, 5}};
  const std::size_t cols[2][2] = {{0, 16}, {16, 32}};
  for (std::size_t ch = 0; ch < 2; ++ch) {
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t c = 0; c < 2; ++c) {
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t i = rows[r][0]; i < rows[r][1]; ++i) {
          for (std::size_t j = cols[c][0]; j < cols[c][1]; ++j, ++n) s += x[(ch * 5 + i) * 32 + j];
        }
        EXPECT_NEAR(out[ch * 4 + r * 2 + c], s / static_cast<double>(n), 1e-12);
      }
    }
  }
}

TEST(Spp, GlobalGridEqualsGlobalAveragePooling) {
  const Tensor x = random_tensor({3, 4, 5, 7}, 10);
  const Tensor out = spp(x, {{1, 1}});
  for (std::size_t p = 0; p < 12; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < 35; ++i) s += x[p * 35 + i];
    EXPECT_EQ(out[p], s / 35.0);
  }
}

TEST(Spp, GridLargerThanMapRejected) {
  EXPECT_THROW(spp(random_tensor({1, 2, 1, 32}, 1), {{2, 2}}), ShapeError);
}

TEST(Head, ZeroWeightsGiveZeroLogits) {
  Model model(tiny_config(), 2);
  for (const auto& n : model.state()) {
    if (n.name.rfind("head.", 0) == 0) {
      Tensor t = n.tensor;
      std::fill(t.values().begin(), t.values().end(), 0.0);
    }
  }
  ad::NoGradScope ng;
  const Tensor logits = model.head(random_tensor({3, 320}, 4));
  EXPECT_EQ(logits.shape(), (Shape{3, 4}));
  for (double v : logits.values()) EXPECT_EQ(v, 0.0);
}

TEST(Head, TenClassLogits) {
  ModelConfig c = tiny_config();
  c.num_classes = 10;
  Model model(c, 2);
  ad::NoGradScope ng;
  EXPECT_EQ(model.head(random_tensor({1, 320}, 4)).shape(), (Shape{1, 10}));
}

TEST(Head, GradientCheckThroughBothLayers) {
  Model model(tiny_config(), 2);
  Tensor f = random_tensor({2, 320}, 4);
  f.set_requires_grad(true);
  std::vector<Tensor> inputs = {f};
  for (const auto& n : model.state()) {
    if (n.name.rfind("head.", 0) == 0) {
      Tensor t = n.tensor;
      // Non-zero biases keep ReLU inputs away from the kink.
      if (t.rank() == 1) {
        std::mt19937_64 rng(5);
        std::normal_distribution<double> d(0.0, 0.3);
        for (double& v : t.values()) v = d(rng);
      }
      inputs.push_back(t);
    }
  }
  const std::vector<double> w = {0.3, -1.2, 0.7, 2.0, -0.4, 1.1, 0.9, -0.8};
  const auto check = ad::check_gradients(
      "head", [&] { return ad::weighted_sum(model.head(f), w); }, inputs, 1e-6, 1e-5);
  EXPECT_TRUE(check.passed()) << check.max_rel_error;
}

TEST(Forward, EndToEndSincParameterGradient) {
  ModelConfig c = tiny_config();
  c.kernel_lengths = {31, 61, 101};
  Model model(c, 8);
  const Tensor clips = random_tensor({2, 600}, 3);
  const std::vector<double> w = {1.0, -0.5, 0.25, 2.0, -1.0, 0.5, 0.75, -2.0};
  const auto loss = [&] { return ad::weighted_sum(model.forward(clips, false), w); };
  for (std::size_t s = 0; s < 3; ++s) {
    for (Tensor param : {model.frontend()->scales()[s].low, model.frontend()->scales()[s].band}) {
      const auto pair = ad::gradient_pair(loss, param, 1e-7);
      // Entry 5 sits away from the |a| kink at zero and from the 0.5 clamp.
      const double a = pair.analytic[5], n = pair.numeric[5];
      EXPECT_LT(std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12}), 1e-3) << a << " vs " << n;
      EXPECT_NE(a, 0.0);
    }
  }
}

TEST(Model, EveryLearnableTensorReceivesGradient) {
  for (Variant v : {Variant::MsSincResNet, Variant::ResNetOnMel}) {
    ModelConfig c = tiny_config();
    c.variant = v;
    Model model(c, 6);
    // 8000 samples give the mel variant a 59-frame map, wide enough for 2x2 SPP.
    const Tensor clips = random_tensor({4, 8000}, 12);
    ad::Tape tape;
    Tensor loss;
    {
      ad::TapeScope scope(tape);
      const std::vector<int> labels = {0, 1, 2, 3};
      loss = ad::softmax_cross_entropy(model.forward(clips, true), labels);
    }
    tape.backward(loss);
    for (const auto& n : model.state()) {
      if (!n.learnable) continue;
      const auto g = std::as_const(n.tensor).grad();
      EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](double x) { return x != 0.0; })) << n.name;
    }
  }
}

TEST(Model, ArgmaxInvariantUnderLogitShift) {
  Model model(tiny_config(), 4);
  ad::NoGradScope ng;
  const Tensor logits = model.forward(random_tensor({3, 4000}, 8), false);
  const std::vector<int> labels = {0, 2, 3};
  const double base = ad::softmax_cross_entropy(logits, labels).item();
  for (double shift : {-50.0, 3.5, 700.0}) {
    Tensor shifted = logits.clone();
    for (double& v : shifted.values()) v += shift;
    for (std::size_t b = 0; b < 3; ++b) {
      const auto row = logits.values().subspan(b * 4, 4);
      const auto srow = std::as_const(shifted).values().subspan(b * 4, 4);
      EXPECT_EQ(std::max_element(row.begin(), row.end()) - row.begin(),
                std::max_element(srow.begin(), srow.end()) - srow.begin());
    }
    EXPECT_NEAR(ad::softmax_cross_entropy(shifted, labels).item(), base, 1e-9);
  }
}

TEST(Baseline, SincLayerHasTwoParametersPerFilter) {
  ModelConfig c;
  c.variant = Variant::BaselineSincNet;
  c.num_classes = 5;
  c.baseline_clip_samples = 4000;
  c.baseline_fc = 32;
  Model model(c, 1);
  std::size_t sinc_params = 0;
  for (const auto& n : model.state()) {
    if (n.name.rfind("sinc.", 0) == 0) sinc_params += n.tensor.numel();
  }
  EXPECT_EQ(sinc_params, 2u * 80u);
  EXPECT_LT(sinc_params, 251u * 80u);

  const Tensor logits = model.forward(random_tensor({3, 4000}, 2), true);
  EXPECT_EQ(logits.shape(), (Shape{3, 5}));
  for (double v : logits.values()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_THROW(model.forward(random_tensor({1, 3999}, 2), false), ShapeError);
}

TEST(Baseline, ShapeChainPoolsByThree) {
  ModelConfig c;
  c.variant = Variant::BaselineSincNet;
  const ShapeChain chain = shape_chain(c, 48000);
  // 48000 - 250 = 47750 -> 15916 -> 15912 -> 5304 -> 5300 -> 1766
  EXPECT_EQ(chain.representation, (Shape{60, 1766}));
  EXPECT_EQ(chain.feature, 60u * 1766u);
}

TEST(Config, TextRoundTrip) {
  ModelConfig c = tiny_config();
  c.variant = Variant::SincResNetSingleScale;
  c.spp_grids = {{1, 1}, {2, 4}};
  c.symmetric_window = true;
  const std::string text = config_text(c);
  EXPECT_EQ(config_text(parse_model_config(text)), text);
  EXPECT_THROW(parse_model_config("variant = resnet50\n"), ConfigError);
  EXPECT_THROW(parse_model_config("kernel_lengths = 250\n"), ConfigError);
  EXPECT_THROW(parse_model_config("num_classes = 1\n"), ConfigError);
}

TEST(Checkpoint, RoundTripGivesBitIdenticalLogits) {
  const ModelConfig c = tiny_config();
  Model a(c, 21);
  const Tensor clips = random_tensor({2, 4000}, 30);
  {
    // A training pass moves the running statistics away from their init.
    ad::NoGradScope ng;
    (void)a.forward(clips, true);
  }
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(path, {config_text(c), "epoch = 3\n", state_tensors(a)});
  const Checkpoint loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.meta_text, "epoch = 3\n");
  Model b(parse_model_config(loaded.config_text), 99);
  load_state(b, loaded);
  ad::NoGradScope ng;
  const Tensor la = a.forward(clips, false), lb = b.forward(clips, false);
  for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_EQ(la[i], lb[i]);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ErrorsAreDistinct) {
  const ModelConfig c = tiny_config();
  Model a(c, 21);
  const auto path = temp_path("errors.ckpt");
  save_checkpoint(path, {config_text(c), "", state_tensors(a)});
  std::vector<char> bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  const auto write = [&](const std::vector<char>& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  const auto kind_of = [&] {
    try {
      (void)load_checkpoint(path);
    } catch (const CheckpointError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no error";
    return CheckpointError::Kind::Io;
  };
  auto corrupt = bytes;
  corrupt.back() ^= 0x01;
  write(corrupt);
  EXPECT_EQ(kind_of(), CheckpointError::Kind::Checksum);

  corrupt = bytes;
  corrupt[bytes.size() / 2] ^= 0x40;
  write(corrupt);
  EXPECT_EQ(kind_of(), CheckpointError::Kind::Checksum);

  write(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 3)));
  EXPECT_EQ(kind_of(), CheckpointError::Kind::Truncated);

  corrupt = bytes;
  corrupt[4] = 2;
  write(corrupt);
  EXPECT_EQ(kind_of(), CheckpointError::Kind::Version);

  corrupt = bytes;
  corrupt[0] = 'X';
  write(corrupt);
  EXPECT_EQ(kind_of(), CheckpointError::Kind::BadMagic);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ShapeMismatchReported) {
  ModelConfig c = tiny_config();
  Model a(c, 1);
  c.fc_hidden = 32;
  Model b(c, 1);
  const Checkpoint ckpt{config_text(c), "", state_tensors(a)};
  try {
    load_state(b, ckpt);
    FAIL() << "no error";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointError::Kind::Mismatch);
    EXPECT_NE(std::string(e.what()).find("head.fc1"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, TinyDefaultIsUnderTenMegabytes) {
  ModelConfig c;
  c.backbone = Backbone::Tiny;
  Model model(c, 1);
  const auto path = temp_path("size.ckpt");
  save_checkpoint(path, {config_text(c), "", state_tensors(model)});
  EXPECT_LT(std::filesystem::file_size(path), 10u * 1000u * 1000u);
  std::filesystem::remove(path);
}
