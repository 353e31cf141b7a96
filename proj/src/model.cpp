#include "mssr/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include "mssr/autodiff/tape.hpp"
#include "mssr/error.hpp"

namespace mssr::model {

using ad::Shape;
using ad::Tensor;

// ---- configuration ---------------------------------------------------------

std::string format_value(Variant v) {
  switch (v) {
    case Variant::MsSincResNet: return "ms_sincresnet";
    case Variant::SincResNetSingleScale: return "sincresnet_single_scale";
    case Variant::BaselineSincNet: return "baseline_sincnet";
    case Variant::ResNetOnMel: return "resnet_on_mel";
  }
  return "?";
}

std::string format_value(Backbone b) { return b == Backbone::ResNet18 ? "resnet18" : "tiny"; }

void read_value(kv::Reader& r, const std::string& key, Variant& v) {
  std::string s;
  if (!r.read(key, s)) return;
  for (Variant c : {Variant::MsSincResNet, Variant::SincResNetSingleScale, Variant::BaselineSincNet, Variant::ResNetOnMel}) {
    if (format_value(c) == s) {
      v = c;
      return;
    }
  }
  r.fail(key, "unknown variant '" + s + "'");
}

void read_value(kv::Reader& r, const std::string& key, Backbone& b) {
  std::string s;
  if (!r.read(key, s)) return;
  if (s == "resnet18") {
    b = Backbone::ResNet18;
  } else if (s == "tiny") {
    b = Backbone::Tiny;
  } else {
    r.fail(key, "unknown backbone '" + s + "'");
  }
}

void ModelConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (!(sample_rate > 0.0)) throw ConfigError("sample_rate must be positive");
  if (filters == 0) throw ConfigError("K must be >= 1");
  if (rep_bins == 0) throw ConfigError("rep_bins must be >= 1");
  if (kernel_lengths.empty()) throw ConfigError("kernel_lengths must not be empty");
  for (std::size_t l : kernel_lengths) {
    if (l % 2 == 0) throw ConfigError("kernel_lengths must all be odd, got " + std::to_string(l));
  }
  if (single_scale_length % 2 == 0) throw ConfigError("single_scale_length must be odd");
  if (baseline_kernel_length % 2 == 0) throw ConfigError("baseline_kernel_length must be odd");
  if (spp_grids.empty()) throw ConfigError("spp_grids must not be empty");
  for (const auto& [r, c] : spp_grids) {
    if (r == 0 || c == 0) throw ConfigError("spp_grids entries must be at least 1x1");
  }
  if (!(width_multiplier > 0.0)) throw ConfigError("width_multiplier must be positive");
  if (blocks_per_stage == 0) throw ConfigError("blocks_per_stage must be >= 1");
  if (fc_hidden == 0) throw ConfigError("fc_hidden must be >= 1");
  if (baseline_pool == 0 || baseline_conv_length == 0 || baseline_conv_filters == 0 || baseline_fc == 0) {
    throw ConfigError("baseline sizes must be positive");
  }
}

std::vector<std::size_t> ModelConfig::scale_lengths() const {
  switch (variant) {
    case Variant::MsSincResNet: return kernel_lengths;
    case Variant::SincResNetSingleScale: return {single_scale_length, single_scale_length, single_scale_length};
    default: return {};
  }
}

std::vector<std::size_t> ModelConfig::stage_widths() const {
  std::vector<std::size_t> widths = {64, 128, 256, 512};
  if (backbone == Backbone::Tiny) {
    for (auto& w : widths) {
      w = static_cast<std::size_t>(std::max(1.0, std::round(static_cast<double>(w) * width_multiplier)));
    }
  }
  return widths;
}

std::size_t ModelConfig::stage_blocks() const { return backbone == Backbone::ResNet18 ? 2 : blocks_per_stage; }

sinc::FrontendConfig ModelConfig::frontend_config() const {
  sinc::FrontendConfig f;
  f.filters = filters;
  f.kernel_lengths = scale_lengths();
  f.bins = rep_bins;
  f.sample_rate = sample_rate;
  f.f_low = f_low;
  f.window = symmetric_window ? sinc::Window::HammingSymmetric : sinc::Window::Hamming;
  return f;
}

mel::MelConfig ModelConfig::mel_config() const {
  mel::MelConfig m;
  m.sample_rate = sample_rate;
  m.n_fft = mel_n_fft;
  m.hop = mel_hop;
  m.n_mels = mel_bands;
  m.f_low = f_low;
  m.f_high = sample_rate / 2.0;
  return m;
}

std::string config_text(const ModelConfig& cfg) {
  std::string out;
  visit(kv::WriteVisitor{out}, cfg);
  return out;
}

ModelConfig parse_model_config(const std::string& text) {
  const auto map = kv::parse(text);
  kv::Reader reader(map);
  ModelConfig cfg;
  visit(kv::ReadVisitor{reader}, cfg);
  reader.reject_unknown();
  cfg.validate();
  return cfg;
}

// ---- shapes ----------------------------------------------------------------

namespace {

std::size_t conv_out(std::size_t n, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (n + 2 * pad < kernel) throw ShapeError("input too small for a " + std::to_string(kernel) + "-wide kernel");
  return (n + 2 * pad - kernel) / stride + 1;
}

std::size_t pool_out(std::size_t n, std::size_t factor) {
  if (factor <= 1) return n;
  if (n < factor) throw ShapeError("baseline: sequence shorter than the pooling factor");
  return (n - factor) / factor + 1;
}

}  // namespace

ShapeChain shape_chain(const ModelConfig& cfg, std::size_t clip_samples) {
  cfg.validate();
  ShapeChain chain;
  chain.input = clip_samples;
  chain.logits = cfg.num_classes;

  if (cfg.variant == Variant::BaselineSincNet) {
    std::size_t n = conv_out(clip_samples, cfg.baseline_kernel_length, 1, 0);
    n = pool_out(n, cfg.baseline_pool);
    chain.layers.push_back({"sinc", {cfg.baseline_filters, n}});
    for (int i = 0; i < 2; ++i) {
      n = pool_out(conv_out(n, cfg.baseline_conv_length, 1, 0), cfg.baseline_pool);
      chain.layers.push_back({"conv" + std::to_string(i + 1), {cfg.baseline_conv_filters, n}});
    }
    chain.representation = {cfg.baseline_conv_filters, n};
    chain.feature = cfg.baseline_conv_filters * n;
    chain.hidden = cfg.baseline_fc;
    return chain;
  }

  std::size_t h = 0, w = 0;
  if (cfg.variant == Variant::ResNetOnMel) {
    const auto m = cfg.mel_config();
    h = m.n_mels;
    w = mel::frame_count(clip_samples, m);
    chain.representation = {3, h, w};
  } else {
    h = cfg.filters;
    w = cfg.rep_bins;
    chain.representation = {cfg.scale_lengths().size(), h, w};
  }
  const auto widths = cfg.stage_widths();
  h = conv_out(h, 7, 2, 3);
  w = conv_out(w, 7, 2, 3);
  chain.layers.push_back({"stem", {widths[0], h, w}});
  h = conv_out(h, 3, 2, 1);
  w = conv_out(w, 3, 2, 1);
  chain.layers.push_back({"maxpool", {widths[0], h, w}});
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) {
      h = conv_out(h, 3, 2, 1);
      w = conv_out(w, 3, 2, 1);
    }
    chain.layers.push_back({"stage" + std::to_string(s + 1), {widths[s], h, w}});
  }
  chain.backbone = {widths[3], h, w};
  if (cfg.spp_enabled) {
    std::size_t cells = 0;
    for (const auto& [r, c] : cfg.spp_grids) {
      if (r > h || c > w) {
        throw ConfigError("spp grid " + std::to_string(r) + "x" + std::to_string(c) + " larger than the " +
                          std::to_string(h) + "x" + std::to_string(w) + " backbone output");
      }
      cells += r * c;
    }
    chain.feature = widths[3] * cells;
  } else {
    chain.feature = widths[3];
  }
  chain.hidden = cfg.fc_hidden;
  return chain;
}

Tensor spp(const Tensor& features, const kv::Grids& grids) {
  ad::expect_rank("spp", features, 4);
  if (grids.empty()) throw ShapeError("spp: no grids");
  for (const auto& [r, c] : grids) {
    if (r > features.dim(2) || c > features.dim(3)) {
      throw ShapeError("spp: grid " + std::to_string(r) + "x" + std::to_string(c) + " larger than feature map " +
                       std::to_string(features.dim(2)) + "x" + std::to_string(features.dim(3)));
    }
  }
  std::vector<Tensor> parts;
  for (const auto& [r, c] : grids) parts.push_back(ad::flatten(ad::adaptive_avg_pool_2d(features, r, c)));
  if (parts.size() == 1) return parts.front();
  return ad::concat(parts, 1);
}

// ---- network ---------------------------------------------------------------

namespace {

struct ConvBn {
  Tensor weight;
  ad::BatchNorm bn;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Tensor forward(const Tensor& x, bool training) {
    return ad::batch_norm_2d(ad::conv2d(x, weight, Tensor{}, {stride, padding}), bn, training);
  }
};

struct Block {
  ConvBn c1, c2;
  std::optional<ConvBn> down;

  Tensor forward(const Tensor& x, bool training) {
    Tensor y = ad::relu(c1.forward(x, training));
    y = c2.forward(y, training);
    const Tensor shortcut = down ? down->forward(x, training) : x;
    return ad::relu(ad::residual_add(y, shortcut));
  }
};

class Registry {
 public:
  explicit Registry(std::uint64_t seed) : rng_(seed) {}

  // Kaiming normal with the given fan-in and gain^2.
  Tensor kaiming(Shape shape, std::size_t fan_in, double gain2, const std::string& name) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> d(0.0, std::sqrt(gain2 / static_cast<double>(fan_in)));
    for (double& v : t.values()) v = d(rng_);
    return learnable(name, t);
  }

  Tensor zeros(Shape shape, const std::string& name) { return learnable(name, Tensor(std::move(shape))); }

  Tensor learnable(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    params_.push_back({name, t, true});
    return t;
  }

  void batch_norm(const std::string& name, ad::BatchNorm& bn) {
    learnable(name + ".gamma", bn.gamma);
    learnable(name + ".beta", bn.beta);
    buffers_.push_back({name + ".running_mean", bn.running_mean, false});
    buffers_.push_back({name + ".running_var", bn.running_var, false});
  }

  ConvBn conv_bn(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                 std::size_t pad) {
    ConvBn c;
    c.weight = kaiming({cout, cin, k, k}, cin * k * k, 2.0, name + ".weight");
    c.bn = ad::BatchNorm(cout);
    batch_norm(name + ".bn", c.bn);
    c.stride = stride;
    c.padding = pad;
    return c;
  }

  std::vector<NamedTensor> finish() {
    std::vector<NamedTensor> all = params_;
    all.insert(all.end(), buffers_.begin(), buffers_.end());
    return all;
  }

 private:
  std::mt19937_64 rng_;
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
};

}  // namespace

struct Model::Impl {
  std::optional<sinc::Frontend> frontend;
  mel::MelConfig mel_cfg;

  ConvBn stem;
  std::vector<Block> blocks;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;

  sinc::Constraint constraint;
  Tensor sinc_low, sinc_band;
  Tensor ln_gamma[3], ln_beta[3];
  Tensor conv_w[2], conv_b[2];
  std::vector<Tensor> fc_w, fc_b;
  std::vector<ad::BatchNorm> fc_bn;
  Tensor out_w, out_b;
};

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), impl_(std::make_unique<Impl>()) {
  (void)shape_chain(cfg_, cfg_.baseline_clip_samples);
  Registry reg(seed);
  Impl& m = *impl_;

  if (cfg_.variant == Variant::BaselineSincNet) {
    sinc::FrontendConfig fc;
    fc.filters = cfg_.baseline_filters;
    fc.kernel_lengths = {cfg_.baseline_kernel_length};
    fc.sample_rate = cfg_.sample_rate;
    fc.f_low = cfg_.f_low;
    fc.bins = 1;
    sinc::Frontend init(fc);
    m.constraint = init.constraint();
    m.sinc_low = reg.learnable("sinc.low", init.scales()[0].low);
    m.sinc_band = reg.learnable("sinc.band", init.scales()[0].band);
    const std::size_t widths[3] = {cfg_.baseline_filters, cfg_.baseline_conv_filters, cfg_.baseline_conv_filters};
    for (int i = 0; i < 3; ++i) {
      m.ln_gamma[i] = reg.learnable("ln" + std::to_string(i) + ".gamma", Tensor(Shape{widths[i]}, 1.0));
      m.ln_beta[i] = reg.zeros({widths[i]}, "ln" + std::to_string(i) + ".beta");
    }
    for (int i = 0; i < 2; ++i) {
      const std::size_t cin = widths[i];
      const std::string name = "conv" + std::to_string(i + 1);
      m.conv_w[i] = reg.kaiming({cfg_.baseline_conv_filters, cin, cfg_.baseline_conv_length},
                                cin * cfg_.baseline_conv_length, 2.0, name + ".weight");
      m.conv_b[i] = reg.zeros({cfg_.baseline_conv_filters}, name + ".bias");
    }
    const ShapeChain chain = shape_chain(cfg_, cfg_.baseline_clip_samples);
    std::size_t fan_in = chain.feature;
    for (std::size_t i = 0; i < cfg_.baseline_fc_layers; ++i) {
      const std::string name = "fc" + std::to_string(i + 1);
      m.fc_w.push_back(reg.kaiming({cfg_.baseline_fc, fan_in}, fan_in, 2.0, name + ".weight"));
      m.fc_b.push_back(reg.zeros({cfg_.baseline_fc}, name + ".bias"));
      fan_in = cfg_.baseline_fc;
    }
    m.fc_bn.resize(cfg_.baseline_fc_layers);
    for (std::size_t i = 0; i < cfg_.baseline_fc_layers; ++i) {
      m.fc_bn[i] = ad::BatchNorm(cfg_.baseline_fc);
      reg.batch_norm("fc" + std::to_string(i + 1) + ".bn", m.fc_bn[i]);
    }
    m.out_w = reg.kaiming({cfg_.num_classes, fan_in}, fan_in, 1.0, "out.weight");
    m.out_b = reg.zeros({cfg_.num_classes}, "out.bias");
  } else {
    if (cfg_.variant == Variant::ResNetOnMel) {
      m.mel_cfg = cfg_.mel_config();
    } else {
      m.frontend.emplace(cfg_.frontend_config());
      for (std::size_t s = 0; s < m.frontend->scales().size(); ++s) {
        auto& sc = m.frontend->scales()[s];
        const std::string name = "frontend.scale" + std::to_string(s);
        reg.learnable(name + ".low", sc.low);
        reg.learnable(name + ".band", sc.band);
        reg.batch_norm(name + ".bn", sc.bn);
      }
    }
    const std::size_t in_ch = cfg_.variant == Variant::ResNetOnMel ? 3 : cfg_.scale_lengths().size();
    const auto widths = cfg_.stage_widths();
    m.stem = reg.conv_bn("stem", in_ch, widths[0], 7, 2, 3);
    std::size_t cin = widths[0];
    for (std::size_t s = 0; s < 4; ++s) {
      for (std::size_t b = 0; b < cfg_.stage_blocks(); ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        Block blk;
        blk.c1 = reg.conv_bn(name + ".conv1", cin, widths[s], 3, stride, 1);
        blk.c2 = reg.conv_bn(name + ".conv2", widths[s], widths[s], 3, 1, 1);
        if (stride != 1 || cin != widths[s]) blk.down = reg.conv_bn(name + ".down", cin, widths[s], 1, stride, 0);
        m.blocks.push_back(std::move(blk));
        cin = widths[s];
      }
    }
    std::size_t feature = widths[3];
    if (cfg_.spp_enabled) {
      std::size_t cells = 0;
      for (const auto& [r, c] : cfg_.spp_grids) cells += r * c;
      feature *= cells;
    }
    m.fc1_w = reg.kaiming({cfg_.fc_hidden, feature}, feature, 2.0, "head.fc1.weight");
    m.fc1_b = reg.zeros({cfg_.fc_hidden}, "head.fc1.bias");
    m.fc2_w = reg.kaiming({cfg_.num_classes, cfg_.fc_hidden}, cfg_.fc_hidden, 1.0, "head.fc2.weight");
    m.fc2_b = reg.zeros({cfg_.num_classes}, "head.fc2.bias");
  }
  state_ = reg.finish();
}

Model::~Model() = default;
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;

sinc::Frontend* Model::frontend() { return impl_->frontend ? &*impl_->frontend : nullptr; }

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const auto& n : state_) {
    if (n.learnable) out.push_back(n.tensor);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t count = 0;
  for (const auto& n : state_) {
    if (n.learnable) count += n.tensor.numel();
  }
  return count;
}

Tensor Model::representation(const Tensor& clips, bool training) {
  ad::expect_rank("model", clips, 2);
  const std::size_t batch = clips.dim(0), n = clips.dim(1);
  if (cfg_.variant == Variant::BaselineSincNet) throw Error("baseline_sincnet has no 2D representation");
  if (cfg_.variant == Variant::ResNetOnMel) {
    const std::size_t frames = mel::frame_count(n, impl_->mel_cfg), bands = impl_->mel_cfg.n_mels;
    Tensor rep(Shape{batch, 3, bands, frames});
    for (std::size_t b = 0; b < batch; ++b) {
      const auto spec = mel::mel_spectrogram(std::span<const double>(clips.data() + b * n, n), impl_->mel_cfg);
      for (std::size_t c = 0; c < 3; ++c) {
        std::copy(spec.data.begin(), spec.data.end(), rep.data() + (b * 3 + c) * bands * frames);
      }
    }
    return rep;
  }
  return impl_->frontend->forward(ad::reshape(clips, Shape{batch, 1, n}), training);
}

Tensor Model::backbone_features(const Tensor& rep, bool training) {
  Impl& m = *impl_;
  Tensor y = ad::relu(m.stem.forward(rep, training));
  y = ad::max_pool_2d(y, 3, 2, 1);
  for (auto& blk : m.blocks) y = blk.forward(y, training);
  return y;
}

Tensor Model::pooled(const Tensor& features) const {
  if (cfg_.spp_enabled) return spp(features, cfg_.spp_grids);
  return ad::flatten(ad::adaptive_avg_pool_2d(features, 1, 1));
}

Tensor Model::head(const Tensor& f) {
  Impl& m = *impl_;
  const Tensor h = ad::relu(ad::fully_connected(f, m.fc1_w, m.fc1_b));
  return ad::fully_connected(h, m.fc2_w, m.fc2_b);
}

Tensor Model::forward(const Tensor& clips, bool training) {
  if (cfg_.variant != Variant::BaselineSincNet) {
    return head(pooled(backbone_features(representation(clips, training), training)));
  }
  ad::expect_rank("model", clips, 2);
  if (clips.dim(1) != cfg_.baseline_clip_samples) {
    throw ShapeError("baseline_sincnet: clip length " + std::to_string(clips.dim(1)) + " != baseline_clip_samples " +
                     std::to_string(cfg_.baseline_clip_samples));
  }
  Impl& m = *impl_;
  const double slope = cfg_.leaky_slope;
  const auto stage = [&](Tensor y, int i) {
    if (cfg_.baseline_pool > 1) y = ad::max_pool_1d(y, cfg_.baseline_pool, cfg_.baseline_pool);
    return ad::leaky_relu(ad::layer_norm(y, m.ln_gamma[i], m.ln_beta[i]), slope);
  };
  const Tensor cut = sinc::sinc_cutoffs(m.sinc_low, m.sinc_band, m.constraint);
  const Tensor kernels = sinc::sinc_kernels(cut, cfg_.baseline_kernel_length,
                                            cfg_.symmetric_window ? sinc::Window::HammingSymmetric : sinc::Window::Hamming);
  Tensor y = ad::reshape(clips, Shape{clips.dim(0), 1, clips.dim(1)});
  y = stage(ad::conv1d(y, kernels, Tensor{}, {0, ad::ConvAlgo::Automatic}), 0);
  for (int i = 0; i < 2; ++i) y = stage(ad::conv1d(y, m.conv_w[i], m.conv_b[i], {0, ad::ConvAlgo::Direct}), i + 1);
  y = ad::flatten(y);
  for (std::size_t i = 0; i < m.fc_w.size(); ++i) {
    y = ad::leaky_relu(ad::batch_norm_1d(ad::fully_connected(y, m.fc_w[i], m.fc_b[i]), m.fc_bn[i], training), slope);
  }
  return ad::fully_connected(y, m.out_w, m.out_b);
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'S', 'S', 'R'};

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::size_t v) {
    if (v > 0xffffffffULL) throw CheckpointError(CheckpointError::Kind::Io, "checkpoint field exceeds 32 bits");
    le<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  void text(const std::string& s) {
    u32(s.size());
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> buf;
};

class Parser {
 public:
  Parser(const std::vector<std::uint8_t>& b, std::size_t end) : buf_(b), end_(end) {}
  const std::uint8_t* take(std::size_t n) {
    if (end_ - pos_ < n) throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint truncated");
    const std::uint8_t* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <typename T>
  T le() {
    const std::uint8_t* p = take(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
    return v;
  }
  std::string text() {
    const std::uint32_t n = le<std::uint32_t>();
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.text(ckpt.config_text);
  w.text(ckpt.meta_text);
  w.u32(ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    w.text(name);
    w.u32(t.rank());
    for (std::size_t d : t.shape()) w.u32(d);
    for (double v : t.values()) w.le<std::uint64_t>(std::bit_cast<std::uint64_t>(v));
  }
  w.le<std::uint64_t>(fnv1a(w.buf.data(), w.buf.size()));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "short write to " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::Io, "cannot replace " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::BadMagic, path.string() + " is not an MSSR checkpoint");
  }
  if (buf.size() < 16) throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint truncated");
  Parser p(buf, buf.size() - 8);
  p.take(4);
  const auto version = p.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::Version, "checkpoint version " + std::to_string(version) +
                                                             " unsupported (expected " +
                                                             std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.config_text = p.text();
  ckpt.meta_text = p.text();
  const auto count = p.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = p.text();
    const auto rank = p.le<std::uint32_t>();
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(p.le<std::uint32_t>());
      numel *= shape.back();
    }
    if (numel > (buf.size() - p.pos()) / 8) throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint truncated");
    std::vector<double> values(numel);
    for (double& v : values) v = std::bit_cast<double>(p.le<std::uint64_t>());
    ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (p.pos() != buf.size() - 8) {
    throw CheckpointError(CheckpointError::Kind::Checksum, "checkpoint digest mismatch (trailing bytes)");
  }
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(buf[buf.size() - 8 + i]) << (8 * i);
  if (stored != fnv1a(buf.data(), buf.size() - 8)) {
    throw CheckpointError(CheckpointError::Kind::Checksum, "checkpoint digest mismatch");
  }
  return ckpt;
}

std::vector<std::pair<std::string, Tensor>> state_tensors(const Model& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& n : model.state()) out.emplace_back(n.name, n.tensor.detach());
  return out;
}

void load_state(Model& model, const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> stored;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("opt/", 0) != 0) stored[name] = &t;
  }
  if (stored.size() != model.state().size()) {
    throw CheckpointError(CheckpointError::Kind::Mismatch,
                          "checkpoint holds " + std::to_string(stored.size()) + " model tensors, model has " +
                              std::to_string(model.state().size()));
  }
  for (const auto& n : model.state()) {
    const auto it = stored.find(n.name);
    if (it == stored.end()) throw CheckpointError(CheckpointError::Kind::Mismatch, "checkpoint lacks tensor " + n.name);
    if (it->second->shape() != n.tensor.shape()) {
      throw CheckpointError(CheckpointError::Kind::Mismatch, "shape mismatch for tensor " + n.name);
    }
  }
  for (const auto& n : model.state()) {
    Tensor t = n.tensor;
    const auto src = stored.at(n.name)->values();
    std::copy(src.begin(), src.end(), t.values().begin());
  }
}

}  // namespace mssr::model
