#pragma once

// MS-SincResNet and its ablation variants: learnable front end, residual 2D
// backbone, spatial pyramid pooling and a two-layer head. Also the baseline
// SincNet classifier and checkpoint files.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mssr/autodiff/ops.hpp"
#include "mssr/autodiff/tensor.hpp"
#include "mssr/kv.hpp"
#include "mssr/mel.hpp"
#include "mssr/sincnet.hpp"

namespace mssr::model {

enum class Variant { MsSincResNet, SincResNetSingleScale, BaselineSincNet, ResNetOnMel };
enum class Backbone { ResNet18, Tiny };

std::string format_value(Variant v);
std::string format_value(Backbone b);
void read_value(kv::Reader& r, const std::string& key, Variant& v);
void read_value(kv::Reader& r, const std::string& key, Backbone& b);

struct ModelConfig {
  Variant variant = Variant::MsSincResNet;
  std::size_t num_classes = 10;
  double sample_rate = 16000.0;

  std::size_t filters = 160;
  std::vector<std::size_t> kernel_lengths = {251, 501, 1001};
  std::size_t single_scale_length = 251;
  std::size_t rep_bins = 1024;
  double f_low = 30.0;
  bool symmetric_window = false;

  Backbone backbone = Backbone::ResNet18;
  double width_multiplier = 0.125;  // tiny only
  std::size_t blocks_per_stage = 1;  // tiny only
  bool spp_enabled = true;
  kv::Grids spp_grids = {{1, 1}, {2, 2}};
  std::size_t fc_hidden = 1024;

  std::size_t baseline_filters = 80;
  std::size_t baseline_kernel_length = 251;
  std::size_t baseline_conv_filters = 60;
  std::size_t baseline_conv_length = 5;
  std::size_t baseline_pool = 3;
  std::size_t baseline_fc = 2048;
  std::size_t baseline_fc_layers = 3;
  double leaky_slope = 0.2;
  // The baseline's first FC width depends on the clip length.
  std::size_t baseline_clip_samples = 48000;

  std::size_t mel_n_fft = 512;
  std::size_t mel_hop = 128;
  std::size_t mel_bands = 160;

  void validate() const;

  // Kernel lengths of the sinc scales actually built for this variant.
  std::vector<std::size_t> scale_lengths() const;
  std::vector<std::size_t> stage_widths() const;
  std::size_t stage_blocks() const;
  sinc::FrontendConfig frontend_config() const;
  mel::MelConfig mel_config() const;
};

template <typename Visitor, typename Cfg>
void visit(Visitor&& v, Cfg& c) {
  v("variant", c.variant, "ms_sincresnet | sincresnet_single_scale | baseline_sincnet | resnet_on_mel");
  v("num_classes", c.num_classes, "number of output classes");
  v("sample_rate", c.sample_rate, "audio sample rate in Hz");
  v("K", c.filters, "sinc filters per scale");
  v("kernel_lengths", c.kernel_lengths, "odd sinc kernel length per scale");
  v("single_scale_length", c.single_scale_length, "kernel length used three times by sincresnet_single_scale");
  v("rep_bins", c.rep_bins, "time bins M of the pooled representation");
  v("f_low", c.f_low, "lowest mel-initialized cut-off in Hz");
  v("symmetric_window", c.symmetric_window, "use the exactly even Hamming window (denominator L-1)");
  v("backbone", c.backbone, "resnet18 | tiny");
  v("width_multiplier", c.width_multiplier, "tiny backbone: channel width factor applied to 64/128/256/512");
  v("blocks_per_stage", c.blocks_per_stage, "tiny backbone: basic blocks per stage");
  v("spp_enabled", c.spp_enabled, "spatial pyramid pooling; false uses global average pooling");
  v("spp_grids", c.spp_grids, "pyramid grids as rows x cols");
  v("fc_hidden", c.fc_hidden, "width of the first fully connected layer");
  v("baseline_filters", c.baseline_filters, "baseline SincNet: sinc filters");
  v("baseline_kernel_length", c.baseline_kernel_length, "baseline SincNet: sinc kernel length");
  v("baseline_conv_filters", c.baseline_conv_filters, "baseline SincNet: filters of the two standard conv layers");
  v("baseline_conv_length", c.baseline_conv_length, "baseline SincNet: length of the standard conv kernels");
  v("baseline_pool", c.baseline_pool, "baseline SincNet: max-pool factor after each conv stage");
  v("baseline_fc", c.baseline_fc, "baseline SincNet: width of the hidden fully connected layers");
  v("baseline_fc_layers", c.baseline_fc_layers, "baseline SincNet: number of hidden fully connected layers");
  v("leaky_slope", c.leaky_slope, "baseline SincNet: Leaky-ReLU negative slope");
  v("baseline_clip_samples", c.baseline_clip_samples, "baseline SincNet: clip length the FC stack is sized for");
  v("mel_n_fft", c.mel_n_fft, "resnet_on_mel: STFT window length");
  v("mel_hop", c.mel_hop, "resnet_on_mel: STFT hop");
  v("mel_bands", c.mel_bands, "resnet_on_mel: mel bands");
}

// Shapes derived from the configuration alone (per sample, batch omitted).
struct ShapeChain {
  std::size_t input = 0;
  ad::Shape representation;
  ad::Shape backbone;
  std::size_t feature = 0;
  std::size_t hidden = 0;
  std::size_t logits = 0;
  std::vector<std::pair<std::string, ad::Shape>> layers;
};

ShapeChain shape_chain(const ModelConfig& cfg, std::size_t clip_samples);

// features: (B, C, H, W) -> (B, C * sum(r * c)); each grid is an adaptive
// average pool flattened in (channel, row, col) order.
ad::Tensor spp(const ad::Tensor& features, const kv::Grids& grids);

struct NamedTensor {
  std::string name;
  ad::Tensor tensor;
  bool learnable = true;
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  const ModelConfig& config() const { return cfg_; }

  // clips: (B, N) layer-normalized waveforms -> logits (B, num_classes).
  ad::Tensor forward(const ad::Tensor& clips, bool training);

  // Stages of forward(), exposed for shape checks and extraction.
  ad::Tensor representation(const ad::Tensor& clips, bool training);
  ad::Tensor backbone_features(const ad::Tensor& rep, bool training);
  ad::Tensor pooled(const ad::Tensor& features) const;
  ad::Tensor head(const ad::Tensor& pooled_features);

  // Learnable tensors followed by running statistics, in a fixed order.
  const std::vector<NamedTensor>& state() const { return state_; }
  std::vector<ad::Tensor> parameters() const;
  std::size_t parameter_count() const;

  // nullptr for variants without a multi-scale front end.
  sinc::Frontend* frontend();

 private:
  struct Impl;
  ModelConfig cfg_;
  std::unique_ptr<Impl> impl_;
  std::vector<NamedTensor> state_;
};

// ---- checkpoints -----------------------------------------------------------

struct Checkpoint {
  std::string config_text;
  std::string meta_text;
  std::vector<std::pair<std::string, ad::Tensor>> tensors;
};

// "MSSR", u32 version, u32 length + config text, u32 length + meta text,
// u32 tensor count, then per tensor: u32 name length, name, u32 rank, u32 dims,
// f64 LE values; finally a u64 FNV-1a digest of everything before it.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws CheckpointError with kind BadMagic, Version, Truncated or Checksum.
Checkpoint load_checkpoint(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string config_text(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& text);

// Copies stored values into the model's tensors; the set of names and shapes
// must match exactly (CheckpointError::Mismatch otherwise).
void load_state(Model& model, const Checkpoint& ckpt);
std::vector<std::pair<std::string, ad::Tensor>> state_tensors(const Model& model);

}  // namespace mssr::model
