#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cvt/layers.hpp"

CVT_BEGIN_NAMESPACE

struct StageConfig {
  ConvEmbedSpec embed;
  int num_blocks = 1;
  int num_heads = 1;
  int embed_dim = 64;
  int mlp_ratio = 4;
  ConvProjSpec proj;
  bool with_cls_token = false;
  // Optional per-block overrides (empty = uniform); used by search candidates.
  std::vector<int> block_stride_kv;
  std::vector<int> block_mlp_ratio;

  int stride_kv_for(int block) const;
  int mlp_ratio_for(int block) const;

  bool operator==(const StageConfig&) const = default;
};

struct ModelConfig {
  std::string name = "custom";
  int input_channels = 3;
  int num_classes = 1000;
  std::vector<StageConfig> stages;
  bool qkv_bias = false;
  // Regularization hooks; the reference build only supports 0.
  double dropout = 0.0;
  double drop_path = 0.0;

  int total_blocks() const;
  /// Throws ConfigError naming the first offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

namespace presets {
ModelConfig cvt13();
ModelConfig cvt21();
ModelConfig cvtw24();
/// Desk-scale model for the synthetic task: dims 16/32/64, blocks 1/1/2,
/// heads 1/2/4, 4 classes.
ModelConfig tiny();
std::vector<std::string> names();
/// Throws ConfigError for unknown names.
ModelConfig by_name(const std::string& name);
}  // namespace presets

/// Per-stage geometry observed during a forward pass.
struct StageTrace {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t channels = 0;
  std::int64_t tokens = 0;  // including cls
};

class CvtStage {
 public:
  ConvTokenEmbedding embed;
  Tensor cls_token;  // [1 x 1 x D], final stage only
  std::vector<ConvTransformerBlock> blocks;
};

class CvtModel {
 public:
  CvtModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// images [B x C x H x W] -> logits [B x num_classes]. Train mode updates
  /// batchnorm running statistics; eval mode writes nothing.
  Tensor forward(const Tensor& images, std::vector<StageTrace>* trace = nullptr);

  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }

  /// Learnable tensors in registration order.
  ParamList parameters() const;
  /// Batchnorm running statistics.
  ParamList buffers() const;
  std::int64_t num_parameters() const;
  void zero_grad();

  std::vector<CvtStage>& stages() { return stages_; }

 private:
  void collect(ParamList& params, ParamList& buffers) const;

  ModelConfig config_;
  Mode mode_ = Mode::train;
  std::vector<CvtStage> stages_;
  LayerNorm head_norm_;
  Linear head_;
};

CvtModel build_model(const ModelConfig& config, std::uint64_t seed);

CVT_END_NAMESPACE
