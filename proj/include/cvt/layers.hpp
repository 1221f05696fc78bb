#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cvt/ops.hpp"
#include "cvt/tensor.hpp"

CVT_BEGIN_NAMESPACE

/// Deterministic parameter initializer.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Normal(0, std) truncated to +-2 std by rejection.
  Real trunc_normal(double std);
  double normal();
  double uniform();  // [0, 1)
  std::uint64_t next() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

Tensor trunc_normal_tensor(Shape shape, double std, Rng& rng);

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool decay = true;  // false for norm affine and the cls token
};
using ParamList = std::vector<NamedTensor>;

/// Overlapping patch embedding: kernel `kernel`, stride `stride` (= kernel
/// minus overlap), zero padding `padding`, producing `out_channels` maps.
struct ConvEmbedSpec {
  int kernel = 7;
  int stride = 4;
  int padding = 3;
  int out_channels = 64;

  bool operator==(const ConvEmbedSpec&) const = default;
};

struct ConvProjSpec {
  int kernel = 3;
  int stride_q = 1;
  int stride_kv = 2;
  int padding = 1;

  bool operator==(const ConvProjSpec&) const = default;
};

struct AttnSpec {
  int embed_dim = 64;
  int num_heads = 1;
  bool with_cls_token = false;

  int head_dim() const { return embed_dim / num_heads; }
};

void validate(const ConvEmbedSpec& spec);
void validate(const ConvProjSpec& spec);
void validate(const AttnSpec& spec);

/// Flat token sequence [B x (H*W) x C] plus the grid it came from.
struct TokenMap {
  Tensor tokens;
  std::int64_t height = 0;
  std::int64_t width = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::int64_t dim, Real eps = 1e-5);

  Tensor forward(const Tensor& x) const { return layernorm(x, weight, bias, eps); }
  void collect(const std::string& prefix, ParamList& params) const;

  Tensor weight;
  Tensor bias;
  Real eps = 1e-5;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng);

  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList& params) const;

  Tensor weight;  // [in x out]
  Tensor bias;    // [out] or undefined
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::int64_t channels, Real momentum = 0.1, Real eps = 1e-5);

  Tensor forward(const Tensor& x, Mode mode) {
    return batchnorm2d(x, weight, bias, buffers, mode, momentum, eps);
  }
  void collect(const std::string& prefix, ParamList& params, ParamList& buffer_list) const;

  Tensor weight;
  Tensor bias;
  BatchNormBuffers buffers;
  Real momentum = 0.1;
  Real eps = 1e-5;
};

/// Strided overlapping convolution over the token map, flattened row-major
/// and layer-normalized.
class ConvTokenEmbedding {
 public:
  ConvTokenEmbedding() = default;
  ConvTokenEmbedding(const ConvEmbedSpec& spec, std::int64_t in_channels, Rng& rng);

  /// x [B x C_in x H x W] -> tokens [B x (H'W') x C_out]
  TokenMap forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& params) const;

  ConvEmbedSpec spec;
  Tensor conv_weight;  // [C_out x C_in x s x s]
  Tensor conv_bias;    // [C_out]
  LayerNorm norm;
};

/// Depthwise conv -> batchnorm -> pointwise map, applied to a token
/// sequence reshaped onto its grid. The cls token (if any) skips the
/// depthwise step and joins for the pointwise map.
class ConvProjection {
 public:
  ConvProjection() = default;
  ConvProjection(std::int64_t channels, int kernel, int stride, int padding, bool pointwise_bias,
                 Rng& rng);

  /// spatial [B x T x C] with T == h*w; cls [B x 1 x C] or undefined.
  /// Returns [B x (cls + h'w') x C].
  Tensor forward(const Tensor& spatial, std::int64_t h, std::int64_t w, const Tensor& cls, Mode mode);
  std::int64_t output_extent(std::int64_t in) const;
  void collect(const std::string& prefix, ParamList& params, ParamList& buffers) const;

  int kernel = 3;
  int stride = 1;
  int padding = 1;
  Tensor dw_weight;  // [C x 1 x s x s]
  BatchNorm2d bn;
  Linear pointwise;
};

/// Multi-head self-attention whose q/k/v inputs come from convolutional
/// projections; k and v may be spatially subsampled.
class ConvAttention {
 public:
  ConvAttention() = default;
  ConvAttention(const AttnSpec& attn, const ConvProjSpec& proj, bool qkv_bias, Rng& rng);

  /// tokens [B x (cls + h*w) x D] -> same shape. When `weights` is non-null
  /// it receives the softmax matrix [B*heads x T_q x T_kv].
  Tensor forward(const Tensor& tokens, std::int64_t h, std::int64_t w, Mode mode,
                 Tensor* weights = nullptr);
  void collect(const std::string& prefix, ParamList& params, ParamList& buffers) const;

  AttnSpec attn;
  ConvProjSpec proj_spec;
  ConvProjection q, k, v;
  Linear proj;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(std::int64_t dim, int ratio, Rng& rng);

  Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }
  void collect(const std::string& prefix, ParamList& params) const;

  Linear fc1;
  Linear fc2;
};

/// Pre-norm residual block: x + attn(norm1(x)), then x + mlp(norm2(x)).
class ConvTransformerBlock {
 public:
  ConvTransformerBlock() = default;
  ConvTransformerBlock(const AttnSpec& attn, const ConvProjSpec& proj, int mlp_ratio, bool qkv_bias,
                       Rng& rng);

  Tensor forward(const Tensor& tokens, std::int64_t h, std::int64_t w, Mode mode);
  void collect(const std::string& prefix, ParamList& params, ParamList& buffers) const;

  LayerNorm norm1;
  ConvAttention attn;
  LayerNorm norm2;
  Mlp mlp;
};

/// Tokens [B x T x C] (row-major grid) <-> map [B x C x H x W].
Tensor tokens_to_map(const Tensor& tokens, std::int64_t h, std::int64_t w);
Tensor map_to_tokens(const Tensor& map);

CVT_END_NAMESPACE
