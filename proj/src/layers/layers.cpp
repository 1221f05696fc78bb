#include "cvt/layers.hpp"

#include <cmath>

CVT_BEGIN_NAMESPACE

Real Rng::trunc_normal(double std) {
  for (;;) {
    double z = normal();
    if (z >= -2.0 && z <= 2.0) return static_cast<Real>(z * std);
  }
}

double Rng::normal() {
  std::normal_distribution<double> d(0.0, 1.0);
  return d(engine_);
}

double Rng::uniform() {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  return d(engine_);
}

Tensor trunc_normal_tensor(Shape shape, double std, Rng& rng) {
  std::vector<Real> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.trunc_normal(std);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

void validate(const ConvEmbedSpec& spec) {
  if (spec.kernel < 1) throw ConfigError("embed.kernel", "must be >= 1");
  if (spec.stride < 1 || spec.stride > spec.kernel) {
    throw ConfigError("embed.stride", "must lie in [1, kernel]");
  }
  if (spec.padding < 0) throw ConfigError("embed.padding", "must be >= 0");
  if (spec.out_channels < 1) throw ConfigError("embed.out_channels", "must be >= 1");
}

void validate(const ConvProjSpec& spec) {
  if (spec.kernel < 1 || spec.kernel % 2 == 0) throw ConfigError("proj.kernel", "must be odd");
  if (spec.stride_q != 1) throw ConfigError("proj.stride_q", "must be 1");
  if (spec.stride_kv != 1 && spec.stride_kv != 2) throw ConfigError("proj.stride_kv", "must be 1 or 2");
  if (spec.padding < 0) throw ConfigError("proj.padding", "must be >= 0");
}

void validate(const AttnSpec& spec) {
  if (spec.embed_dim < 1) throw ConfigError("embed_dim", "must be >= 1");
  if (spec.num_heads < 1 || spec.embed_dim % spec.num_heads != 0) {
    throw ConfigError("num_heads", "must divide embed_dim " + std::to_string(spec.embed_dim));
  }
}

Tensor tokens_to_map(const Tensor& tokens, std::int64_t h, std::int64_t w) {
  const std::int64_t B = tokens.dim(0), T = tokens.dim(1), C = tokens.dim(2);
  if (T != h * w) {
    throw ContractError("token count " + std::to_string(T) + " does not match grid " + std::to_string(h) +
                        "x" + std::to_string(w));
  }
  return permute(reshape(tokens, {B, h, w, C}), {0, 3, 1, 2});
}

Tensor map_to_tokens(const Tensor& map) {
  const std::int64_t B = map.dim(0), C = map.dim(1), H = map.dim(2), W = map.dim(3);
  return reshape(permute(map, {0, 2, 3, 1}), {B, H * W, C});
}

// ---------------------------------------------------------------------------

LayerNorm::LayerNorm(std::int64_t dim, Real eps_)
    : weight(Tensor::full({dim}, Real(1), true)), bias(Tensor::zeros({dim}, true)), eps(eps_) {}

void LayerNorm::collect(const std::string& prefix, ParamList& params) const {
  params.push_back({prefix + "weight", weight, false});
  params.push_back({prefix + "bias", bias, false});
}

Linear::Linear(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng)
    : weight(trunc_normal_tensor({in, out}, 0.02, rng)) {
  if (with_bias) bias = Tensor::zeros({out}, true);
}

void Linear::collect(const std::string& prefix, ParamList& params) const {
  params.push_back({prefix + "weight", weight, true});
  if (bias.defined()) params.push_back({prefix + "bias", bias, true});
}

BatchNorm2d::BatchNorm2d(std::int64_t channels, Real momentum_, Real eps_)
    : weight(Tensor::full({channels}, Real(1), true)),
      bias(Tensor::zeros({channels}, true)),
      buffers{Tensor::zeros({channels}), Tensor::full({channels}, Real(1))},
      momentum(momentum_),
      eps(eps_) {}

void BatchNorm2d::collect(const std::string& prefix, ParamList& params, ParamList& buffer_list) const {
  params.push_back({prefix + "weight", weight, false});
  params.push_back({prefix + "bias", bias, false});
  buffer_list.push_back({prefix + "running_mean", buffers.running_mean, false});
  buffer_list.push_back({prefix + "running_var", buffers.running_var, false});
}

// ---------------------------------------------------------------------------

ConvTokenEmbedding::ConvTokenEmbedding(const ConvEmbedSpec& spec_, std::int64_t in_channels, Rng& rng)
    : spec(spec_),
      conv_weight(trunc_normal_tensor({spec_.out_channels, in_channels, spec_.kernel, spec_.kernel}, 0.02,
                                      rng)),
      conv_bias(Tensor::zeros({spec_.out_channels}, true)),
      norm(spec_.out_channels) {
  validate(spec);
}

TokenMap ConvTokenEmbedding::forward(const Tensor& x) const {
  Tensor map = conv2d(x, conv_weight, conv_bias, {spec.stride, spec.padding, 1});
  const std::int64_t h = map.dim(2), w = map.dim(3);
  return {norm.forward(map_to_tokens(map)), h, w};
}

void ConvTokenEmbedding::collect(const std::string& prefix, ParamList& params) const {
  params.push_back({prefix + "conv.weight", conv_weight, true});
  params.push_back({prefix + "conv.bias", conv_bias, true});
  norm.collect(prefix + "norm.", params);
}

// ---------------------------------------------------------------------------

ConvProjection::ConvProjection(std::int64_t channels, int kernel_, int stride_, int padding_,
                               bool pointwise_bias, Rng& rng)
    : kernel(kernel_),
      stride(stride_),
      padding(padding_),
      dw_weight(trunc_normal_tensor({channels, 1, kernel_, kernel_}, 0.02, rng)),
      bn(channels),
      pointwise(channels, channels, pointwise_bias, rng) {}

std::int64_t ConvProjection::output_extent(std::int64_t in) const {
  return conv_output_extent(in, kernel, stride, padding, "projection");
}

Tensor ConvProjection::forward(const Tensor& spatial, std::int64_t h, std::int64_t w, const Tensor& cls,
                               Mode mode) {
  if (spatial.rank() != 3 || spatial.dim(1) != h * w) {
    throw ContractError("conv projection: " + shape_str(spatial.shape()) + " is not a " +
                        std::to_string(h) + "x" + std::to_string(w) + " token grid");
  }
  const std::int64_t C = spatial.dim(2);
  Tensor map = tokens_to_map(spatial, h, w);
  map = conv2d(map, dw_weight, {}, {stride, padding, static_cast<int>(C)});
  map = bn.forward(map, mode);
  Tensor tokens = map_to_tokens(map);
  if (cls.defined()) tokens = concat({cls, tokens}, 1);
  return pointwise.forward(tokens);
}

void ConvProjection::collect(const std::string& prefix, ParamList& params, ParamList& buffers) const {
  params.push_back({prefix + "dw.weight", dw_weight, true});
  bn.collect(prefix + "bn.", params, buffers);
  pointwise.collect(prefix + "pw.", params);
}

// ---------------------------------------------------------------------------

ConvAttention::ConvAttention(const AttnSpec& attn_, const ConvProjSpec& proj_, bool qkv_bias, Rng& rng)
    : attn(attn_), proj_spec(proj_) {
  validate(attn);
  validate(proj_spec);
  const std::int64_t D = attn.embed_dim;
  q = ConvProjection(D, proj_spec.kernel, proj_spec.stride_q, proj_spec.padding, qkv_bias, rng);
  k = ConvProjection(D, proj_spec.kernel, proj_spec.stride_kv, proj_spec.padding, qkv_bias, rng);
  v = ConvProjection(D, proj_spec.kernel, proj_spec.stride_kv, proj_spec.padding, qkv_bias, rng);
  proj = Linear(D, D, true, rng);
}

Tensor ConvAttention::forward(const Tensor& tokens, std::int64_t h, std::int64_t w, Mode mode,
                              Tensor* weights) {
  const std::int64_t B = tokens.dim(0), D = attn.embed_dim;
  if (tokens.dim(2) != D) {
    throw DimensionError("attention: token dim " + std::to_string(tokens.dim(2)) + " != embed_dim " +
                         std::to_string(D));
  }
  const std::int64_t n_cls = attn.with_cls_token ? 1 : 0;
  Tensor cls, spatial = tokens;
  if (n_cls) {
    cls = slice(tokens, 1, 0, 1);
    spatial = slice(tokens, 1, 1, tokens.dim(1) - 1);
  }
  Tensor qt = q.forward(spatial, h, w, cls, mode);
  Tensor kt = k.forward(spatial, h, w, cls, mode);
  Tensor vt = v.forward(spatial, h, w, cls, mode);

  const std::int64_t heads = attn.num_heads, hd = attn.head_dim();
  const std::int64_t Tq = qt.dim(1), Tkv = kt.dim(1);
  auto split = [&](const Tensor& t, std::int64_t T) {
    return reshape(permute(reshape(t, {B, T, heads, hd}), {0, 2, 1, 3}), {B * heads, T, hd});
  };
  Tensor qh = split(qt, Tq), kh = split(kt, Tkv), vh = split(vt, Tkv);
  Tensor scores = scale(bmm(qh, kh, true), Real(1) / std::sqrt(static_cast<Real>(hd)));
  Tensor attn_w = softmax(scores, -1);
  if (weights) *weights = attn_w;
  Tensor ctx = bmm(attn_w, vh);
  ctx = reshape(permute(reshape(ctx, {B, heads, Tq, hd}), {0, 2, 1, 3}), {B, Tq, D});
  return proj.forward(ctx);
}

void ConvAttention::collect(const std::string& prefix, ParamList& params, ParamList& buffers) const {
  q.collect(prefix + "q.", params, buffers);
  k.collect(prefix + "k.", params, buffers);
  v.collect(prefix + "v.", params, buffers);
  proj.collect(prefix + "proj.", params);
}

// ---------------------------------------------------------------------------

Mlp::Mlp(std::int64_t dim, int ratio, Rng& rng)
    : fc1(dim, dim * ratio, true, rng), fc2(dim * ratio, dim, true, rng) {}

void Mlp::collect(const std::string& prefix, ParamList& params) const {
  fc1.collect(prefix + "fc1.", params);
  fc2.collect(prefix + "fc2.", params);
}

ConvTransformerBlock::ConvTransformerBlock(const AttnSpec& attn_spec, const ConvProjSpec& proj, int mlp_ratio,
                                           bool qkv_bias, Rng& rng)
    : norm1(attn_spec.embed_dim),
      attn(attn_spec, proj, qkv_bias, rng),
      norm2(attn_spec.embed_dim),
      mlp(attn_spec.embed_dim, mlp_ratio, rng) {
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio", "must be >= 1");
}

Tensor ConvTransformerBlock::forward(const Tensor& tokens, std::int64_t h, std::int64_t w, Mode mode) {
  Tensor x = add(tokens, attn.forward(norm1.forward(tokens), h, w, mode));
  return add(x, mlp.forward(norm2.forward(x)));
}

void ConvTransformerBlock::collect(const std::string& prefix, ParamList& params, ParamList& buffers) const {
  norm1.collect(prefix + "norm1.", params);
  attn.collect(prefix + "attn.", params, buffers);
  norm2.collect(prefix + "norm2.", params);
  mlp.collect(prefix + "mlp.", params);
}

CVT_END_NAMESPACE
