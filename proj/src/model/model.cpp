#include "cvt/model.hpp"

#include <array>

CVT_BEGIN_NAMESPACE

int StageConfig::stride_kv_for(int block) const {
  return block_stride_kv.empty() ? proj.stride_kv : block_stride_kv.at(static_cast<std::size_t>(block));
}

int StageConfig::mlp_ratio_for(int block) const {
  return block_mlp_ratio.empty() ? mlp_ratio : block_mlp_ratio.at(static_cast<std::size_t>(block));
}

int ModelConfig::total_blocks() const {
  int n = 0;
  for (const auto& s : stages) n += s.num_blocks;
  return n;
}

void ModelConfig::validate() const {
  if (input_channels < 1) throw ConfigError("input_channels", "must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes", "must be >= 1");
  if (stages.empty()) throw ConfigError("stages", "at least one stage is required");
  if (dropout != 0.0) throw ConfigError("dropout", "only 0 is supported");
  if (drop_path != 0.0) throw ConfigError("drop_path", "only 0 is supported");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string at = "stages[" + std::to_string(i) + "].";
    auto wrap = [&](auto&& fn) {
      try {
        fn();
      } catch (const ConfigError& e) {
        throw ConfigError(at + e.field(), e.what());
      }
    };
    wrap([&] { cvt::validate(s.embed); });
    wrap([&] { cvt::validate(s.proj); });
    wrap([&] { cvt::validate(AttnSpec{s.embed_dim, s.num_heads, s.with_cls_token}); });
    if (s.embed.out_channels != s.embed_dim) {
      throw ConfigError(at + "embed.out_channels", "must equal embed_dim " + std::to_string(s.embed_dim));
    }
    if (s.num_blocks < 1) throw ConfigError(at + "num_blocks", "must be >= 1");
    if (s.mlp_ratio < 1) throw ConfigError(at + "mlp_ratio", "must be >= 1");
    if (s.with_cls_token != (i + 1 == stages.size())) {
      throw ConfigError(at + "with_cls_token", "the cls token belongs to the final stage only");
    }
    if (!s.block_stride_kv.empty()) {
      if (static_cast<int>(s.block_stride_kv.size()) != s.num_blocks) {
        throw ConfigError(at + "block_stride_kv", "length must equal num_blocks");
      }
      for (int v : s.block_stride_kv) {
        if (v != 1 && v != 2) throw ConfigError(at + "block_stride_kv", "entries must be 1 or 2");
      }
    }
    if (!s.block_mlp_ratio.empty()) {
      if (static_cast<int>(s.block_mlp_ratio.size()) != s.num_blocks) {
        throw ConfigError(at + "block_mlp_ratio", "length must equal num_blocks");
      }
      for (int v : s.block_mlp_ratio) {
        if (v < 1) throw ConfigError(at + "block_mlp_ratio", "entries must be >= 1");
      }
    }
  }
}

namespace presets {
namespace {

StageConfig stage(ConvEmbedSpec embed, int blocks, int heads, bool cls) {
  StageConfig s;
  s.embed = embed;
  s.num_blocks = blocks;
  s.num_heads = heads;
  s.embed_dim = embed.out_channels;
  s.mlp_ratio = 4;
  s.proj = ConvProjSpec{3, 1, 2, 1};
  s.with_cls_token = cls;
  return s;
}

ModelConfig three_stage(std::string name, std::array<int, 3> dims, std::array<int, 3> blocks,
                        std::array<int, 3> heads, int num_classes) {
  ModelConfig c;
  c.name = std::move(name);
  c.num_classes = num_classes;
  c.stages = {stage({7, 4, 3, dims[0]}, blocks[0], heads[0], false),
              stage({3, 2, 1, dims[1]}, blocks[1], heads[1], false),
              stage({3, 2, 1, dims[2]}, blocks[2], heads[2], true)};
  return c;
}

}  // namespace

ModelConfig cvt13() { return three_stage("cvt13", {64, 192, 384}, {1, 2, 10}, {1, 3, 6}, 1000); }
ModelConfig cvt21() { return three_stage("cvt21", {64, 192, 384}, {1, 4, 16}, {1, 3, 6}, 1000); }
ModelConfig cvtw24() { return three_stage("cvtw24", {192, 768, 1024}, {2, 2, 20}, {3, 12, 16}, 1000); }
ModelConfig tiny() { return three_stage("tiny", {16, 32, 64}, {1, 1, 2}, {1, 2, 4}, 4); }

std::vector<std::string> names() { return {"cvt13", "cvt21", "cvtw24", "tiny"}; }

ModelConfig by_name(const std::string& name) {
  if (name == "cvt13") return cvt13();
  if (name == "cvt21") return cvt21();
  if (name == "cvtw24") return cvtw24();
  if (name == "tiny") return tiny();
  throw ConfigError("preset", "unknown preset '" + name + "'");
}

}  // namespace presets

// ---------------------------------------------------------------------------

CvtModel::CvtModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  std::int64_t in_channels = config_.input_channels;
  for (const auto& sc : config_.stages) {
    CvtStage st;
    st.embed = ConvTokenEmbedding(sc.embed, in_channels, rng);
    if (sc.with_cls_token) st.cls_token = trunc_normal_tensor({1, 1, sc.embed_dim}, 0.02, rng);
    for (int b = 0; b < sc.num_blocks; ++b) {
      ConvProjSpec proj = sc.proj;
      proj.stride_kv = sc.stride_kv_for(b);
      st.blocks.emplace_back(AttnSpec{sc.embed_dim, sc.num_heads, sc.with_cls_token}, proj,
                             sc.mlp_ratio_for(b), config_.qkv_bias, rng);
    }
    stages_.push_back(std::move(st));
    in_channels = sc.embed_dim;
  }
  head_norm_ = LayerNorm(in_channels);
  head_ = Linear(in_channels, config_.num_classes, true, rng);
}

Tensor CvtModel::forward(const Tensor& images, std::vector<StageTrace>* trace) {
  if (images.rank() != 4 || images.dim(1) != config_.input_channels) {
    throw DimensionError("forward: expected [B x " + std::to_string(config_.input_channels) +
                         " x H x W] images, got " + shape_str(images.shape()));
  }
  if (trace) trace->clear();
  const std::int64_t B = images.dim(0);
  Tensor x = images;
  Tensor tokens;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    auto& st = stages_[i];
    TokenMap tm = st.embed.forward(x);
    tokens = tm.tokens;
    if (st.cls_token.defined()) {
      std::vector<Tensor> parts(static_cast<std::size_t>(B), st.cls_token);
      tokens = concat({concat(parts, 0), tokens}, 1);
    }
    for (auto& block : st.blocks) tokens = block.forward(tokens, tm.height, tm.width, mode_);
    if (trace) trace->push_back({tm.height, tm.width, tokens.dim(2), tokens.dim(1)});
    if (i + 1 < stages_.size()) x = tokens_to_map(tokens, tm.height, tm.width);
  }
  const std::int64_t D = tokens.dim(2);
  Tensor pooled = slice(tokens, 1, 0, 1);
  return head_.forward(head_norm_.forward(reshape(pooled, {B, D})));
}

void CvtModel::collect(ParamList& params, ParamList& buffers) const {
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const auto& st = stages_[i];
    const std::string p = "stage" + std::to_string(i + 1) + ".";
    st.embed.collect(p + "embed.", params);
    if (st.cls_token.defined()) params.push_back({p + "cls_token", st.cls_token, false});
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      st.blocks[b].collect(p + "block" + std::to_string(b) + ".", params, buffers);
    }
  }
  head_norm_.collect("head.norm.", params);
  head_.collect("head.linear.", params);
}

ParamList CvtModel::parameters() const {
  ParamList params, buffers;
  collect(params, buffers);
  return params;
}

ParamList CvtModel::buffers() const {
  ParamList params, buffers;
  collect(params, buffers);
  return buffers;
}

std::int64_t CvtModel::num_parameters() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

void CvtModel::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

CvtModel build_model(const ModelConfig& config, std::uint64_t seed) { return CvtModel(config, seed); }

CVT_END_NAMESPACE
