#include "cvt/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <random>
#include <sstream>

#include "cvt/ops.hpp"

CVT_BEGIN_NAMESPACE

namespace {

class Walker {
 public:
  Walker(const ModelConfig& c, bool geometry) : config_(c), geometry_(geometry) {}

  CostReport run(std::int64_t h, std::int64_t w) {
    config_.validate();
    std::int64_t cin = config_.input_channels;
    for (std::size_t i = 0; i < config_.stages.size(); ++i) {
      const auto& s = config_.stages[i];
      const std::string sp = "stage" + std::to_string(i + 1) + ".";
      const std::int64_t D = s.embed_dim, k = s.embed.kernel;
      if (geometry_) {
        h = conv_output_extent(h, s.embed.kernel, s.embed.stride, s.embed.padding, "height");
        w = conv_output_extent(w, s.embed.kernel, s.embed.stride, s.embed.padding, "width");
      }
      const std::int64_t T = h * w, cls = s.with_cls_token ? 1 : 0;
      emit(sp + "embed.conv", "conv", k * k * cin * D + D, k * k * cin * D * T, {h, w, D});
      emit(sp + "embed.norm", "layernorm", 2 * D, 0, {T, D});
      if (cls) emit(sp + "cls_token", "cls_token", D, 0, {1, D});
      for (int b = 0; b < s.num_blocks; ++b) block(sp + "block" + std::to_string(b) + ".", s, b, h, w);
      emit(sp + "output", "stage_output", 0, 0, {h, w, D});
      cin = D;
    }
    const std::int64_t K = config_.num_classes;
    emit("head.norm", "layernorm", 2 * cin, 0, {1, cin});
    emit("head.linear", "linear", cin * K + K, cin * K, {K});
    if (geometry_) report_.input_hw = {in_h_, in_w_};
    return std::move(report_);
  }

  std::int64_t in_h_ = 0, in_w_ = 0;

 private:
  void emit(std::string path, const char* kind, std::int64_t params, std::int64_t flops, Shape shape) {
    LayerRecord r{std::move(path), kind, params, geometry_ ? flops : 0, geometry_ ? std::move(shape) : Shape{}};
    report_.total_params += r.params;
    report_.total_flops += r.flops;
    report_.records.push_back(std::move(r));
  }

  void block(const std::string& bp, const StageConfig& s, int b, std::int64_t h, std::int64_t w) {
    const std::int64_t D = s.embed_dim, heads = s.num_heads, cls = s.with_cls_token ? 1 : 0;
    const std::int64_t pk = s.proj.kernel, R = s.mlp_ratio_for(b);
    const std::int64_t pw_bias = config_.qkv_bias ? D : 0;
    const std::int64_t Tq = h * w + cls;
    emit(bp + "norm1", "layernorm", 2 * D, 0, {Tq, D});

    std::int64_t Tkv = 0;
    for (const char* which : {"q", "k", "v"}) {
      const int stride = which[0] == 'q' ? s.proj.stride_q : s.stride_kv_for(b);
      std::int64_t ph = h, pw = w;
      if (geometry_) {
        ph = conv_output_extent(h, static_cast<int>(pk), stride, s.proj.padding, "height");
        pw = conv_output_extent(w, static_cast<int>(pk), stride, s.proj.padding, "width");
      }
      const std::string p = bp + "attn." + which + ".";
      const std::int64_t T = ph * pw;
      emit(p + "dw", "dwconv", pk * pk * D, pk * pk * D * T, {ph, pw, D});
      emit(p + "bn", "batchnorm", 2 * D, 0, {ph, pw, D});
      emit(p + "pw", "linear", D * D + pw_bias, D * D * (T + cls), {T + cls, D});
      if (which[0] == 'k') Tkv = T + cls;
    }
    emit(bp + "attn.scores", "attention", 0, Tq * Tkv * D, {heads, Tq, Tkv});
    emit(bp + "attn.context", "attention", 0, Tq * Tkv * D, {Tq, D});
    emit(bp + "attn.proj", "linear", D * D + D, D * D * Tq, {Tq, D});
    emit(bp + "norm2", "layernorm", 2 * D, 0, {Tq, D});
    emit(bp + "mlp.fc1", "linear", D * R * D + R * D, Tq * D * R * D, {Tq, R * D});
    emit(bp + "mlp.fc2", "linear", R * D * D + D, Tq * R * D * D, {Tq, D});
  }

  const ModelConfig& config_;
  bool geometry_;
  CostReport report_;
};

}  // namespace

CostReport count_params(const ModelConfig& config) { return Walker(config, false).run(0, 0); }

CostReport count_flops(const ModelConfig& config, std::int64_t height, std::int64_t width) {
  Walker walker(config, true);
  walker.in_h_ = height;
  walker.in_w_ = width;
  return walker.run(height, width);
}

std::vector<TraceEntry> shape_trace(const ModelConfig& config, std::int64_t height, std::int64_t width) {
  std::vector<TraceEntry> trace;
  for (auto& r : count_flops(config, height, width).records) trace.push_back({r.path, r.shape});
  return trace;
}

std::string human_params(std::int64_t params) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(params) / 1e6);
  return buf;
}

std::string human_flops(std::int64_t flops) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fG", static_cast<double>(flops) / 1e9);
  return buf;
}

std::string dims_str(const Shape& shape) {
  if (shape.empty()) return "-";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

namespace {

std::string input_str(const CostReport& r) {
  return r.input_hw ? std::to_string(r.input_hw->first) + "x" + std::to_string(r.input_hw->second) : "-";
}

}  // namespace

std::string format_table(const CostReport& report) {
  std::size_t width = 5;
  for (const auto& r : report.records) width = std::max(width, r.path.size());
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-*s  %-12s %12s %14s  %s\n", static_cast<int>(width), "layer", "kind",
                "params", "flops", "output");
  os << line;
  for (const auto& r : report.records) {
    std::snprintf(line, sizeof line, "%-*s  %-12s %12lld %14lld  %s\n", static_cast<int>(width), r.path.c_str(),
                  r.kind.c_str(), static_cast<long long>(r.params), static_cast<long long>(r.flops),
                  dims_str(r.shape).c_str());
    os << line;
  }
  os << "total: params " << report.total_params << " (" << human_params(report.total_params) << ")  flops "
     << report.total_flops << " (" << human_flops(report.total_flops) << ")  input " << input_str(report) << '\n';
  return os.str();
}

std::string format_records(const CostReport& report) {
  std::ostringstream os;
  for (const auto& r : report.records) {
    os << r.path << '\t' << r.kind << '\t' << r.params << '\t' << r.flops << '\t' << dims_str(r.shape) << '\n';
  }
  os << "total\t" << human_params(report.total_params) << '/' << human_flops(report.total_flops) << '\t'
     << report.total_params << '\t' << report.total_flops << '\t' << input_str(report) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

ModelConfig apply_candidate(const ModelConfig& base, const SearchCandidate& c) {
  const auto total = static_cast<std::size_t>(base.total_blocks());
  if (c.stride_kv.size() != total) throw ConfigError("candidate.stride_kv", "length must equal block count");
  if (c.mlp_ratio.size() != total) throw ConfigError("candidate.mlp_ratio", "length must equal block count");
  ModelConfig out = base;
  std::size_t at = 0;
  for (auto& s : out.stages) {
    const auto n = static_cast<std::size_t>(s.num_blocks);
    s.block_stride_kv.assign(c.stride_kv.begin() + at, c.stride_kv.begin() + at + n);
    s.block_mlp_ratio.assign(c.mlp_ratio.begin() + at, c.mlp_ratio.begin() + at + n);
    at += n;
  }
  for (int r : c.mlp_ratio) {
    if (r != 2 && r != 4) throw ConfigError("candidate.mlp_ratio", "entries must be 2 or 4");
  }
  out.validate();
  return out;
}

SearchSpaceReport enumerate_search_space(const ModelConfig& base, int samples, std::uint64_t seed,
                                         std::int64_t input_hw) {
  if (samples < 1) throw ConfigError("samples", "must be >= 1");
  const auto n = static_cast<std::size_t>(base.total_blocks());
  std::vector<SearchCandidate> candidates;
  candidates.push_back({base.name, "all-min", std::vector<int>(n, 2), std::vector<int>(n, 2)});
  candidates.push_back({base.name, "all-max", std::vector<int>(n, 2), std::vector<int>(n, 4)});
  std::mt19937_64 rng(seed);
  for (int i = 0; i < samples; ++i) {
    SearchCandidate c{base.name, "sample-" + std::to_string(i), {}, {}};
    for (std::size_t b = 0; b < n; ++b) {
      c.stride_kv.push_back((rng() >> 63) ? 2 : 1);
      c.mlp_ratio.push_back((rng() >> 63) ? 4 : 2);
    }
    candidates.push_back(std::move(c));
  }

  SearchSpaceReport report;
  for (auto& c : candidates) {
    auto cost = count_flops(apply_candidate(base, c), input_hw, input_hw);
    report.entries.push_back({std::move(c), cost.total_params, cost.total_flops});
  }
  report.min_params = report.max_params = report.entries[0].params;
  report.min_flops = report.max_flops = report.entries[0].flops;
  for (const auto& e : report.entries) {
    report.min_params = std::min(report.min_params, e.params);
    report.max_params = std::max(report.max_params, e.params);
    report.min_flops = std::min(report.min_flops, e.flops);
    report.max_flops = std::max(report.max_flops, e.flops);
  }
  return report;
}

CVT_END_NAMESPACE
