#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cvt/model.hpp"

CVT_BEGIN_NAMESPACE

// Static cost model. One "flop" is one multiply-accumulate. Counted:
// embedding convs, depthwise convs, pointwise projections, both attention
// products, output projection, MLP, head. Norms, activations, softmax and
// bias adds are free.

struct LayerRecord {
  std::string path;  // matches the parameter-name prefix in CvtModel
  std::string kind;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  Shape shape;  // empty when the report carries no geometry
};

struct CostReport {
  std::vector<LayerRecord> records;
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;
  std::optional<std::pair<std::int64_t, std::int64_t>> input_hw;
};

/// Parameters only; independent of input size.
CostReport count_params(const ModelConfig& config);
/// Parameters, MAC counts and shapes at the given input size. Throws
/// GeometryError when any stage collapses.
CostReport count_flops(const ModelConfig& config, std::int64_t height, std::int64_t width);

struct TraceEntry {
  std::string path;
  Shape shape;
};
std::vector<TraceEntry> shape_trace(const ModelConfig& config, std::int64_t height, std::int64_t width);

std::string human_params(std::int64_t params);  // "19.98M"
std::string human_flops(std::int64_t flops);    // "4.53G"
std::string dims_str(const Shape& shape);       // "56x56x64"

/// Aligned table with a totals line.
std::string format_table(const CostReport& report);
/// One tab-separated record per line: path, kind, params, flops, shape. The
/// final line is the totals record.
std::string format_records(const CostReport& report);

// ---------------------------------------------------------------------------
// Search space: per-block kv stride in {1, 2} and MLP ratio in {2, 4}.

struct SearchCandidate {
  std::string base;
  std::string label;  // "all-min", "all-max" or "sample-<i>"
  std::vector<int> stride_kv;
  std::vector<int> mlp_ratio;
};

/// Base config with the candidate's per-block choices applied. Throws
/// ConfigError when the vectors do not match the block count.
ModelConfig apply_candidate(const ModelConfig& base, const SearchCandidate& candidate);

struct SearchEntry {
  SearchCandidate candidate;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct SearchSpaceReport {
  std::vector<SearchEntry> entries;  // all-min, all-max, then samples
  std::int64_t min_params = 0, max_params = 0;
  std::int64_t min_flops = 0, max_flops = 0;
};

/// all-min = stride 2 + ratio 2 everywhere; all-max = stride 2 + ratio 4
/// everywhere (the unmodified base).
SearchSpaceReport enumerate_search_space(const ModelConfig& base, int samples, std::uint64_t seed,
                                         std::int64_t input_hw = 224);

CVT_END_NAMESPACE
