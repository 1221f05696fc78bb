#include "cvt/config_json.hpp"

#include <set>

#include <json.hpp>

CVT_BEGIN_NAMESPACE

using nlohmann::json;

namespace {

const std::set<std::string> kModelKeys = {"preset",  "name",    "input_channels", "num_classes",
                                          "qkv_bias", "dropout", "drop_path",      "stages"};
const std::set<std::string> kStageKeys = {"kernel",      "stride",          "padding",        "dim",
                                          "heads",       "blocks",          "mlp_ratio",      "proj_kernel",
                                          "proj_padding", "stride_kv",      "with_cls_token", "block_stride_kv",
                                          "block_mlp_ratio"};

json stage_to_json(const StageConfig& s) {
  json j = {{"kernel", s.embed.kernel},        {"stride", s.embed.stride},
            {"padding", s.embed.padding},      {"dim", s.embed_dim},
            {"heads", s.num_heads},            {"blocks", s.num_blocks},
            {"mlp_ratio", s.mlp_ratio},        {"proj_kernel", s.proj.kernel},
            {"proj_padding", s.proj.padding},  {"stride_kv", s.proj.stride_kv},
            {"with_cls_token", s.with_cls_token}};
  if (!s.block_stride_kv.empty()) j["block_stride_kv"] = s.block_stride_kv;
  if (!s.block_mlp_ratio.empty()) j["block_mlp_ratio"] = s.block_mlp_ratio;
  return j;
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where, "expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + "." + key, "unknown key");
  }
}

template <typename T>
T get_as(const json& j, const std::string& field) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(field, "wrong type: " + j.dump());
  }
}

// Assigns `key` into `target` when present. With a preset base the value
// must match what the preset already holds.
template <typename T>
void take(const json& j, const char* key, T& target, const std::string& where, bool preset) {
  if (!j.contains(key)) return;
  T value = get_as<T>(j.at(key), where + "." + key);
  if (preset && !(value == target)) {
    throw ConfigError(where + "." + key, "conflicts with the preset value " + json(target).dump());
  }
  target = value;
}

StageConfig parse_stage(const json& j, const std::string& where, const StageConfig* base, bool is_last) {
  reject_unknown(j, kStageKeys, where);
  StageConfig s;
  const bool preset = base != nullptr;
  if (base) {
    s = *base;
  } else {
    for (const char* key : {"kernel", "stride", "padding", "dim", "heads", "blocks"}) {
      if (!j.contains(key)) throw ConfigError(where + "." + key, "required");
    }
    s.with_cls_token = is_last;
  }
  take(j, "kernel", s.embed.kernel, where, preset);
  take(j, "stride", s.embed.stride, where, preset);
  take(j, "padding", s.embed.padding, where, preset);
  take(j, "dim", s.embed_dim, where, preset);
  s.embed.out_channels = s.embed_dim;
  take(j, "heads", s.num_heads, where, preset);
  take(j, "blocks", s.num_blocks, where, preset);
  take(j, "mlp_ratio", s.mlp_ratio, where, preset);
  take(j, "proj_kernel", s.proj.kernel, where, preset);
  take(j, "proj_padding", s.proj.padding, where, preset);
  take(j, "stride_kv", s.proj.stride_kv, where, preset);
  take(j, "with_cls_token", s.with_cls_token, where, preset);
  take(j, "block_stride_kv", s.block_stride_kv, where, preset);
  take(j, "block_mlp_ratio", s.block_mlp_ratio, where, preset);
  return s;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages) stages.push_back(stage_to_json(s));
  json j = {{"name", c.name},         {"input_channels", c.input_channels},
            {"num_classes", c.num_classes}, {"qkv_bias", c.qkv_bias},
            {"dropout", c.dropout},   {"drop_path", c.drop_path},
            {"stages", stages}};
  return j.dump();
}

ModelConfig model_config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("model", std::string("invalid JSON: ") + e.what());
  }
  reject_unknown(j, kModelKeys, "model");

  ModelConfig c;
  const bool preset = j.contains("preset");
  if (preset) {
    c = presets::by_name(get_as<std::string>(j.at("preset"), "model.preset"));
  } else if (!j.contains("stages")) {
    throw ConfigError("model.stages", "required unless a preset is named");
  }
  take(j, "name", c.name, "model", preset);
  take(j, "input_channels", c.input_channels, "model", preset);
  take(j, "num_classes", c.num_classes, "model", preset);
  take(j, "qkv_bias", c.qkv_bias, "model", preset);
  take(j, "dropout", c.dropout, "model", preset);
  take(j, "drop_path", c.drop_path, "model", preset);

  if (j.contains("stages")) {
    const json& arr = j.at("stages");
    if (!arr.is_array() || arr.empty()) throw ConfigError("model.stages", "expected a non-empty array");
    if (preset && arr.size() != c.stages.size()) {
      throw ConfigError("model.stages", "preset has " + std::to_string(c.stages.size()) + " stages");
    }
    std::vector<StageConfig> stages;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string where = "model.stages[" + std::to_string(i) + "]";
      stages.push_back(parse_stage(arr[i], where, preset ? &c.stages[i] : nullptr, i + 1 == arr.size()));
    }
    c.stages = std::move(stages);
  }
  c.validate();
  return c;
}

CVT_END_NAMESPACE
