#pragma once

#include <string>
#include <string_view>

#include "cvt/model.hpp"

CVT_BEGIN_NAMESPACE

/// Fully explicit JSON form of a model config (no preset reference).
std::string model_config_to_json(const ModelConfig& config);

/// Parses a model object. Accepts either a full stage list or
/// {"preset": name, ...}; explicit fields alongside a preset must agree with
/// it. Unknown keys are rejected with ConfigError.
ModelConfig model_config_from_json(std::string_view text);

CVT_END_NAMESPACE
