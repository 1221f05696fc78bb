#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cvt/model.hpp"

CVT_BEGIN_NAMESPACE

// Layout (all integers little-endian):
//   "CVTK" | u32 version | u64 n | n bytes config JSON
//   | u64 record count | records... | u64 FNV-1a of everything before it
// record: u32 name length | name | u32 rank | rank x u64 dims | f32 payload
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

/// `metadata_json` must be a JSON value; it is stored next to the config.
std::vector<std::uint8_t> serialize_checkpoint(const CvtModel& model, const std::string& metadata_json = "null");
void save_checkpoint(const CvtModel& model, const std::filesystem::path& path,
                     const std::string& metadata_json = "null");

struct LoadedCheckpoint {
  CvtModel model;
  std::string metadata_json;
  std::uint64_t checksum = 0;
};

/// Errors: CheckpointTruncatedError, CheckpointFormatError,
/// CheckpointVersionError, CheckpointChecksumError, and
/// CheckpointConfigMismatch when `expected` differs from the stored config.
LoadedCheckpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes,
                                        const ModelConfig* expected = nullptr);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

CVT_END_NAMESPACE
