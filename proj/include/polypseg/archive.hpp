#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

/// On-disk layout (little endian):
///   8 bytes  magic "PSEGARCH"
///   uint32   format version
///   uint64   header length in bytes
///   header   UTF-8 JSON: {"metadata": {...}, "tensors": [{name, shape, offset, count}]}
///   payload  float32 values, tensors back to back at their recorded offsets
inline constexpr std::uint32_t kArchiveFormatVersion = 1;

struct TensorRecord {
  std::string name;
  std::vector<Index> shape;
  std::vector<float> values;
};

struct Archive {
  std::uint32_t format_version = kArchiveFormatVersion;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const;
};

/// Writes to a sibling temporary file and renames it into place, so a
/// failure never leaves a partial archive at `path`.
void write_archive(const std::filesystem::path& path, const Archive& archive);

/// Throws CheckpointError for a missing, truncated or malformed file.
Archive read_archive(const std::filesystem::path& path);

/// Writes `contents` to `path` through a temporary file and atomic rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace polypseg
