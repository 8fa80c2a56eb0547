#pragma once

#include <filesystem>
#include <memory>

#include "json.hpp"
#include "polypseg/model.hpp"

namespace polypseg {

/// Writes every parameter and buffer of `model` plus its ArchConfig into one
/// archive. `extra` lands under metadata["extra"] (train config, split
/// manifest reference, training state). The write is atomic.
void save_checkpoint(const std::filesystem::path& path, SegmentationModel<float>& model,
                     const nlohmann::json& extra = nlohmann::json::object());

struct LoadedCheckpoint {
  std::unique_ptr<SegmentationModel<float>> model;
  nlohmann::json extra;
};

/// Rebuilds the stored model. When `requested` is given, its graph must match
/// the stored ArchConfig exactly or CheckpointError is raised.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig* requested = nullptr);

/// Reads only the ArchConfig stored in a checkpoint.
ArchConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace polypseg
