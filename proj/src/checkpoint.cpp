#include "polypseg/checkpoint.hpp"

#include <cstring>

#include "polypseg/archive.hpp"
#include "polypseg/errors.hpp"

namespace polypseg {

void save_checkpoint(const std::filesystem::path& path, SegmentationModel<float>& model, const nlohmann::json& extra) {
  Archive archive;
  archive.metadata["kind"] = "polypseg-checkpoint";
  archive.metadata["arch"] = model.config();
  archive.metadata["extra"] = extra;
  for (const auto& [name, param] : model.parameters()) {
    TensorRecord t;
    t.name = name;
    t.shape = param->shape;
    t.values.assign(param->value.data(), param->value.data() + param->value.size());
    archive.tensors.push_back(std::move(t));
  }
  write_archive(path, archive);
}

namespace {

ArchConfig stored_config(const Archive& archive, const std::filesystem::path& path) {
  if (archive.metadata.value("kind", std::string()) != "polypseg-checkpoint" || !archive.metadata.contains("arch")) {
    throw CheckpointError("archive is not a model checkpoint: " + path.string());
  }
  try {
    return archive.metadata.at("arch").get<ArchConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed ArchConfig in " + path.string() + ": " + e.what());
  }
}

}  // namespace

ArchConfig read_checkpoint_config(const std::filesystem::path& path) {
  return stored_config(read_archive(path), path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig* requested) {
  const Archive archive = read_archive(path);
  const ArchConfig arch = stored_config(archive, path);
  if (requested != nullptr && !requested->same_graph(arch)) {
    throw CheckpointError("checkpoint " + path.string() + " was built with a different ArchConfig:\n  stored:    " +
                          nlohmann::json(arch).dump() + "\n  requested: " + nlohmann::json(*requested).dump());
  }
  try {
    arch.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError("invalid ArchConfig in " + path.string() + ": " + e.what());
  }
  LoadedCheckpoint out;
  out.model = std::make_unique<SegmentationModel<float>>(arch);
  for (auto& [name, param] : out.model->parameters()) {
    const TensorRecord* t = archive.find(name);
    if (t == nullptr) throw CheckpointError("checkpoint " + path.string() + " lacks tensor " + name);
    if (t->shape != param->shape) throw CheckpointError("checkpoint tensor " + name + " has the wrong shape");
    std::memcpy(param->value.data(), t->values.data(), t->values.size() * sizeof(float));
  }
  out.extra = archive.metadata.value("extra", nlohmann::json::object());
  return out;
}

}  // namespace polypseg
