#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "polypseg/data.hpp"
#include "polypseg/metrics.hpp"
#include "polypseg/model.hpp"
#include "polypseg/training.hpp"

namespace polypseg {

/// Everything a command needs. The single `seed` feeds weight init, the
/// split, batch order and augmentation; `threshold` is shared by validation
/// and prediction. Call `resolve()` after editing fields by hand.
struct RunConfig {
  ArchConfig arch;
  TrainConfig train;
  AugmentationConfig augment;
  std::string data_root = "data";
  double train_fraction = 0.8;
  std::string output_dir = "runs";
  Aggregation aggregation = Aggregation::PerImageMean;
  double threshold = 0.5;
  std::uint64_t seed = 0;

  /// Copies the shared fields into the sub-configs.
  void resolve();
  /// Checks every sub-config invariant.
  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Keys accepted in config files and by `--set`, in snapshot order.
std::vector<std::string> config_keys();

/// Sets one dotted key from its text form. Unknown keys and unparsable
/// values raise ConfigError.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& key);

/// `key = value` lines; `#` starts a comment line. Applied on top of `config`.
void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin = "<text>");
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// Applies a `key=value` override.
void apply_override(RunConfig& config, const std::string& assignment);

/// Full snapshot, one line per key, readable by `apply_config_text`.
std::string serialize_config(const RunConfig& config);

}  // namespace polypseg
