#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>

#include "polypseg/config.hpp"

namespace polypseg {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitData = 2, kExitNumerical = 3 };

/// Runs `body`, mapping library errors to exit codes and printing the
/// diagnostic to `err`.
int run_guarded(const std::function<void()>& body, std::ostream& err);

/// Trains into a fresh `<output>/run-<timestamp>` directory and returns it.
std::filesystem::path cmd_train(const RunConfig& config, std::ostream& out);

struct PredictOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path input_dir;
  std::filesystem::path output_dir;
  double threshold = 0.5;
  /// When set, the checkpoint's ArchConfig must match it.
  std::optional<ArchConfig> expected_arch;
};

/// One 0/255 PNG per input image, same stem and size as the input.
void cmd_predict(const PredictOptions& options, std::ostream& out);

struct EvaluateOptions {
  std::filesystem::path predictions;
  std::filesystem::path ground_truth;
  /// Alternative to `predictions`: score a checkpoint on `<data>/images`.
  std::filesystem::path checkpoint;
  std::filesystem::path data_root;
  std::filesystem::path output_dir;
  double threshold = 0.5;
  Aggregation aggregation = Aggregation::PerImageMean;
};

/// Writes metrics.json and metrics.txt, prints the table and, last, the
/// aggregate row in column order.
MetricsReport cmd_evaluate(const EvaluateOptions& options, std::ostream& out);

/// lr/loss plots (SVG) with their CSV data and summary.txt inside `run_dir`.
void cmd_report(const std::filesystem::path& run_dir, std::ostream& out);

/// Command-line entry point (CLI11 parsing included).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace polypseg
