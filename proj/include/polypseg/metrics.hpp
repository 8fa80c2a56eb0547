#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "polypseg/image.hpp"

namespace polypseg {

/// Pixel tallies of a binary prediction against binary ground truth.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Throws ShapeError on a size mismatch and DataError on non-binary input.
ConfusionCounts confusion(const Mask& pred, const Mask& gt);

/// The six reported scores, in report column order.
struct MetricValues {
  double jaccard = 0.0;
  double dsc = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  double accuracy = 0.0;
  double f2 = 0.0;

  static constexpr std::array<std::string_view, 6> kColumns = {"Jaccard", "DSC", "Recall", "Prec.", "Acc.", "F2"};
  std::array<double, 6> values() const { return {jaccard, dsc, recall, precision, accuracy, f2}; }
};

struct MetricOptions {
  /// Added to numerator and denominator of the overlap ratios.
  double smoothing = 0.0;
  /// Score of an overlap metric whose denominator vanishes because both
  /// prediction and ground truth are empty (only relevant without smoothing).
  /// Other vanishing denominators score 0.
  double empty_score = 1.0;
};

/// dsc = (2tp+s)/(2tp+fp+fn+s), jaccard = (tp+s)/(tp+fp+fn+s),
/// recall = (tp+s)/(tp+fn+s), precision = (tp+s)/(tp+fp+s),
/// accuracy = (tp+tn)/N, f2 = (5tp+s)/(5tp+4fn+fp+s).
MetricValues compute_metrics(const ConfusionCounts& counts, const MetricOptions& options = {});

enum class Aggregation { PerImageMean, GlobalCounts };

std::string to_string(Aggregation mode);
/// Accepts "per-image-mean" and "global-counts"; throws ConfigError otherwise.
Aggregation parse_aggregation(const std::string& text);

struct ImageMetrics {
  std::string id;
  ConfusionCounts counts;
  MetricValues values;
};

struct MetricsReport {
  std::vector<ImageMetrics> per_image;  // sorted by id
  MetricValues aggregate;
  ConfusionCounts totals;
  Aggregation mode = Aggregation::PerImageMean;
  MetricOptions options;

  nlohmann::json to_json() const;
  /// Fixed-width table: one row per image plus the aggregate row.
  std::string table() const;
  /// The aggregate row alone, four decimals, report column order.
  std::string aggregate_row() const;
};

/// Reduces per-image counts. Insensitive to the input order.
MetricsReport build_report(std::vector<std::pair<std::string, ConfusionCounts>> counts, Aggregation mode,
                           const MetricOptions& options = {});

/// Scores predicted mask files against ground-truth mask files, pairing by
/// stem. Prediction pixels count as foreground when value > threshold * 255;
/// ground truth is binarized at 128. Missing predictions raise DataError
/// listing every id.
MetricsReport evaluate_mask_dirs(const std::filesystem::path& predictions, const std::filesystem::path& ground_truth,
                                 double threshold, Aggregation mode, const MetricOptions& options = {});

/// Writes `<stem>.json` and `<stem>.txt` next to each other.
void write_report(const MetricsReport& report, const std::filesystem::path& stem);

}  // namespace polypseg
