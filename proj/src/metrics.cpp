#include "polypseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "polypseg/archive.hpp"
#include "polypseg/data.hpp"
#include "polypseg/errors.hpp"

namespace polypseg {

ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) {
    throw ShapeError("confusion: prediction " + std::to_string(pred.rows()) + "x" + std::to_string(pred.cols()) +
                     " vs ground truth " + std::to_string(gt.rows()) + "x" + std::to_string(gt.cols()));
  }
  if ((pred > 1).any() || (gt > 1).any()) throw DataError("confusion: masks must be {0,1}-valued");
  ConfusionCounts c;
  const auto p = pred.cast<bool>();
  const auto g = gt.cast<bool>();
  c.tp = static_cast<std::uint64_t>((p && g).count());
  c.fp = static_cast<std::uint64_t>((p && !g).count());
  c.fn = static_cast<std::uint64_t>((!p && g).count());
  c.tn = static_cast<std::uint64_t>(pred.size()) - c.tp - c.fp - c.fn;
  return c;
}

MetricValues compute_metrics(const ConfusionCounts& counts, const MetricOptions& options) {
  const double tp = static_cast<double>(counts.tp);
  const double fp = static_cast<double>(counts.fp);
  const double fn = static_cast<double>(counts.fn);
  const double tn = static_cast<double>(counts.tn);
  const double s = options.smoothing;
  const bool both_empty = counts.tp + counts.fp + counts.fn == 0;

  auto ratio = [&](double num, double den) {
    if (den > 0.0) return num / den;
    return both_empty ? options.empty_score : 0.0;
  };
  MetricValues m;
  m.dsc = ratio(2 * tp + s, 2 * tp + fp + fn + s);
  m.jaccard = ratio(tp + s, tp + fp + fn + s);
  m.recall = ratio(tp + s, tp + fn + s);
  m.precision = ratio(tp + s, tp + fp + s);
  m.f2 = ratio(5 * tp + s, 5 * tp + 4 * fn + fp + s);
  const double n = tp + fp + fn + tn;
  m.accuracy = n > 0.0 ? (tp + tn) / n : options.empty_score;
  return m;
}

std::string to_string(Aggregation mode) {
  return mode == Aggregation::PerImageMean ? "per-image-mean" : "global-counts";
}

Aggregation parse_aggregation(const std::string& text) {
  if (text == "per-image-mean") return Aggregation::PerImageMean;
  if (text == "global-counts") return Aggregation::GlobalCounts;
  throw ConfigError("unknown aggregation mode '" + text + "' (expected per-image-mean or global-counts)");
}

MetricsReport build_report(std::vector<std::pair<std::string, ConfusionCounts>> counts, Aggregation mode,
                           const MetricOptions& options) {
  if (counts.empty()) throw DataError("cannot build a metrics report from zero images");
  std::sort(counts.begin(), counts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  MetricsReport report;
  report.mode = mode;
  report.options = options;
  std::array<double, 6> sums{};
  for (auto& [id, c] : counts) {
    const MetricValues v = compute_metrics(c, options);
    report.per_image.push_back({id, c, v});
    report.totals += c;
    const auto vals = v.values();
    for (std::size_t i = 0; i < 6; ++i) sums[i] += vals[i];
  }
  if (mode == Aggregation::GlobalCounts) {
    report.aggregate = compute_metrics(report.totals, options);
  } else {
    const double n = static_cast<double>(report.per_image.size());
    report.aggregate = MetricValues{sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, sums[4] / n, sums[5] / n};
  }
  return report;
}

namespace {

nlohmann::json values_json(const MetricValues& v) {
  return {{"jaccard", v.jaccard}, {"dsc", v.dsc},           {"recall", v.recall},
          {"precision", v.precision}, {"accuracy", v.accuracy}, {"f2", v.f2}};
}

std::string format_row(const std::string& label, const MetricValues& v, std::size_t label_width) {
  std::string row = label;
  row.resize(std::max(label_width, label.size()), ' ');
  char cell[32];
  for (double x : v.values()) {
    std::snprintf(cell, sizeof(cell), " | %7.4f", x);
    row += cell;
  }
  return row;
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["aggregation"] = polypseg::to_string(mode);
  j["smoothing"] = options.smoothing;
  j["empty_score"] = options.empty_score;
  j["images"] = nlohmann::json::array();
  for (const auto& im : per_image) {
    auto rec = values_json(im.values);
    rec["id"] = im.id;
    rec["tp"] = im.counts.tp;
    rec["fp"] = im.counts.fp;
    rec["fn"] = im.counts.fn;
    rec["tn"] = im.counts.tn;
    j["images"].push_back(rec);
  }
  auto agg = values_json(aggregate);
  agg["tp"] = totals.tp;
  agg["fp"] = totals.fp;
  agg["fn"] = totals.fn;
  agg["tn"] = totals.tn;
  agg["count"] = per_image.size();
  j["aggregate"] = agg;
  return j;
}

std::string MetricsReport::table() const {
  std::size_t width = 9;
  for (const auto& im : per_image) width = std::max(width, im.id.size());
  std::string header = "Image";
  header.resize(width, ' ');
  for (auto col : MetricValues::kColumns) {
    char cell[32];
    std::snprintf(cell, sizeof(cell), " | %7s", std::string(col).c_str());
    header += cell;
  }
  std::ostringstream out;
  out << header << "\n" << std::string(header.size(), '-') << "\n";
  for (const auto& im : per_image) out << format_row(im.id, im.values, width) << "\n";
  out << std::string(header.size(), '-') << "\n";
  out << format_row(mode == Aggregation::PerImageMean ? "mean" : "global", aggregate, width) << "\n";
  return out.str();
}

std::string MetricsReport::aggregate_row() const {
  std::ostringstream out;
  bool first = true;
  for (double x : aggregate.values()) {
    char cell[32];
    std::snprintf(cell, sizeof(cell), "%.4f", x);
    out << (first ? "" : " ") << cell;
    first = false;
  }
  return out.str();
}

MetricsReport evaluate_mask_dirs(const std::filesystem::path& predictions, const std::filesystem::path& ground_truth,
                                 double threshold, Aggregation mode, const MetricOptions& options) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  const auto preds = list_images(predictions);
  const auto gts = list_images(ground_truth);
  if (gts.empty()) throw DataError("no ground-truth masks in " + ground_truth.string());
  if (preds.empty()) throw DataError("no predictions in " + predictions.string());
  std::map<std::string, std::filesystem::path> pred_by_id(preds.begin(), preds.end());

  std::vector<std::string> missing;
  for (const auto& [id, path] : gts) {
    if (!pred_by_id.contains(id)) missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string msg = "missing predictions for " + std::to_string(missing.size()) + " id(s):";
    for (const auto& id : missing) msg += " " + id;
    throw DataError(msg);
  }

  const double cut = threshold * 255.0;
  std::vector<std::pair<std::string, ConfusionCounts>> counts;
  for (const auto& [id, gt_path] : gts) {
    const Mask gt = threshold_mask(read_gray(gt_path), 128);
    const Plane8 raw = read_gray(pred_by_id.at(id));
    const Mask pred = (raw.cast<double>() > cut).cast<std::uint8_t>();
    if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) {
      throw DataError("prediction size differs from ground truth for '" + id + "'");
    }
    counts.emplace_back(id, confusion(pred, gt));
  }
  return build_report(std::move(counts), mode, options);
}

void write_report(const MetricsReport& report, const std::filesystem::path& stem) {
  write_file_atomic(stem.string() + ".json", report.to_json().dump(2) + "\n");
  write_file_atomic(stem.string() + ".txt", report.table());
}

}  // namespace polypseg
