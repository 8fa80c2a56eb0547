#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "polypseg/image.hpp"
#include "polypseg/random.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

/// One RGB image and its binary ground truth, aligned pixel for pixel.
struct SamplePair {
  std::string id;
  RgbImage image;
  Mask mask;
};

/// Reads `<root>/images` and `<root>/masks`, pairing files by stem.
/// Masks are binarized at 128. Pairs are sorted by id. Orphans on either
/// side, an empty dataset and unreadable files raise DataError.
std::vector<SamplePair> load_dataset(const std::filesystem::path& root);

/// Reads every image in `dir` (no masks). Sorted by id.
std::vector<std::pair<std::string, std::filesystem::path>> list_images(const std::filesystem::path& dir);

struct SplitManifest {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;

  void save(const std::filesystem::path& path) const;
  static SplitManifest load(const std::filesystem::path& path);
  friend bool operator==(const SplitManifest&, const SplitManifest&) = default;
};

void to_json(nlohmann::json& j, const SplitManifest& m);
void from_json(const nlohmann::json& j, SplitManifest& m);

struct DatasetSplit {
  std::vector<SamplePair> train;
  std::vector<SamplePair> validation;
  SplitManifest manifest;
};

/// Seeded disjoint partition; round(fraction * n) training samples, at
/// least one on each side. Requires 0 < fraction < 1 and n >= 2.
DatasetSplit split_dataset(std::vector<SamplePair> pairs, double train_fraction, std::uint64_t seed);

struct AugmentationConfig {
  double flip_probability = 0.5;
  double rotation_limit = 30.0;  // degrees
  double zoom_min = 0.9;
  double zoom_max = 1.1;
  double brightness_contrast_limit = 0.2;
  double warp_magnitude = 0.1;  // fraction of the image size per corner
  Index target_height = 256;
  Index target_width = 256;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const AugmentationConfig&, const AugmentationConfig&) = default;
};

/// Random draws of one augmentation. Geometric fields apply identically to
/// image and mask; brightness/contrast touch the image only.
struct AugmentationParams {
  bool flip = false;
  double angle_degrees = 0.0;
  double zoom = 1.0;
  /// Per-corner displacement (x, y) in units of the target width/height;
  /// corners ordered top-left, top-right, bottom-right, bottom-left.
  std::array<Eigen::Vector2d, 4> corner_shift{Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero(),
                                              Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()};
  double brightness = 0.0;
  double contrast = 1.0;
};

/// Draws every field in a fixed order, so the stream consumption does not
/// depend on the configured magnitudes.
AugmentationParams sample_augmentation(const AugmentationConfig& config, Rng& rng);

/// Output-to-source map for resize -> zoom/rotate about the center -> flip -> warp.
Homography geometric_map(const AugmentationParams& params, Index src_h, Index src_w, Index out_h, Index out_w);

/// Brightness/contrast jitter: v' = contrast * (v - 127.5) + 127.5 + 255 * brightness.
RgbImage adjust_lighting(const RgbImage& image, double brightness, double contrast);

/// Applies `params`; the image is sampled bilinearly, the mask by nearest
/// neighbour and re-thresholded so it stays {0,1}.
SamplePair apply_augmentation(const SamplePair& pair, const AugmentationParams& params, Index out_h, Index out_w);

/// Training-time augmentation: draws parameters from `rng`, then applies them.
SamplePair augment(const SamplePair& pair, const AugmentationConfig& config, Rng& rng);

/// Evaluation-time preprocessing: resize only (image bilinear, mask nearest).
SamplePair resize_pair(const SamplePair& pair, Index out_h, Index out_w);

struct NormalizationStats {
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};

  static NormalizationStats imagenet() { return {}; }
  void validate() const;
};

/// (pixel / 255 - mean_c) / std_c, channel-first, as a 1 x 3 x H x W tensor.
Tensor<float> normalize(const RgbImage& image, const NormalizationStats& stats = {});
/// Writes the normalized image into sample slot `n` of `batch`.
void normalize_into(const RgbImage& image, const NormalizationStats& stats, Tensor<float>& batch, Index n);
/// Inverse of `normalize`, returning pixel / 255 values.
Tensor<float> denormalize(const Tensor<float>& normalized, const NormalizationStats& stats = {});

struct Batch {
  Tensor<float> images;  // B x 3 x H x W, normalized
  Tensor<float> masks;   // B x 1 x H x W, {0,1}
  std::vector<std::string> ids;
};

/// Index groups for one epoch. With `shuffle`, the order is a deterministic
/// function of (seed, epoch). The last group may be short.
std::vector<std::vector<std::size_t>> plan_batches(std::size_t count, Index batch_size, bool shuffle,
                                                   std::uint64_t seed, std::uint64_t epoch);

/// Lazily assembles the batches of one epoch. `prepare` maps (pair, dataset
/// index) to the pair that enters the batch (augmentation or resize); all
/// prepared pairs must share one size.
class BatchStream {
 public:
  using Prepare = std::function<SamplePair(const SamplePair&, std::size_t)>;

  BatchStream(std::span<const SamplePair> pairs, Index batch_size, bool shuffle, std::uint64_t seed,
              std::uint64_t epoch = 0, Prepare prepare = {}, NormalizationStats stats = {});

  std::size_t size() const { return plan_.size(); }
  std::optional<Batch> next();

 private:
  std::span<const SamplePair> pairs_;
  std::vector<std::vector<std::size_t>> plan_;
  std::size_t cursor_ = 0;
  Prepare prepare_;
  NormalizationStats stats_;
};

/// Collects an epoch's stream into a vector.
std::vector<Batch> make_batches(std::span<const SamplePair> pairs, Index batch_size, bool shuffle, std::uint64_t seed,
                                std::uint64_t epoch = 0);

}  // namespace polypseg
