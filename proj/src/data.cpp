#include "polypseg/data.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "polypseg/archive.hpp"
#include "polypseg/errors.hpp"

namespace polypseg {

namespace fs = std::filesystem;

// -------------------------------------------------------------- loading

namespace {

std::map<std::string, fs::path> index_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
    const std::string stem = entry.path().stem().string();
    if (!out.emplace(stem, entry.path()).second) {
      throw DataError("duplicate id '" + stem + "' in " + dir.string());
    }
  }
  return out;
}

}  // namespace

std::vector<std::pair<std::string, fs::path>> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  const auto index = index_by_stem(dir);
  return {index.begin(), index.end()};
}

std::vector<SamplePair> load_dataset(const fs::path& root) {
  const fs::path images_dir = root / "images";
  const fs::path masks_dir = root / "masks";
  if (!fs::is_directory(images_dir)) throw DataError("missing images directory: " + images_dir.string());
  // a missing masks directory surfaces as every image being unpaired
  const bool have_masks = fs::is_directory(masks_dir);

  const auto images = index_by_stem(images_dir);
  const auto masks = have_masks ? index_by_stem(masks_dir) : std::map<std::string, fs::path>{};
  std::vector<std::string> orphans;
  for (const auto& [id, path] : images) {
    if (!masks.contains(id)) orphans.push_back(id + " (image without mask)");
  }
  for (const auto& [id, path] : masks) {
    if (!images.contains(id)) orphans.push_back(id + " (mask without image)");
  }
  if (!orphans.empty()) {
    std::string msg = "unpaired files in " + root.string() + ":";
    if (!have_masks) msg += " (no masks directory at " + masks_dir.string() + ")";
    for (const auto& o : orphans) msg += "\n  " + o;
    throw DataError(msg);
  }
  if (images.empty()) throw DataError("empty dataset: " + root.string());

  std::vector<SamplePair> pairs;
  pairs.reserve(images.size());
  for (const auto& [id, image_path] : images) {
    SamplePair pair;
    pair.id = id;
    pair.image = read_rgb(image_path);
    pair.mask = threshold_mask(read_gray(masks.at(id)), 128);
    if (pair.mask.rows() != pair.image.rows() || pair.mask.cols() != pair.image.cols()) {
      throw DataError("image and mask sizes differ for '" + id + "'");
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

// ---------------------------------------------------------------- split

void to_json(nlohmann::json& j, const SplitManifest& m) {
  j = nlohmann::json{{"train_fraction", m.train_fraction},
                     {"seed", m.seed},
                     {"train", m.train_ids},
                     {"validation", m.validation_ids}};
}

void from_json(const nlohmann::json& j, SplitManifest& m) {
  j.at("train_fraction").get_to(m.train_fraction);
  j.at("seed").get_to(m.seed);
  j.at("train").get_to(m.train_ids);
  j.at("validation").get_to(m.validation_ids);
}

void SplitManifest::save(const fs::path& path) const {
  write_file_atomic(path, nlohmann::json(*this).dump(2) + "\n");
}

SplitManifest SplitManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read split manifest: " + path.string());
  try {
    return nlohmann::json::parse(in).get<SplitManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed split manifest " + path.string() + ": " + e.what());
  }
}

DatasetSplit split_dataset(std::vector<SamplePair> pairs, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie strictly between 0 and 1");
  }
  if (pairs.size() < 2) throw DataError("need at least 2 samples to split, got " + std::to_string(pairs.size()));

  const auto n = pairs.size();
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::derive(seed, 0x5B17);
  rng.shuffle(order.begin(), order.end());

  DatasetSplit split;
  split.manifest.train_fraction = train_fraction;
  split.manifest.seed = seed;
  std::vector<bool> is_train(n, false);
  for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;
  for (std::size_t i = 0; i < n; ++i) {
    auto& side = is_train[i] ? split.train : split.validation;
    side.push_back(std::move(pairs[i]));
  }
  auto by_id = [](const SamplePair& a, const SamplePair& b) { return a.id < b.id; };
  std::sort(split.train.begin(), split.train.end(), by_id);
  std::sort(split.validation.begin(), split.validation.end(), by_id);
  for (const auto& p : split.train) split.manifest.train_ids.push_back(p.id);
  for (const auto& p : split.validation) split.manifest.validation_ids.push_back(p.id);
  return split;
}

// --------------------------------------------------------- augmentation

void AugmentationConfig::validate() const {
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) throw ConfigError("flip_probability must lie in [0, 1]");
  if (!(rotation_limit >= 0.0)) throw ConfigError("rotation_limit must be non-negative");
  if (!(zoom_min > 0.0 && zoom_min <= zoom_max)) throw ConfigError("zoom range must satisfy 0 < min <= max");
  if (!(brightness_contrast_limit >= 0.0 && brightness_contrast_limit < 1.0)) {
    throw ConfigError("brightness_contrast_limit must lie in [0, 1)");
  }
  if (!(warp_magnitude >= 0.0 && warp_magnitude < 0.5)) throw ConfigError("warp_magnitude must lie in [0, 0.5)");
  if (target_height < 32 || target_width < 32 || target_height % 32 != 0 || target_width % 32 != 0) {
    throw ConfigError("augmentation target size must be a positive multiple of 32");
  }
}

AugmentationParams sample_augmentation(const AugmentationConfig& config, Rng& rng) {
  AugmentationParams p;
  p.flip = rng.uniform() < config.flip_probability;
  p.angle_degrees = rng.uniform(-config.rotation_limit, config.rotation_limit);
  p.zoom = rng.uniform(config.zoom_min, config.zoom_max);
  for (auto& shift : p.corner_shift) {
    shift.x() = rng.uniform(-config.warp_magnitude, config.warp_magnitude);
    shift.y() = rng.uniform(-config.warp_magnitude, config.warp_magnitude);
  }
  p.brightness = rng.uniform(-config.brightness_contrast_limit, config.brightness_contrast_limit);
  p.contrast = 1.0 + rng.uniform(-config.brightness_contrast_limit, config.brightness_contrast_limit);
  return p;
}

namespace {

// Homography taking each `from[i]` to `to[i]`.
Homography homography_from_corners(const std::array<Eigen::Vector2d, 4>& from,
                                   const std::array<Eigen::Vector2d, 4>& to) {
  Eigen::Matrix<double, 8, 8> a;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const double x = from[i].x(), y = from[i].y(), u = to[i].x(), v = to[i].y();
    a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
    a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
    b(2 * i) = u;
    b(2 * i + 1) = v;
  }
  const Eigen::Matrix<double, 8, 1> h = a.fullPivLu().solve(b);
  Homography m;
  m << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
  return m;
}

}  // namespace

Homography geometric_map(const AugmentationParams& params, Index src_h, Index src_w, Index out_h, Index out_w) {
  Homography m = resize_map(src_h, src_w, out_h, out_w);
  const double cx = 0.5 * static_cast<double>(out_w - 1);
  const double cy = 0.5 * static_cast<double>(out_h - 1);

  if (params.angle_degrees != 0.0 || params.zoom != 1.0) {
    // forward: p' = c + zoom * R(angle) (p - c); we need its inverse
    const double theta = params.angle_degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(theta) / params.zoom;
    const double sn = std::sin(theta) / params.zoom;
    Homography inv;
    inv << cs, sn, cx - cs * cx - sn * cy,
           -sn, cs, cy + sn * cx - cs * cy,
           0, 0, 1;
    m = m * inv;
  }
  if (params.flip) {
    Homography f;
    f << -1, 0, static_cast<double>(out_w - 1),
          0, 1, 0,
          0, 0, 1;
    m = m * f;
  }
  const bool warped = std::any_of(params.corner_shift.begin(), params.corner_shift.end(),
                                  [](const Eigen::Vector2d& s) { return !s.isZero(0.0); });
  if (warped) {
    const double w = static_cast<double>(out_w - 1), h = static_cast<double>(out_h - 1);
    const std::array<Eigen::Vector2d, 4> corners{Eigen::Vector2d(0, 0), Eigen::Vector2d(w, 0), Eigen::Vector2d(w, h),
                                                 Eigen::Vector2d(0, h)};
    std::array<Eigen::Vector2d, 4> moved;
    for (std::size_t i = 0; i < 4; ++i) {
      moved[i] = corners[i] + params.corner_shift[i].cwiseProduct(
                                  Eigen::Vector2d(static_cast<double>(out_w), static_cast<double>(out_h)));
    }
    // output pixels live in the warped frame; map them back to the unwarped one
    m = m * homography_from_corners(moved, corners);
  }
  return m;
}

RgbImage adjust_lighting(const RgbImage& image, double brightness, double contrast) {
  if (brightness == 0.0 && contrast == 1.0) return image;
  RgbImage out;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto v = image.planes[c].cast<double>();
    out.planes[c] = (contrast * (v - 127.5) + 127.5 + 255.0 * brightness).round().max(0.0).min(255.0).cast<std::uint8_t>();
  }
  return out;
}

SamplePair apply_augmentation(const SamplePair& pair, const AugmentationParams& params, Index out_h, Index out_w) {
  const Homography m = geometric_map(params, pair.image.rows(), pair.image.cols(), out_h, out_w);
  SamplePair out;
  out.id = pair.id;
  out.image = adjust_lighting(warp_bilinear(pair.image, m, out_h, out_w), params.brightness, params.contrast);
  out.mask = (warp_nearest(pair.mask, m, out_h, out_w) > 0).cast<std::uint8_t>();
  return out;
}

SamplePair augment(const SamplePair& pair, const AugmentationConfig& config, Rng& rng) {
  return apply_augmentation(pair, sample_augmentation(config, rng), config.target_height, config.target_width);
}

SamplePair resize_pair(const SamplePair& pair, Index out_h, Index out_w) {
  return apply_augmentation(pair, AugmentationParams{}, out_h, out_w);
}

// -------------------------------------------------------- normalization

void NormalizationStats::validate() const {
  for (double s : std) {
    if (!(s > 0.0)) throw ConfigError("normalization std must be strictly positive");
  }
}

void normalize_into(const RgbImage& image, const NormalizationStats& stats, Tensor<float>& batch, Index n) {
  if (batch.c() != 3 || batch.h() != image.rows() || batch.w() != image.cols()) {
    throw ShapeError("normalize_into: image " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                     " does not fit batch " + to_string(batch.shape()));
  }
  for (Index c = 0; c < 3; ++c) {
    const double scale = 1.0 / (255.0 * stats.std[c]);
    const double shift = -stats.mean[c] / stats.std[c];
    const auto& plane = image.planes[c];
    Eigen::Map<Eigen::Array<float, Eigen::Dynamic, 1>> dst(batch.plane_ptr(n, c), image.rows() * image.cols());
    const Eigen::Map<const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>> src(plane.data(), plane.size());
    dst = (src.cast<double>() * scale + shift).cast<float>();
  }
}

Tensor<float> normalize(const RgbImage& image, const NormalizationStats& stats) {
  stats.validate();
  Tensor<float> out(1, 3, image.rows(), image.cols());
  normalize_into(image, stats, out, 0);
  return out;
}

Tensor<float> denormalize(const Tensor<float>& normalized, const NormalizationStats& stats) {
  if (normalized.c() != 3) throw ShapeError("denormalize expects 3 channels, got " + to_string(normalized.shape()));
  Tensor<float> out(normalized.shape());
  const Index plane = normalized.shape().plane();
  for (Index n = 0; n < normalized.n(); ++n) {
    for (Index c = 0; c < 3; ++c) {
      Eigen::Map<const Eigen::Array<float, Eigen::Dynamic, 1>> src(normalized.plane_ptr(n, c), plane);
      Eigen::Map<Eigen::Array<float, Eigen::Dynamic, 1>> dst(out.plane_ptr(n, c), plane);
      dst = (src.cast<double>() * stats.std[c] + stats.mean[c]).cast<float>();
    }
  }
  return out;
}

// -------------------------------------------------------------- batching

std::vector<std::vector<std::size_t>> plan_batches(std::size_t count, Index batch_size, bool shuffle,
                                                   std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  if (shuffle) {
    Rng rng = Rng::derive(seed, epoch, 0xBA7C);
    rng.shuffle(order.begin(), order.end());
  }
  std::vector<std::vector<std::size_t>> plan;
  const auto step = static_cast<std::size_t>(batch_size);
  for (std::size_t i = 0; i < count; i += step) {
    plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                      order.begin() + static_cast<std::ptrdiff_t>(std::min(count, i + step)));
  }
  return plan;
}

BatchStream::BatchStream(std::span<const SamplePair> pairs, Index batch_size, bool shuffle, std::uint64_t seed,
                         std::uint64_t epoch, Prepare prepare, NormalizationStats stats)
    : pairs_(pairs), plan_(plan_batches(pairs.size(), batch_size, shuffle, seed, epoch)),
      prepare_(std::move(prepare)), stats_(stats) {
  stats_.validate();
}

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= plan_.size()) return std::nullopt;
  const auto& indices = plan_[cursor_++];
  std::vector<SamplePair> prepared;
  prepared.reserve(indices.size());
  for (std::size_t i : indices) prepared.push_back(prepare_ ? prepare_(pairs_[i], i) : pairs_[i]);

  const Index h = prepared.front().image.rows();
  const Index w = prepared.front().image.cols();
  const auto b = static_cast<Index>(prepared.size());
  Batch batch{Tensor<float>(b, 3, h, w), Tensor<float>(b, 1, h, w), {}};
  for (Index n = 0; n < b; ++n) {
    const SamplePair& p = prepared[n];
    if (p.image.rows() != h || p.image.cols() != w || p.mask.rows() != h || p.mask.cols() != w) {
      throw ShapeError("batch samples differ in size; resize or augment to a common target first");
    }
    normalize_into(p.image, stats_, batch.images, n);
    Eigen::Map<Eigen::Array<float, Eigen::Dynamic, 1>> dst(batch.masks.plane_ptr(n, 0), h * w);
    const Eigen::Map<const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>> src(p.mask.data(), p.mask.size());
    dst = src.cast<float>();
    batch.ids.push_back(p.id);
  }
  return batch;
}

std::vector<Batch> make_batches(std::span<const SamplePair> pairs, Index batch_size, bool shuffle, std::uint64_t seed,
                                std::uint64_t epoch) {
  BatchStream stream(pairs, batch_size, shuffle, seed, epoch);
  std::vector<Batch> out;
  while (auto b = stream.next()) out.push_back(std::move(*b));
  return out;
}

}  // namespace polypseg
