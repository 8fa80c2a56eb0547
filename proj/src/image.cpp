#include "polypseg/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>

#include "polypseg/errors.hpp"

namespace polypseg {

Homography resize_map(Index src_h, Index src_w, Index out_h, Index out_w) {
  const double sx = static_cast<double>(src_w) / static_cast<double>(out_w);
  const double sy = static_cast<double>(src_h) / static_cast<double>(out_h);
  Homography m;
  m << sx, 0.0, 0.5 * sx - 0.5,
       0.0, sy, 0.5 * sy - 0.5,
       0.0, 0.0, 1.0;
  return m;
}

namespace {

template <typename Sampler>
Plane8 warp_with(const Plane8& src, const Homography& h, Index out_h, Index out_w, Sampler sample) {
  Plane8 out(out_h, out_w);
  for (Index y = 0; y < out_h; ++y) {
    for (Index x = 0; x < out_w; ++x) {
      const Eigen::Vector3d p = h * Eigen::Vector3d(static_cast<double>(x), static_cast<double>(y), 1.0);
      out(y, x) = sample(src, p.x() / p.z(), p.y() / p.z());
    }
  }
  return out;
}

std::uint8_t sample_nearest(const Plane8& src, double sx, double sy) {
  const auto ix = static_cast<Index>(std::floor(sx + 0.5));
  const auto iy = static_cast<Index>(std::floor(sy + 0.5));
  if (ix < 0 || iy < 0 || ix >= src.cols() || iy >= src.rows()) return 0;
  return src(iy, ix);
}

std::uint8_t sample_bilinear(const Plane8& src, double sx, double sy) {
  const double fx = std::floor(sx);
  const double fy = std::floor(sy);
  const auto x0 = static_cast<Index>(fx);
  const auto y0 = static_cast<Index>(fy);
  const double ax = sx - fx;
  const double ay = sy - fy;
  auto at = [&](Index y, Index x) -> double {
    if (x < 0 || y < 0 || x >= src.cols() || y >= src.rows()) return 0.0;
    return src(y, x);
  };
  const double v = (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) +
                   ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1));
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

Plane8 warp_bilinear(const Plane8& src, const Homography& h, Index out_h, Index out_w) {
  return warp_with(src, h, out_h, out_w, sample_bilinear);
}

Plane8 warp_nearest(const Plane8& src, const Homography& h, Index out_h, Index out_w) {
  return warp_with(src, h, out_h, out_w, sample_nearest);
}

RgbImage warp_bilinear(const RgbImage& src, const Homography& h, Index out_h, Index out_w) {
  RgbImage out;
  for (std::size_t c = 0; c < 3; ++c) out.planes[c] = warp_bilinear(src.planes[c], h, out_h, out_w);
  return out;
}

RgbImage resize_bilinear(const RgbImage& src, Index out_h, Index out_w) {
  return warp_bilinear(src, resize_map(src.rows(), src.cols(), out_h, out_w), out_h, out_w);
}

Plane8 resize_nearest(const Plane8& src, Index out_h, Index out_w) {
  return warp_nearest(src, resize_map(src.rows(), src.cols(), out_h, out_w), out_h, out_w);
}

Plane8 flip_horizontal(const Plane8& p) { return p.rowwise().reverse(); }

RgbImage flip_horizontal(const RgbImage& img) {
  RgbImage out;
  for (std::size_t c = 0; c < 3; ++c) out.planes[c] = flip_horizontal(img.planes[c]);
  return out;
}

Mask threshold_mask(const Plane8& gray, std::uint8_t threshold) {
  return (gray >= threshold).cast<std::uint8_t>();
}

bool is_image_file(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png";
}

RgbImage read_rgb(const std::filesystem::path& path) {
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot read image: " + path.string());
  RgbImage img(bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      img.planes[0](y, x) = row[x][2];
      img.planes[1](y, x) = row[x][1];
      img.planes[2](y, x) = row[x][0];
    }
  }
  return img;
}

Plane8 read_gray(const std::filesystem::path& path) {
  const cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw DataError("cannot read image: " + path.string());
  Plane8 out(gray.rows, gray.cols);
  for (int y = 0; y < gray.rows; ++y) {
    std::copy(gray.ptr<std::uint8_t>(y), gray.ptr<std::uint8_t>(y) + gray.cols, out.row(y).data());
  }
  return out;
}

void write_mask(const std::filesystem::path& path, const Mask& mask) {
  cv::Mat out(static_cast<int>(mask.rows()), static_cast<int>(mask.cols()), CV_8UC1);
  for (int y = 0; y < out.rows; ++y) {
    auto* row = out.ptr<std::uint8_t>(y);
    for (int x = 0; x < out.cols; ++x) row[x] = mask(y, x) ? 255 : 0;
  }
  if (!cv::imwrite(path.string(), out)) throw DataError("cannot write mask: " + path.string());
}

void write_rgb(const std::filesystem::path& path, const RgbImage& image) {
  cv::Mat out(static_cast<int>(image.rows()), static_cast<int>(image.cols()), CV_8UC3);
  for (int y = 0; y < out.rows; ++y) {
    auto* row = out.ptr<cv::Vec3b>(y);
    for (int x = 0; x < out.cols; ++x) {
      row[x] = cv::Vec3b(image.planes[2](y, x), image.planes[1](y, x), image.planes[0](y, x));
    }
  }
  if (!cv::imwrite(path.string(), out)) throw DataError("cannot write image: " + path.string());
}

}  // namespace polypseg
