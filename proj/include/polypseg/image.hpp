#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>

#include "polypseg/tensor.hpp"

namespace polypseg {

using Plane8 = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// Binary mask, values in {0, 1}.
using Mask = Plane8;

/// 8-bit RGB image stored as three planes.
struct RgbImage {
  std::array<Plane8, 3> planes;

  RgbImage() = default;
  RgbImage(Index height, Index width) {
    for (auto& p : planes) p = Plane8::Zero(height, width);
  }

  Index rows() const { return planes[0].rows(); }
  Index cols() const { return planes[0].cols(); }

  friend bool operator==(const RgbImage& a, const RgbImage& b) {
    for (std::size_t c = 0; c < 3; ++c) {
      if (a.planes[c].rows() != b.planes[c].rows() || a.planes[c].cols() != b.planes[c].cols()) return false;
      if (!(a.planes[c] == b.planes[c]).all()) return false;
    }
    return true;
  }
};

/// Maps output pixel coordinates (x, y, 1) to source pixel coordinates.
/// Pixel centers sit on integer coordinates.
using Homography = Eigen::Matrix3d;

/// Output-to-source map of a plain resize under the pixel-center convention.
Homography resize_map(Index src_h, Index src_w, Index out_h, Index out_w);

/// Samples `src` at the mapped location of every output pixel. Locations
/// outside the source read as 0.
Plane8 warp_bilinear(const Plane8& src, const Homography& out_to_src, Index out_h, Index out_w);
Plane8 warp_nearest(const Plane8& src, const Homography& out_to_src, Index out_h, Index out_w);
RgbImage warp_bilinear(const RgbImage& src, const Homography& out_to_src, Index out_h, Index out_w);

RgbImage resize_bilinear(const RgbImage& src, Index out_h, Index out_w);
Plane8 resize_nearest(const Plane8& src, Index out_h, Index out_w);

Plane8 flip_horizontal(const Plane8& p);
RgbImage flip_horizontal(const RgbImage& img);

/// 1 where `value >= threshold`, else 0.
Mask threshold_mask(const Plane8& gray, std::uint8_t threshold = 128);

/// Throws DataError naming the file when it is missing or cannot be decoded.
RgbImage read_rgb(const std::filesystem::path& path);
Plane8 read_gray(const std::filesystem::path& path);

/// Writes a binary mask as an 8-bit single-channel image with values 0/255.
void write_mask(const std::filesystem::path& path, const Mask& mask);
void write_rgb(const std::filesystem::path& path, const RgbImage& image);

bool is_image_file(const std::filesystem::path& path);

}  // namespace polypseg
