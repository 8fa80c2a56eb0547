#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "polypseg/errors.hpp"

namespace polypseg {

using Index = Eigen::Index;

/// Dimensions of a batch of feature maps in NCHW order.
struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index plane() const { return h * w; }
  Index sample_size() const { return c * h * w; }
  Index size() const { return n * c * h * w; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
         std::to_string(s.w);
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Dense NCHW tensor. Each sample is contiguous and can be viewed as a
/// C x (H*W) row-major matrix, which is how the convolution kernels consume it.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using SampleMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstSampleMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;
  explicit Tensor(const Shape& shape) : shape_(shape), data_(Storage::Zero(shape.size())) {}
  Tensor(Index n, Index c, Index h, Index w) : Tensor(Shape{n, c, h, w}) {}

  static Tensor constant(const Shape& shape, Scalar value) {
    Tensor t(shape);
    t.data_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index n() const { return shape_.n; }
  Index c() const { return shape_.c; }
  Index h() const { return shape_.h; }
  Index w() const { return shape_.w; }
  Index size() const { return shape_.size(); }
  bool empty() const { return shape_.size() == 0; }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator()(Index n, Index c, Index y, Index x) {
    return data_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  Scalar operator()(Index n, Index c, Index y, Index x) const {
    return data_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }

  SampleMap sample(Index n) {
    return SampleMap(data() + n * shape_.sample_size(), shape_.c, shape_.plane());
  }
  ConstSampleMap sample(Index n) const {
    return ConstSampleMap(data() + n * shape_.sample_size(), shape_.c, shape_.plane());
  }

  Scalar* plane_ptr(Index n, Index c) { return data() + (n * shape_.c + c) * shape_.plane(); }
  const Scalar* plane_ptr(Index n, Index c) const {
    return data() + (n * shape_.c + c) * shape_.plane();
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.array() = data_.template cast<Other>();
    return out;
  }

  bool all_finite() const { return data_.isFinite().all(); }

 private:
  Shape shape_;
  Storage data_;
};

/// Throws ShapeError unless `actual == expected`, naming both.
inline void require_shape(const Shape& actual, const Shape& expected, const std::string& what) {
  if (!(actual == expected)) {
    throw ShapeError(what + ": expected " + to_string(expected) + ", got " + to_string(actual));
  }
}

/// Concatenates along the channel axis. Batch and spatial dims must agree.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor<Scalar> out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (Index n = 0; n < a.n(); ++n) {
    out.sample(n).topRows(a.c()) = a.sample(n);
    out.sample(n).bottomRows(b.c()) = b.sample(n);
  }
  return out;
}

/// Splits a channel-concatenated tensor back into its two parts.
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> split_channels(const Tensor<Scalar>& t, Index first) {
  Tensor<Scalar> a(t.n(), first, t.h(), t.w());
  Tensor<Scalar> b(t.n(), t.c() - first, t.h(), t.w());
  for (Index n = 0; n < t.n(); ++n) {
    a.sample(n) = t.sample(n).topRows(first);
    b.sample(n) = t.sample(n).bottomRows(t.c() - first);
  }
  return {std::move(a), std::move(b)};
}

/// Extracts samples [begin, begin + count) as a new tensor.
template <typename Scalar>
Tensor<Scalar> slice_batch(const Tensor<Scalar>& t, Index begin, Index count) {
  Tensor<Scalar> out(count, t.c(), t.h(), t.w());
  out.array() = t.array().segment(begin * t.shape().sample_size(), count * t.shape().sample_size());
  return out;
}

}  // namespace polypseg
