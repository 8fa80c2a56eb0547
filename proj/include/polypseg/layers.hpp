#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "polypseg/random.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

enum class Mode { Train, Inference };

/// A named block of model state. Trainable parameters carry a gradient of
/// the same length; buffers (batch-norm running statistics) do not.
template <typename Scalar>
struct Parameter {
  std::vector<Index> shape;
  Vector<Scalar> value;
  Vector<Scalar> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::vector<Index> dims, bool is_trainable) : shape(std::move(dims)), trainable(is_trainable) {
    Index count = 1;
    for (Index d : shape) count *= d;
    value = Vector<Scalar>::Zero(count);
    if (trainable) grad = Vector<Scalar>::Zero(count);
  }

  Index size() const { return value.size(); }
  void zero_grad() {
    if (trainable) grad.setZero();
  }
};

template <typename Scalar>
struct NamedParameter {
  std::string name;
  Parameter<Scalar>* param;
};

template <typename Scalar>
using ParameterList = std::vector<NamedParameter<Scalar>>;

/// Fills `p` with N(0, 2 / fan_in).
template <typename Scalar>
void kaiming_normal(Parameter<Scalar>& p, Index fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<Scalar>(stddev * rng.normal());
}

/// 2-D convolution, weight layout [out][in][k][k]. Lowered to a single GEMM
/// per call over the whole batch (im2col).
template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(Index in_channels, Index out_channels, Index kernel, Index stride, Index padding, bool bias)
      : weight({out_channels, in_channels, kernel, kernel}, true),
        in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(padding), has_bias_(bias) {
    if (has_bias_) this->bias = Parameter<Scalar>({out_channels}, true);
  }

  Index in_channels() const { return in_; }
  Index out_channels() const { return out_; }
  Index kernel() const { return k_; }
  Index stride() const { return stride_; }

  Shape output_shape(const Shape& in) const {
    return {in.n, out_, (in.h + 2 * pad_ - k_) / stride_ + 1, (in.w + 2 * pad_ - k_) / stride_ + 1};
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  /// Accumulates weight/bias gradients and returns d(loss)/d(input).
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);

  void init(Rng& rng) {
    kaiming_normal(weight, in_ * k_ * k_, rng);
    if (has_bias_) bias.value.setZero();
  }
  void collect(const std::string& prefix, ParameterList<Scalar>& out) {
    out.push_back({prefix + ".weight", &weight});
    if (has_bias_) out.push_back({prefix + ".bias", &bias});
  }
  void release() { input_ = Tensor<Scalar>(); }

  Parameter<Scalar> weight;
  Parameter<Scalar> bias;

 private:
  bool pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }
  /// Output columns [lo, hi) whose kernel tap `kx` lands inside an input row of width `in_w`.
  std::pair<Index, Index> valid_columns(Index kx, Index in_w, Index out_w) const {
    // ox * stride - pad + kx in [0, in_w)
    const Index first = pad_ - kx;
    Index lo = first <= 0 ? 0 : (first + stride_ - 1) / stride_;
    Index hi = (in_w - 1 + pad_ - kx) < 0 ? 0 : (in_w - 1 + pad_ - kx) / stride_ + 1;
    lo = std::min(lo, out_w);
    hi = std::min(hi, out_w);
    return {lo, std::max(lo, hi)};
  }
  RowMatrix<Scalar> im2col(const Tensor<Scalar>& x, const Shape& out_shape) const;
  void col2im(const RowMatrix<Scalar>& cols, Tensor<Scalar>& dx, const Shape& out_shape) const;

  Index in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = false;
  Tensor<Scalar> input_;
};

/// Transposed convolution with kernel == stride (non-overlapping windows),
/// weight layout [in][out][k][k]. Multiplies spatial extent by `stride`.
template <typename Scalar>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(Index in_channels, Index out_channels, Index kernel)
      : weight({in_channels, out_channels, kernel, kernel}, true), bias({out_channels}, true),
        in_(in_channels), out_(out_channels), k_(kernel) {}

  Index out_channels() const { return out_; }
  Shape output_shape(const Shape& in) const { return {in.n, out_, in.h * k_, in.w * k_}; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);

  void init(Rng& rng) {
    // each output pixel sees exactly one input pixel per input channel
    kaiming_normal(weight, in_, rng);
    bias.value.setZero();
  }
  void collect(const std::string& prefix, ParameterList<Scalar>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
  void release() { input_ = Tensor<Scalar>(); }

  Parameter<Scalar> weight;
  Parameter<Scalar> bias;

 private:
  Index in_ = 0, out_ = 0, k_ = 2;
  Tensor<Scalar> input_;
};

/// Batch normalization over (N, H, W) per channel. Training mode normalizes
/// with batch statistics and updates the running estimates; inference mode
/// uses the stored running statistics only.
template <typename Scalar>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(Index channels, double eps = 1e-5, double momentum = 0.1)
      : weight({channels}, true), bias({channels}, true),
        running_mean({channels}, false), running_var({channels}, false),
        channels_(channels), eps_(eps), momentum_(momentum) {
    reset();
  }

  void reset() {
    weight.value.setOnes();
    bias.value.setZero();
    running_mean.value.setZero();
    running_var.value.setOnes();
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);

  void collect(const std::string& prefix, ParameterList<Scalar>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
    out.push_back({prefix + ".running_mean", &running_mean});
    out.push_back({prefix + ".running_var", &running_var});
  }
  void release() { xhat_ = Tensor<Scalar>(); }

  Parameter<Scalar> weight;
  Parameter<Scalar> bias;
  Parameter<Scalar> running_mean;
  Parameter<Scalar> running_var;

 private:
  Index channels_ = 0;
  double eps_ = 1e-5;
  double momentum_ = 0.1;
  Tensor<Scalar> xhat_;
  Vector<Scalar> inv_std_;
};

/// Rectifier that remembers its activation pattern for the backward pass.
template <typename Scalar>
class ReLU {
 public:
  void forward_inplace(Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(Tensor<Scalar> grad_out) const;
  void release() { mask_.clear(); mask_.shrink_to_fit(); }

 private:
  std::vector<std::uint8_t> mask_;
};

/// Max pooling with explicit padding (padded cells never win).
template <typename Scalar>
class MaxPool2d {
 public:
  MaxPool2d() = default;
  MaxPool2d(Index kernel, Index stride, Index padding) : k_(kernel), stride_(stride), pad_(padding) {}

  Shape output_shape(const Shape& in) const {
    return {in.n, in.c, (in.h + 2 * pad_ - k_) / stride_ + 1, (in.w + 2 * pad_ - k_) / stride_ + 1};
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const;
  void release() { argmax_.clear(); argmax_.shrink_to_fit(); }

 private:
  Index k_ = 3, stride_ = 2, pad_ = 1;
  Shape input_shape_;
  std::vector<std::int32_t> argmax_;
};

extern template class Conv2d<float>;
extern template class Conv2d<double>;
extern template class ConvTranspose2d<float>;
extern template class ConvTranspose2d<double>;
extern template class BatchNorm2d<float>;
extern template class BatchNorm2d<double>;
extern template class ReLU<float>;
extern template class ReLU<double>;
extern template class MaxPool2d<float>;
extern template class MaxPool2d<double>;

}  // namespace polypseg
