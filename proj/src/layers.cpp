#include "polypseg/layers.hpp"

#include <algorithm>
#include <limits>

namespace polypseg {

namespace {

// Gathers a batch into one C x (N*P) matrix, sample-major along the columns.
template <typename Scalar>
RowMatrix<Scalar> gather_batch(const Tensor<Scalar>& t) {
  const Index plane = t.shape().plane();
  RowMatrix<Scalar> m(t.c(), t.n() * plane);
  for (Index n = 0; n < t.n(); ++n) m.middleCols(n * plane, plane) = t.sample(n);
  return m;
}

template <typename Scalar, typename Derived>
void scatter_batch(const Eigen::MatrixBase<Derived>& m, Tensor<Scalar>& t) {
  const Index plane = t.shape().plane();
  for (Index n = 0; n < t.n(); ++n) t.sample(n) = m.middleCols(n * plane, plane);
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

template <typename Scalar>
RowMatrix<Scalar> Conv2d<Scalar>::im2col(const Tensor<Scalar>& x, const Shape& os) const {
  if (pointwise()) return gather_batch(x);
  const Index out_plane = os.plane();
  RowMatrix<Scalar> cols(in_ * k_ * k_, x.n() * out_plane);
  for (Index c = 0; c < in_; ++c) {
    for (Index ky = 0; ky < k_; ++ky) {
      for (Index kx = 0; kx < k_; ++kx) {
        const auto [lo, hi] = valid_columns(kx, x.w(), os.w);
        Scalar* dst_row = cols.row((c * k_ + ky) * k_ + kx).data();
        for (Index n = 0; n < x.n(); ++n) {
          const Scalar* src = x.plane_ptr(n, c);
          Scalar* dst = dst_row + n * out_plane;
          for (Index oy = 0; oy < os.h; ++oy) {
            const Index iy = oy * stride_ - pad_ + ky;
            Scalar* line = dst + oy * os.w;
            if (iy < 0 || iy >= x.h() || lo >= hi) {
              std::fill(line, line + os.w, Scalar(0));
              continue;
            }
            std::fill(line, line + lo, Scalar(0));
            std::fill(line + hi, line + os.w, Scalar(0));
            const Scalar* src_line = src + iy * x.w() - pad_ + kx;
            if (stride_ == 1) {
              std::copy(src_line + lo, src_line + hi, line + lo);
            } else {
              for (Index ox = lo; ox < hi; ++ox) line[ox] = src_line[ox * stride_];
            }
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void Conv2d<Scalar>::col2im(const RowMatrix<Scalar>& cols, Tensor<Scalar>& dx, const Shape& os) const {
  if (pointwise()) {
    scatter_batch(cols, dx);
    return;
  }
  const Index out_plane = os.plane();
  for (Index c = 0; c < in_; ++c) {
    for (Index ky = 0; ky < k_; ++ky) {
      for (Index kx = 0; kx < k_; ++kx) {
        const auto [lo, hi] = valid_columns(kx, dx.w(), os.w);
        if (lo >= hi) continue;
        const Scalar* src_row = cols.row((c * k_ + ky) * k_ + kx).data();
        for (Index n = 0; n < dx.n(); ++n) {
          Scalar* dst = dx.plane_ptr(n, c);
          const Scalar* src = src_row + n * out_plane;
          for (Index oy = 0; oy < os.h; ++oy) {
            const Index iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= dx.h()) continue;
            Scalar* dst_line = dst + iy * dx.w() - pad_ + kx;
            const Scalar* line = src + oy * os.w;
            for (Index ox = lo; ox < hi; ++ox) dst_line[ox * stride_] += line[ox];
          }
        }
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  if (x.c() != in_) {
    throw ShapeError("Conv2d: expected " + std::to_string(in_) + " input channels, got " +
                     std::to_string(x.c()));
  }
  const Shape os = output_shape(x.shape());
  if (os.h < 1 || os.w < 1) throw ShapeError("Conv2d: input too small " + to_string(x.shape()));
  const Eigen::Map<const RowMatrix<Scalar>> w(weight.value.data(), out_, in_ * k_ * k_);
  Tensor<Scalar> y(os);
  if (x.n() == 1 && pointwise()) {
    y.sample(0).noalias() = w * x.sample(0);
  } else {
    const RowMatrix<Scalar> cols = im2col(x, os);
    if (x.n() == 1) {
      y.sample(0).noalias() = w * cols;
    } else {
      RowMatrix<Scalar> out(out_, x.n() * os.plane());
      out.noalias() = w * cols;
      scatter_batch(out, y);
    }
  }
  if (has_bias_) {
    for (Index n = 0; n < y.n(); ++n) y.sample(n).colwise() += bias.value;
  }
  if (mode == Mode::Train) input_ = x;
  return y;
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (input_.empty()) throw ShapeError("Conv2d::backward without a training-mode forward");
  const Shape os = output_shape(input_.shape());
  require_shape(grad_out.shape(), os, "Conv2d::backward grad");
  const Eigen::Map<const RowMatrix<Scalar>> w(weight.value.data(), out_, in_ * k_ * k_);
  Eigen::Map<RowMatrix<Scalar>> dw(weight.grad.data(), out_, in_ * k_ * k_);

  const RowMatrix<Scalar> g = gather_batch(grad_out);
  const RowMatrix<Scalar> cols = im2col(input_, os);
  dw.noalias() += g * cols.transpose();
  if (has_bias_) bias.grad += g.rowwise().sum();

  RowMatrix<Scalar> dcols(cols.rows(), cols.cols());
  dcols.noalias() = w.transpose() * g;
  Tensor<Scalar> dx(input_.shape());
  col2im(dcols, dx, os);
  release();
  return dx;
}

// ------------------------------------------------------- ConvTranspose2d

template <typename Scalar>
Tensor<Scalar> ConvTranspose2d<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  if (x.c() != in_) {
    throw ShapeError("ConvTranspose2d: expected " + std::to_string(in_) + " input channels, got " +
                     std::to_string(x.c()));
  }
  const Eigen::Map<const RowMatrix<Scalar>> w(weight.value.data(), in_, out_ * k_ * k_);
  const RowMatrix<Scalar> xin = gather_batch(x);
  RowMatrix<Scalar> cols(out_ * k_ * k_, xin.cols());
  cols.noalias() = w.transpose() * xin;

  Tensor<Scalar> y(output_shape(x.shape()));
  const Index in_plane = x.shape().plane();
  for (Index o = 0; o < out_; ++o) {
    const Scalar b = bias.value[o];
    for (Index dy = 0; dy < k_; ++dy) {
      for (Index dx = 0; dx < k_; ++dx) {
        const Scalar* row = cols.row((o * k_ + dy) * k_ + dx).data();
        for (Index n = 0; n < x.n(); ++n) {
          Scalar* dst = y.plane_ptr(n, o);
          const Scalar* src = row + n * in_plane;
          for (Index iy = 0; iy < x.h(); ++iy) {
            Scalar* line = dst + (iy * k_ + dy) * y.w() + dx;
            for (Index ix = 0; ix < x.w(); ++ix) line[ix * k_] = src[iy * x.w() + ix] + b;
          }
        }
      }
    }
  }
  if (mode == Mode::Train) input_ = x;
  return y;
}

template <typename Scalar>
Tensor<Scalar> ConvTranspose2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (input_.empty()) throw ShapeError("ConvTranspose2d::backward without a training-mode forward");
  require_shape(grad_out.shape(), output_shape(input_.shape()), "ConvTranspose2d::backward grad");
  const Index in_plane = input_.shape().plane();
  RowMatrix<Scalar> g(out_ * k_ * k_, input_.n() * in_plane);
  for (Index o = 0; o < out_; ++o) {
    for (Index dy = 0; dy < k_; ++dy) {
      for (Index dx = 0; dx < k_; ++dx) {
        Scalar* row = g.row((o * k_ + dy) * k_ + dx).data();
        for (Index n = 0; n < input_.n(); ++n) {
          const Scalar* src = grad_out.plane_ptr(n, o);
          Scalar* dst = row + n * in_plane;
          for (Index iy = 0; iy < input_.h(); ++iy) {
            const Scalar* line = src + (iy * k_ + dy) * grad_out.w() + dx;
            for (Index ix = 0; ix < input_.w(); ++ix) dst[iy * input_.w() + ix] = line[ix * k_];
          }
        }
      }
    }
  }
  const Eigen::Map<const RowMatrix<Scalar>> w(weight.value.data(), in_, out_ * k_ * k_);
  Eigen::Map<RowMatrix<Scalar>> dw(weight.grad.data(), in_, out_ * k_ * k_);
  const RowMatrix<Scalar> xin = gather_batch(input_);
  dw.noalias() += xin * g.transpose();
  const Vector<Scalar> row_sums = g.rowwise().sum();
  for (Index o = 0; o < out_; ++o) bias.grad[o] += row_sums.segment(o * k_ * k_, k_ * k_).sum();

  RowMatrix<Scalar> dxin(in_, g.cols());
  dxin.noalias() = w * g;
  Tensor<Scalar> dx(input_.shape());
  scatter_batch(dxin, dx);
  release();
  return dx;
}

// ----------------------------------------------------------- BatchNorm2d

template <typename Scalar>
Tensor<Scalar> BatchNorm2d<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  if (x.c() != channels_) {
    throw ShapeError("BatchNorm2d: expected " + std::to_string(channels_) + " channels, got " +
                     std::to_string(x.c()));
  }
  const Index plane = x.shape().plane();
  const Index count = x.n() * plane;
  Tensor<Scalar> y(x.shape());
  if (mode == Mode::Inference) {
    for (Index c = 0; c < channels_; ++c) {
      const Scalar scale = weight.value[c] / std::sqrt(running_var.value[c] + Scalar(eps_));
      const Scalar shift = bias.value[c] - running_mean.value[c] * scale;
      for (Index n = 0; n < x.n(); ++n) {
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> src(x.plane_ptr(n, c), plane);
        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> dst(y.plane_ptr(n, c), plane);
        dst = src * scale + shift;
      }
    }
    return y;
  }

  if (count < 2) throw ShapeError("BatchNorm2d: training mode needs more than one value per channel");
  xhat_ = Tensor<Scalar>(x.shape());
  inv_std_.resize(channels_);
  for (Index c = 0; c < channels_; ++c) {
    double sum = 0.0;
    for (Index n = 0; n < x.n(); ++n) {
      sum += static_cast<double>(Eigen::Map<const Vector<Scalar>>(x.plane_ptr(n, c), plane).sum());
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (Index n = 0; n < x.n(); ++n) {
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> src(x.plane_ptr(n, c), plane);
      sq += static_cast<double>((src - Scalar(mean)).square().sum());
    }
    const double var = sq / static_cast<double>(count);
    const Scalar inv_std = Scalar(1.0 / std::sqrt(var + eps_));
    inv_std_[c] = inv_std;
    const Scalar gamma = weight.value[c];
    const Scalar beta = bias.value[c];
    for (Index n = 0; n < x.n(); ++n) {
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> src(x.plane_ptr(n, c), plane);
      Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> xh(xhat_.plane_ptr(n, c), plane);
      Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> dst(y.plane_ptr(n, c), plane);
      xh = (src - Scalar(mean)) * inv_std;
      dst = xh * gamma + beta;
    }
    const double unbiased = sq / static_cast<double>(count - 1);
    running_mean.value[c] = Scalar((1.0 - momentum_) * running_mean.value[c] + momentum_ * mean);
    running_var.value[c] = Scalar((1.0 - momentum_) * running_var.value[c] + momentum_ * unbiased);
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> BatchNorm2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (xhat_.empty()) throw ShapeError("BatchNorm2d::backward without a training-mode forward");
  require_shape(grad_out.shape(), xhat_.shape(), "BatchNorm2d::backward grad");
  const Index plane = xhat_.shape().plane();
  const Scalar count = Scalar(xhat_.n() * plane);
  Tensor<Scalar> dx(xhat_.shape());
  for (Index c = 0; c < channels_; ++c) {
    Scalar sum_dy = 0;
    Scalar sum_dy_xhat = 0;
    for (Index n = 0; n < xhat_.n(); ++n) {
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> dy(grad_out.plane_ptr(n, c), plane);
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> xh(xhat_.plane_ptr(n, c), plane);
      sum_dy += dy.sum();
      sum_dy_xhat += (dy * xh).sum();
    }
    weight.grad[c] += sum_dy_xhat;
    bias.grad[c] += sum_dy;
    const Scalar scale = weight.value[c] * inv_std_[c] / count;
    for (Index n = 0; n < xhat_.n(); ++n) {
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> dy(grad_out.plane_ptr(n, c), plane);
      Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> xh(xhat_.plane_ptr(n, c), plane);
      Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> d(dx.plane_ptr(n, c), plane);
      d = scale * (count * dy - sum_dy - xh * sum_dy_xhat);
    }
  }
  release();
  return dx;
}

// ------------------------------------------------------------------ ReLU

template <typename Scalar>
void ReLU<Scalar>::forward_inplace(Tensor<Scalar>& x, Mode mode) {
  x.array() = x.array().max(Scalar(0));
  if (mode == Mode::Train) {
    mask_.resize(static_cast<std::size_t>(x.size()));
    const Scalar* p = x.data();
    for (Index i = 0; i < x.size(); ++i) mask_[i] = p[i] > Scalar(0);
  }
}

template <typename Scalar>
Tensor<Scalar> ReLU<Scalar>::backward(Tensor<Scalar> grad_out) const {
  if (static_cast<Index>(mask_.size()) != grad_out.size()) {
    throw ShapeError("ReLU::backward: gradient does not match the cached activation");
  }
  Scalar* g = grad_out.data();
  const std::uint8_t* m = mask_.data();
  for (Index i = 0; i < grad_out.size(); ++i) g[i] *= static_cast<Scalar>(m[i]);
  return grad_out;
}

// ------------------------------------------------------------- MaxPool2d

template <typename Scalar>
Tensor<Scalar> MaxPool2d<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  const Shape os = output_shape(x.shape());
  Tensor<Scalar> y(os);
  const bool train = mode == Mode::Train;
  if (train) {
    input_shape_ = x.shape();
    argmax_.assign(static_cast<std::size_t>(os.size()), -1);
  }
  Index out_index = 0;
  for (Index n = 0; n < x.n(); ++n) {
    for (Index c = 0; c < x.c(); ++c) {
      const Scalar* src = x.plane_ptr(n, c);
      Scalar* dst = y.plane_ptr(n, c);
      for (Index oy = 0; oy < os.h; ++oy) {
        for (Index ox = 0; ox < os.w; ++ox, ++out_index) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          std::int32_t best_at = -1;
          for (Index ky = 0; ky < k_; ++ky) {
            const Index iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= x.h()) continue;
            for (Index kx = 0; kx < k_; ++kx) {
              const Index ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= x.w()) continue;
              const Scalar v = src[iy * x.w() + ix];
              if (v > best || best_at < 0) {
                best = v;
                best_at = static_cast<std::int32_t>(iy * x.w() + ix);
              }
            }
          }
          dst[oy * os.w + ox] = best;
          if (train) argmax_[out_index] = best_at;
        }
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> MaxPool2d<Scalar>::backward(const Tensor<Scalar>& grad_out) const {
  require_shape(grad_out.shape(), output_shape(input_shape_), "MaxPool2d::backward grad");
  Tensor<Scalar> dx(input_shape_);
  const Index out_plane = grad_out.shape().plane();
  Index out_index = 0;
  for (Index n = 0; n < grad_out.n(); ++n) {
    for (Index c = 0; c < grad_out.c(); ++c) {
      Scalar* dst = dx.plane_ptr(n, c);
      const Scalar* src = grad_out.plane_ptr(n, c);
      for (Index i = 0; i < out_plane; ++i, ++out_index) dst[argmax_[out_index]] += src[i];
    }
  }
  return dx;
}

template class Conv2d<float>;
template class Conv2d<double>;
template class ConvTranspose2d<float>;
template class ConvTranspose2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class ReLU<float>;
template class ReLU<double>;
template class MaxPool2d<float>;
template class MaxPool2d<double>;

}  // namespace polypseg
