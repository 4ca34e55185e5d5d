#ifndef DIFFSPOT_NN_LAYERS_HPP_
#define DIFFSPOT_NN_LAYERS_HPP_

#include <algorithm>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "diffspot/nn/tensor.hpp"

namespace diffspot::nn {

template <typename T>
using MatrixMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  if (in + 2 * pad < kernel) return 0;  // avoid trunc-toward-zero on negatives
  return (in + 2 * pad - kernel) / stride + 1;  // floor
}

namespace detail {

// [C,H,W] -> [C*k*k, oh*ow]; out-of-image taps read as zero.
template <typename T>
void im2col(const Tensor<T>& img, int kernel, int stride, int pad,
            Tensor<T>& col) {
  const int C = img.shape[0], H = img.shape[1], W = img.shape[2];
  const int oh = conv_out_dim(H, kernel, stride, pad);
  const int ow = conv_out_dim(W, kernel, stride, pad);
  col = Tensor<T>({C * kernel * kernel, oh * ow});
  std::size_t r = 0;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < kernel; ++ky)
      for (int kx = 0; kx < kernel; ++kx, ++r) {
        T* dst = &col.data[r * static_cast<std::size_t>(oh) * ow];
        for (int y = 0; y < oh; ++y) {
          const int sy = y * stride + ky - pad;
          if (sy < 0 || sy >= H) {
            std::fill(dst, dst + ow, T(0));
            dst += ow;
            continue;
          }
          const T* src = &img.data[(static_cast<std::size_t>(c) * H + sy) * W];
          for (int x = 0; x < ow; ++x) {
            const int sx = x * stride + kx - pad;
            *dst++ = (sx < 0 || sx >= W) ? T(0) : src[sx];
          }
        }
      }
}

// Transpose of im2col: accumulates column gradients back into image layout.
template <typename T>
void col2im(const Tensor<T>& col, int C, int H, int W, int kernel, int stride,
            int pad, Tensor<T>& img) {
  const int oh = conv_out_dim(H, kernel, stride, pad);
  const int ow = conv_out_dim(W, kernel, stride, pad);
  img = Tensor<T>({C, H, W});
  std::size_t r = 0;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < kernel; ++ky)
      for (int kx = 0; kx < kernel; ++kx, ++r) {
        const T* src = &col.data[r * static_cast<std::size_t>(oh) * ow];
        for (int y = 0; y < oh; ++y) {
          const int sy = y * stride + ky - pad;
          if (sy < 0 || sy >= H) {
            src += ow;
            continue;
          }
          T* dst = &img.data[(static_cast<std::size_t>(c) * H + sy) * W];
          for (int x = 0; x < ow; ++x) {
            const int sx = x * stride + kx - pad;
            if (sx >= 0 && sx < W) dst[sx] += src[x];
          }
          src += ow;
        }
      }
}

}  // namespace detail

// im2col + GEMM convolution over a [C,H,W] map. Weight [out_c, in_c*k*k],
// bias [out_c]. Instances may share parameters (two-branch backbones);
// backward accumulates into the shared grad buffers.
template <typename T>
class Conv2d {
 public:
  Conv2d(std::string name, int in_c, int out_c, int kernel, int stride, int pad)
      : weight(std::make_shared<Param<T>>(name + ".weight",
                                          std::vector<int>{out_c, in_c * kernel * kernel})),
        bias(std::make_shared<Param<T>>(name + ".bias", std::vector<int>{out_c})),
        in_c_(in_c),
        kernel_(kernel),
        stride_(stride),
        pad_(pad) {}

  // Shared-parameter twin of an existing instance.
  Conv2d(const Conv2d& master, bool /*share*/)
      : weight(master.weight),
        bias(master.bias),
        in_c_(master.in_c_),
        kernel_(master.kernel_),
        stride_(master.stride_),
        pad_(master.pad_) {}

  void init_xavier(Rng& rng) {
    const int out_c = weight->value.shape[0];
    xavier_fill(weight->value, in_c_ * kernel_ * kernel_, out_c * kernel_ * kernel_,
                rng);
    bias->value.fill(T(0));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.shape.size() != 3 || x.shape[0] != in_c_)
      throw ShapeMismatch("conv input expects " + std::to_string(in_c_) +
                          " channels, got " + shape_string(x));
    in_shape_ = x.shape;
    const int oh = conv_out_dim(x.shape[1], kernel_, stride_, pad_);
    const int ow = conv_out_dim(x.shape[2], kernel_, stride_, pad_);
    if (oh < 1 || ow < 1) throw InputTooSmall("conv output collapses to zero");
    detail::im2col(x, kernel_, stride_, pad_, col_);
    const int out_c = weight->value.shape[0];
    Tensor<T> y({out_c, oh, ow});
    ConstMatrixMap<T> w(weight->value.data.data(), out_c, col_.shape[0]);
    ConstMatrixMap<T> cols(col_.data.data(), col_.shape[0], col_.shape[1]);
    MatrixMap<T> out(y.data.data(), out_c, oh * ow);
    out.noalias() = w * cols;
    for (int c = 0; c < out_c; ++c)
      out.row(c).array() += bias->value.data[c];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_y) {
    const int out_c = weight->value.shape[0];
    const int cols_n = col_.shape[1];
    ConstMatrixMap<T> gy(grad_y.data.data(), out_c, cols_n);
    ConstMatrixMap<T> cols(col_.data.data(), col_.shape[0], cols_n);
    MatrixMap<T> gw(weight->grad.data.data(), out_c, col_.shape[0]);
    gw.noalias() += gy * cols.transpose();
    // Scalar accumulation: map reductions reorder with buffer alignment,
    // which would break bit-exact reruns.
    for (int c = 0; c < out_c; ++c) {
      T acc = T(0);
      const T* row = &grad_y.data[static_cast<std::size_t>(c) * cols_n];
      for (int i = 0; i < cols_n; ++i) acc += row[i];
      bias->grad.data[c] += acc;
    }

    Tensor<T> grad_col({col_.shape[0], cols_n});
    ConstMatrixMap<T> w(weight->value.data.data(), out_c, col_.shape[0]);
    MatrixMap<T> gc(grad_col.data.data(), col_.shape[0], cols_n);
    gc.noalias() = w.transpose() * gy;
    Tensor<T> grad_x;
    detail::col2im(grad_col, in_shape_[0], in_shape_[1], in_shape_[2], kernel_,
                   stride_, pad_, grad_x);
    return grad_x;
  }

  int out_channels() const { return weight->value.shape[0]; }

  ParamPtr<T> weight, bias;

 private:
  int in_c_, kernel_, stride_, pad_;
  std::vector<int> in_shape_;
  Tensor<T> col_;
};

template <typename T>
class Linear {
 public:
  Linear(std::string name, int in_dim, int out_dim)
      : weight(std::make_shared<Param<T>>(name + ".weight",
                                          std::vector<int>{out_dim, in_dim})),
        bias(std::make_shared<Param<T>>(name + ".bias", std::vector<int>{out_dim})) {}

  // Shared-parameter twin with a private activation cache.
  Linear(const Linear& master, bool /*share*/)
      : weight(master.weight), bias(master.bias) {}

  void init_xavier(Rng& rng) {
    xavier_fill(weight->value, weight->value.shape[1], weight->value.shape[0], rng);
    bias->value.fill(T(0));
  }

  // x: [N, in_dim] -> [N, out_dim]
  Tensor<T> forward(const Tensor<T>& x) {
    if (x.shape.size() != 2 || x.shape[1] != weight->value.shape[1])
      throw ShapeMismatch("linear input " + shape_string(x) + " vs weight " +
                          shape_string(weight->value));
    x_ = x;
    const int N = x.shape[0], in = x.shape[1], out = weight->value.shape[0];
    Tensor<T> y({N, out});
    ConstMatrixMap<T> xm(x.data.data(), N, in);
    ConstMatrixMap<T> wm(weight->value.data.data(), out, in);
    MatrixMap<T> ym(y.data.data(), N, out);
    ym.noalias() = xm * wm.transpose();
    for (int n = 0; n < N; ++n)
      ym.row(n) += ConstMatrixMap<T>(bias->value.data.data(), 1, out);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_y) {
    const int N = x_.shape[0], in = x_.shape[1], out = weight->value.shape[0];
    ConstMatrixMap<T> gy(grad_y.data.data(), N, out);
    ConstMatrixMap<T> xm(x_.data.data(), N, in);
    MatrixMap<T> gw(weight->grad.data.data(), out, in);
    gw.noalias() += gy.transpose() * xm;
    // Scalar accumulation, same reasoning as the conv bias gradient.
    for (int n = 0; n < N; ++n)
      for (int d = 0; d < out; ++d)
        bias->grad.data[d] += grad_y.data[static_cast<std::size_t>(n) * out + d];
    Tensor<T> grad_x({N, in});
    ConstMatrixMap<T> wm(weight->value.data.data(), out, in);
    MatrixMap<T> gx(grad_x.data.data(), N, in);
    gx.noalias() = gy * wm;
    return grad_x;
  }

  ParamPtr<T> weight, bias;

 private:
  Tensor<T> x_;
};

template <typename T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    mask_.assign(x.numel(), 0);
    Tensor<T> y = x;
    for (std::size_t i = 0; i < y.numel(); ++i) {
      if (y.data[i] > T(0))
        mask_[i] = 1;
      else
        y.data[i] = T(0);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_y) {
    Tensor<T> gx = grad_y;
    for (std::size_t i = 0; i < gx.numel(); ++i)
      if (!mask_[i]) gx.data[i] = T(0);
    return gx;
  }

 private:
  std::vector<std::uint8_t> mask_;
};

// Across-channel local response normalization:
//   scale_c = k + (alpha/n) * sum_{j in window(c)} x_j^2
//   y_c = x_c * scale_c^-beta
template <typename T>
class LRN {
 public:
  explicit LRN(int size = 5, double alpha = 1e-4, double beta = 0.75,
               double k = 1.0)
      : size_(size), alpha_(alpha), beta_(beta), k_(k) {}

  Tensor<T> forward(const Tensor<T>& x) {
    x_ = x;
    const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
    scale_ = Tensor<T>(x.shape);
    Tensor<T> y(x.shape);
    const int half = size_ / 2;
    const T coeff = static_cast<T>(alpha_ / size_);
    for (int yx = 0; yx < H * W; ++yx) {
      for (int c = 0; c < C; ++c) {
        T acc = static_cast<T>(k_);
        const int lo = std::max(0, c - half), hi = std::min(C - 1, c + half);
        for (int j = lo; j <= hi; ++j) {
          const T v = x.data[static_cast<std::size_t>(j) * H * W + yx];
          acc += coeff * v * v;
        }
        const std::size_t idx = static_cast<std::size_t>(c) * H * W + yx;
        scale_.data[idx] = acc;
        y.data[idx] = x.data[idx] * std::pow(acc, static_cast<T>(-beta_));
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_y) {
    const int C = x_.shape[0], H = x_.shape[1], W = x_.shape[2];
    Tensor<T> gx(x_.shape);
    const int half = size_ / 2;
    const T coeff = static_cast<T>(2.0 * alpha_ * beta_ / size_);
    for (int yx = 0; yx < H * W; ++yx) {
      for (int j = 0; j < C; ++j) {
        const std::size_t ij = static_cast<std::size_t>(j) * H * W + yx;
        T g = grad_y.data[ij] * std::pow(scale_.data[ij], static_cast<T>(-beta_));
        // x_j also appears in the scale of every channel whose window holds j.
        const int lo = std::max(0, j - half), hi = std::min(C - 1, j + half);
        T cross = T(0);
        for (int c = lo; c <= hi; ++c) {
          const std::size_t ic = static_cast<std::size_t>(c) * H * W + yx;
          cross += grad_y.data[ic] * x_.data[ic] *
                   std::pow(scale_.data[ic], static_cast<T>(-beta_ - 1.0));
        }
        gx.data[ij] = g - coeff * x_.data[ij] * cross;
      }
    }
    return gx;
  }

 private:
  int size_;
  double alpha_, beta_, k_;
  Tensor<T> x_, scale_;
};

template <typename T>
class MaxPool2d {
 public:
  MaxPool2d(int kernel, int stride) : kernel_(kernel), stride_(stride) {}

  Tensor<T> forward(const Tensor<T>& x) {
    const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const int oh = conv_out_dim(H, kernel_, stride_, 0);
    const int ow = conv_out_dim(W, kernel_, stride_, 0);
    if (oh < 1 || ow < 1) throw InputTooSmall("pool output collapses to zero");
    in_shape_ = x.shape;
    Tensor<T> y({C, oh, ow});
    argmax_.assign(y.numel(), 0);
    for (int c = 0; c < C; ++c)
      for (int py = 0; py < oh; ++py)
        for (int px = 0; px < ow; ++px) {
          T best = x.at3(c, py * stride_, px * stride_);
          std::size_t best_idx =
              (static_cast<std::size_t>(c) * H + py * stride_) * W + px * stride_;
          for (int ky = 0; ky < kernel_; ++ky)
            for (int kx = 0; kx < kernel_; ++kx) {
              const int sy = py * stride_ + ky, sx = px * stride_ + kx;
              if (sy >= H || sx >= W) continue;
              const T v = x.at3(c, sy, sx);
              if (v > best) {
                best = v;
                best_idx = (static_cast<std::size_t>(c) * H + sy) * W + sx;
              }
            }
          const std::size_t oidx =
              (static_cast<std::size_t>(c) * oh + py) * ow + px;
          y.data[oidx] = best;
          argmax_[oidx] = best_idx;
        }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_y) {
    Tensor<T> gx(in_shape_);
    for (std::size_t i = 0; i < grad_y.numel(); ++i)
      gx.data[argmax_[i]] += grad_y.data[i];
    return gx;
  }

 private:
  int kernel_, stride_;
  std::vector<int> in_shape_;
  std::vector<std::size_t> argmax_;
};

// Channel concatenation of two same-sized maps, with the matching split for
// the backward pass.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape[1] != b.shape[1] || a.shape[2] != b.shape[2])
    throw ShapeMismatch("concat inputs differ spatially");
  Tensor<T> y({a.shape[0] + b.shape[0], a.shape[1], a.shape[2]});
  std::copy(a.data.begin(), a.data.end(), y.data.begin());
  std::copy(b.data.begin(), b.data.end(), y.data.begin() + a.numel());
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, int c_first) {
  Tensor<T> a({c_first, g.shape[1], g.shape[2]});
  Tensor<T> b({g.shape[0] - c_first, g.shape[1], g.shape[2]});
  std::copy(g.data.begin(), g.data.begin() + a.numel(), a.data.begin());
  std::copy(g.data.begin() + a.numel(), g.data.end(), b.data.begin());
  return {std::move(a), std::move(b)};
}

}  // namespace diffspot::nn

#endif  // DIFFSPOT_NN_LAYERS_HPP_
