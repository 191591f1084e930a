#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

namespace lungquant {

/// Storage aligned to the widest SIMD register so vectorised kernels take the
/// same code path, and produce the same bits, regardless of heap placement.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense row-major tensor of rank <= 5. Feature maps use (channels, z, y, x).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(count(shape_), fill);
  }
  Tensor(std::vector<int> shape, const std::vector<T>& data)
      : Tensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}
  Tensor(std::vector<int> shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != count(shape_))
      throw std::invalid_argument("tensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string());
  }

  static Tensor scalar(T v) { return Tensor({1}, v); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Elements per channel for a (C, ...) tensor.
  std::size_t channel_stride() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  template <typename U>
  Tensor<U> cast() const {
    AlignedVector<U> d(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(d));
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_)
      throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string() + " vs " +
                                  o.shape_string());
  }

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) s += (i ? "," : "") + std::to_string(shape_[i]);
    return s + "]";
  }

  bool operator==(const Tensor&) const = default;

  static std::size_t count(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

 private:
  void check_shape() const {
    if (shape_.empty() || shape_.size() > 5) throw std::invalid_argument("tensor: rank must be 1..5");
    for (int d : shape_)
      if (d <= 0) throw std::invalid_argument("tensor: dimensions must be positive");
  }

  std::vector<int> shape_;
  AlignedVector<T> data_;
};

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "dot");
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

using Int3 = std::array<int, 3>;

/// Convolution geometry shared by the forward and adjoint kernels.
struct ConvGeometry {
  int channels = 1;
  Int3 in{};       // (D, H, W) of the dense side
  Int3 kernel{};   // (kz, ky, kx)
  Int3 stride{1, 1, 1};
  Int3 padding{0, 0, 0};
  Int3 out{};      // (D', H', W') of the strided side

  static ConvGeometry make(int channels, Int3 in, Int3 kernel, Int3 stride, Int3 padding) {
    ConvGeometry g{channels, in, kernel, stride, padding, {}};
    for (int a = 0; a < 3; ++a) {
      if (stride[a] < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
      if (padding[a] < 0) throw std::invalid_argument("conv3d: padding must be >= 0");
      const int padded = in[a] + 2 * padding[a];
      if (padded < kernel[a]) throw std::invalid_argument("conv3d: padded extent smaller than kernel");
      g.out[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    return g;
  }

  std::size_t rows() const {
    return static_cast<std::size_t>(channels) * kernel[0] * kernel[1] * kernel[2];
  }
  std::size_t cols() const { return static_cast<std::size_t>(out[0]) * out[1] * out[2]; }
  std::size_t in_voxels() const { return static_cast<std::size_t>(in[0]) * in[1] * in[2]; }
  bool pointwise() const {
    return kernel == Int3{1, 1, 1} && stride == Int3{1, 1, 1} && padding == Int3{0, 0, 0};
  }
};

namespace kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// Output positions [lo, hi) whose input coordinate o*stride - pad + k lies in [0, n).
inline std::pair<int, int> valid_range(int out, int n, int stride, int pad, int k) {
  int lo = 0;
  while (lo < out && lo * stride - pad + k < 0) ++lo;
  int hi = out;
  while (hi > lo && (hi - 1) * stride - pad + k >= n) --hi;
  return {lo, hi};
}

/// Unfolds receptive fields into a (C·kz·ky·kx) x (D'·H'·W') matrix.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const auto [D, H, W] = g.in;
  const auto [kz, ky, kx] = g.kernel;
  const auto [Do, Ho, Wo] = g.out;
  const int sx = g.stride[2];
  const std::size_t ncols = g.cols();
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * D * H * W;
    for (int dz = 0; dz < kz; ++dz)
      for (int dy = 0; dy < ky; ++dy)
        for (int dx = 0; dx < kx; ++dx, ++row) {
          T* out = cols + row * ncols;
          const auto [xlo, xhi] = valid_range(Wo, W, sx, g.padding[2], dx);
          for (int oz = 0; oz < Do; ++oz) {
            const int iz = oz * g.stride[0] - g.padding[0] + dz;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * g.stride[1] - g.padding[1] + dy;
              T* o = out + (static_cast<std::size_t>(oz) * Ho + oy) * Wo;
              if (iz < 0 || iz >= D || iy < 0 || iy >= H || xlo >= xhi) {
                std::fill(o, o + Wo, T{0});
                continue;
              }
              const T* xr = xc + (static_cast<std::size_t>(iz) * H + iy) * W + (dx - g.padding[2]);
              std::fill(o, o + xlo, T{0});
              if (sx == 1) {
                std::copy(xr + xlo, xr + xhi, o + xlo);
              } else {
                for (int ox = xlo; ox < xhi; ++ox) o[ox] = xr[ox * sx];
              }
              std::fill(o + xhi, o + Wo, T{0});
            }
          }
        }
  }
}

/// Adjoint of im2col: scatters-and-adds columns back onto the dense grid.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* x) {
  const auto [D, H, W] = g.in;
  const auto [kz, ky, kx] = g.kernel;
  const auto [Do, Ho, Wo] = g.out;
  const int sx = g.stride[2];
  const std::size_t ncols = g.cols();
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * D * H * W;
    for (int dz = 0; dz < kz; ++dz)
      for (int dy = 0; dy < ky; ++dy)
        for (int dx = 0; dx < kx; ++dx, ++row) {
          const T* in = cols + row * ncols;
          const auto [xlo, xhi] = valid_range(Wo, W, sx, g.padding[2], dx);
          for (int oz = 0; oz < Do; ++oz) {
            const int iz = oz * g.stride[0] - g.padding[0] + dz;
            if (iz < 0 || iz >= D) continue;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * g.stride[1] - g.padding[1] + dy;
              if (iy < 0 || iy >= H) continue;
              const T* o = in + (static_cast<std::size_t>(oz) * Ho + oy) * Wo;
              T* xr = xc + (static_cast<std::size_t>(iz) * H + iy) * W + (dx - g.padding[2]);
              if (sx == 1) {
                for (int ox = xlo; ox < xhi; ++ox) xr[ox] += o[ox];
              } else {
                for (int ox = xlo; ox < xhi; ++ox) xr[ox * sx] += o[ox];
              }
            }
          }
        }
  }
}

inline Int3 spatial(const std::vector<int>& shape) { return {shape[1], shape[2], shape[3]}; }
inline Int3 kernel_extent(const std::vector<int>& shape) { return {shape[2], shape[3], shape[4]}; }

/// Cross-correlation of x (Cin,D,H,W) with w (Cout,Cin,kz,ky,kx), zero padding.
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias, Int3 stride,
                         Int3 padding) {
  if (x.rank() != 4 || w.rank() != 5) throw std::invalid_argument("conv3d: expected (C,D,H,W) input and 5-D kernel");
  if (x.dim(0) != w.dim(1))
    throw std::invalid_argument("conv3d: input channels " + std::to_string(x.dim(0)) +
                                " do not match kernel " + w.shape_string());
  const int cout = w.dim(0);
  const auto g = ConvGeometry::make(x.dim(0), spatial(x.shape()), kernel_extent(w.shape()), stride, padding);
  Tensor<T> y({cout, g.out[0], g.out[1], g.out[2]});
  ConstMatrixMap<T> wm(w.ptr(), cout, static_cast<Eigen::Index>(g.rows()));
  MatrixMap<T> ym(y.ptr(), cout, static_cast<Eigen::Index>(g.cols()));
  if (g.pointwise()) {
    ConstMatrixMap<T> xm(x.ptr(), g.channels, static_cast<Eigen::Index>(g.cols()));
    ym.noalias() = wm * xm;
  } else {
    AlignedVector<T> cols(g.rows() * g.cols());
    im2col(x.ptr(), g, cols.data());
    ConstMatrixMap<T> cm(cols.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
    ym.noalias() = wm * cm;
  }
  if (bias) {
    if (bias->size() != static_cast<std::size_t>(cout)) throw std::invalid_argument("conv3d: bias length");
    for (int c = 0; c < cout; ++c) ym.row(c).array() += (*bias)[c];
  }
  return y;
}

/// Gradients of conv3d_forward; any output pointer may be null.
template <typename T>
void conv3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Int3 stride, Int3 padding,
                     Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* dbias) {
  const int cout = w.dim(0);
  const auto g = ConvGeometry::make(x.dim(0), spatial(x.shape()), kernel_extent(w.shape()), stride, padding);
  const auto K = static_cast<Eigen::Index>(g.rows());
  const auto N = static_cast<Eigen::Index>(g.cols());
  ConstMatrixMap<T> wm(w.ptr(), cout, K);
  ConstMatrixMap<T> dym(dy.ptr(), cout, N);
  if (dbias) {
    for (int c = 0; c < cout; ++c) (*dbias)[c] += dym.row(c).sum();
  }
  if (g.pointwise()) {
    ConstMatrixMap<T> xm(x.ptr(), K, N);
    if (dw) MatrixMap<T>(dw->ptr(), cout, K).noalias() += dym * xm.transpose();
    if (dx) MatrixMap<T>(dx->ptr(), K, N).noalias() += wm.transpose() * dym;
    return;
  }
  AlignedVector<T> cols(g.rows() * g.cols());
  if (dw) {
    im2col(x.ptr(), g, cols.data());
    ConstMatrixMap<T> cm(cols.data(), K, N);
    MatrixMap<T>(dw->ptr(), cout, K).noalias() += dym * cm.transpose();
  }
  if (dx) {
    MatrixMap<T> cm(cols.data(), K, N);
    cm.noalias() = wm.transpose() * dym;
    col2im(cols.data(), g, dx->ptr());
  }
}

/// Output extent of the transposed convolution along one axis.
inline int transpose_extent(int in, int kernel, int stride, int padding) {
  return (in - 1) * stride + kernel - 2 * padding;
}

/// Adjoint of conv3d: y (Cin,D,H,W) with w (Cin,Cout,kz,ky,kx) -> (Cout, D', H', W').
template <typename T>
Tensor<T> conv3d_transpose_forward(const Tensor<T>& y, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias, Int3 stride,
                                   Int3 padding) {
  if (y.rank() != 4 || w.rank() != 5) throw std::invalid_argument("conv3d_transpose: expected (C,D,H,W) input and 5-D kernel");
  if (y.dim(0) != w.dim(0))
    throw std::invalid_argument("conv3d_transpose: input channels " + std::to_string(y.dim(0)) +
                                " do not match kernel " + w.shape_string());
  const int cin = w.dim(0);
  const int cout = w.dim(1);
  const auto k = kernel_extent(w.shape());
  Int3 dense{};
  for (int a = 0; a < 3; ++a) {
    if (stride[a] < 1) throw std::invalid_argument("conv3d_transpose: stride must be >= 1");
    dense[a] = transpose_extent(y.shape()[a + 1], k[a], stride[a], padding[a]);
    if (dense[a] <= 0) throw std::invalid_argument("conv3d_transpose: non-positive output extent");
  }
  const auto g = ConvGeometry::make(cout, dense, k, stride, padding);
  if (g.out != spatial(y.shape())) throw std::invalid_argument("conv3d_transpose: inconsistent geometry");
  const auto K = static_cast<Eigen::Index>(g.rows());
  const auto N = static_cast<Eigen::Index>(g.cols());
  Tensor<T> out({cout, dense[0], dense[1], dense[2]});
  ConstMatrixMap<T> wm(w.ptr(), cin, K);
  ConstMatrixMap<T> ym(y.ptr(), cin, N);
  if (g.pointwise()) {
    MatrixMap<T>(out.ptr(), K, N).noalias() = wm.transpose() * ym;
  } else {
    AlignedVector<T> cols(g.rows() * g.cols());
    MatrixMap<T> cm(cols.data(), K, N);
    cm.noalias() = wm.transpose() * ym;
    col2im(cols.data(), g, out.ptr());
  }
  if (bias) {
    if (bias->size() != static_cast<std::size_t>(cout)) throw std::invalid_argument("conv3d_transpose: bias length");
    const std::size_t vox = g.in_voxels();
    for (int c = 0; c < cout; ++c) {
      T* p = out.ptr() + c * vox;
      for (std::size_t i = 0; i < vox; ++i) p[i] += (*bias)[c];
    }
  }
  return out;
}

template <typename T>
void conv3d_transpose_backward(const Tensor<T>& y, const Tensor<T>& w, const Tensor<T>& dout, Int3 stride,
                               Int3 padding, Tensor<T>* dy, Tensor<T>* dw, Tensor<T>* dbias) {
  const int cin = w.dim(0);
  const int cout = w.dim(1);
  const auto g = ConvGeometry::make(cout, spatial(dout.shape()), kernel_extent(w.shape()), stride, padding);
  const auto K = static_cast<Eigen::Index>(g.rows());
  const auto N = static_cast<Eigen::Index>(g.cols());
  if (dbias) {
    const std::size_t vox = g.in_voxels();
    for (int c = 0; c < cout; ++c) {
      const T* p = dout.ptr() + c * vox;
      T s{0};
      for (std::size_t i = 0; i < vox; ++i) s += p[i];
      (*dbias)[c] += s;
    }
  }
  AlignedVector<T> cols;
  const T* colp = dout.ptr();
  if (!g.pointwise()) {
    cols.resize(g.rows() * g.cols());
    im2col(dout.ptr(), g, cols.data());
    colp = cols.data();
  }
  ConstMatrixMap<T> cm(colp, K, N);
  ConstMatrixMap<T> ym(y.ptr(), cin, N);
  if (dw) MatrixMap<T>(dw->ptr(), cin, K).noalias() += ym * cm.transpose();
  if (dy) MatrixMap<T>(dy->ptr(), cin, N).noalias() += ConstMatrixMap<T>(w.ptr(), cin, K) * cm;
}

}  // namespace kernels
}  // namespace lungquant
