#pragma once

// Building blocks for the segmentation network: strided 3D convolution via
// im2col + GEMM, kernel==stride transposed convolution, instance norm, ReLU and
// softmax, each with an explicit backward pass. All kernels are single
// threaded and reduce in a fixed order, so results are bit-reproducible.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <vector>

#include <Eigen/Core>

#include "cps3d/error.hpp"
#include "cps3d/tensor.hpp"

namespace cps3d::nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int cin = 1;
  int cout = 1;
  std::array<int, 3> kernel{3, 3, 3};
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> pad{1, 1, 1};
  Dims in;
  Dims out;

  std::size_t taps() const { return static_cast<std::size_t>(kernel[0]) * kernel[1] * kernel[2]; }
  std::size_t rows() const { return static_cast<std::size_t>(cin) * taps(); }
  std::size_t weight_count() const { return static_cast<std::size_t>(cout) * rows(); }
  bool is_pointwise() const {
    return taps() == 1 && stride == std::array<int, 3>{1, 1, 1};
  }
};

/// Same-padding geometry: pad = (k-1)/2, out = (in + 2p - k)/s + 1.
inline ConvGeometry conv_geometry(Dims in, int cin, int cout, std::array<int, 3> kernel, std::array<int, 3> stride) {
  ConvGeometry g;
  g.cin = cin;
  g.cout = cout;
  g.kernel = kernel;
  g.stride = stride;
  g.in = in;
  for (std::size_t a = 0; a < 3; ++a) {
    g.pad[a] = (kernel[a] - 1) / 2;
    const auto n = static_cast<long long>(in[a]) + 2 * g.pad[a] - kernel[a];
    if (n < 0) throw Error(ErrorCode::ShapeMismatch, "convolution input smaller than kernel");
    g.out[a] = static_cast<std::size_t>(n / stride[a] + 1);
  }
  return g;
}

/// Valid output range [lo, hi) along one axis for tap k: 0 <= o*s + k - p < n.
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t n_in, std::size_t n_out, int k, int s, int p) {
  const long long off = k - p;
  long long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long long hi = (static_cast<long long>(n_in) - 1 - off) >= 0
                     ? (static_cast<long long>(n_in) - 1 - off) / s + 1
                     : 0;
  lo = std::min<long long>(lo, static_cast<long long>(n_out));
  hi = std::clamp<long long>(hi, lo, static_cast<long long>(n_out));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// Row-major (cin*taps) x out_voxels patch matrix.
template <class T>
void im2col(const T* in, const ConvGeometry& g, T* cols) {
  const Dims& di = g.in;
  const Dims& d = g.out;
  const std::size_t n = d.count();
  std::size_t row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* src_c = in + static_cast<std::size_t>(ci) * di.count();
    for (int kz = 0; kz < g.kernel[0]; ++kz)
      for (int ky = 0; ky < g.kernel[1]; ++ky)
        for (int kx = 0; kx < g.kernel[2]; ++kx, ++row) {
          T* dst = cols + row * n;
          const auto [z0, z1] = tap_range(di.z, d.z, kz, g.stride[0], g.pad[0]);
          const auto [y0, y1] = tap_range(di.y, d.y, ky, g.stride[1], g.pad[1]);
          const auto [x0, x1] = tap_range(di.x, d.x, kx, g.stride[2], g.pad[2]);
          std::fill(dst, dst + n, T{0});
          for (std::size_t oz = z0; oz < z1; ++oz) {
            const std::size_t iz = oz * g.stride[0] + kz - g.pad[0];
            T* op = dst + oz * d.y * d.x;
            for (std::size_t oy = y0; oy < y1; ++oy) {
              const std::size_t iy = oy * g.stride[1] + ky - g.pad[1];
              const T* s = src_c + (iz * di.y + iy) * di.x;
              T* o = op + oy * d.x;
              if (g.stride[2] == 1) {
                const std::size_t shift = x0 + kx - g.pad[2];
                std::memcpy(o + x0, s + shift, (x1 - x0) * sizeof(T));
              } else {
                for (std::size_t ox = x0; ox < x1; ++ox) o[ox] = s[ox * g.stride[2] + kx - g.pad[2]];
              }
            }
          }
        }
  }
}

/// Adjoint of im2col: scatters-and-adds the patch matrix into din.
template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* din) {
  const Dims& di = g.in;
  const Dims& d = g.out;
  const std::size_t n = d.count();
  std::size_t row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    T* dst_c = din + static_cast<std::size_t>(ci) * di.count();
    for (int kz = 0; kz < g.kernel[0]; ++kz)
      for (int ky = 0; ky < g.kernel[1]; ++ky)
        for (int kx = 0; kx < g.kernel[2]; ++kx, ++row) {
          const T* src = cols + row * n;
          const auto [z0, z1] = tap_range(di.z, d.z, kz, g.stride[0], g.pad[0]);
          const auto [y0, y1] = tap_range(di.y, d.y, ky, g.stride[1], g.pad[1]);
          const auto [x0, x1] = tap_range(di.x, d.x, kx, g.stride[2], g.pad[2]);
          for (std::size_t oz = z0; oz < z1; ++oz) {
            const std::size_t iz = oz * g.stride[0] + kz - g.pad[0];
            for (std::size_t oy = y0; oy < y1; ++oy) {
              const std::size_t iy = oy * g.stride[1] + ky - g.pad[1];
              T* o = dst_c + (iz * di.y + iy) * di.x;
              const T* s = src + (oz * d.y + oy) * d.x;
              for (std::size_t ox = x0; ox < x1; ++ox) o[ox * g.stride[2] + kx - g.pad[2]] += s[ox];
            }
          }
        }
  }
}

/// out = conv(in, w); weights laid out (cout, cin, kz, ky, kx). No bias.
template <class T>
Tensor<T> conv_forward(const Tensor<T>& in, const T* w, const ConvGeometry& g, AlignedVector<T>& scratch) {
  if (in.channels != g.cin || in.dims != g.in) throw Error(ErrorCode::ShapeMismatch, "conv input shape");
  Tensor<T> out(g.cout, g.out);
  const auto n = static_cast<Eigen::Index>(g.out.count());
  const auto k = static_cast<Eigen::Index>(g.rows());
  MapConstMat<T> W(w, g.cout, k);
  MapMat<T> O(out.data.data(), g.cout, n);
  if (g.is_pointwise()) {
    O.noalias() = W * MapConstMat<T>(in.data.data(), k, n);
  } else {
    scratch.resize(static_cast<std::size_t>(k * n));
    im2col(in.data.data(), g, scratch.data());
    O.noalias() = W * MapConstMat<T>(scratch.data(), k, n);
  }
  return out;
}

/// Accumulates dW += dout * cols^T and, when din is given, din += conv^T(dout).
template <class T>
void conv_backward(const Tensor<T>& in, const T* w, const ConvGeometry& g, const Tensor<T>& dout, T* dw,
                   Tensor<T>* din, AlignedVector<T>& scratch) {
  const auto n = static_cast<Eigen::Index>(g.out.count());
  const auto k = static_cast<Eigen::Index>(g.rows());
  MapConstMat<T> W(w, g.cout, k);
  MapConstMat<T> dO(dout.data.data(), g.cout, n);
  MapMat<T> dW(dw, g.cout, k);
  if (g.is_pointwise()) {
    dW.noalias() += dO * MapConstMat<T>(in.data.data(), k, n).transpose();
    if (din) MapMat<T>(din->data.data(), k, n).noalias() += W.transpose() * dO;
    return;
  }
  scratch.resize(static_cast<std::size_t>(k * n));
  im2col(in.data.data(), g, scratch.data());
  dW.noalias() += dO * MapConstMat<T>(scratch.data(), k, n).transpose();
  if (din) {
    MapMat<T> dC(scratch.data(), k, n);
    dC.noalias() = W.transpose() * dO;
    col2im(scratch.data(), g, din->data.data());
  }
}

/// Transposed convolution with kernel == stride (non-overlapping upsampling).
/// Weights laid out (cout, sz, sy, sx, cin).
struct UpGeometry {
  int cin = 1;
  int cout = 1;
  std::array<int, 3> stride{2, 2, 2};
  Dims in;
  Dims out;

  std::size_t taps() const { return static_cast<std::size_t>(stride[0]) * stride[1] * stride[2]; }
  std::size_t weight_count() const { return static_cast<std::size_t>(cout) * taps() * cin; }
};

inline UpGeometry up_geometry(Dims in, int cin, int cout, std::array<int, 3> stride) {
  UpGeometry g{cin, cout, stride, in, {}};
  for (std::size_t a = 0; a < 3; ++a) g.out[a] = in[a] * static_cast<std::size_t>(stride[a]);
  return g;
}

template <class T>
Tensor<T> up_forward(const Tensor<T>& in, const T* w, const UpGeometry& g, AlignedVector<T>& scratch) {
  if (in.channels != g.cin || in.dims != g.in) throw Error(ErrorCode::ShapeMismatch, "upsampling input shape");
  const auto nin = static_cast<Eigen::Index>(g.in.count());
  const auto rows = static_cast<Eigen::Index>(g.cout * g.taps());
  scratch.resize(static_cast<std::size_t>(rows * nin));
  MapMat<T> C(scratch.data(), rows, nin);
  C.noalias() = MapConstMat<T>(w, rows, g.cin) * MapConstMat<T>(in.data.data(), g.cin, nin);
  Tensor<T> out(g.cout, g.out);
  const auto& s = g.stride;
  for (int co = 0; co < g.cout; ++co)
    for (int a = 0; a < s[0]; ++a)
      for (int b = 0; b < s[1]; ++b)
        for (int c = 0; c < s[2]; ++c) {
          const std::size_t r = static_cast<std::size_t>(co) * g.taps() + (static_cast<std::size_t>(a) * s[1] + b) * s[2] + c;
          const T* src = scratch.data() + r * g.in.count();
          T* dst = out.channel(co);
          std::size_t i = 0;
          for (std::size_t z = 0; z < g.in.z; ++z)
            for (std::size_t y = 0; y < g.in.y; ++y)
              for (std::size_t x = 0; x < g.in.x; ++x, ++i)
                dst[g.out.index(z * s[0] + a, y * s[1] + b, x * s[2] + c)] = src[i];
        }
  return out;
}

template <class T>
void up_backward(const Tensor<T>& in, const T* w, const UpGeometry& g, const Tensor<T>& dout, T* dw, Tensor<T>* din,
                 AlignedVector<T>& scratch) {
  const auto nin = static_cast<Eigen::Index>(g.in.count());
  const auto rows = static_cast<Eigen::Index>(g.cout * g.taps());
  scratch.resize(static_cast<std::size_t>(rows * nin));
  const auto& s = g.stride;
  for (int co = 0; co < g.cout; ++co)
    for (int a = 0; a < s[0]; ++a)
      for (int b = 0; b < s[1]; ++b)
        for (int c = 0; c < s[2]; ++c) {
          const std::size_t r = static_cast<std::size_t>(co) * g.taps() + (static_cast<std::size_t>(a) * s[1] + b) * s[2] + c;
          T* dst = scratch.data() + r * g.in.count();
          const T* src = dout.channel(co);
          std::size_t i = 0;
          for (std::size_t z = 0; z < g.in.z; ++z)
            for (std::size_t y = 0; y < g.in.y; ++y)
              for (std::size_t x = 0; x < g.in.x; ++x, ++i)
                dst[i] = src[g.out.index(z * s[0] + a, y * s[1] + b, x * s[2] + c)];
        }
  MapConstMat<T> dC(scratch.data(), rows, nin);
  MapMat<T>(dw, rows, g.cin).noalias() += dC * MapConstMat<T>(in.data.data(), g.cin, nin).transpose();
  if (din) MapMat<T>(din->data.data(), g.cin, nin).noalias() += MapConstMat<T>(w, rows, g.cin).transpose() * dC;
}

/// Instance norm statistics kept for the backward pass.
template <class T>
struct NormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

inline constexpr double kNormEps = 1e-5;

// Vectorized Eigen reductions peel by pointer alignment, which varies between
// allocations and so changes the summation order. These run in a fixed order.
template <class T>
T ordered_sum(const T* a, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]);
  return static_cast<T>(s);
}

template <class T>
T ordered_dot(const T* a, const T* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return static_cast<T>(s);
}

template <class T>
Tensor<T> instance_norm_forward(const Tensor<T>& x, const T* scale, const T* offset, NormCache<T>* cache) {
  Tensor<T> y(x.channels, x.dims);
  NormCache<T> local;
  NormCache<T>& c = cache ? *cache : local;
  c.xhat = Tensor<T>(x.channels, x.dims);
  c.inv_std.assign(static_cast<std::size_t>(x.channels), T{0});
  const auto n = static_cast<Eigen::Index>(x.voxels());
  for (int ch = 0; ch < x.channels; ++ch) {
    Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> xs(x.channel(ch), n);
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> xh(c.xhat.channel(ch), n);
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> ys(y.channel(ch), n);
    const auto un = static_cast<std::size_t>(n);
    const T mean = ordered_sum(x.channel(ch), un) / static_cast<T>(n);
    xh = xs - mean;
    const T var = ordered_dot(c.xhat.channel(ch), c.xhat.channel(ch), un) / static_cast<T>(n);
    const T inv = T{1} / std::sqrt(var + static_cast<T>(kNormEps));
    c.inv_std[static_cast<std::size_t>(ch)] = inv;
    xh *= inv;
    ys = xh * scale[ch] + offset[ch];
  }
  return y;
}

/// Returns dx; accumulates dscale/doffset.
template <class T>
Tensor<T> instance_norm_backward(const Tensor<T>& dy, const T* scale, const NormCache<T>& c, T* dscale, T* doffset) {
  Tensor<T> dx(dy.channels, dy.dims);
  const auto n = static_cast<Eigen::Index>(dy.voxels());
  const T nn = static_cast<T>(n);
  for (int ch = 0; ch < dy.channels; ++ch) {
    Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> g(dy.channel(ch), n);
    Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> xh(c.xhat.channel(ch), n);
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> out(dx.channel(ch), n);
    const T sum_g = ordered_sum(dy.channel(ch), static_cast<std::size_t>(n));
    const T sum_gx = ordered_dot(dy.channel(ch), c.xhat.channel(ch), static_cast<std::size_t>(n));
    dscale[ch] += sum_gx;
    doffset[ch] += sum_g;
    const T k = scale[ch] * c.inv_std[static_cast<std::size_t>(ch)] / nn;
    out = k * (nn * g - sum_g - xh * sum_gx);
  }
  return dx;
}

/// Softmax over channels at every voxel, max-shifted.
template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  Tensor<T> p(logits.channels, logits.dims);
  const std::size_t n = logits.voxels();
  const int c = logits.channels;
  for (std::size_t v = 0; v < n; ++v) {
    T m = logits.at(0, v);
    for (int k = 1; k < c; ++k) m = std::max(m, logits.at(k, v));
    T sum{0};
    for (int k = 0; k < c; ++k) {
      const T e = std::exp(logits.at(k, v) - m);
      p.at(k, v) = e;
      sum += e;
    }
    for (int k = 0; k < c; ++k) p.at(k, v) /= sum;
  }
  return p;
}

/// dlogits = p * (dp - <p, dp>) per voxel.
template <class T>
Tensor<T> softmax_backward(const Tensor<T>& p, const Tensor<T>& dp) {
  Tensor<T> d(p.channels, p.dims);
  const std::size_t n = p.voxels();
  for (std::size_t v = 0; v < n; ++v) {
    T dot{0};
    for (int k = 0; k < p.channels; ++k) dot += p.at(k, v) * dp.at(k, v);
    for (int k = 0; k < p.channels; ++k) d.at(k, v) = p.at(k, v) * (dp.at(k, v) - dot);
  }
  return d;
}

}  // namespace cps3d::nn
