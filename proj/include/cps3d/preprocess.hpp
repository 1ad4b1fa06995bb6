#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <type_traits>
#include <vector>

#include <spdlog/spdlog.h>

#include "cps3d/error.hpp"
#include "cps3d/fingerprint.hpp"
#include "cps3d/volume.hpp"

namespace cps3d {

using Rng = std::mt19937_64;

enum class Interp { nearest, linear };

namespace detail {

struct AxisSample {
  std::size_t i0 = 0, i1 = 0;
  double t = 0.0;  // weight of i1
};

/// Align-centers mapping: output voxel centre i maps to input coordinate
/// (i + 0.5) * n_in / n_out - 0.5, clamped to the input grid.
inline std::vector<AxisSample> axis_samples(std::size_t n_in, std::size_t n_out, Interp order) {
  std::vector<AxisSample> out(n_out);
  const double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
  const double hi = static_cast<double>(n_in - 1);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double c = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, hi);
    if (order == Interp::nearest) {
      const auto k = static_cast<std::size_t>(std::min(std::floor(c + 0.5), hi));
      out[i] = {k, k, 0.0};
    } else {
      const auto k = static_cast<std::size_t>(std::floor(c));
      out[i] = {k, std::min(k + 1, n_in - 1), c - static_cast<double>(k)};
    }
  }
  return out;
}

}  // namespace detail

/// Resamples onto an explicit output grid. Labels only support nearest.
template <class T>
Grid<T> resample_to_dims(const Grid<T>& in, Dims out_dims, Spacing out_spacing, Interp order) {
  if constexpr (std::is_integral_v<T>) {
    if (order != Interp::nearest)
      throw Error(ErrorCode::InterpolationOnLabels, "label maps must be resampled with nearest neighbour");
  }
  validate_grid(in);
  if (out_dims.count() == 0 || !valid_spacing(out_spacing))
    throw Error(ErrorCode::InvalidVolume, "resample target grid invalid");
  const auto sz = detail::axis_samples(in.dims.z, out_dims.z, order);
  const auto sy = detail::axis_samples(in.dims.y, out_dims.y, order);
  const auto sx = detail::axis_samples(in.dims.x, out_dims.x, order);
  Grid<T> out(out_dims, out_spacing);
  std::size_t o = 0;
  for (std::size_t z = 0; z < out_dims.z; ++z)
    for (std::size_t y = 0; y < out_dims.y; ++y)
      for (std::size_t x = 0; x < out_dims.x; ++x, ++o) {
        if (order == Interp::nearest) {
          out.values[o] = in(sz[z].i0, sy[y].i0, sx[x].i0);
          continue;
        }
        const auto& a = sz[z];
        const auto& b = sy[y];
        const auto& c = sx[x];
        auto lerp_x = [&](std::size_t iz, std::size_t iy) {
          return (1.0 - c.t) * in(iz, iy, c.i0) + c.t * in(iz, iy, c.i1);
        };
        const double v0 = (1.0 - b.t) * lerp_x(a.i0, b.i0) + b.t * lerp_x(a.i0, b.i1);
        const double v1 = (1.0 - b.t) * lerp_x(a.i1, b.i0) + b.t * lerp_x(a.i1, b.i1);
        out.values[o] = static_cast<T>((1.0 - a.t) * v0 + a.t * v1);
      }
  return out;
}

/// Output dims along each axis: round(n * spacing / target), at least 1.
inline Dims resampled_dims(Dims in, const Spacing& spacing, const Spacing& target) {
  Dims out;
  for (std::size_t a = 0; a < 3; ++a)
    out[a] = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(static_cast<double>(in[a]) * spacing[a] / target[a])));
  return out;
}

template <class T>
Grid<T> resample(const Grid<T>& in, const Spacing& target_spacing, Interp order) {
  if (!valid_spacing(target_spacing)) throw Error(ErrorCode::InvalidVolume, "target spacing must be positive");
  if constexpr (std::is_integral_v<T>) {
    if (order != Interp::nearest)
      throw Error(ErrorCode::InterpolationOnLabels, "label maps must be resampled with nearest neighbour");
  }
  return resample_to_dims(in, resampled_dims(in.dims, in.spacing, target_spacing), target_spacing, order);
}

/// Clip to [p_low, p_high], then standardize with the fingerprint mean/std.
/// A zero std falls back to divisor 1 with a warning.
inline Image normalize(const Image& in, const Fingerprint& fp, bool* degenerate = nullptr) {
  double divisor = fp.std;
  const bool bad = !(fp.std > 0.0);
  if (bad) {
    spdlog::warn("DegenerateStd: fingerprint std is {}, normalizing with divisor 1", fp.std);
    divisor = 1.0;
  }
  if (degenerate) *degenerate = bad;
  Image out = in;
  for (auto& v : out.values)
    v = static_cast<float>((std::clamp<double>(v, fp.p_low, fp.p_high) - fp.mean) / divisor);
  return out;
}

/// Training sample cut from a case. Labels are absent for unlabeled cases.
struct Patch {
  Image image;
  std::optional<LabelMap> labels;
  std::size_t case_id = 0;
  /// Corner in the original (unpadded) case grid; negative when padded.
  std::array<std::ptrdiff_t, 3> corner{0, 0, 0};
};

struct AugmentConfig {
  double mirror_prob = 0.5;
  double scale_prob = 0.5;
  double noise_prob = 0.5;
  double scale_low = 0.9;
  double scale_high = 1.1;
  double noise_sigma_max = 0.1;
  double oversample_foreground = 0.33;

  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

/// Cuts a patch_size box. Cases smaller than the patch are zero padded
/// symmetrically (labels with class 0). With probability oversample_fg (and
/// labels containing foreground) the patch is centred on a random foreground
/// voxel, otherwise the corner is uniform over all valid positions.
inline Patch sample_patch(const Image& image, const LabelMap* labels, Dims patch, Rng& rng,
                          double oversample_fg, std::size_t case_id = 0) {
  validate_grid(image);
  if (labels && labels->dims != image.dims) throw Error(ErrorCode::ShapeMismatch, "image/label dims differ");
  std::array<std::size_t, 3> padded{}, pad_before{};
  for (std::size_t a = 0; a < 3; ++a) {
    padded[a] = std::max(image.dims[a], patch[a]);
    pad_before[a] = (padded[a] - image.dims[a]) / 2;
  }

  std::array<std::size_t, 3> corner{};  // in padded coordinates
  const bool want_fg = labels != nullptr && uniform01(rng) < oversample_fg;
  bool placed = false;
  if (want_fg) {
    std::vector<std::size_t> fg;
    for (std::size_t i = 0; i < labels->values.size(); ++i)
      if (labels->values[i] != 0) fg.push_back(i);
    if (!fg.empty()) {
      const std::size_t pick = fg[std::uniform_int_distribution<std::size_t>(0, fg.size() - 1)(rng)];
      const std::array<std::size_t, 3> centre{pick / (image.dims.y * image.dims.x),
                                              (pick / image.dims.x) % image.dims.y, pick % image.dims.x};
      for (std::size_t a = 0; a < 3; ++a) {
        const auto c = static_cast<std::ptrdiff_t>(centre[a] + pad_before[a]) - static_cast<std::ptrdiff_t>(patch[a] / 2);
        corner[a] = static_cast<std::size_t>(
            std::clamp<std::ptrdiff_t>(c, 0, static_cast<std::ptrdiff_t>(padded[a] - patch[a])));
      }
      placed = true;
    }
  }
  if (!placed) {
    for (std::size_t a = 0; a < 3; ++a)
      corner[a] = std::uniform_int_distribution<std::size_t>(0, padded[a] - patch[a])(rng);
  }

  Patch out;
  out.case_id = case_id;
  for (std::size_t a = 0; a < 3; ++a)
    out.corner[a] = static_cast<std::ptrdiff_t>(corner[a]) - static_cast<std::ptrdiff_t>(pad_before[a]);
  out.image = Image(patch, image.spacing, 0.0f);
  if (labels) out.labels = LabelMap(patch, image.spacing, std::uint8_t{0});
  for (std::size_t z = 0; z < patch.z; ++z) {
    const auto sz = out.corner[0] + static_cast<std::ptrdiff_t>(z);
    if (sz < 0 || sz >= static_cast<std::ptrdiff_t>(image.dims.z)) continue;
    for (std::size_t y = 0; y < patch.y; ++y) {
      const auto sy = out.corner[1] + static_cast<std::ptrdiff_t>(y);
      if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(image.dims.y)) continue;
      for (std::size_t x = 0; x < patch.x; ++x) {
        const auto sx = out.corner[2] + static_cast<std::ptrdiff_t>(x);
        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(image.dims.x)) continue;
        const std::size_t src = image.dims.index(static_cast<std::size_t>(sz), static_cast<std::size_t>(sy),
                                                 static_cast<std::size_t>(sx));
        out.image(z, y, x) = image.values[src];
        if (labels) (*out.labels)(z, y, x) = labels->values[src];
      }
    }
  }
  return out;
}

template <class T>
void mirror_axis(Grid<T>& g, std::size_t axis) {
  const Dims d = g.dims;
  Grid<T> src = g;
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        const std::size_t mz = axis == 0 ? d.z - 1 - z : z;
        const std::size_t my = axis == 1 ? d.y - 1 - y : y;
        const std::size_t mx = axis == 2 ? d.x - 1 - x : x;
        g(z, y, x) = src(mz, my, mx);
      }
}

/// Per-axis mirroring (image and labels together), then intensity scaling and
/// Gaussian noise on the image only. Every decision is drawn from rng in a
/// fixed order whether or not it fires.
inline Patch augment(Patch p, Rng& rng, const AugmentConfig& cfg) {
  for (std::size_t axis = 0; axis < 3; ++axis) {
    if (uniform01(rng) < cfg.mirror_prob) {
      mirror_axis(p.image, axis);
      if (p.labels) mirror_axis(*p.labels, axis);
    }
  }
  if (uniform01(rng) < cfg.scale_prob) {
    const auto factor = static_cast<float>(std::uniform_real_distribution<double>(cfg.scale_low, cfg.scale_high)(rng));
    for (auto& v : p.image.values) v *= factor;
  }
  if (uniform01(rng) < cfg.noise_prob) {
    const double sigma = std::uniform_real_distribution<double>(0.0, cfg.noise_sigma_max)(rng);
    if (sigma > 0.0) {
      std::normal_distribution<double> noise(0.0, sigma);
      for (auto& v : p.image.values) v += static_cast<float>(noise(rng));
    }
  }
  return p;
}

}  // namespace cps3d
