#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "cps3d/error.hpp"
#include "cps3d/fingerprint.hpp"
#include "cps3d/losses.hpp"
#include "cps3d/network.hpp"
#include "cps3d/planner.hpp"
#include "cps3d/preprocess.hpp"
#include "cps3d/tensor.hpp"
#include "cps3d/volume.hpp"

namespace cps3d {

inline constexpr double kDefaultStepFraction = 0.7;

struct TileLayout {
  Dims patch_size;
  double step_fraction = kDefaultStepFraction;
  std::array<std::vector<std::size_t>, 3> axis_positions;

  std::size_t tile_count() const {
    return axis_positions[0].size() * axis_positions[1].size() * axis_positions[2].size();
  }

  /// Tile corners in z-major order.
  std::vector<std::array<std::size_t, 3>> positions() const {
    std::vector<std::array<std::size_t, 3>> out;
    for (auto z : axis_positions[0])
      for (auto y : axis_positions[1])
        for (auto x : axis_positions[2]) out.push_back({z, y, x});
    return out;
  }
};

/// Per axis: one tile when L <= P, else n = ceil((L - P) / floor(step * P)) + 1
/// evenly spaced corners from 0 to L - P, rounded.
inline std::vector<std::size_t> axis_tile_positions(std::size_t L, std::size_t P, double step_fraction) {
  if (!(step_fraction > 0.0 && step_fraction <= 1.0))
    throw Error(ErrorCode::ConfigError, "step fraction must lie in (0, 1]");
  if (P == 0) throw Error(ErrorCode::ShapeMismatch, "patch extent must be positive");
  if (L <= P) return {0};
  const auto max_step = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(step_fraction * static_cast<double>(P))));
  const std::size_t span = L - P;
  const std::size_t n = (span + max_step - 1) / max_step + 1;
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<std::size_t>(
        std::llround(static_cast<double>(i) * static_cast<double>(span) / static_cast<double>(n - 1)));
  return out;
}

inline TileLayout tile_positions(Dims volume, Dims patch, double step_fraction = kDefaultStepFraction) {
  TileLayout t;
  t.patch_size = patch;
  t.step_fraction = step_fraction;
  for (std::size_t a = 0; a < 3; ++a) t.axis_positions[a] = axis_tile_positions(volume[a], patch[a], step_fraction);
  return t;
}

/// Centre-peaked Gaussian with sigma = patch / 8 per axis, scaled to max 1 and
/// clamped below at 1e-3.
inline std::vector<double> gaussian_importance(Dims patch) {
  std::array<std::vector<double>, 3> axis;
  for (std::size_t a = 0; a < 3; ++a) {
    const double sigma = static_cast<double>(patch[a]) / 8.0;
    const double centre = (static_cast<double>(patch[a]) - 1.0) / 2.0;
    axis[a].resize(patch[a]);
    for (std::size_t i = 0; i < patch[a]; ++i) {
      const double d = static_cast<double>(i) - centre;
      axis[a][i] = std::exp(-d * d / (2.0 * sigma * sigma));
    }
  }
  std::vector<double> w(patch.count());
  double peak = 0.0;
  std::size_t o = 0;
  for (std::size_t z = 0; z < patch.z; ++z)
    for (std::size_t y = 0; y < patch.y; ++y)
      for (std::size_t x = 0; x < patch.x; ++x, ++o) peak = std::max(peak, w[o] = axis[0][z] * axis[1][y] * axis[2][x]);
  for (auto& v : w) v = std::max(v / peak, 1e-3);
  return w;
}

/// Any callable mapping a (1, patch) input tensor to the finest-level
/// (num_classes, patch) probabilities.
using TilePredictor = std::function<ConfidenceMap<float>(const Tensor<float>&)>;

inline TilePredictor network_predictor(const Network<float>& net, const NetParams<float>& params) {
  return [&net, &params](const Tensor<float>& x) { return net.forward(params, x).front(); };
}

/// Gaussian-weighted aggregation of tile predictions. Volumes smaller than the
/// patch are zero padded symmetrically and cropped back. Accumulation follows
/// layout order, so the result is deterministic.
inline ConfidenceMap<float> sliding_window_predict(const TilePredictor& predict, const Image& volume, Dims patch,
                                                   int num_classes, double step_fraction = kDefaultStepFraction,
                                                   std::size_t* forward_calls = nullptr) {
  validate_grid(volume);
  Dims padded;
  std::array<std::size_t, 3> before{};
  for (std::size_t a = 0; a < 3; ++a) {
    padded[a] = std::max(volume.dims[a], patch[a]);
    before[a] = (padded[a] - volume.dims[a]) / 2;
  }
  const TileLayout layout = tile_positions(padded, patch, step_fraction);
  const auto weight = gaussian_importance(patch);
  const std::size_t nv = padded.count();
  std::vector<double> num(static_cast<std::size_t>(num_classes) * nv, 0.0), den(nv, 0.0);

  Tensor<float> tile(1, patch);
  for (const auto& corner : layout.positions()) {
    std::size_t o = 0;
    for (std::size_t z = 0; z < patch.z; ++z)
      for (std::size_t y = 0; y < patch.y; ++y)
        for (std::size_t x = 0; x < patch.x; ++x, ++o) {
          const std::array<std::size_t, 3> p{corner[0] + z, corner[1] + y, corner[2] + x};
          bool inside = true;
          std::array<std::size_t, 3> src{};
          for (std::size_t a = 0; a < 3; ++a) {
            if (p[a] < before[a] || p[a] >= before[a] + volume.dims[a]) inside = false;
            else src[a] = p[a] - before[a];
          }
          tile.data[o] = inside ? volume(src[0], src[1], src[2]) : 0.0f;
        }
    const ConfidenceMap<float> probs = predict(tile);
    if (forward_calls) ++*forward_calls;
    if (probs.channels != num_classes || probs.dims != patch)
      throw Error(ErrorCode::ShapeMismatch, "tile predictor returned the wrong shape");
    o = 0;
    for (std::size_t z = 0; z < patch.z; ++z)
      for (std::size_t y = 0; y < patch.y; ++y)
        for (std::size_t x = 0; x < patch.x; ++x, ++o) {
          const std::size_t v = padded.index(corner[0] + z, corner[1] + y, corner[2] + x);
          den[v] += weight[o];
          for (int c = 0; c < num_classes; ++c)
            num[static_cast<std::size_t>(c) * nv + v] += weight[o] * static_cast<double>(probs.at(c, o));
        }
  }

  ConfidenceMap<float> out(num_classes, volume.dims);
  std::size_t o = 0;
  for (std::size_t z = 0; z < volume.dims.z; ++z)
    for (std::size_t y = 0; y < volume.dims.y; ++y)
      for (std::size_t x = 0; x < volume.dims.x; ++x, ++o) {
        const std::size_t v = padded.index(z + before[0], y + before[1], x + before[2]);
        for (int c = 0; c < num_classes; ++c)
          out.at(c, o) = static_cast<float>(num[static_cast<std::size_t>(c) * nv + v] / den[v]);
      }
  return out;
}

enum class InferenceMode { normal, fast };

inline InferenceMode parse_inference_mode(const std::string& s) {
  if (s == "normal") return InferenceMode::normal;
  if (s == "fast") return InferenceMode::fast;
  throw Error(ErrorCode::ConfigError, "mode must be normal or fast, got '" + s + "'");
}

/// Mirrors every channel of t along the axes set in mask (bit a = axis a).
inline void mirror_tensor(Tensor<float>& t, unsigned mask) {
  for (std::size_t a = 0; a < 3; ++a) {
    if (!(mask & (1u << a))) continue;
    for (int c = 0; c < t.channels; ++c) {
      Image g(t.dims, Spacing{1, 1, 1});
      std::copy(t.channel(c), t.channel(c) + t.voxels(), g.values.begin());
      mirror_axis(g, a);
      std::copy(g.values.begin(), g.values.end(), t.channel(c));
    }
  }
}

/// Normal mode averages the sliding-window prediction over every mirror
/// combination of the axes along which the patch is longer than one voxel
/// (8 passes for 3D plans, 4 for 2D).
inline ConfidenceMap<float> tta_predict(const TilePredictor& predict, const Image& volume, Dims patch, int num_classes,
                                        InferenceMode mode, double step_fraction = kDefaultStepFraction,
                                        std::size_t* forward_calls = nullptr, std::size_t* passes = nullptr) {
  if (mode == InferenceMode::fast) {
    if (passes) *passes += 1;
    return sliding_window_predict(predict, volume, patch, num_classes, step_fraction, forward_calls);
  }
  unsigned axes = 0;
  for (std::size_t a = 0; a < 3; ++a)
    if (patch[a] > 1) axes |= 1u << a;
  ConfidenceMap<float> acc(num_classes, volume.dims);
  std::vector<double> sum(acc.size(), 0.0);
  int count = 0;
  for (unsigned mask = 0; mask < 8; ++mask) {
    if ((mask & ~axes) != 0) continue;
    Image flipped = volume;
    for (std::size_t a = 0; a < 3; ++a)
      if (mask & (1u << a)) mirror_axis(flipped, a);
    ConfidenceMap<float> p = sliding_window_predict(predict, flipped, patch, num_classes, step_fraction, forward_calls);
    mirror_tensor(p, mask);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += static_cast<double>(p.data[i]);
    ++count;
    if (passes) *passes += 1;
  }
  for (std::size_t i = 0; i < sum.size(); ++i) acc.data[i] = static_cast<float>(sum[i] / count);
  return acc;
}

/// Keeps, for each foreground class, only its largest 6-connected component.
inline LabelMap keep_largest_components(const LabelMap& in) {
  LabelMap out = in;
  const Dims d = in.dims;
  std::vector<int> comp(d.count(), -1);
  std::vector<std::size_t> sizes;
  std::vector<std::uint8_t> comp_class;
  for (std::size_t s = 0; s < d.count(); ++s) {
    if (in.values[s] == 0 || comp[s] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    const std::uint8_t cls = in.values[s];
    std::size_t n = 0;
    std::queue<std::size_t> q;
    q.push(s);
    comp[s] = id;
    while (!q.empty()) {
      const std::size_t v = q.front();
      q.pop();
      ++n;
      const std::size_t z = v / (d.y * d.x), y = (v / d.x) % d.y, x = v % d.x;
      auto visit = [&](std::size_t zz, std::size_t yy, std::size_t xx) {
        const std::size_t u = d.index(zz, yy, xx);
        if (comp[u] < 0 && in.values[u] == cls) {
          comp[u] = id;
          q.push(u);
        }
      };
      if (z > 0) visit(z - 1, y, x);
      if (z + 1 < d.z) visit(z + 1, y, x);
      if (y > 0) visit(z, y - 1, x);
      if (y + 1 < d.y) visit(z, y + 1, x);
      if (x > 0) visit(z, y, x - 1);
      if (x + 1 < d.x) visit(z, y, x + 1);
    }
    sizes.push_back(n);
    comp_class.push_back(cls);
  }
  std::vector<int> best(256, -1);
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    int& b = best[comp_class[i]];
    if (b < 0 || sizes[i] > sizes[static_cast<std::size_t>(b)]) b = static_cast<int>(i);
  }
  for (std::size_t v = 0; v < d.count(); ++v)
    if (comp[v] >= 0 && best[in.values[v]] != comp[v]) out.values[v] = 0;
  return out;
}

struct InferenceOptions {
  InferenceMode mode = InferenceMode::normal;
  std::optional<SpacingRule> force_spacing;
  bool postprocess_cc = false;
  double step_fraction = kDefaultStepFraction;
};

struct InferenceStats {
  Spacing spacing{};
  Dims resampled_dims;
  std::size_t forward_calls = 0;
  std::size_t passes = 0;
};

/// Full-case prediction returning labels on the raw image's grid.
inline LabelMap predict_case(const TilePredictor& predict, const Image& raw, const Plan& plan, const Fingerprint& fp,
                             const InferenceOptions& opts = {}, InferenceStats* stats = nullptr) {
  validate_grid(raw);
  const Spacing target = opts.force_spacing ? enforced_spacing(raw.dims.z, raw.spacing, *opts.force_spacing)
                                            : plan.target_spacing;
  const Image img = normalize(resample(raw, target, Interp::linear), fp);
  InferenceStats local;
  InferenceStats& st = stats ? *stats : local;
  st.spacing = target;
  st.resampled_dims = img.dims;
  const ConfidenceMap<float> probs = tta_predict(predict, img, plan.patch_size, plan.num_classes, opts.mode,
                                                 opts.step_fraction, &st.forward_calls, &st.passes);
  LabelMap seg = make_pseudo_label(probs);
  seg.spacing = target;
  LabelMap back = resample_to_dims(seg, raw.dims, raw.spacing, Interp::nearest);
  if (opts.postprocess_cc) back = keep_largest_components(back);
  return back;
}

inline LabelMap predict_case(const Network<float>& net, const NetParams<float>& params, const Image& raw,
                             const Plan& plan, const Fingerprint& fp, const InferenceOptions& opts = {},
                             InferenceStats* stats = nullptr) {
  return predict_case(network_predictor(net, params), raw, plan, fp, opts, stats);
}

}  // namespace cps3d
