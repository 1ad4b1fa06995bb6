#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "cps3d/error.hpp"
#include "cps3d/preprocess.hpp"
#include "cps3d/tensor.hpp"
#include "cps3d/volume.hpp"

namespace cps3d {

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kLogClamp = 1e-12;

struct DiceCe {
  double dice = 0.0;
  double ce = 0.0;
  double total() const { return dice + ce; }
};

/// Soft dice over foreground classes plus voxel-mean cross-entropy for one
/// sample. When grad is non-null, grad_scale * d(loss)/d(pred) is added to it.
template <class T>
DiceCe dice_ce(const ConfidenceMap<T>& pred, const LabelMap& target, Tensor<T>* grad = nullptr,
               double grad_scale = 1.0) {
  if (pred.dims != target.dims) throw Error(ErrorCode::ShapeMismatch, "prediction and target dims differ");
  const int C = pred.channels;
  if (C < 2) throw Error(ErrorCode::ShapeMismatch, "need at least two classes");
  const std::size_t n = pred.voxels();
  for (auto t : target.values)
    if (static_cast<int>(t) >= C) throw Error(ErrorCode::InvalidTarget, "target class " + std::to_string(t) + " >= " + std::to_string(C));
  if (grad && (grad->channels != C || grad->dims != pred.dims))
    throw Error(ErrorCode::ShapeMismatch, "gradient buffer shape");

  // Voxel sums run in long double so the loss stays smooth to a few ulps,
  // which finite-difference checks in double depend on.
  using Acc = long double;
  DiceCe out;
  Acc ce = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const double p = static_cast<double>(pred.at(target.values[v], v));
    ce -= std::log(std::max(p, kLogClamp));
  }
  out.ce = static_cast<double>(ce / static_cast<Acc>(n));

  std::vector<double> inter(static_cast<std::size_t>(C), 0.0), psum(static_cast<std::size_t>(C), 0.0),
      tsum(static_cast<std::size_t>(C), 0.0);
  for (int c = 1; c < C; ++c) {
    const T* pc = pred.channel(c);
    Acc I = 0.0, P = 0.0, Tt = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      const Acc p = static_cast<Acc>(pc[v]);
      const bool hit = target.values[v] == c;
      P += p;
      if (hit) {
        I += p;
        Tt += 1.0;
      }
    }
    inter[static_cast<std::size_t>(c)] = static_cast<double>(I);
    psum[static_cast<std::size_t>(c)] = static_cast<double>(P);
    tsum[static_cast<std::size_t>(c)] = static_cast<double>(Tt);
  }
  double dice_mean = 0.0;
  for (int c = 1; c < C; ++c) {
    const auto k = static_cast<std::size_t>(c);
    dice_mean += (2.0 * inter[k] + kDiceSmooth) / (psum[k] + tsum[k] + kDiceSmooth);
  }
  out.dice = 1.0 - dice_mean / static_cast<double>(C - 1);

  if (grad) {
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t v = 0; v < n; ++v) {
      const int t = target.values[v];
      const double p = static_cast<double>(pred.at(t, v));
      if (p > kLogClamp) grad->at(t, v) += static_cast<T>(grad_scale * (-inv_n / p));
    }
    const double dice_w = -1.0 / static_cast<double>(C - 1);
    for (int c = 1; c < C; ++c) {
      const auto k = static_cast<std::size_t>(c);
      const double S = psum[k] + tsum[k] + kDiceSmooth;
      const double num = 2.0 * inter[k] + kDiceSmooth;
      const double g_hit = grad_scale * dice_w * (2.0 * S - num) / (S * S);
      const double g_miss = grad_scale * dice_w * (-num) / (S * S);
      T* gc = grad->channel(c);
      for (std::size_t v = 0; v < n; ++v) gc[v] += static_cast<T>(target.values[v] == c ? g_hit : g_miss);
    }
  }
  return out;
}

/// Hard argmax per voxel, ties to the lowest class index. The result is a
/// constant target: nothing differentiates through it.
template <class T>
LabelMap make_pseudo_label(const ConfidenceMap<T>& conf) {
  LabelMap out(conf.dims, Spacing{1.0, 1.0, 1.0});
  for (std::size_t v = 0; v < conf.voxels(); ++v) {
    int best = 0;
    T best_p = conf.at(0, v);
    for (int c = 1; c < conf.channels; ++c)
      if (conf.at(c, v) > best_p) {
        best_p = conf.at(c, v);
        best = c;
      }
    out.values[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Deep-supervision weights 2^-i normalized to sum to one.
inline std::vector<double> ds_weights(std::size_t heads) {
  std::vector<double> w(heads);
  double sum = 0.0;
  for (std::size_t i = 0; i < heads; ++i) sum += (w[i] = std::ldexp(1.0, -static_cast<int>(i)));
  for (auto& v : w) v /= sum;
  return w;
}

/// Targets for each head: the finest map itself, then nearest-neighbour
/// downsamples to each coarser head's grid.
template <class T>
std::vector<LabelMap> label_pyramid(const LabelMap& finest, const std::vector<ConfidenceMap<T>>& outs) {
  std::vector<LabelMap> pyr;
  for (const auto& o : outs) {
    if (o.dims == finest.dims)
      pyr.push_back(finest);
    else
      pyr.push_back(resample_to_dims(finest, o.dims, finest.spacing, Interp::nearest));
  }
  return pyr;
}

/// Deep-supervision weighted dice_ce of one network's heads. Gradients for
/// head i get weight grad_scale * w_i.
template <class T>
double ds_dice_ce(const std::vector<ConfidenceMap<T>>& outs, const std::vector<LabelMap>& targets,
                  std::vector<Tensor<T>>* grads = nullptr, double grad_scale = 1.0) {
  if (outs.size() != targets.size()) throw Error(ErrorCode::ShapeMismatch, "one target per head expected");
  const auto w = ds_weights(outs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i)
    total += w[i] * dice_ce(outs[i], targets[i], grads ? &(*grads)[i] : nullptr, grad_scale * w[i]).total();
  return total;
}

/// Supervised term for one labeled sample: both networks against ground truth.
template <class T>
double sup_loss(const std::vector<ConfidenceMap<T>>& out1, const std::vector<ConfidenceMap<T>>& out2,
                const std::optional<LabelMap>& gt) {
  if (!gt) throw Error(ErrorCode::MissingGroundTruth, "supervised loss needs ground truth");
  return ds_dice_ce(out1, label_pyramid(*gt, out1)) + ds_dice_ce(out2, label_pyramid(*gt, out2));
}

/// Cross-pseudo supervision term for one sample: each network is supervised
/// by the other's finest-level argmax.
template <class T>
double cps_loss(const std::vector<ConfidenceMap<T>>& out1, const std::vector<ConfidenceMap<T>>& out2) {
  const LabelMap y1 = make_pseudo_label(out1.front());
  const LabelMap y2 = make_pseudo_label(out2.front());
  return ds_dice_ce(out1, label_pyramid(y2, out1)) + ds_dice_ce(out2, label_pyramid(y1, out2));
}

/// Linear ramp of the CPS weight from 0 to lambda_max at ramp_end_epoch.
struct LambdaSchedule {
  double lambda_max = 0.5;
  int ramp_end_epoch = 20;

  double at(int epoch) const {
    if (epoch <= 0 || lambda_max == 0.0) return 0.0;
    if (epoch >= ramp_end_epoch) return lambda_max;
    return lambda_max * (static_cast<double>(epoch) / static_cast<double>(ramp_end_epoch));
  }

  friend bool operator==(const LambdaSchedule&, const LambdaSchedule&) = default;
};

struct LossReport {
  double l_sup = 0.0;
  double l_cps_labeled = 0.0;
  double l_cps_unlabeled = 0.0;
  double lambda = 0.0;
  double total = 0.0;

  friend bool operator==(const LossReport&, const LossReport&) = default;
};

inline LossReport total_loss(double sup, double cps_l, double cps_u, int epoch, const LambdaSchedule& sched) {
  LossReport r;
  r.l_sup = sup;
  r.l_cps_labeled = cps_l;
  r.l_cps_unlabeled = cps_u;
  r.lambda = sched.at(epoch);
  r.total = sup + r.lambda * (cps_l + cps_u);
  return r;
}

}  // namespace cps3d
