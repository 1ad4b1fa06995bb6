#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cps3d/error.hpp"
#include "cps3d/fingerprint.hpp"
#include "cps3d/kv.hpp"
#include "cps3d/volume.hpp"

namespace cps3d {

enum class Dimensionality { two_d, three_d };

using Stride = std::array<int, 3>;

/// Training/inference configuration derived from a fingerprint. A 2D plan is a
/// 3D plan with z extent 1 and unit z strides.
struct Plan {
  Dimensionality dimensionality = Dimensionality::three_d;
  Spacing target_spacing{1.0, 1.0, 1.0};
  Dims patch_size{16, 16, 16};
  /// One stride triple per downsampling step; the first encoder stage never
  /// downsamples, so levels() == pool_schedule.size() + 1.
  std::vector<Stride> pool_schedule;
  int base_channels = 4;
  int max_channels = 64;
  int batch_labeled = 2;
  int batch_unlabeled = 2;
  int num_classes = 2;

  int levels() const { return static_cast<int>(pool_schedule.size()) + 1; }
  int channels_at(int level) const {
    long long c = base_channels;
    for (int i = 0; i < level && c < max_channels; ++i) c *= 2;
    return static_cast<int>(std::min<long long>(c, max_channels));
  }

  friend bool operator==(const Plan&, const Plan&) = default;
};

/// Halving rule: at each step an axis is halved while its current extent is at
/// least 8; the schedule ends once no axis halves. Returns nullopt when some
/// halving would hit an odd extent.
inline std::optional<std::vector<Stride>> make_pool_schedule(Dims patch) {
  std::vector<Stride> schedule;
  Dims cur = patch;
  for (;;) {
    Stride s{1, 1, 1};
    bool any = false;
    for (std::size_t a = 0; a < 3; ++a) {
      if (cur[a] >= 8) {
        if (cur[a] % 2 != 0) return std::nullopt;
        s[a] = 2;
        any = true;
      }
    }
    if (!any) break;
    for (std::size_t a = 0; a < 3; ++a) cur[a] /= static_cast<std::size_t>(s[a]);
    schedule.push_back(s);
  }
  return schedule;
}

inline Dims apply_schedule(Dims patch, const std::vector<Stride>& schedule, std::size_t steps) {
  for (std::size_t i = 0; i < steps && i < schedule.size(); ++i)
    for (std::size_t a = 0; a < 3; ++a) patch[a] /= static_cast<std::size_t>(schedule[i][a]);
  return patch;
}

inline Dims bottleneck(Dims patch, const std::vector<Stride>& schedule) {
  return apply_schedule(patch, schedule, schedule.size());
}

/// Checks divisibility and the bottleneck >= 4 rule. Axes of extent 1 (the z
/// axis of 2D plans) are exempt from the bottleneck bound.
inline bool schedule_fits(Dims patch, const std::vector<Stride>& schedule) {
  Dims cur = patch;
  for (const auto& s : schedule)
    for (std::size_t a = 0; a < 3; ++a) {
      if (s[a] != 1 && s[a] != 2) return false;
      if (cur[a] % static_cast<std::size_t>(s[a]) != 0) return false;
      cur[a] /= static_cast<std::size_t>(s[a]);
    }
  for (std::size_t a = 0; a < 3; ++a)
    if (patch[a] > 1 && cur[a] < 4) return false;
  return true;
}

struct PlanConstraints {
  std::size_t max_patch_voxels = 4096;
  int base_channels = 4;
  int max_channels = 64;
  int batch = 2;
  int num_classes = 2;
  /// Skips the patch search and uses this box (still validated).
  std::optional<Dims> patch_override;
};

inline Plan make_plan(const Fingerprint& fp, Dimensionality dim, const PlanConstraints& c) {
  if (!valid_spacing(fp.median_spacing)) throw Error(ErrorCode::InvalidPlan, "fingerprint spacing invalid");
  if (c.base_channels < 1 || c.max_channels < c.base_channels || c.batch < 1 || c.num_classes < 2)
    throw Error(ErrorCode::InvalidPlan, "constraints out of range");
  Plan plan;
  plan.dimensionality = dim;
  plan.target_spacing = fp.median_spacing;
  plan.base_channels = c.base_channels;
  plan.max_channels = c.max_channels;
  plan.batch_labeled = c.batch;
  plan.batch_unlabeled = c.batch;
  plan.num_classes = c.num_classes;

  auto accept = [&](Dims patch) -> bool {
    if (dim == Dimensionality::two_d && patch.z != 1) return false;
    if (patch.count() > c.max_patch_voxels) return false;
    auto sched = make_pool_schedule(patch);
    if (!sched || !schedule_fits(patch, *sched)) return false;
    plan.patch_size = patch;
    plan.pool_schedule = std::move(*sched);
    return true;
  };

  if (c.patch_override) {
    if (!accept(*c.patch_override))
      throw Error(ErrorCode::InfeasiblePlan, "requested patch violates the divisibility or voxel budget");
    return plan;
  }
  const bool is2d = dim == Dimensionality::two_d;
  auto edge = static_cast<std::size_t>(is2d ? std::sqrt(static_cast<double>(c.max_patch_voxels))
                                            : std::cbrt(static_cast<double>(c.max_patch_voxels)));
  // Guard against floating-point roots landing one below or above the exact edge.
  while (is2d ? (edge + 1) * (edge + 1) <= c.max_patch_voxels
              : (edge + 1) * (edge + 1) * (edge + 1) <= c.max_patch_voxels)
    ++edge;
  for (; edge >= 4; --edge) {
    if (accept(is2d ? Dims{1, edge, edge} : Dims{edge, edge, edge})) return plan;
  }
  throw Error(ErrorCode::InfeasiblePlan,
              "no patch fits " + std::to_string(c.max_patch_voxels) + " voxels");
}

/// Manual inference spacing override keyed on slice count.
struct SpacingRule {
  Spacing s_default{0.5, 0.75, 0.75};  // (z, y, x) mm
  std::size_t s_low = 150;
  std::size_t s_high = 600;
  double z_floor = 0.8;
};

inline Spacing enforced_spacing(std::size_t num_slices, const Spacing& original, const SpacingRule& rule = {}) {
  Spacing out = rule.s_default;
  if (num_slices < rule.s_low) {
    out[0] = original[0];
  } else if (num_slices > rule.s_high) {
    const double factor = std::max(rule.z_floor, static_cast<double>(rule.s_high) / static_cast<double>(num_slices));
    out[0] = factor * original[0];
  }
  return out;
}

// ---- plan.txt ---------------------------------------------------------------

namespace detail {

inline std::string join_triple(double a, double b, double c) {
  return kv::format_double(a) + "," + kv::format_double(b) + "," + kv::format_double(c);
}

}  // namespace detail

inline kv::Table to_table(const Plan& p) {
  std::string sched;
  for (std::size_t i = 0; i < p.pool_schedule.size(); ++i) {
    if (i) sched += ";";
    sched += std::to_string(p.pool_schedule[i][0]) + "x" + std::to_string(p.pool_schedule[i][1]) + "x" +
             std::to_string(p.pool_schedule[i][2]);
  }
  return {{"dimensionality", p.dimensionality == Dimensionality::two_d ? "2D" : "3D"},
          {"target_spacing", detail::join_triple(p.target_spacing[0], p.target_spacing[1], p.target_spacing[2])},
          {"patch_size", std::to_string(p.patch_size.z) + "," + std::to_string(p.patch_size.y) + "," +
                             std::to_string(p.patch_size.x)},
          {"pool_schedule", sched.empty() ? "none" : sched},
          {"base_channels", std::to_string(p.base_channels)},
          {"max_channels", std::to_string(p.max_channels)},
          {"batch_labeled", std::to_string(p.batch_labeled)},
          {"batch_unlabeled", std::to_string(p.batch_unlabeled)},
          {"num_classes", std::to_string(p.num_classes)}};
}

inline Plan plan_from_table(const kv::Table& t) {
  kv::Reader r(t);
  Plan p;
  const auto& dim = r.str("dimensionality");
  if (dim == "2D")
    p.dimensionality = Dimensionality::two_d;
  else if (dim == "3D")
    p.dimensionality = Dimensionality::three_d;
  else
    throw Error(ErrorCode::ConfigError, "dimensionality must be 2D or 3D");
  auto ts = r.reals("target_spacing");
  auto ps = r.reals("patch_size");
  if (ts.size() != 3 || ps.size() != 3) throw Error(ErrorCode::ConfigError, "expected triples");
  p.target_spacing = {ts[0], ts[1], ts[2]};
  p.patch_size = {static_cast<std::size_t>(ps[0]), static_cast<std::size_t>(ps[1]), static_cast<std::size_t>(ps[2])};
  const auto& sched = r.str("pool_schedule");
  if (sched != "none") {
    std::stringstream ss(sched);
    std::string step;
    while (std::getline(ss, step, ';')) {
      Stride s{};
      if (std::sscanf(step.c_str(), "%dx%dx%d", &s[0], &s[1], &s[2]) != 3)
        throw Error(ErrorCode::ConfigError, "bad pool_schedule entry '" + step + "'");
      p.pool_schedule.push_back(s);
    }
  }
  p.base_channels = static_cast<int>(r.integer("base_channels"));
  p.max_channels = static_cast<int>(r.integer("max_channels"));
  p.batch_labeled = static_cast<int>(r.integer("batch_labeled"));
  p.batch_unlabeled = static_cast<int>(r.integer("batch_unlabeled"));
  p.num_classes = static_cast<int>(r.integer("num_classes"));
  r.reject_unused();
  if (!valid_spacing(p.target_spacing) || p.patch_size.count() == 0 || !schedule_fits(p.patch_size, p.pool_schedule) ||
      p.base_channels < 1 || p.max_channels < p.base_channels || p.batch_labeled < 1 ||
      p.batch_labeled != p.batch_unlabeled || p.num_classes < 2 || p.num_classes > 255)
    throw Error(ErrorCode::InvalidPlan, "plan file violates plan invariants");
  return p;
}

inline void write_plan(const Plan& p, const std::filesystem::path& path) { kv::write_file(to_table(p), path); }
inline Plan read_plan(const std::filesystem::path& path) { return plan_from_table(kv::read_file(path)); }

}  // namespace cps3d
