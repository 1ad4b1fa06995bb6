#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cps3d/error.hpp"
#include "cps3d/volume.hpp"

namespace cps3d {

inline constexpr double kDefaultNsdTolerance = 1.0;

namespace detail {

inline void check_pair(const LabelMap& pred, const LabelMap& gt) {
  if (pred.dims != gt.dims) throw Error(ErrorCode::ShapeMismatch, "prediction and reference dims differ");
  if (pred.values.size() != pred.dims.count() || gt.values.size() != gt.dims.count())
    throw Error(ErrorCode::ShapeMismatch, "voxel count does not match dims");
}

/// Mask voxels with at least one face neighbour outside the mask or outside
/// the volume.
inline std::vector<std::uint8_t> surface_mask(const LabelMap& m, int cls) {
  const Dims d = m.dims;
  std::vector<std::uint8_t> s(d.count(), 0);
  auto in = [&](std::size_t z, std::size_t y, std::size_t x) { return m(z, y, x) == cls; };
  std::size_t o = 0;
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x, ++o) {
        if (m.values[o] != cls) continue;
        const bool edge = z == 0 || y == 0 || x == 0 || z + 1 == d.z || y + 1 == d.y || x + 1 == d.x;
        s[o] = edge || !in(z - 1, y, x) || !in(z + 1, y, x) || !in(z, y - 1, x) || !in(z, y + 1, x) ||
                       !in(z, y, x - 1) || !in(z, y, x + 1)
                   ? 1
                   : 0;
      }
  return s;
}

/// Squared physical distance between two voxel centres.
inline double dist2(const std::array<std::ptrdiff_t, 3>& delta, const Spacing& sp) {
  double d2 = 0.0;
  for (std::size_t a = 0; a < 3; ++a) {
    const double v = static_cast<double>(delta[a]) * sp[a];
    d2 += v * v;
  }
  return d2;
}

/// Surface voxels of `from` that have a surface voxel of `to` within tol.
inline std::size_t count_within(const std::vector<std::uint8_t>& from, const std::vector<std::uint8_t>& to, Dims d,
                                const Spacing& sp, double tol) {
  std::array<std::ptrdiff_t, 3> reach{};
  for (std::size_t a = 0; a < 3; ++a)
    reach[a] = static_cast<std::ptrdiff_t>(std::min<double>(std::floor(tol / sp[a]), static_cast<double>(d[a])));
  const double tol2 = tol * tol;
  std::size_t hits = 0, o = 0;
  const auto Z = static_cast<std::ptrdiff_t>(d.z), Y = static_cast<std::ptrdiff_t>(d.y),
             X = static_cast<std::ptrdiff_t>(d.x);
  for (std::ptrdiff_t z = 0; z < Z; ++z)
    for (std::ptrdiff_t y = 0; y < Y; ++y)
      for (std::ptrdiff_t x = 0; x < X; ++x, ++o) {
        if (!from[o]) continue;
        bool found = false;
        for (std::ptrdiff_t dz = -reach[0]; dz <= reach[0] && !found; ++dz) {
          const auto zz = z + dz;
          if (zz < 0 || zz >= Z) continue;
          for (std::ptrdiff_t dy = -reach[1]; dy <= reach[1] && !found; ++dy) {
            const auto yy = y + dy;
            if (yy < 0 || yy >= Y) continue;
            for (std::ptrdiff_t dx = -reach[2]; dx <= reach[2]; ++dx) {
              const auto xx = x + dx;
              if (xx < 0 || xx >= X) continue;
              if (to[static_cast<std::size_t>((zz * Y + yy) * X + xx)] && dist2({dz, dy, dx}, sp) <= tol2) {
                found = true;
                break;
              }
            }
          }
        }
        if (found) ++hits;
      }
  return hits;
}

}  // namespace detail

/// 2|A∩B| / (|A|+|B|); both empty scores 1, exactly one empty scores 0.
inline double dsc(const LabelMap& pred, const LabelMap& gt, int cls) {
  detail::check_pair(pred, gt);
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const bool p = pred.values[i] == cls, g = gt.values[i] == cls;
    a += p;
    b += g;
    both += p && g;
  }
  if (a == 0 && b == 0) return 1.0;
  if (a == 0 || b == 0) return 0.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

/// Normalized surface distance on 6-connected voxel boundaries, in mm using
/// the reference spacing.
inline double nsd(const LabelMap& pred, const LabelMap& gt, int cls, double tolerance_mm = kDefaultNsdTolerance) {
  detail::check_pair(pred, gt);
  if (!(tolerance_mm >= 0.0)) throw Error(ErrorCode::ConfigError, "tolerance must be non-negative");
  const auto sp = detail::surface_mask(pred, cls);
  const auto sg = detail::surface_mask(gt, cls);
  const auto np = static_cast<std::size_t>(std::count(sp.begin(), sp.end(), 1));
  const auto ng = static_cast<std::size_t>(std::count(sg.begin(), sg.end(), 1));
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  const std::size_t hits = detail::count_within(sp, sg, gt.dims, gt.spacing, tolerance_mm) +
                           detail::count_within(sg, sp, gt.dims, gt.spacing, tolerance_mm);
  return static_cast<double>(hits) / static_cast<double>(np + ng);
}

struct CaseScore {
  std::string name;
  std::map<int, double> per_class_dsc;
  std::map<int, double> per_class_nsd;
  double mean_dsc = 0.0;
  double mean_nsd = 0.0;
};

inline CaseScore score_case(const LabelMap& pred, const LabelMap& gt, int num_classes,
                            double tolerance_mm = kDefaultNsdTolerance) {
  if (num_classes < 2) throw Error(ErrorCode::ConfigError, "need at least two classes");
  CaseScore s;
  for (int c = 1; c < num_classes; ++c) {
    s.per_class_dsc[c] = dsc(pred, gt, c);
    s.per_class_nsd[c] = nsd(pred, gt, c, tolerance_mm);
    s.mean_dsc += s.per_class_dsc[c];
    s.mean_nsd += s.per_class_nsd[c];
  }
  s.mean_dsc /= num_classes - 1;
  s.mean_nsd /= num_classes - 1;
  return s;
}

struct Evaluation {
  std::vector<CaseScore> cases;
  std::map<int, double> mean_dsc;
  std::map<int, double> mean_nsd;
  double overall_dsc = 0.0;
  double overall_nsd = 0.0;
};

inline std::vector<std::filesystem::path> list_volumes(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::MissingFile, dir.string() + " is not a directory");
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".mvol") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

/// Scores every reference case in gt_dir against the same filename in pred_dir.
inline Evaluation evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir, int num_classes,
                           double tolerance_mm = kDefaultNsdTolerance) {
  Evaluation ev;
  const auto refs = list_volumes(gt_dir);
  if (refs.empty()) throw Error(ErrorCode::MissingCase, "no .mvol files in " + gt_dir.string());
  for (const auto& ref : refs) {
    const auto pred_path = pred_dir / ref.filename();
    if (!std::filesystem::exists(pred_path))
      throw Error(ErrorCode::MissingCase, "no prediction for " + ref.filename().string());
    const LabelMap gt = read_labels(ref);
    const LabelMap pred = read_labels(pred_path);
    CaseScore s = score_case(pred, gt, num_classes, tolerance_mm);
    s.name = ref.stem().string();
    ev.cases.push_back(std::move(s));
  }
  const auto n = static_cast<double>(ev.cases.size());
  for (int c = 1; c < num_classes; ++c) {
    double d = 0.0, s = 0.0;
    for (const auto& cs : ev.cases) {
      d += cs.per_class_dsc.at(c);
      s += cs.per_class_nsd.at(c);
    }
    ev.mean_dsc[c] = d / n;
    ev.mean_nsd[c] = s / n;
  }
  for (const auto& cs : ev.cases) {
    ev.overall_dsc += cs.mean_dsc / n;
    ev.overall_nsd += cs.mean_nsd / n;
  }
  return ev;
}

inline std::string evaluation_csv(const Evaluation& ev) {
  std::string out = "case,class,dsc,nsd\n";
  char buf[256];
  for (const auto& cs : ev.cases)
    for (const auto& [c, d] : cs.per_class_dsc) {
      std::snprintf(buf, sizeof buf, "%s,%d,%.6f,%.6f\n", cs.name.c_str(), c, d, cs.per_class_nsd.at(c));
      out += buf;
    }
  for (const auto& [c, d] : ev.mean_dsc) {
    std::snprintf(buf, sizeof buf, "mean,%d,%.6f,%.6f\n", c, d, ev.mean_nsd.at(c));
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mean,all,%.6f,%.6f\n", ev.overall_dsc, ev.overall_nsd);
  out += buf;
  return out;
}

inline void write_evaluation_csv(const Evaluation& ev, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  os << evaluation_csv(ev);
  if (!os) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

}  // namespace cps3d
