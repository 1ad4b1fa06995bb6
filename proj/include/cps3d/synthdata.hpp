#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cps3d/error.hpp"
#include "cps3d/kv.hpp"
#include "cps3d/manifest.hpp"
#include "cps3d/volume.hpp"

namespace cps3d {

/// Multi-organ ellipsoid phantom standing in for abdominal CT.
struct PhantomConfig {
  Dims dims{32, 32, 32};
  int num_organs = 3;
  double background_mean = 0.0;
  /// Organ k (1-based) has mean organ_mean_base + (k - 1) * organ_mean_step.
  double organ_mean_base = 100.0;
  double organ_mean_step = 80.0;
  /// Per-case uniform offset in [-jitter, jitter] applied to each class mean.
  double intensity_jitter = 10.0;
  double noise_sigma = 20.0;
  /// Ellipsoid radii per axis are uniform in [dims/radius_low_div, dims/radius_high_div].
  double radius_low_div = 8.0;
  double radius_high_div = 4.0;
  double spacing_low = 0.8;
  double spacing_high = 1.2;

  friend bool operator==(const PhantomConfig&, const PhantomConfig&) = default;
};

struct Ellipsoid {
  std::array<double, 3> centre{};
  std::array<double, 3> radii{};
};

struct Phantom {
  Image image;
  LabelMap labels;
  std::vector<Ellipsoid> organs;
};

inline Phantom generate_phantom(const PhantomConfig& cfg, std::uint64_t seed) {
  if (cfg.dims.count() == 0 || cfg.num_organs < 1 || cfg.num_organs > 254 || cfg.noise_sigma < 0 ||
      cfg.intensity_jitter < 0 || !(cfg.spacing_low > 0) || cfg.spacing_high < cfg.spacing_low ||
      !(cfg.radius_low_div >= cfg.radius_high_div && cfg.radius_high_div > 0))
    throw Error(ErrorCode::ConfigError, "phantom config out of range");
  std::mt19937_64 rng(seed);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  Spacing spacing;
  for (auto& s : spacing) s = cfg.spacing_low == cfg.spacing_high ? cfg.spacing_low : uniform(cfg.spacing_low, cfg.spacing_high);
  std::vector<double> means(static_cast<std::size_t>(cfg.num_organs) + 1);
  for (std::size_t k = 0; k < means.size(); ++k) {
    const double base = k == 0 ? cfg.background_mean
                               : cfg.organ_mean_base + static_cast<double>(k - 1) * cfg.organ_mean_step;
    means[k] = base + (cfg.intensity_jitter > 0 ? uniform(-cfg.intensity_jitter, cfg.intensity_jitter) : 0.0);
  }

  Phantom ph;
  ph.labels = LabelMap(cfg.dims, spacing, std::uint8_t{0});
  const Dims& d = cfg.dims;
  for (int organ = 1; organ <= cfg.num_organs; ++organ) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      Ellipsoid e;
      for (std::size_t a = 0; a < 3; ++a) {
        const double n = static_cast<double>(d[a]);
        const double lo = n / cfg.radius_low_div, hi = n / cfg.radius_high_div;
        e.radii[a] = std::max(0.5, lo == hi ? lo : uniform(lo, hi));
        const double cmin = e.radii[a], cmax = n - 1.0 - e.radii[a];
        e.centre[a] = cmin < cmax ? uniform(cmin, cmax) : 0.5 * (n - 1.0);
      }
      std::vector<std::size_t> voxels;
      bool clash = false;
      for (std::size_t z = 0; z < d.z && !clash; ++z)
        for (std::size_t y = 0; y < d.y && !clash; ++y)
          for (std::size_t x = 0; x < d.x; ++x) {
            const double dz = (static_cast<double>(z) - e.centre[0]) / e.radii[0];
            const double dy = (static_cast<double>(y) - e.centre[1]) / e.radii[1];
            const double dx = (static_cast<double>(x) - e.centre[2]) / e.radii[2];
            if (dz * dz + dy * dy + dx * dx > 1.0) continue;
            const std::size_t i = d.index(z, y, x);
            if (ph.labels.values[i] != 0) {
              clash = true;
              break;
            }
            voxels.push_back(i);
          }
      if (clash || voxels.empty()) continue;
      for (auto i : voxels) ph.labels.values[i] = static_cast<std::uint8_t>(organ);
      ph.organs.push_back(e);
      placed = true;
    }
    if (!placed)
      throw Error(ErrorCode::PlacementFailure, "organ " + std::to_string(organ) + " could not be placed in 100 attempts");
  }

  ph.image = Image(cfg.dims, spacing, 0.0f);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma > 0 ? cfg.noise_sigma : 1.0);
  for (std::size_t i = 0; i < ph.image.values.size(); ++i) {
    const double n = cfg.noise_sigma > 0 ? noise(rng) : 0.0;
    ph.image.values[i] = static_cast<float>(means[ph.labels.values[i]] + n);
  }
  return ph;
}

inline std::string case_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04zu.mvol", index);
  return buf;
}

/// Writes n_labeled + n_unlabeled phantoms (case i uses seed + i) under
/// out_dir/imagesTr and out_dir/labelsTr plus out_dir/manifest.txt.
inline std::filesystem::path generate_dataset(std::size_t n_labeled, std::size_t n_unlabeled, const PhantomConfig& cfg,
                                              std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (n_labeled < 1) throw Error(ErrorCode::EmptyLabeledSet, "synthetic dataset needs at least one labeled case");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "imagesTr", ec);
  std::filesystem::create_directories(out_dir / "labelsTr", ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.num_classes = cfg.num_organs + 1;
  for (std::size_t i = 0; i < n_labeled + n_unlabeled; ++i) {
    const Phantom ph = generate_phantom(cfg, seed + i);
    const auto img = out_dir / "imagesTr" / case_name(i);
    write_volume(ph.image, img);
    if (i < n_labeled) {
      const auto lab = out_dir / "labelsTr" / case_name(i);
      write_volume(ph.labels, lab);
      m.labeled.push_back({img, lab});
    } else {
      m.unlabeled.push_back(img);
    }
  }
  const auto manifest = out_dir / "manifest.txt";
  write_manifest(m, manifest);
  return manifest;
}

inline kv::Table to_table(const PhantomConfig& c) {
  using kv::format_double;
  return {{"phantom.dims", std::to_string(c.dims.z) + "," + std::to_string(c.dims.y) + "," + std::to_string(c.dims.x)},
          {"phantom.num_organs", std::to_string(c.num_organs)},
          {"phantom.background_mean", format_double(c.background_mean)},
          {"phantom.organ_mean_base", format_double(c.organ_mean_base)},
          {"phantom.organ_mean_step", format_double(c.organ_mean_step)},
          {"phantom.intensity_jitter", format_double(c.intensity_jitter)},
          {"phantom.noise_sigma", format_double(c.noise_sigma)},
          {"phantom.radius_low_div", format_double(c.radius_low_div)},
          {"phantom.radius_high_div", format_double(c.radius_high_div)},
          {"phantom.spacing_low", format_double(c.spacing_low)},
          {"phantom.spacing_high", format_double(c.spacing_high)}};
}

inline PhantomConfig phantom_config_from(kv::Reader& r) {
  PhantomConfig c;
  const auto d = r.reals("phantom.dims");
  if (d.size() != 3) throw Error(ErrorCode::ConfigError, "phantom.dims needs three values");
  c.dims = {static_cast<std::size_t>(d[0]), static_cast<std::size_t>(d[1]), static_cast<std::size_t>(d[2])};
  c.num_organs = static_cast<int>(r.integer("phantom.num_organs"));
  c.background_mean = r.real("phantom.background_mean");
  c.organ_mean_base = r.real("phantom.organ_mean_base");
  c.organ_mean_step = r.real("phantom.organ_mean_step");
  c.intensity_jitter = r.real("phantom.intensity_jitter");
  c.noise_sigma = r.real("phantom.noise_sigma");
  c.radius_low_div = r.real("phantom.radius_low_div");
  c.radius_high_div = r.real("phantom.radius_high_div");
  c.spacing_low = r.real("phantom.spacing_low");
  c.spacing_high = r.real("phantom.spacing_high");
  return c;
}

}  // namespace cps3d
