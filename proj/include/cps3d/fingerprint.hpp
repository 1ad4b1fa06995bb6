#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "cps3d/error.hpp"
#include "cps3d/kv.hpp"
#include "cps3d/volume.hpp"

namespace cps3d {

/// Global intensity and spacing statistics of a dataset. Every voxel of every
/// case contributes, labeled or not; no foreground mask is consulted.
struct Fingerprint {
  double mean = 0.0;
  double std = 0.0;  // population
  double p_low = 0.0;
  double p_high = 0.0;
  Spacing median_spacing{1.0, 1.0, 1.0};
  std::uint64_t num_cases = 0;
  std::uint64_t num_voxels = 0;

  friend bool operator==(const Fingerprint&, const Fingerprint&) = default;
};

struct FingerprintOptions {
  /// Percentiles as parts per thousand, so nearest-rank indices are exact integers.
  int low_permille = 5;
  int high_permille = 995;
  /// When set, at most this many voxels per case are drawn uniformly (with a
  /// per-case seed) instead of pooling every voxel.
  std::optional<std::size_t> max_samples_per_case;
  std::uint64_t sample_seed = 0;
};

/// Nearest-rank percentile on an ascending-sorted sample: the value at 1-based
/// rank ceil(q * N), with q = permille / 1000.
template <class T>
T nearest_rank(std::span<const T> sorted, int permille) {
  if (sorted.empty()) throw Error(ErrorCode::EmptyDataset, "percentile of empty sample");
  const std::uint64_t n = sorted.size();
  std::uint64_t rank = (static_cast<std::uint64_t>(permille) * n + 999) / 1000;
  rank = std::clamp<std::uint64_t>(rank, 1, n);
  return sorted[rank - 1];
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Pools cases one at a time; finish() yields the same result as pooling the
/// concatenated voxel arrays in one go.
class FingerprintAccumulator {
 public:
  explicit FingerprintAccumulator(FingerprintOptions opts = {}) : opts_(opts) {}

  void add(const Image& img) {
    validate_grid(img);
    if (opts_.max_samples_per_case && img.values.size() > *opts_.max_samples_per_case) {
      std::mt19937_64 rng(opts_.sample_seed + cases_.size());
      std::uniform_int_distribution<std::size_t> pick(0, img.values.size() - 1);
      for (std::size_t i = 0; i < *opts_.max_samples_per_case; ++i) pooled_.push_back(img.values[pick(rng)]);
    } else {
      pooled_.insert(pooled_.end(), img.values.begin(), img.values.end());
    }
    cases_.push_back(img.spacing);
  }

  Fingerprint finish() const {
    if (cases_.empty() || pooled_.empty()) throw Error(ErrorCode::EmptyDataset, "no voxels to fingerprint");
    std::vector<float> sorted = pooled_;
    std::sort(sorted.begin(), sorted.end());

    Fingerprint fp;
    fp.num_cases = cases_.size();
    fp.num_voxels = sorted.size();
    // Summing in sorted order makes the result independent of case and voxel order.
    double sum = 0.0;
    for (float v : sorted) sum += v;
    fp.mean = sum / static_cast<double>(sorted.size());
    if (sorted.front() == sorted.back()) {
      fp.mean = sorted.front();
      fp.std = 0.0;
    } else {
      double ss = 0.0;
      for (float v : sorted) ss += (v - fp.mean) * (v - fp.mean);
      fp.std = std::sqrt(ss / static_cast<double>(sorted.size()));
    }
    const std::span<const float> view(sorted);
    fp.p_low = nearest_rank(view, opts_.low_permille);
    fp.p_high = nearest_rank(view, opts_.high_permille);
    for (std::size_t a = 0; a < 3; ++a) {
      std::vector<double> s;
      for (const auto& sp : cases_) s.push_back(sp[a]);
      fp.median_spacing[a] = median_of(std::move(s));
    }
    return fp;
  }

 private:
  FingerprintOptions opts_;
  std::vector<float> pooled_;
  std::vector<Spacing> cases_;
};

inline Fingerprint compute_fingerprint(std::span<const Image> images, FingerprintOptions opts = {}) {
  if (images.empty()) throw Error(ErrorCode::EmptyDataset, "fingerprint needs at least one case");
  FingerprintAccumulator acc(opts);
  for (const auto& img : images) acc.add(img);
  return acc.finish();
}

inline kv::Table to_table(const Fingerprint& fp) {
  using kv::format_double;
  return {{"mean", format_double(fp.mean)},
          {"std", format_double(fp.std)},
          {"p_low", format_double(fp.p_low)},
          {"p_high", format_double(fp.p_high)},
          {"spacing_z", format_double(fp.median_spacing[0])},
          {"spacing_y", format_double(fp.median_spacing[1])},
          {"spacing_x", format_double(fp.median_spacing[2])},
          {"num_cases", std::to_string(fp.num_cases)},
          {"num_voxels", std::to_string(fp.num_voxels)}};
}

inline Fingerprint fingerprint_from_table(const kv::Table& t) {
  kv::Reader r(t);
  Fingerprint fp;
  fp.mean = r.real("mean");
  fp.std = r.real("std");
  fp.p_low = r.real("p_low");
  fp.p_high = r.real("p_high");
  fp.median_spacing = {r.real("spacing_z"), r.real("spacing_y"), r.real("spacing_x")};
  fp.num_cases = static_cast<std::uint64_t>(r.integer("num_cases"));
  fp.num_voxels = static_cast<std::uint64_t>(r.integer("num_voxels"));
  r.reject_unused();
  if (fp.std < 0 || !valid_spacing(fp.median_spacing) || fp.num_cases == 0)
    throw Error(ErrorCode::ConfigError, "fingerprint values out of range");
  return fp;
}

inline void write_fingerprint(const Fingerprint& fp, const std::filesystem::path& path) {
  kv::write_file(to_table(fp), path);
}

inline Fingerprint read_fingerprint(const std::filesystem::path& path) {
  return fingerprint_from_table(kv::read_file(path));
}

}  // namespace cps3d
