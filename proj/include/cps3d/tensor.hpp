#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Core>

#include "cps3d/volume.hpp"

namespace cps3d {

/// Storage aligned to Eigen's widest packet. Vectorized reductions peel by
/// alignment, so a fixed alignment keeps results bit-reproducible.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Channel-major activation block for a single sample: (channels, z, y, x).
template <class T>
struct Tensor {
  int channels = 0;
  Dims dims;
  AlignedVector<T> data;

  Tensor() = default;
  Tensor(int c, Dims d, T fill = T{}) : channels(c), dims(d), data(static_cast<std::size_t>(c) * d.count(), fill) {}

  std::size_t voxels() const { return dims.count(); }
  std::size_t size() const { return data.size(); }
  T* channel(int c) { return data.data() + static_cast<std::size_t>(c) * voxels(); }
  const T* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * voxels(); }
  T& at(int c, std::size_t voxel) { return data[static_cast<std::size_t>(c) * voxels() + voxel]; }
  const T& at(int c, std::size_t voxel) const { return data[static_cast<std::size_t>(c) * voxels() + voxel]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Per-voxel class probabilities of one output head, shape (num_classes, z, y, x).
template <class T>
using ConfidenceMap = Tensor<T>;

template <class T, class U>
Tensor<T> tensor_from_grid(const Grid<U>& g) {
  Tensor<T> t(1, g.dims);
  for (std::size_t i = 0; i < g.values.size(); ++i) t.data[i] = static_cast<T>(g.values[i]);
  return t;
}

}  // namespace cps3d
