#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "cps3d/error.hpp"

namespace cps3d {

/// Grid extent in voxels, ordered (z, y, x).
struct Dims {
  std::size_t z = 0;
  std::size_t y = 0;
  std::size_t x = 0;

  constexpr std::size_t count() const { return z * y * x; }
  constexpr std::size_t operator[](std::size_t axis) const { return axis == 0 ? z : (axis == 1 ? y : x); }
  constexpr std::size_t& operator[](std::size_t axis) { return axis == 0 ? z : (axis == 1 ? y : x); }
  constexpr std::size_t index(std::size_t iz, std::size_t iy, std::size_t ix) const {
    return (iz * y + iy) * x + ix;
  }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;
};

/// Millimetres per voxel, ordered (z, y, x).
using Spacing = std::array<double, 3>;

inline bool valid_spacing(const Spacing& s) {
  for (double v : s)
    if (!(std::isfinite(v) && v > 0.0)) return false;
  return true;
}

/// Dense scalar grid stored z-major (x fastest).
template <class T>
struct Grid {
  Dims dims;
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<T> values;

  Grid() = default;
  Grid(Dims d, Spacing s, T fill = T{}) : dims(d), spacing(s), values(d.count(), fill) {}
  Grid(Dims d, Spacing s, std::vector<T> v) : dims(d), spacing(s), values(std::move(v)) {}

  T& operator()(std::size_t iz, std::size_t iy, std::size_t ix) { return values[dims.index(iz, iy, ix)]; }
  const T& operator()(std::size_t iz, std::size_t iy, std::size_t ix) const {
    return values[dims.index(iz, iy, ix)];
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using Image = Grid<float>;
using LabelMap = Grid<std::uint8_t>;

enum class VolumeKind : std::uint8_t { image = 0, labels = 1 };

/// A volume read from disk: either a real-valued image or a label map.
using Volume = std::variant<Image, LabelMap>;

inline VolumeKind kind_of(const Volume& v) {
  return std::holds_alternative<Image>(v) ? VolumeKind::image : VolumeKind::labels;
}

/// Checks the structural invariants shared by every grid. Label range checks
/// need num_classes and live in validate_labels.
template <class T>
void validate_grid(const Grid<T>& g) {
  if (g.dims.count() == 0) throw Error(ErrorCode::InvalidVolume, "zero-sized dims");
  if (!valid_spacing(g.spacing)) throw Error(ErrorCode::InvalidVolume, "spacing must be positive and finite");
  if (g.values.size() != g.dims.count())
    throw Error(ErrorCode::InvalidVolume, "payload length does not match dims");
}

inline void validate_labels(const LabelMap& labels, int num_classes) {
  validate_grid(labels);
  for (auto v : labels.values)
    if (static_cast<int>(v) >= num_classes)
      throw Error(ErrorCode::InvalidVolume,
                  "label value " + std::to_string(v) + " outside [0," + std::to_string(num_classes) + ")");
}

namespace mvol {

inline constexpr char kMagic[4] = {'M', 'V', 'O', 'L'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 4 + 4 + 1 + 3 + 3 * 8 + 3 * 8;

namespace detail {

template <class U>
void put_le(std::string& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::array<char, sizeof(U)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), bytes.size());
}

template <class U>
U get_le(const char* p) {
  std::array<char, sizeof(U)> bytes;
  std::memcpy(bytes.data(), p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  U value;
  std::memcpy(&value, bytes.data(), sizeof(U));
  return value;
}

}  // namespace detail

/// Serializes a grid to the MVOL byte layout.
template <class T>
std::string encode(const Grid<T>& g) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, std::uint8_t>);
  validate_grid(g);
  std::string out;
  out.reserve(kHeaderBytes + g.values.size() * sizeof(T));
  out.append(kMagic, 4);
  detail::put_le<std::uint32_t>(out, kVersion);
  out.push_back(static_cast<char>(std::is_same_v<T, float> ? VolumeKind::image : VolumeKind::labels));
  out.append(3, '\0');
  for (std::size_t a = 0; a < 3; ++a) detail::put_le<std::uint64_t>(out, g.dims[a]);
  for (std::size_t a = 0; a < 3; ++a) detail::put_le<double>(out, g.spacing[a]);
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    out.append(reinterpret_cast<const char*>(g.values.data()), g.values.size() * sizeof(T));
  } else {
    for (T v : g.values) detail::put_le<T>(out, v);
  }
  return out;
}

}  // namespace mvol

template <class T>
void write_volume(const Grid<T>& g, const std::filesystem::path& path) {
  const std::string bytes = mvol::encode(g);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

inline void write_volume(const Volume& v, const std::filesystem::path& path) {
  std::visit([&](const auto& g) { write_volume(g, path); }, v);
}

inline Volume read_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  is.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(is.tellg());
  is.seekg(0, std::ios::beg);

  std::array<char, mvol::kHeaderBytes> header{};
  if (file_size < mvol::kHeaderBytes || !is.read(header.data(), header.size()))
    throw Error(ErrorCode::MalformedHeader, path.string() + ": header shorter than " +
                                                std::to_string(mvol::kHeaderBytes) + " bytes");
  if (std::memcmp(header.data(), mvol::kMagic, 4) != 0)
    throw Error(ErrorCode::MalformedHeader, path.string() + ": bad magic");
  const char* p = header.data() + 4;
  if (mvol::detail::get_le<std::uint32_t>(p) != mvol::kVersion)
    throw Error(ErrorCode::MalformedHeader, path.string() + ": unsupported version");
  p += 4;
  const auto dtype = static_cast<std::uint8_t>(*p);
  if (dtype > 1) throw Error(ErrorCode::MalformedHeader, path.string() + ": unknown dtype code");
  p += 4;  // dtype + reserved

  Dims dims;
  for (std::size_t a = 0; a < 3; ++a, p += 8) {
    const auto d = mvol::detail::get_le<std::uint64_t>(p);
    if (d == 0 || d > (std::uint64_t{1} << 21))
      throw Error(ErrorCode::MalformedHeader, path.string() + ": invalid dims");
    dims[a] = static_cast<std::size_t>(d);
  }
  Spacing spacing;
  for (std::size_t a = 0; a < 3; ++a, p += 8) spacing[a] = mvol::detail::get_le<double>(p);
  if (!valid_spacing(spacing)) throw Error(ErrorCode::MalformedHeader, path.string() + ": invalid spacing");

  const std::size_t elem = dtype == 0 ? sizeof(float) : 1;
  const std::uint64_t voxels = static_cast<std::uint64_t>(dims.z) * dims.y;
  if (voxels > std::numeric_limits<std::uint64_t>::max() / dims.x / elem)
    throw Error(ErrorCode::MalformedHeader, path.string() + ": dims overflow");
  const std::uint64_t payload = voxels * dims.x * elem;
  // Size check happens before any allocation.
  if (file_size - mvol::kHeaderBytes < payload)
    throw Error(ErrorCode::TruncatedPayload, path.string() + ": payload has " +
                                                 std::to_string(file_size - mvol::kHeaderBytes) +
                                                 " bytes, dims imply " + std::to_string(payload));

  auto read_payload = [&](auto* data) {
    if (!is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(payload)))
      throw Error(ErrorCode::IoFailure, path.string() + ": payload read failed");
  };
  if (dtype == 0) {
    Image img(dims, spacing);
    read_payload(img.values.data());
    if constexpr (std::endian::native == std::endian::big) {
      for (auto& v : img.values) v = mvol::detail::get_le<float>(reinterpret_cast<const char*>(&v));
    }
    return img;
  }
  LabelMap lab(dims, spacing);
  read_payload(lab.values.data());
  return lab;
}

inline Image read_image(const std::filesystem::path& path) {
  auto v = read_volume(path);
  if (auto* img = std::get_if<Image>(&v)) return std::move(*img);
  throw Error(ErrorCode::InvalidVolume, path.string() + " holds labels, expected an image");
}

inline LabelMap read_labels(const std::filesystem::path& path) {
  auto v = read_volume(path);
  if (auto* lab = std::get_if<LabelMap>(&v)) return std::move(*lab);
  throw Error(ErrorCode::InvalidVolume, path.string() + " holds an image, expected labels");
}

}  // namespace cps3d
