#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>

#include <gtest/gtest.h>

#include "cps3d/error.hpp"
#include "cps3d/volume.hpp"

namespace testing_util {

inline cps3d::ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const cps3d::Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return cps3d::ErrorCode::IoFailure;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("cps3d_test_" + std::to_string(::getpid()) + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << s;
}

inline cps3d::Image random_image(cps3d::Dims d, std::uint64_t seed, cps3d::Spacing sp = {1.0, 1.0, 1.0}) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  cps3d::Image img(d, sp);
  for (auto& v : img.values) v = n(rng);
  return img;
}

inline cps3d::LabelMap random_labels(cps3d::Dims d, int classes, std::uint64_t seed, cps3d::Spacing sp = {1.0, 1.0, 1.0}) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, classes - 1);
  cps3d::LabelMap m(d, sp);
  for (auto& v : m.values) v = static_cast<std::uint8_t>(u(rng));
  return m;
}

}  // namespace testing_util
