#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cps3d/error.hpp"

namespace cps3d {

struct LabeledCase {
  std::filesystem::path image;
  std::filesystem::path labels;
};

/// Labeled set D_l and unlabeled set D_u. Paths are stored resolved against the
/// manifest's directory.
struct DatasetManifest {
  std::vector<LabeledCase> labeled;
  std::vector<std::filesystem::path> unlabeled;
  int num_classes = 2;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

}  // namespace detail

/// Parses manifest text. `base` resolves relative paths. File existence is
/// not checked here; see load_manifest.
inline DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base = {}) {
  std::istringstream in(text);
  std::string line;
  DatasetManifest m;
  bool have_header = false;
  int line_no = 0;
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
  };
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty()) continue;
    if (!have_header) {
      if (line.rfind("classes=", 0) != 0)
        throw Error(ErrorCode::InvalidManifest, "first line must be classes=<N>");
      try {
        m.num_classes = std::stoi(line.substr(8));
      } catch (const std::exception&) {
        throw Error(ErrorCode::InvalidManifest, "unparsable class count '" + line + "'");
      }
      if (m.num_classes < 2 || m.num_classes > 255)
        throw Error(ErrorCode::InvalidManifest, "classes must be in [2,255]");
      have_header = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw Error(ErrorCode::InvalidManifest, "line " + std::to_string(line_no) + ": expected image,label");
    const std::string image = detail::trim(line.substr(0, comma));
    const std::string label = detail::trim(line.substr(comma + 1));
    if (image.empty()) throw Error(ErrorCode::InvalidManifest, "line " + std::to_string(line_no) + ": empty image path");
    if (label.empty())
      m.unlabeled.push_back(resolve(image));
    else
      m.labeled.push_back({resolve(image), resolve(label)});
  }
  if (!have_header) throw Error(ErrorCode::InvalidManifest, "missing classes=<N> header");

  std::set<std::filesystem::path> seen;
  auto claim = [&](const std::filesystem::path& p) {
    if (!seen.insert(p.lexically_normal()).second)
      throw Error(ErrorCode::InvalidManifest, "path listed twice: " + p.string());
  };
  for (const auto& c : m.labeled) {
    claim(c.image);
    claim(c.labels);
  }
  for (const auto& p : m.unlabeled) claim(p);
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::MissingFile, "manifest " + path.string() + " not found");
  std::stringstream buf;
  buf << is.rdbuf();
  auto m = parse_manifest(buf.str(), path.parent_path());
  auto require = [](const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) throw Error(ErrorCode::MissingFile, p.string());
  };
  for (const auto& c : m.labeled) {
    require(c.image);
    require(c.labels);
  }
  for (const auto& p : m.unlabeled) require(p);
  if (m.labeled.empty()) throw Error(ErrorCode::EmptyLabeledSet, path.string() + " has no labeled cases");
  return m;
}

/// Writes a manifest with paths relative to the manifest's own directory when possible.
inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  const auto base = path.parent_path();
  auto rel = [&](const std::filesystem::path& p) {
    if (base.empty()) return p.generic_string();
    return p.lexically_relative(base).generic_string();
  };
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  os << "classes=" << m.num_classes << "\n";
  for (const auto& c : m.labeled) os << rel(c.image) << "," << rel(c.labels) << "\n";
  for (const auto& p : m.unlabeled) os << rel(p) << ",\n";
  if (!os) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

}  // namespace cps3d
