#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cps3d/error.hpp"

namespace cps3d::kv {

/// Ordered `key = value` records. Used for fingerprint.txt, plan.txt and the
/// experiment config. Lines starting with '#' are comments.
using Table = std::vector<std::pair<std::string, std::string>>;

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline Table parse(const std::string& text) {
  Table out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::ConfigError, "line " + std::to_string(line_no) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string{};
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

inline std::string emit(const Table& t) {
  std::string s;
  for (const auto& [k, v] : t) s += k + " = " + v + "\n";
  return s;
}

inline Table read_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::MissingFile, path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  return parse(buf.str());
}

inline void write_file(const Table& t, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  os << emit(t);
  if (!os) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

/// Lookup helper that fails loudly on missing keys and reports unused ones.
class Reader {
 public:
  explicit Reader(const Table& t) {
    for (const auto& [k, v] : t) {
      if (!values_.emplace(k, v).second) throw Error(ErrorCode::ConfigError, "duplicate key " + k);
    }
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& str(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) throw Error(ErrorCode::ConfigError, "missing key " + key);
    used_.insert(key);
    return it->second;
  }

  double real(const std::string& key) { return to_double(key, str(key)); }

  long long integer(const std::string& key) {
    const auto& s = str(key);
    long long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw Error(ErrorCode::ConfigError, "key " + key + ": not an integer '" + s + "'");
    return v;
  }

  std::vector<double> reals(const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_double(key, item));
    return out;
  }

  /// Keys present in the table that were never read.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  void reject_unused() const {
    const auto extra = unused();
    if (!extra.empty()) throw Error(ErrorCode::ConfigError, "unknown key " + extra.front());
  }

 private:
  static double to_double(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      double v = std::stod(s, &pos);
      while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw Error(ErrorCode::ConfigError, "key " + key + ": not a number '" + s + "'");
    }
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
};

}  // namespace cps3d::kv
