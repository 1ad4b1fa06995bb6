#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "cps3d/error.hpp"
#include "cps3d/kv.hpp"
#include "cps3d/planner.hpp"
#include "cps3d/synthdata.hpp"
#include "cps3d/trainer.hpp"

namespace cps3d {

inline kv::Table to_table(const SpacingRule& r) {
  using kv::format_double;
  return {{"spacing.default", detail::join_triple(r.s_default[0], r.s_default[1], r.s_default[2])},
          {"spacing.s_low", std::to_string(r.s_low)},
          {"spacing.s_high", std::to_string(r.s_high)},
          {"spacing.z_floor", format_double(r.z_floor)}};
}

inline SpacingRule spacing_rule_from(kv::Reader& r) {
  SpacingRule s;
  const auto d = r.reals("spacing.default");
  if (d.size() != 3) throw Error(ErrorCode::ConfigError, "spacing.default needs three values");
  s.s_default = {d[0], d[1], d[2]};
  const long long lo = r.integer("spacing.s_low"), hi = r.integer("spacing.s_high");
  if (lo < 0 || hi < lo) throw Error(ErrorCode::ConfigError, "spacing.s_low/s_high out of range");
  s.s_low = static_cast<std::size_t>(lo);
  s.s_high = static_cast<std::size_t>(hi);
  s.z_floor = r.real("spacing.z_floor");
  if (!valid_spacing(s.s_default) || !(s.z_floor > 0)) throw Error(ErrorCode::ConfigError, "spacing rule out of range");
  return s;
}

/// Every tunable in one flat `section.key = value` file. Keys left out keep
/// their defaults; unknown keys are errors.
struct ExperimentConfig {
  TrainConfig train;
  PhantomConfig phantom;
  SpacingRule spacing;
};

inline kv::Table to_table(const ExperimentConfig& c) {
  kv::Table t = to_table(c.train);
  for (auto& e : to_table(c.phantom)) t.push_back(e);
  for (auto& e : to_table(c.spacing)) t.push_back(e);
  return t;
}

inline std::string emit_config(const ExperimentConfig& c) { return kv::emit(to_table(c)); }

inline ExperimentConfig parse_config(const std::string& text, const ExperimentConfig& base = {}) {
  kv::Table merged = to_table(base);
  for (const auto& [k, v] : kv::parse(text)) {
    auto it = std::find_if(merged.begin(), merged.end(), [&](const auto& e) { return e.first == k; });
    if (it == merged.end()) throw Error(ErrorCode::ConfigError, "unknown key " + k);
    it->second = v;
  }
  kv::Reader r(merged);
  ExperimentConfig c;
  c.train = train_config_from(r);
  c.phantom = phantom_config_from(r);
  c.spacing = spacing_rule_from(r);
  r.reject_unused();
  c.train.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::MissingFile, path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_config(buf.str());
}

}  // namespace cps3d
