#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "cps3d/error.hpp"
#include "cps3d/fingerprint.hpp"
#include "cps3d/kv.hpp"
#include "cps3d/network.hpp"
#include "cps3d/planner.hpp"

namespace cps3d {

enum class TrainMode { cps, baseline };

inline std::string to_string(TrainMode m) { return m == TrainMode::cps ? "cps" : "baseline"; }

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "cps") return TrainMode::cps;
  if (s == "baseline") return TrainMode::baseline;
  throw Error(ErrorCode::ConfigError, "mode must be cps or baseline, got '" + s + "'");
}

struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  int epochs_since_improve = 0;

  friend bool operator==(const PlateauState&, const PlateauState&) = default;
};

/// Everything needed to resume training or run inference. params/momentum hold
/// one entry per network (two for cps, one for baseline).
struct Checkpoint {
  std::string architecture;
  TrainMode mode = TrainMode::cps;
  Plan plan;
  Fingerprint fingerprint;
  std::string config_text;
  int epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  PlateauState plateau;
  double best_epoch_loss = std::numeric_limits<double>::infinity();
  std::string rng_state;
  std::vector<NetParams<float>> params;
  std::vector<NetParams<float>> momentum;
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'C', 'P', 'S', '3', 'D', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCkptVersion = 1;

class ByteWriter {
 public:
  template <class U>
  void pod(U v) {
    static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes little-endian host");
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(U));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_ += s;
  }
  void floats(const AlignedVector<float>& v) {
    pod<std::uint64_t>(v.size());
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : buf_(b) {}
  template <class U>
  U pod() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  AlignedVector<float> floats() {
    const auto n = pod<std::uint64_t>();
    if (n > (buf_.size() - pos_) / sizeof(float)) throw Error(ErrorCode::InvalidCheckpoint, "truncated tensor payload");
    AlignedVector<float> v(n);
    std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
    return v;
  }
  void expect(const char* p, std::size_t n) {
    need(n);
    if (std::memcmp(buf_.data() + pos_, p, n) != 0) throw Error(ErrorCode::InvalidCheckpoint, "bad magic");
    pos_ += n;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > buf_.size() - pos_) throw Error(ErrorCode::InvalidCheckpoint, "truncated checkpoint");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

inline void write_params(ByteWriter& w, const NetParams<float>& p) {
  w.pod<std::uint64_t>(p.tensors.size());
  for (const auto& t : p.tensors) {
    w.str(t.name);
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(t.kind));
    w.pod<std::uint64_t>(t.fan_in);
    w.floats(t.values);
  }
}

inline NetParams<float> read_params(ByteReader& r) {
  NetParams<float> p;
  const auto n = r.pod<std::uint64_t>();
  if (n > 1u << 20) throw Error(ErrorCode::InvalidCheckpoint, "implausible tensor count");
  for (std::uint64_t i = 0; i < n; ++i) {
    ParamTensor<float> t;
    t.name = r.str();
    const auto kind = r.pod<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(ParamKind::bias)) throw Error(ErrorCode::InvalidCheckpoint, "bad parameter kind");
    t.kind = static_cast<ParamKind>(kind);
    t.fan_in = r.pod<std::uint64_t>();
    t.values = r.floats();
    p.tensors.push_back(std::move(t));
  }
  return p;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw(detail::kCkptMagic, sizeof detail::kCkptMagic);
  w.pod(detail::kCkptVersion);
  w.str(c.architecture);
  w.str(to_string(c.mode));
  w.str(kv::emit(to_table(c.plan)));
  w.str(kv::emit(to_table(c.fingerprint)));
  w.str(c.config_text);
  w.pod<std::int64_t>(c.epoch);
  w.pod<std::uint64_t>(c.step);
  w.pod<double>(c.lr);
  w.pod<double>(c.plateau.best);
  w.pod<std::int64_t>(c.plateau.epochs_since_improve);
  w.pod<double>(c.best_epoch_loss);
  w.str(c.rng_state);
  if (c.params.size() != c.momentum.size()) throw Error(ErrorCode::InvalidCheckpoint, "params/momentum count differ");
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(c.params.size()));
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    detail::write_params(w, c.params[i]);
    detail::write_params(w, c.momentum[i]);
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  r.expect(detail::kCkptMagic, sizeof detail::kCkptMagic);
  if (r.pod<std::uint32_t>() != detail::kCkptVersion) throw Error(ErrorCode::InvalidCheckpoint, "unsupported version");
  Checkpoint c;
  c.architecture = r.str();
  try {
    c.mode = parse_train_mode(r.str());
    c.plan = plan_from_table(kv::parse(r.str()));
    c.fingerprint = fingerprint_from_table(kv::parse(r.str()));
  } catch (const Error& e) {
    throw Error(ErrorCode::InvalidCheckpoint, std::string("metadata: ") + e.what());
  }
  c.config_text = r.str();
  c.epoch = static_cast<int>(r.pod<std::int64_t>());
  c.step = r.pod<std::uint64_t>();
  c.lr = r.pod<double>();
  c.plateau.best = r.pod<double>();
  c.plateau.epochs_since_improve = static_cast<int>(r.pod<std::int64_t>());
  c.best_epoch_loss = r.pod<double>();
  c.rng_state = r.str();
  const auto nets = r.pod<std::uint32_t>();
  if (nets < 1 || nets > 2) throw Error(ErrorCode::InvalidCheckpoint, "expected one or two networks");
  for (std::uint32_t i = 0; i < nets; ++i) {
    c.params.push_back(detail::read_params(r));
    c.momentum.push_back(detail::read_params(r));
  }
  if (!r.done()) throw Error(ErrorCode::InvalidCheckpoint, "trailing bytes");
  return c;
}

/// Writes via a temporary file and rename so an interrupted save never
/// clobbers the previous checkpoint.
inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(c);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCode::IoFailure, "cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error(ErrorCode::IoFailure, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot rename checkpoint to " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::MissingFile, path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  return decode_checkpoint(buf.str());
}

/// Network for a checkpoint, refusing parameters that do not fit it.
inline Architecture checked_architecture(const Checkpoint& c) {
  const Architecture arch = Architecture::from_plan(c.plan);
  if (arch.signature() != c.architecture)
    throw Error(ErrorCode::ResumeMismatch, "checkpoint architecture '" + c.architecture + "' does not match plan '" +
                                               arch.signature() + "'");
  const Network<float> net(arch);
  for (const auto& p : c.params)
    if (!net.compatible(p)) throw Error(ErrorCode::ResumeMismatch, "checkpoint parameters do not match architecture");
  for (const auto& m : c.momentum)
    if (!net.compatible(m)) throw Error(ErrorCode::ResumeMismatch, "checkpoint momentum does not match architecture");
  return arch;
}

}  // namespace cps3d
