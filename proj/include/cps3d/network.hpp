#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cps3d/error.hpp"
#include "cps3d/nn_ops.hpp"
#include "cps3d/planner.hpp"
#include "cps3d/tensor.hpp"

namespace cps3d {

/// Geometry of the residual encoder-decoder. Level 0 is full resolution;
/// strides[l] takes level l-1 to level l, and strides[0] must be unit.
struct Architecture {
  Dims patch{16, 16, 16};
  int in_channels = 1;
  int num_classes = 2;
  std::vector<Stride> strides{{1, 1, 1}};
  std::vector<int> channels{4};
  int ds_outputs = 1;
  int encoder_blocks = 2;
  int decoder_blocks = 1;

  int levels() const { return static_cast<int>(strides.size()); }

  Dims level_dims(int level) const {
    Dims d = patch;
    for (int l = 1; l <= level; ++l)
      for (std::size_t a = 0; a < 3; ++a) d[a] /= static_cast<std::size_t>(strides[static_cast<std::size_t>(l)][a]);
    return d;
  }

  /// 3 along axes with extent > 1 at this level, 1 otherwise (2D plans get 1x3x3).
  std::array<int, 3> kernel_at(int level) const {
    const Dims d = level_dims(level);
    return {d.z > 1 ? 3 : 1, d.y > 1 ? 3 : 1, d.x > 1 ? 3 : 1};
  }

  void validate() const {
    const auto L = static_cast<std::size_t>(levels());
    if (L == 0 || channels.size() != L) throw Error(ErrorCode::InvalidPlan, "architecture level count mismatch");
    if (strides[0] != Stride{1, 1, 1}) throw Error(ErrorCode::InvalidPlan, "first encoder stage cannot downsample");
    if (in_channels < 1 || num_classes < 2 || encoder_blocks < 1 || decoder_blocks < 1)
      throw Error(ErrorCode::InvalidPlan, "architecture counts out of range");
    if (ds_outputs < 1 || ds_outputs > levels()) throw Error(ErrorCode::InvalidPlan, "ds_outputs out of range");
    Dims d = patch;
    for (std::size_t l = 1; l < L; ++l)
      for (std::size_t a = 0; a < 3; ++a) {
        const int s = strides[l][a];
        if ((s != 1 && s != 2) || d[a] % static_cast<std::size_t>(s) != 0)
          throw Error(ErrorCode::InvalidPlan, "patch not divisible by stride schedule");
        d[a] /= static_cast<std::size_t>(s);
      }
    if (d.count() == 0) throw Error(ErrorCode::InvalidPlan, "empty bottleneck");
    for (int c : channels)
      if (c < 1) throw Error(ErrorCode::InvalidPlan, "channel count must be positive");
  }

  /// Stable textual identity recorded in checkpoints.
  std::string signature() const {
    std::string s = "patch=" + std::to_string(patch.z) + "x" + std::to_string(patch.y) + "x" + std::to_string(patch.x);
    s += ";in=" + std::to_string(in_channels) + ";classes=" + std::to_string(num_classes) + ";strides=";
    for (std::size_t l = 0; l < strides.size(); ++l)
      s += (l ? "," : "") + std::to_string(strides[l][0]) + "x" + std::to_string(strides[l][1]) + "x" +
           std::to_string(strides[l][2]);
    s += ";channels=";
    for (std::size_t l = 0; l < channels.size(); ++l) s += (l ? "," : "") + std::to_string(channels[l]);
    s += ";ds=" + std::to_string(ds_outputs) + ";enc_blocks=" + std::to_string(encoder_blocks) +
         ";dec_blocks=" + std::to_string(decoder_blocks);
    return s;
  }

  /// Deep-supervision heads on every level except the two coarsest.
  static Architecture from_plan(const Plan& plan) {
    Architecture a;
    a.patch = plan.patch_size;
    a.num_classes = plan.num_classes;
    a.strides.assign(1, Stride{1, 1, 1});
    a.strides.insert(a.strides.end(), plan.pool_schedule.begin(), plan.pool_schedule.end());
    a.channels.clear();
    for (int l = 0; l < plan.levels(); ++l) a.channels.push_back(plan.channels_at(l));
    a.ds_outputs = std::max(1, plan.levels() - 2);
    a.validate();
    return a;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

enum class ParamKind : std::uint8_t { conv_weight, norm_scale, norm_offset, bias };

template <class T>
struct ParamTensor {
  std::string name;
  ParamKind kind = ParamKind::conv_weight;
  std::size_t fan_in = 1;
  AlignedVector<T> values;

  friend bool operator==(const ParamTensor&, const ParamTensor&) = default;
};

/// Flat, ordered list of named tensors (theta). Gradients share the layout.
template <class T>
struct NetParams {
  std::vector<ParamTensor<T>> tensors;

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.values.size();
    return n;
  }

  NetParams zeros_like() const {
    NetParams z = *this;
    for (auto& t : z.tensors) std::fill(t.values.begin(), t.values.end(), T{0});
    return z;
  }

  template <class F>
  void for_each_scalar(F&& f) {
    for (auto& t : tensors)
      for (auto& v : t.values) f(v);
  }

  friend bool operator==(const NetParams&, const NetParams&) = default;
};

/// Recorded ReLU on/off masks in forward traversal order. Replaying a pattern
/// evaluates the network on one fixed linear piece, which is what finite
/// difference gradient checks need near ReLU kinks.
using ReluPattern = std::vector<std::vector<std::uint8_t>>;

struct ForwardOptions {
  const ReluPattern* freeze = nullptr;
  ReluPattern* record = nullptr;
};

template <class T>
class Network {
 public:
  struct Conv {
    std::size_t weight = 0;
    nn::ConvGeometry geom;
  };
  struct Norm {
    std::size_t scale = 0, offset = 0;
  };
  struct Block {
    Conv conv_a, conv_b;
    Norm norm_a, norm_b;
    std::optional<Conv> proj;
  };
  struct Up {
    std::size_t weight = 0;
    nn::UpGeometry geom;
  };
  struct Head {
    std::size_t weight = 0, bias = 0;
    int level = 0;
    int cin = 1;
  };

  struct BlockTape {
    Tensor<T> input;
    nn::NormCache<T> norm_a, norm_b;
    Tensor<T> act_a;
    std::vector<std::uint8_t> mask_a, mask_out;
  };

  /// Activations of one sample kept for backward.
  struct Tape {
    std::vector<std::vector<BlockTape>> encoder;
    std::vector<std::vector<BlockTape>> decoder;
    std::vector<Tensor<T>> up_inputs;
    std::vector<Tensor<T>> level_out;  // decoder output per level (bottleneck = encoder output)
    std::vector<Tensor<T>> probs;      // per head
  };

  explicit Network(Architecture arch) : arch_(std::move(arch)) {
    arch_.validate();
    build();
  }

  const Architecture& architecture() const { return arch_; }
  std::size_t param_tensor_count() const { return layout_.size(); }

  /// He-normal conv weights (variance 2 / fan_in), unit norm scales, zero
  /// offsets and biases. Deterministic in seed.
  NetParams<T> init_params(std::uint64_t seed) const {
    NetParams<T> p;
    p.tensors = layout_;
    std::mt19937_64 rng(seed);
    for (auto& t : p.tensors) {
      switch (t.kind) {
        case ParamKind::conv_weight: {
          std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(t.fan_in)));
          for (auto& v : t.values) v = static_cast<T>(dist(rng));
          break;
        }
        case ParamKind::norm_scale: std::fill(t.values.begin(), t.values.end(), T{1}); break;
        case ParamKind::norm_offset:
        case ParamKind::bias: std::fill(t.values.begin(), t.values.end(), T{0}); break;
      }
    }
    return p;
  }

  NetParams<T> zero_params() const {
    NetParams<T> p;
    p.tensors = layout_;
    return p;
  }

  bool compatible(const NetParams<T>& p) const {
    if (p.tensors.size() != layout_.size()) return false;
    for (std::size_t i = 0; i < layout_.size(); ++i)
      if (p.tensors[i].name != layout_[i].name || p.tensors[i].values.size() != layout_[i].values.size()) return false;
    return true;
  }

  /// Softmax probabilities for every deep-supervision head, finest first.
  std::vector<ConfidenceMap<T>> forward(const NetParams<T>& params, const Tensor<T>& input, Tape* tape = nullptr,
                                        ForwardOptions opts = {}) const {
    if (input.channels != arch_.in_channels || input.dims != arch_.patch)
      throw Error(ErrorCode::ShapeMismatch, "network input must be (" + std::to_string(arch_.in_channels) + ", " +
                                                std::to_string(arch_.patch.z) + "x" + std::to_string(arch_.patch.y) +
                                                "x" + std::to_string(arch_.patch.x) + ")");
    if (!compatible(params)) throw Error(ErrorCode::ShapeMismatch, "parameters do not match architecture");
    const int L = arch_.levels();
    Tape local;
    Tape& tp = tape ? *tape : local;
    tp = Tape{};
    tp.encoder.resize(static_cast<std::size_t>(L));
    tp.decoder.resize(static_cast<std::size_t>(L));
    tp.up_inputs.resize(static_cast<std::size_t>(L));
    tp.level_out.resize(static_cast<std::size_t>(L));
    std::size_t site = 0;
    thread_local AlignedVector<T> scratch;  // fully overwritten by every user

    std::vector<Tensor<T>> enc_out(static_cast<std::size_t>(L));
    Tensor<T> x = input;
    for (int l = 0; l < L; ++l) {
      for (const auto& blk : encoder_[static_cast<std::size_t>(l)]) {
        tp.encoder[static_cast<std::size_t>(l)].emplace_back();
        x = block_forward(params, blk, x, tp.encoder[static_cast<std::size_t>(l)].back(), site, opts, scratch);
      }
      enc_out[static_cast<std::size_t>(l)] = x;
    }
    tp.level_out[static_cast<std::size_t>(L - 1)] = enc_out[static_cast<std::size_t>(L - 1)];
    for (int l = L - 2; l >= 0; --l) {
      const auto li = static_cast<std::size_t>(l);
      const auto& up = ups_[li];
      tp.up_inputs[li] = tp.level_out[li + 1];
      Tensor<T> u = nn::up_forward(tp.up_inputs[li], params.tensors[up.weight].values.data(), up.geom, scratch);
      Tensor<T> y(u.channels + enc_out[li].channels, u.dims);
      std::copy(u.data.begin(), u.data.end(), y.data.begin());
      std::copy(enc_out[li].data.begin(), enc_out[li].data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(u.size()));
      for (const auto& blk : decoder_[li]) {
        tp.decoder[li].emplace_back();
        y = block_forward(params, blk, y, tp.decoder[li].back(), site, opts, scratch);
      }
      tp.level_out[li] = std::move(y);
    }

    std::vector<ConfidenceMap<T>> out;
    for (const auto& h : heads_) {
      const auto& feat = tp.level_out[static_cast<std::size_t>(h.level)];
      Tensor<T> logits(arch_.num_classes, feat.dims);
      const auto n = static_cast<Eigen::Index>(feat.voxels());
      nn::MapMat<T>(logits.data.data(), arch_.num_classes, n).noalias() =
          nn::MapConstMat<T>(params.tensors[h.weight].values.data(), arch_.num_classes, h.cin) *
          nn::MapConstMat<T>(feat.data.data(), h.cin, n);
      const auto& b = params.tensors[h.bias].values;
      for (int c = 0; c < arch_.num_classes; ++c) {
        T* row = logits.channel(c);
        for (Eigen::Index i = 0; i < n; ++i) row[i] += b[static_cast<std::size_t>(c)];
      }
      out.push_back(nn::softmax(logits));
    }
    tp.probs = out;
    return out;
  }

  /// Accumulates d(loss)/d(theta) into grad given d(loss)/d(probabilities) for
  /// every head of one sample. Heads whose gradient tensor is empty are skipped.
  void backward(const NetParams<T>& params, const Tape& tp, std::span<const Tensor<T>> d_probs,
                NetParams<T>& grad) const {
    if (d_probs.size() != heads_.size()) throw Error(ErrorCode::ShapeMismatch, "one gradient per head expected");
    const int L = arch_.levels();
    thread_local AlignedVector<T> scratch;  // fully overwritten by every user
    std::vector<Tensor<T>> d_level(static_cast<std::size_t>(L));
    std::vector<Tensor<T>> d_enc(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
      const auto& ref = tp.level_out[static_cast<std::size_t>(l)];
      d_level[static_cast<std::size_t>(l)] = Tensor<T>(ref.channels, ref.dims);
    }

    for (std::size_t h = 0; h < heads_.size(); ++h) {
      if (d_probs[h].data.empty()) continue;
      const auto& head = heads_[h];
      const auto& feat = tp.level_out[static_cast<std::size_t>(head.level)];
      if (d_probs[h].channels != arch_.num_classes || d_probs[h].dims != feat.dims)
        throw Error(ErrorCode::ShapeMismatch, "head gradient shape");
      Tensor<T> dlogits = nn::softmax_backward(tp.probs[h], d_probs[h]);
      const auto n = static_cast<Eigen::Index>(feat.voxels());
      nn::MapConstMat<T> dL(dlogits.data.data(), arch_.num_classes, n);
      nn::MapMat<T>(grad.tensors[head.weight].values.data(), arch_.num_classes, head.cin).noalias() +=
          dL * nn::MapConstMat<T>(feat.data.data(), head.cin, n).transpose();
      auto& db = grad.tensors[head.bias].values;
      for (int c = 0; c < arch_.num_classes; ++c) db[static_cast<std::size_t>(c)] += dL.row(c).sum();
      nn::MapMat<T>(d_level[static_cast<std::size_t>(head.level)].data.data(), head.cin, n).noalias() +=
          nn::MapConstMat<T>(params.tensors[head.weight].values.data(), arch_.num_classes, head.cin).transpose() * dL;
    }

    for (int l = 0; l <= L - 2; ++l) {
      const auto li = static_cast<std::size_t>(l);
      Tensor<T> d = std::move(d_level[li]);
      for (std::size_t b = decoder_[li].size(); b-- > 0;)
        d = block_backward(params, decoder_[li][b], tp.decoder[li][b], d, grad, scratch);
      const auto& up = ups_[li];
      const int cu = up.geom.cout;
      Tensor<T> d_up(cu, d.dims);
      std::copy(d.data.begin(), d.data.begin() + static_cast<std::ptrdiff_t>(d_up.size()), d_up.data.begin());
      Tensor<T> d_skip(d.channels - cu, d.dims);
      std::copy(d.data.begin() + static_cast<std::ptrdiff_t>(d_up.size()), d.data.end(), d_skip.data.begin());
      d_enc[li] = std::move(d_skip);
      nn::up_backward(tp.up_inputs[li], params.tensors[up.weight].values.data(), up.geom, d_up,
                      grad.tensors[up.weight].values.data(), &d_level[li + 1], scratch);
    }
    {
      const auto top = static_cast<std::size_t>(L - 1);
      d_enc[top] = std::move(d_level[top]);
    }
    for (int l = L - 1; l >= 0; --l) {
      const auto li = static_cast<std::size_t>(l);
      Tensor<T> d = std::move(d_enc[li]);
      for (std::size_t b = encoder_[li].size(); b-- > 0;)
        d = block_backward(params, encoder_[li][b], tp.encoder[li][b], d, grad, scratch);
      if (l > 0) {
        auto& prev = d_enc[li - 1];
        for (std::size_t i = 0; i < d.size(); ++i) prev.data[i] += d.data[i];
      }
    }
  }

  /// Convenience: gradient of a scalar loss given as a callback that maps the
  /// per-sample head outputs to (value, d value / d outputs).
  template <class LossFn>
  std::pair<double, NetParams<T>> gradients(const NetParams<T>& params, std::span<const Tensor<T>> inputs,
                                            LossFn&& loss) const {
    std::vector<Tape> tapes(inputs.size());
    std::vector<std::vector<ConfidenceMap<T>>> outs;
    for (std::size_t b = 0; b < inputs.size(); ++b) outs.push_back(forward(params, inputs[b], &tapes[b]));
    auto [value, d_out] = loss(outs);
    NetParams<T> grad = params.zeros_like();
    for (std::size_t b = 0; b < inputs.size(); ++b) backward(params, tapes[b], d_out[b], grad);
    check_finite(grad);
    return {value, std::move(grad)};
  }

  static void check_finite(const NetParams<T>& grad) {
    for (const auto& t : grad.tensors)
      for (std::size_t i = 0; i < t.values.size(); ++i)
        if (!std::isfinite(static_cast<double>(t.values[i])))
          throw Error(ErrorCode::NonFiniteGradient, "non-finite gradient in " + t.name + "[" + std::to_string(i) + "]");
  }

 private:
  std::size_t add_param(std::string name, ParamKind kind, std::size_t count, std::size_t fan_in) {
    ParamTensor<T> t;
    t.name = std::move(name);
    t.kind = kind;
    t.fan_in = fan_in;
    t.values.assign(count, T{0});
    layout_.push_back(std::move(t));
    return layout_.size() - 1;
  }

  Conv make_conv(const std::string& name, Dims in, int cin, int cout, std::array<int, 3> kernel, Stride stride) {
    Conv c;
    c.geom = nn::conv_geometry(in, cin, cout, kernel, stride);
    c.weight = add_param(name + ".weight", ParamKind::conv_weight, c.geom.weight_count(), c.geom.rows());
    return c;
  }

  Norm make_norm(const std::string& name, int channels) {
    Norm n;
    n.scale = add_param(name + ".scale", ParamKind::norm_scale, static_cast<std::size_t>(channels), 1);
    n.offset = add_param(name + ".offset", ParamKind::norm_offset, static_cast<std::size_t>(channels), 1);
    return n;
  }

  Block make_block(const std::string& name, Dims in, int cin, int cout, Stride stride, std::array<int, 3> kernel) {
    Block b;
    b.conv_a = make_conv(name + ".conv_a", in, cin, cout, kernel, stride);
    b.norm_a = make_norm(name + ".norm_a", cout);
    b.conv_b = make_conv(name + ".conv_b", b.conv_a.geom.out, cout, cout, kernel, {1, 1, 1});
    b.norm_b = make_norm(name + ".norm_b", cout);
    if (cin != cout || stride != Stride{1, 1, 1}) b.proj = make_conv(name + ".proj", in, cin, cout, {1, 1, 1}, stride);
    return b;
  }

  void build() {
    const int L = arch_.levels();
    encoder_.resize(static_cast<std::size_t>(L));
    decoder_.resize(static_cast<std::size_t>(L));
    ups_.resize(static_cast<std::size_t>(L));
    int cin = arch_.in_channels;
    for (int l = 0; l < L; ++l) {
      const auto li = static_cast<std::size_t>(l);
      const int c = arch_.channels[li];
      for (int b = 0; b < arch_.encoder_blocks; ++b) {
        const Dims in = b == 0 ? arch_.level_dims(std::max(0, l - 1)) : arch_.level_dims(l);
        const Stride s = b == 0 ? arch_.strides[li] : Stride{1, 1, 1};
        encoder_[li].push_back(make_block("enc" + std::to_string(l) + ".block" + std::to_string(b), in,
                                          b == 0 ? cin : c, c, s, arch_.kernel_at(l)));
      }
      cin = c;
    }
    for (int l = L - 2; l >= 0; --l) {
      const auto li = static_cast<std::size_t>(l);
      const int c = arch_.channels[li];
      Up up;
      up.geom = nn::up_geometry(arch_.level_dims(l + 1), arch_.channels[li + 1], c, arch_.strides[li + 1]);
      up.weight = add_param("up" + std::to_string(l) + ".weight", ParamKind::conv_weight, up.geom.weight_count(),
                            static_cast<std::size_t>(up.geom.cin));
      ups_[li] = up;
      for (int b = 0; b < arch_.decoder_blocks; ++b)
        decoder_[li].push_back(make_block("dec" + std::to_string(l) + ".block" + std::to_string(b),
                                          arch_.level_dims(l), b == 0 ? 2 * c : c, c, {1, 1, 1}, arch_.kernel_at(l)));
    }
    for (int h = 0; h < arch_.ds_outputs; ++h) {
      Head head;
      head.level = h;
      head.cin = arch_.channels[static_cast<std::size_t>(h)];
      head.weight = add_param("head" + std::to_string(h) + ".weight", ParamKind::conv_weight,
                              static_cast<std::size_t>(arch_.num_classes * head.cin), static_cast<std::size_t>(head.cin));
      head.bias = add_param("head" + std::to_string(h) + ".bias", ParamKind::bias,
                            static_cast<std::size_t>(arch_.num_classes), 1);
      heads_.push_back(head);
    }
  }

  static void relu_site(Tensor<T>& v, std::vector<std::uint8_t>& mask, std::size_t& site, const ForwardOptions& opts) {
    mask.resize(v.size());
    if (opts.freeze) {
      if (site >= opts.freeze->size() || (*opts.freeze)[site].size() != v.size())
        throw Error(ErrorCode::ShapeMismatch, "frozen ReLU pattern does not match network");
      mask = (*opts.freeze)[site];
    } else {
      for (std::size_t i = 0; i < v.size(); ++i) mask[i] = v.data[i] > T{0} ? 1 : 0;
    }
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!mask[i]) v.data[i] = T{0};
    if (opts.record) opts.record->push_back(mask);
    ++site;
  }

  Tensor<T> block_forward(const NetParams<T>& p, const Block& b, const Tensor<T>& x, BlockTape& tp, std::size_t& site,
                          const ForwardOptions& opts, AlignedVector<T>& scratch) const {
    tp.input = x;
    Tensor<T> a = nn::conv_forward(x, p.tensors[b.conv_a.weight].values.data(), b.conv_a.geom, scratch);
    a = nn::instance_norm_forward(a, p.tensors[b.norm_a.scale].values.data(), p.tensors[b.norm_a.offset].values.data(),
                                  &tp.norm_a);
    relu_site(a, tp.mask_a, site, opts);
    tp.act_a = a;
    Tensor<T> y = nn::conv_forward(a, p.tensors[b.conv_b.weight].values.data(), b.conv_b.geom, scratch);
    y = nn::instance_norm_forward(y, p.tensors[b.norm_b.scale].values.data(), p.tensors[b.norm_b.offset].values.data(),
                                  &tp.norm_b);
    if (b.proj) {
      const Tensor<T> s = nn::conv_forward(x, p.tensors[b.proj->weight].values.data(), b.proj->geom, scratch);
      for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += s.data[i];
    } else {
      for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += x.data[i];
    }
    relu_site(y, tp.mask_out, site, opts);
    return y;
  }

  /// Returns the gradient w.r.t. the block input.
  Tensor<T> block_backward(const NetParams<T>& p, const Block& b, const BlockTape& tp, const Tensor<T>& d_out,
                           NetParams<T>& g, AlignedVector<T>& scratch) const {
    Tensor<T> d_pre = d_out;
    for (std::size_t i = 0; i < d_pre.size(); ++i)
      if (!tp.mask_out[i]) d_pre.data[i] = T{0};
    Tensor<T> d_in(tp.input.channels, tp.input.dims);
    if (b.proj) {
      nn::conv_backward(tp.input, p.tensors[b.proj->weight].values.data(), b.proj->geom, d_pre,
                        g.tensors[b.proj->weight].values.data(), &d_in, scratch);
    } else {
      d_in.data = d_pre.data;
    }
    Tensor<T> d_b = nn::instance_norm_backward(d_pre, p.tensors[b.norm_b.scale].values.data(), tp.norm_b,
                                               g.tensors[b.norm_b.scale].values.data(),
                                               g.tensors[b.norm_b.offset].values.data());
    Tensor<T> d_act(tp.act_a.channels, tp.act_a.dims);
    nn::conv_backward(tp.act_a, p.tensors[b.conv_b.weight].values.data(), b.conv_b.geom, d_b,
                      g.tensors[b.conv_b.weight].values.data(), &d_act, scratch);
    for (std::size_t i = 0; i < d_act.size(); ++i)
      if (!tp.mask_a[i]) d_act.data[i] = T{0};
    Tensor<T> d_a = nn::instance_norm_backward(d_act, p.tensors[b.norm_a.scale].values.data(), tp.norm_a,
                                               g.tensors[b.norm_a.scale].values.data(),
                                               g.tensors[b.norm_a.offset].values.data());
    nn::conv_backward(tp.input, p.tensors[b.conv_a.weight].values.data(), b.conv_a.geom, d_a,
                      g.tensors[b.conv_a.weight].values.data(), &d_in, scratch);
    return d_in;
  }

  Architecture arch_;
  std::vector<ParamTensor<T>> layout_;
  std::vector<std::vector<Block>> encoder_;
  std::vector<std::vector<Block>> decoder_;
  std::vector<Up> ups_;
  std::vector<Head> heads_;
};

/// Float <-> double parameter conversion (double for gradient checks).
template <class To, class From>
NetParams<To> cast_params(const NetParams<From>& p) {
  NetParams<To> out;
  for (const auto& t : p.tensors) {
    ParamTensor<To> c;
    c.name = t.name;
    c.kind = t.kind;
    c.fan_in = t.fan_in;
    c.values.assign(t.values.begin(), t.values.end());
    out.tensors.push_back(std::move(c));
  }
  return out;
}

}  // namespace cps3d
