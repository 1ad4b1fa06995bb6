#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "cps3d/checkpoint.hpp"
#include "cps3d/error.hpp"
#include "cps3d/fingerprint.hpp"
#include "cps3d/kv.hpp"
#include "cps3d/losses.hpp"
#include "cps3d/manifest.hpp"
#include "cps3d/network.hpp"
#include "cps3d/planner.hpp"
#include "cps3d/preprocess.hpp"

namespace cps3d {

struct PlateauConfig {
  double factor = 0.5;
  int patience = 25;
  double threshold = 1e-3;
  double min_lr = 1e-6;

  friend bool operator==(const PlateauConfig&, const PlateauConfig&) = default;
};

struct TrainConfig {
  int total_epochs = 40;
  int iterations_per_epoch = 25;
  int batch_labeled = 2;
  int batch_unlabeled = 2;
  double lr0 = 0.01;
  double weight_decay = 3e-5;
  double momentum = 0.99;
  bool nesterov = true;
  std::uint64_t seed = 0;
  LambdaSchedule lambda{0.5, 20};
  PlateauConfig plateau;
  AugmentConfig augment;
  /// >1 runs the two networks of a cps step on separate threads. Results do
  /// not depend on it.
  int workers = 1;

  void validate() const {
    if (total_epochs < 1 || iterations_per_epoch < 1 || batch_labeled < 1 || batch_unlabeled < 1)
      throw Error(ErrorCode::ConfigError, "epochs, iterations and batch sizes must be positive");
    if (!(lr0 >= 0) || !(weight_decay >= 0) || !(momentum >= 0 && momentum < 1))
      throw Error(ErrorCode::ConfigError, "lr0, weight_decay and momentum out of range");
    if (!(lambda.lambda_max >= 0) || lambda.ramp_end_epoch < 1)
      throw Error(ErrorCode::ConfigError, "lambda schedule out of range");
    if (!(plateau.factor > 0 && plateau.factor < 1) || plateau.patience < 1 || !(plateau.min_lr > 0))
      throw Error(ErrorCode::ConfigError, "plateau parameters out of range");
    if (workers < 1) throw Error(ErrorCode::ConfigError, "workers must be >= 1");
  }

  void check_plan(const Plan& plan) const {
    if (plan.batch_labeled != batch_labeled || plan.batch_unlabeled != batch_unlabeled)
      throw Error(ErrorCode::ConfigError, "batch sizes differ from the plan");
  }
};

inline kv::Table to_table(const TrainConfig& c) {
  using kv::format_double;
  return {{"train.total_epochs", std::to_string(c.total_epochs)},
          {"train.iterations_per_epoch", std::to_string(c.iterations_per_epoch)},
          {"train.batch_labeled", std::to_string(c.batch_labeled)},
          {"train.batch_unlabeled", std::to_string(c.batch_unlabeled)},
          {"train.lr0", format_double(c.lr0)},
          {"train.weight_decay", format_double(c.weight_decay)},
          {"train.momentum", format_double(c.momentum)},
          {"train.nesterov", c.nesterov ? "1" : "0"},
          {"train.seed", std::to_string(c.seed)},
          {"train.plateau_factor", format_double(c.plateau.factor)},
          {"train.plateau_patience", std::to_string(c.plateau.patience)},
          {"train.plateau_threshold", format_double(c.plateau.threshold)},
          {"train.plateau_min_lr", format_double(c.plateau.min_lr)},
          {"lambda.max", format_double(c.lambda.lambda_max)},
          {"lambda.ramp_end_epoch", std::to_string(c.lambda.ramp_end_epoch)},
          {"augment.mirror_prob", format_double(c.augment.mirror_prob)},
          {"augment.scale_prob", format_double(c.augment.scale_prob)},
          {"augment.noise_prob", format_double(c.augment.noise_prob)},
          {"augment.scale_range", format_double(c.augment.scale_low) + "," + format_double(c.augment.scale_high)},
          {"augment.noise_sigma_max", format_double(c.augment.noise_sigma_max)},
          {"augment.oversample_foreground", format_double(c.augment.oversample_foreground)}};
}

inline TrainConfig train_config_from(kv::Reader& r) {
  TrainConfig c;
  auto positive_int = [&](const std::string& k) {
    const long long v = r.integer(k);
    if (v < 0 || v > std::numeric_limits<int>::max()) throw Error(ErrorCode::ConfigError, k + " out of range");
    return static_cast<int>(v);
  };
  c.total_epochs = positive_int("train.total_epochs");
  c.iterations_per_epoch = positive_int("train.iterations_per_epoch");
  c.batch_labeled = positive_int("train.batch_labeled");
  c.batch_unlabeled = positive_int("train.batch_unlabeled");
  c.lr0 = r.real("train.lr0");
  c.weight_decay = r.real("train.weight_decay");
  c.momentum = r.real("train.momentum");
  c.nesterov = r.integer("train.nesterov") != 0;
  const long long seed = r.integer("train.seed");
  if (seed < 0) throw Error(ErrorCode::ConfigError, "train.seed must be non-negative");
  c.seed = static_cast<std::uint64_t>(seed);
  c.plateau.factor = r.real("train.plateau_factor");
  c.plateau.patience = positive_int("train.plateau_patience");
  c.plateau.threshold = r.real("train.plateau_threshold");
  c.plateau.min_lr = r.real("train.plateau_min_lr");
  c.lambda.lambda_max = r.real("lambda.max");
  c.lambda.ramp_end_epoch = positive_int("lambda.ramp_end_epoch");
  c.augment.mirror_prob = r.real("augment.mirror_prob");
  c.augment.scale_prob = r.real("augment.scale_prob");
  c.augment.noise_prob = r.real("augment.noise_prob");
  const auto range = r.reals("augment.scale_range");
  if (range.size() != 2 || !(range[0] > 0 && range[0] <= range[1]))
    throw Error(ErrorCode::ConfigError, "augment.scale_range needs two increasing positive values");
  c.augment.scale_low = range[0];
  c.augment.scale_high = range[1];
  c.augment.noise_sigma_max = r.real("augment.noise_sigma_max");
  c.augment.oversample_foreground = r.real("augment.oversample_foreground");
  return c;
}

// ---- data ----------------------------------------------------------------------

struct TrainingCase {
  Image image;
  LabelMap labels;
};

/// Cases resampled to the plan spacing and normalized with the fingerprint.
struct TrainingData {
  std::vector<TrainingCase> labeled;
  std::vector<Image> unlabeled;
};

inline Image preprocess_image(const Image& raw, const Spacing& target, const Fingerprint& fp) {
  return normalize(resample(raw, target, Interp::linear), fp);
}

inline Fingerprint fingerprint_manifest(const DatasetManifest& m) {
  FingerprintAccumulator acc;
  for (const auto& c : m.labeled) acc.add(read_image(c.image));
  for (const auto& p : m.unlabeled) acc.add(read_image(p));
  return acc.finish();
}

inline TrainingData load_training_data(const DatasetManifest& m, const Plan& plan, const Fingerprint& fp) {
  if (m.labeled.empty()) throw Error(ErrorCode::EmptyLabeledSet, "manifest has no labeled cases");
  if (m.num_classes != plan.num_classes)
    throw Error(ErrorCode::ConfigError, "manifest has " + std::to_string(m.num_classes) + " classes, plan has " +
                                            std::to_string(plan.num_classes));
  TrainingData d;
  for (const auto& c : m.labeled) {
    const Image raw = read_image(c.image);
    const LabelMap lab = read_labels(c.labels);
    if (lab.dims != raw.dims) throw Error(ErrorCode::ShapeMismatch, "label dims differ from image " + c.image.string());
    validate_labels(lab, m.num_classes);
    TrainingCase tc;
    tc.image = preprocess_image(raw, plan.target_spacing, fp);
    tc.labels = resample_to_dims(lab, tc.image.dims, plan.target_spacing, Interp::nearest);
    d.labeled.push_back(std::move(tc));
  }
  for (const auto& p : m.unlabeled) d.unlabeled.push_back(preprocess_image(read_image(p), plan.target_spacing, fp));
  return d;
}

struct Batch {
  std::vector<Patch> labeled;
  std::vector<Patch> unlabeled;
};

/// Labeled cases and the unlabeled pool are both sampled uniformly with
/// replacement. The unlabeled half is drawn in every mode so that the RNG
/// stream does not depend on whether it is used.
inline Batch draw_batch(const TrainingData& data, const Plan& plan, const TrainConfig& cfg, Rng& rng) {
  Batch b;
  for (int i = 0; i < cfg.batch_labeled; ++i) {
    const auto k = std::uniform_int_distribution<std::size_t>(0, data.labeled.size() - 1)(rng);
    const auto& c = data.labeled[k];
    b.labeled.push_back(augment(
        sample_patch(c.image, &c.labels, plan.patch_size, rng, cfg.augment.oversample_foreground, k), rng, cfg.augment));
  }
  if (!data.unlabeled.empty()) {
    for (int i = 0; i < cfg.batch_unlabeled; ++i) {
      const auto k = std::uniform_int_distribution<std::size_t>(0, data.unlabeled.size() - 1)(rng);
      b.unlabeled.push_back(
          augment(sample_patch(data.unlabeled[k], nullptr, plan.patch_size, rng, 0.0, k), rng, cfg.augment));
    }
  }
  return b;
}

// ---- optimisation -----------------------------------------------------------------

/// SGD with (Nesterov) momentum and decoupled weight decay:
///   buf = mu * buf + g;  u = nesterov ? g + mu * buf : buf;  theta -= lr * (u + wd * theta).
template <class T>
void sgd_update(NetParams<T>& params, NetParams<T>& momentum, const NetParams<T>& grad, double lr,
                const TrainConfig& cfg) {
  const T wd = static_cast<T>(cfg.weight_decay), mu = static_cast<T>(cfg.momentum), step = static_cast<T>(lr);
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    auto& p = params.tensors[t].values;
    auto& m = momentum.tensors[t].values;
    const auto& g = grad.tensors[t].values;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = mu * m[i] + g[i];
      const T u = cfg.nesterov ? g[i] + mu * m[i] : m[i];
      p[i] -= step * (u + wd * p[i]);
    }
  }
}

/// Absolute-threshold plateau rule on the epoch-mean loss. Returns the new lr.
inline double plateau_step(PlateauState& s, double epoch_loss, double lr, const PlateauConfig& cfg) {
  if (epoch_loss < s.best - cfg.threshold) {
    s.best = epoch_loss;
    s.epochs_since_improve = 0;
    return lr;
  }
  if (++s.epochs_since_improve >= cfg.patience) {
    s.epochs_since_improve = 0;
    return std::max(cfg.min_lr, lr * cfg.factor);
  }
  return lr;
}

struct DualNetState {
  NetParams<float> params1, params2;
  NetParams<float> momentum1, momentum2;
  int epoch = 0;
  std::uint64_t step = 0;
  Rng rng;
  double lr = 0.01;
  PlateauState plateau;
  double best_epoch_loss = std::numeric_limits<double>::infinity();
};

/// θ1 and θ2 come from distinct seeds derived from the run seed.
inline std::uint64_t net_seed(std::uint64_t seed, int which) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(which)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline DualNetState initial_state(const Network<float>& net, const TrainConfig& cfg, TrainMode mode) {
  DualNetState s;
  s.params1 = net.init_params(net_seed(cfg.seed, 1));
  s.momentum1 = s.params1.zeros_like();
  if (mode == TrainMode::cps) {
    s.params2 = net.init_params(net_seed(cfg.seed, 2));
    s.momentum2 = s.params2.zeros_like();
  }
  s.rng.seed(cfg.seed);
  s.lr = cfg.lr0;
  return s;
}

namespace detail {

template <class T>
struct NetPass {
  std::vector<typename Network<T>::Tape> tapes;
  std::vector<std::vector<ConfidenceMap<T>>> outs;
  std::vector<std::vector<Tensor<T>>> grads;

  void forward(const Network<T>& net, const NetParams<T>& p, const std::vector<Tensor<T>>& inputs,
               const std::vector<ReluPattern>* freeze, std::vector<ReluPattern>* record) {
    tapes.assign(inputs.size(), {});
    outs.clear();
    grads.clear();
    if (record) record->assign(inputs.size(), {});
    for (std::size_t b = 0; b < inputs.size(); ++b) {
      ForwardOptions opts;
      if (freeze) opts.freeze = &freeze->at(b);
      if (record) opts.record = &(*record)[b];
      outs.push_back(net.forward(p, inputs[b], &tapes[b], opts));
      std::vector<Tensor<T>> g;
      for (const auto& o : outs.back()) g.emplace_back(o.channels, o.dims);
      grads.push_back(std::move(g));
    }
  }

  NetParams<T> backward(const Network<T>& net, const NetParams<T>& p) const {
    NetParams<T> g = p.zeros_like();
    for (std::size_t b = 0; b < tapes.size(); ++b) net.backward(p, tapes[b], grads[b], g);
    Network<T>::check_finite(g);
    return g;
  }
};

template <class F>
void run_pair(bool parallel, F&& f1, F&& f2) {
  if (parallel) {
    auto fut = std::async(std::launch::async, f2);
    f1();
    fut.get();
  } else {
    f1();
    f2();
  }
}

}  // namespace detail

/// Pseudo-labels of each sample's finest head, y1 from network 1.
struct PseudoLabels {
  std::vector<LabelMap> y1, y2;
};

/// Hooks used by gradient checks: replay ReLU patterns and hold the
/// pseudo-labels fixed so the objective is smooth in the parameters.
struct ObjectiveProbe {
  const std::vector<ReluPattern>* freeze1 = nullptr;
  const std::vector<ReluPattern>* freeze2 = nullptr;
  std::vector<ReluPattern>* record1 = nullptr;
  std::vector<ReluPattern>* record2 = nullptr;
  const PseudoLabels* fixed_pseudo = nullptr;
  PseudoLabels* pseudo_out = nullptr;
  bool gradients = true;
};

template <class T>
struct Objective {
  LossReport report;
  NetParams<T> grad1, grad2;
  std::size_t forward_passes = 0;
};

/// The training objective of one step and its gradients. Inputs are the
/// labeled samples followed by the unlabeled ones. L_sup is the mean over
/// labeled samples of both networks' dice_ce against ground truth; each CPS
/// term is a per-sample mean with the peer's argmax as a fixed target. The
/// baseline mode evaluates network 1 on L_sup alone and ignores unlabeled
/// inputs and p2.
template <class T>
Objective<T> training_objective(const Network<T>& net, const NetParams<T>& p1, const NetParams<T>& p2,
                                const std::vector<Tensor<T>>& labeled_inputs, const std::vector<LabelMap>& gts,
                                const std::vector<Tensor<T>>& unlabeled_inputs, int epoch,
                                const LambdaSchedule& sched, TrainMode mode, int workers = 1,
                                const ObjectiveProbe& probe = {}) {
  if (labeled_inputs.empty()) throw Error(ErrorCode::EmptyLabeledSet, "objective needs labeled samples");
  if (gts.size() != labeled_inputs.size()) throw Error(ErrorCode::MissingGroundTruth, "one label map per labeled sample");
  const bool cps = mode == TrainMode::cps;
  std::vector<Tensor<T>> inputs = labeled_inputs;
  if (cps) inputs.insert(inputs.end(), unlabeled_inputs.begin(), unlabeled_inputs.end());
  const std::size_t nl = labeled_inputs.size(), nu = cps ? unlabeled_inputs.size() : 0;
  const double lambda = sched.at(epoch);

  detail::NetPass<T> a, b;
  detail::run_pair(cps && workers > 1,
                   std::function<void()>([&] { a.forward(net, p1, inputs, probe.freeze1, probe.record1); }),
                   std::function<void()>([&] {
                     if (cps) b.forward(net, p2, inputs, probe.freeze2, probe.record2);
                   }));
  Objective<T> out;
  out.forward_passes = cps ? 2 : 1;

  double l_sup = 0.0, cps_l = 0.0, cps_u = 0.0;
  const double inv_l = 1.0 / static_cast<double>(nl);
  for (std::size_t i = 0; i < nl; ++i) {
    l_sup += inv_l * ds_dice_ce(a.outs[i], label_pyramid(gts[i], a.outs[i]), &a.grads[i], inv_l);
    if (cps) l_sup += inv_l * ds_dice_ce(b.outs[i], label_pyramid(gts[i], b.outs[i]), &b.grads[i], inv_l);
  }
  if (cps) {
    if (probe.pseudo_out) *probe.pseudo_out = {};
    for (std::size_t i = 0; i < nl + nu; ++i) {
      const bool is_l = i < nl;
      const double w = is_l ? inv_l : 1.0 / static_cast<double>(nu);
      const LabelMap y1 = probe.fixed_pseudo ? probe.fixed_pseudo->y1.at(i) : make_pseudo_label(a.outs[i].front());
      const LabelMap y2 = probe.fixed_pseudo ? probe.fixed_pseudo->y2.at(i) : make_pseudo_label(b.outs[i].front());
      if (probe.pseudo_out) {
        probe.pseudo_out->y1.push_back(y1);
        probe.pseudo_out->y2.push_back(y2);
      }
      const double term = ds_dice_ce(a.outs[i], label_pyramid(y2, a.outs[i]), &a.grads[i], lambda * w) +
                          ds_dice_ce(b.outs[i], label_pyramid(y1, b.outs[i]), &b.grads[i], lambda * w);
      (is_l ? cps_l : cps_u) += w * term;
    }
  }
  out.report = total_loss(l_sup, cps_l, cps_u, epoch, sched);
  if (!std::isfinite(out.report.total))
    throw Error(ErrorCode::NonFiniteLoss, "total loss is " + std::to_string(out.report.total));
  if (!probe.gradients) return out;

  detail::run_pair(cps && workers > 1, std::function<void()>([&] { out.grad1 = a.backward(net, p1); }),
                   std::function<void()>([&] {
                     if (cps) out.grad2 = b.backward(net, p2);
                   }));
  return out;
}

/// One optimisation step on labeled then unlabeled patches.
inline LossReport train_step(DualNetState& s, const Network<float>& net, const std::vector<Patch>& labeled,
                             const std::vector<Patch>& unlabeled, const TrainConfig& cfg, TrainMode mode,
                             std::size_t* forward_passes = nullptr) {
  if (labeled.empty()) throw Error(ErrorCode::EmptyLabeledSet, "train_step needs labeled patches");
  std::vector<Tensor<float>> li, ui;
  std::vector<LabelMap> gts;
  for (const auto& p : labeled) {
    if (!p.labels) throw Error(ErrorCode::MissingGroundTruth, "labeled patch without labels");
    li.push_back(tensor_from_grid<float>(p.image));
    gts.push_back(*p.labels);
  }
  if (mode == TrainMode::cps)
    for (const auto& p : unlabeled) ui.push_back(tensor_from_grid<float>(p.image));
  Objective<float> obj =
      training_objective(net, s.params1, s.params2, li, gts, ui, s.epoch, cfg.lambda, mode, cfg.workers);
  if (forward_passes) *forward_passes += obj.forward_passes;
  sgd_update(s.params1, s.momentum1, obj.grad1, s.lr, cfg);
  if (mode == TrainMode::cps) sgd_update(s.params2, s.momentum2, obj.grad2, s.lr, cfg);
  ++s.step;
  return obj.report;
}

// ---- driver ---------------------------------------------------------------------------

inline std::string rng_to_string(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_string(const std::string& s) {
  Rng rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw Error(ErrorCode::InvalidCheckpoint, "bad RNG state");
  return rng;
}

inline std::string config_echo(const TrainConfig& cfg, TrainMode mode) {
  kv::Table t{{"mode", to_string(mode)}};
  for (auto& kv : to_table(cfg)) t.push_back(kv);
  return kv::emit(t);
}

class Trainer {
 public:
  Trainer(TrainingData data, Plan plan, Fingerprint fp, TrainConfig cfg, TrainMode mode)
      : data_(std::move(data)),
        plan_(std::move(plan)),
        fp_(fp),
        cfg_(std::move(cfg)),
        mode_(mode),
        net_(Architecture::from_plan(plan_)) {
    cfg_.validate();
    cfg_.check_plan(plan_);
    if (data_.labeled.empty()) throw Error(ErrorCode::EmptyLabeledSet, "no labeled training cases");
    state_ = initial_state(net_, cfg_, mode_);
  }

  const DualNetState& state() const { return state_; }
  DualNetState& state() { return state_; }
  const Network<float>& network() const { return net_; }
  const Plan& plan() const { return plan_; }
  const TrainConfig& config() const { return cfg_; }
  TrainMode mode() const { return mode_; }
  std::size_t forward_passes() const { return forward_passes_; }
  void set_lr(double lr) { state_.lr = lr; }

  LossReport step() {
    const Batch b = draw_batch(data_, plan_, cfg_, state_.rng);
    return train_step(state_, net_, b.labeled, b.unlabeled, cfg_, mode_, &forward_passes_);
  }

  /// Runs one epoch and applies the end-of-epoch schedule. Returns the
  /// epoch-mean total loss.
  double run_epoch(const std::function<void(const LossReport&)>& on_step = {}) {
    double sum = 0.0;
    for (int i = 0; i < cfg_.iterations_per_epoch; ++i) {
      const LossReport r = step();
      if (on_step) on_step(r);
      sum += r.total;
    }
    const double mean = sum / cfg_.iterations_per_epoch;
    state_.lr = plateau_step(state_.plateau, mean, state_.lr, cfg_.plateau);
    ++state_.epoch;
    return mean;
  }

  Checkpoint snapshot() const {
    Checkpoint c;
    c.architecture = net_.architecture().signature();
    c.mode = mode_;
    c.plan = plan_;
    c.fingerprint = fp_;
    c.config_text = config_echo(cfg_, mode_);
    c.epoch = state_.epoch;
    c.step = state_.step;
    c.lr = state_.lr;
    c.plateau = state_.plateau;
    c.best_epoch_loss = state_.best_epoch_loss;
    c.rng_state = rng_to_string(state_.rng);
    c.params.push_back(state_.params1);
    c.momentum.push_back(state_.momentum1);
    if (mode_ == TrainMode::cps) {
      c.params.push_back(state_.params2);
      c.momentum.push_back(state_.momentum2);
    }
    return c;
  }

  void restore(const Checkpoint& c) {
    if (c.architecture != net_.architecture().signature() || !(c.plan == plan_))
      throw Error(ErrorCode::ResumeMismatch, "checkpoint architecture differs from the plan");
    if (c.mode != mode_) throw Error(ErrorCode::ResumeMismatch, "checkpoint was trained in mode " + to_string(c.mode));
    const std::size_t nets = mode_ == TrainMode::cps ? 2 : 1;
    if (c.params.size() != nets || c.momentum.size() != nets)
      throw Error(ErrorCode::ResumeMismatch, "checkpoint network count differs");
    for (std::size_t i = 0; i < nets; ++i)
      if (!net_.compatible(c.params[i]) || !net_.compatible(c.momentum[i]))
        throw Error(ErrorCode::ResumeMismatch, "checkpoint tensors do not match architecture");
    state_.params1 = c.params[0];
    state_.momentum1 = c.momentum[0];
    if (nets == 2) {
      state_.params2 = c.params[1];
      state_.momentum2 = c.momentum[1];
    }
    state_.epoch = c.epoch;
    state_.step = c.step;
    state_.lr = c.lr;
    state_.plateau = c.plateau;
    state_.best_epoch_loss = c.best_epoch_loss;
    state_.rng = rng_from_string(c.rng_state);
  }

 private:
  TrainingData data_;
  Plan plan_;
  Fingerprint fp_;
  TrainConfig cfg_;
  TrainMode mode_;
  Network<float> net_;
  DualNetState state_;
  std::size_t forward_passes_ = 0;
};

inline std::string csv_row(int epoch, std::uint64_t step, const LossReport& r, double lr) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", epoch,
                static_cast<unsigned long long>(step), r.l_sup, r.l_cps_labeled, r.l_cps_unlabeled, r.lambda, r.total,
                lr);
  return buf;
}

inline constexpr const char* kTrainLogHeader = "epoch,step,l_sup,l_cps_l,l_cps_u,lambda,total,lr\n";

struct RunOptions {
  std::optional<std::filesystem::path> resume;
  /// Stop after this many epochs in this invocation (used to emulate interruption).
  std::optional<int> max_epochs_this_run;
};

/// Trains to cfg.total_epochs, writing latest.ckpt every epoch, best.ckpt on a
/// new lowest epoch loss, config_echo.txt and train_log.csv into out_dir.
/// Returns the path of latest.ckpt.
inline std::filesystem::path run_training(const DatasetManifest& manifest, const Plan& plan, const Fingerprint& fp,
                                          const TrainConfig& cfg, TrainMode mode, const std::filesystem::path& out_dir,
                                          const RunOptions& opts = {}) {
  Trainer trainer(load_training_data(manifest, plan, fp), plan, fp, cfg, mode);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + out_dir.string());
  const auto latest = out_dir / "latest.ckpt";
  const auto best = out_dir / "best.ckpt";
  const auto log_path = out_dir / "train_log.csv";

  if (opts.resume) {
    trainer.restore(load_checkpoint(*opts.resume));
    spdlog::info("resumed from {} at epoch {}", opts.resume->string(), trainer.state().epoch);
  }
  {
    std::ofstream echo(out_dir / "config_echo.txt", std::ios::trunc);
    echo << config_echo(cfg, mode) << kv::emit(to_table(plan));
    if (!echo) throw Error(ErrorCode::IoFailure, "cannot write config_echo.txt");
  }
  std::ofstream log;
  if (opts.resume && std::filesystem::exists(log_path)) {
    // Keep the rows of completed epochs only.
    std::ifstream in(log_path);
    std::string line, kept;
    std::getline(in, line);
    kept = kTrainLogHeader;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoi(line.substr(0, line.find(','))) < trainer.state().epoch) kept += line + "\n";
    }
    in.close();
    log.open(log_path, std::ios::trunc);
    log << kept;
  } else {
    log.open(log_path, std::ios::trunc);
    log << kTrainLogHeader;
  }
  if (!log) throw Error(ErrorCode::IoFailure, "cannot write " + log_path.string());

  int run_epochs = 0;
  while (trainer.state().epoch < cfg.total_epochs) {
    if (opts.max_epochs_this_run && run_epochs >= *opts.max_epochs_this_run) break;
    const int epoch = trainer.state().epoch;
    double mean = 0.0;
    try {
      mean = trainer.run_epoch([&](const LossReport& r) {
        log << csv_row(epoch, trainer.state().step - 1, r, trainer.state().lr);
      });
    } catch (const Error& e) {
      if (e.code() == ErrorCode::NonFiniteLoss || e.code() == ErrorCode::NonFiniteGradient) {
        const std::string last = std::filesystem::exists(latest) ? latest.string() : std::string("none");
        throw Error(e.code(), std::string(e.what()) + " (last good checkpoint: " + last + ")");
      }
      throw;
    }
    log.flush();
    ++run_epochs;
    const bool improved = mean < trainer.state().best_epoch_loss;
    if (improved) trainer.state().best_epoch_loss = mean;
    const Checkpoint ck = trainer.snapshot();
    save_checkpoint(ck, latest);
    if (improved) save_checkpoint(ck, best);
    spdlog::info("[{}] epoch {}/{} loss {:.5f} lr {:.3g}", to_string(mode), epoch + 1, cfg.total_epochs, mean,
                 trainer.state().lr);
  }
  if (!std::filesystem::exists(latest)) save_checkpoint(trainer.snapshot(), latest);
  return latest;
}

inline std::filesystem::path supervised_baseline(const DatasetManifest& manifest, const Plan& plan,
                                                 const Fingerprint& fp, const TrainConfig& cfg,
                                                 const std::filesystem::path& out_dir, const RunOptions& opts = {}) {
  return run_training(manifest, plan, fp, cfg, TrainMode::baseline, out_dir, opts);
}

}  // namespace cps3d
