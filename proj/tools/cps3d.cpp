// Command-line front end: synth -> fingerprint -> plan -> train -> infer -> evaluate.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "cps3d/checkpoint.hpp"
#include "cps3d/config.hpp"
#include "cps3d/fingerprint.hpp"
#include "cps3d/inference.hpp"
#include "cps3d/manifest.hpp"
#include "cps3d/metrics.hpp"
#include "cps3d/planner.hpp"
#include "cps3d/synthdata.hpp"
#include "cps3d/trainer.hpp"

namespace fs = std::filesystem;
using namespace cps3d;

namespace {

struct Globals {
  std::string config_path;
  int workers = 1;
  std::string log_level = "info";
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  os << text;
  if (!os) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
}

fs::path echo_path(const fs::path& output) {
  fs::path p = output;
  p += ".echo.txt";
  return p;
}

std::string table_text(std::initializer_list<std::pair<std::string, std::string>> rows) {
  kv::Table t(rows.begin(), rows.end());
  return kv::emit(t);
}

ExperimentConfig base_config(const Globals& g) {
  ExperimentConfig c = g.config_path.empty() ? ExperimentConfig{} : load_config(g.config_path);
  c.train.workers = g.workers;
  return c;
}

// ---- synth ------------------------------------------------------------------------

struct SynthArgs {
  std::size_t labeled = 4, unlabeled = 32, test = 0;
  std::size_t dims = 32;
  int classes = 4;
  std::uint64_t seed = 0;
  std::string out;
};

void run_synth(const Globals& g, const SynthArgs& a, const CLI::App& cmd) {
  ExperimentConfig cfg = base_config(g);
  PhantomConfig& pc = cfg.phantom;
  if (cmd.count("--dims")) pc.dims = {a.dims, a.dims, a.dims};
  if (cmd.count("--classes")) pc.num_organs = a.classes - 1;
  if (pc.num_organs < 1) throw Error(ErrorCode::ConfigError, "--classes counts background and must be >= 2");
  const fs::path out(a.out);
  const fs::path manifest = generate_dataset(a.labeled, a.unlabeled, pc, a.seed, out);
  if (a.test > 0) {
    fs::create_directories(out / "imagesTs");
    fs::create_directories(out / "labelsTs");
    for (std::size_t i = 0; i < a.test; ++i) {
      const Phantom ph = generate_phantom(pc, a.seed + a.labeled + a.unlabeled + i);
      write_volume(ph.image, out / "imagesTs" / case_name(i));
      write_volume(ph.labels, out / "labelsTs" / case_name(i));
    }
  }
  kv::Table echo{{"labeled", std::to_string(a.labeled)},
                 {"unlabeled", std::to_string(a.unlabeled)},
                 {"test", std::to_string(a.test)},
                 {"seed", std::to_string(a.seed)},
                 {"num_classes", std::to_string(pc.num_organs + 1)}};
  for (auto& e : to_table(pc)) echo.push_back(e);
  write_text(out / "synth_config.txt", kv::emit(echo));
  std::cout << manifest.string() << "\n";
}

// ---- fingerprint ----------------------------------------------------------------

void run_fingerprint(const std::string& manifest_path, const std::string& out) {
  const DatasetManifest m = load_manifest(manifest_path);
  const Fingerprint fp = fingerprint_manifest(m);
  write_fingerprint(fp, out);
  write_text(echo_path(out), table_text({{"manifest", manifest_path},
                                         {"low_permille", "5"},
                                         {"high_permille", "995"},
                                         {"pool", "labeled+unlabeled"}}));
  spdlog::info("fingerprint over {} cases / {} voxels: mean {:.4g} std {:.4g}", fp.num_cases, fp.num_voxels, fp.mean,
               fp.std);
}

// ---- plan -----------------------------------------------------------------------

struct PlanArgs {
  std::string fingerprint, manifest, out, dim = "3d", patch;
  int classes = 0;
  PlanConstraints c;
};

void run_plan(const PlanArgs& a) {
  const Fingerprint fp = read_fingerprint(a.fingerprint);
  PlanConstraints c = a.c;
  if (a.classes > 0)
    c.num_classes = a.classes;
  else if (!a.manifest.empty())
    c.num_classes = load_manifest(a.manifest).num_classes;
  else
    throw Error(ErrorCode::ConfigError, "plan needs --classes or --manifest");
  if (!a.patch.empty()) {
    unsigned long z = 0, y = 0, x = 0;
    if (std::sscanf(a.patch.c_str(), "%lu,%lu,%lu", &z, &y, &x) != 3)
      throw Error(ErrorCode::ConfigError, "--patch expects z,y,x");
    c.patch_override = Dims{z, y, x};
  }
  if (a.dim != "3d" && a.dim != "2d") throw Error(ErrorCode::ConfigError, "--dim must be 2d or 3d");
  const Plan plan = make_plan(fp, a.dim == "2d" ? Dimensionality::two_d : Dimensionality::three_d, c);
  write_plan(plan, a.out);
  write_text(echo_path(a.out), table_text({{"fingerprint", a.fingerprint},
                                           {"dim", a.dim},
                                           {"max_patch_voxels", std::to_string(c.max_patch_voxels)},
                                           {"base_channels", std::to_string(c.base_channels)},
                                           {"max_channels", std::to_string(c.max_channels)},
                                           {"batch", std::to_string(c.batch)},
                                           {"num_classes", std::to_string(c.num_classes)}}));
  const Dims bn = bottleneck(plan.patch_size, plan.pool_schedule);
  spdlog::info("plan: patch {}x{}x{}, {} levels, bottleneck {}x{}x{}", plan.patch_size.z, plan.patch_size.y,
               plan.patch_size.x, plan.levels(), bn.z, bn.y, bn.x);
}

// ---- train ------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest, plan, fingerprint, mode = "cps", out, resume;
  std::uint64_t seed = 0;
  int epochs = 0, iterations = 0;
  double lambda_max = -1, lr = -1;
};

void run_train(const Globals& g, const TrainArgs& a, const CLI::App& cmd) {
  ExperimentConfig cfg = base_config(g);
  TrainConfig& tc = cfg.train;
  tc.seed = a.seed;
  if (cmd.count("--epochs")) {
    tc.total_epochs = a.epochs;
    if (g.config_path.empty()) tc.lambda.ramp_end_epoch = std::max(1, a.epochs / 2);
  }
  if (cmd.count("--iterations")) tc.iterations_per_epoch = a.iterations;
  if (cmd.count("--lambda-max")) tc.lambda.lambda_max = a.lambda_max;
  if (cmd.count("--lr")) tc.lr0 = a.lr;
  const TrainMode mode = parse_train_mode(a.mode);
  const DatasetManifest m = load_manifest(a.manifest);
  const Plan plan = read_plan(a.plan);
  tc.batch_labeled = plan.batch_labeled;
  tc.batch_unlabeled = plan.batch_unlabeled;
  tc.validate();
  const Fingerprint fp = a.fingerprint.empty() ? fingerprint_manifest(m) : read_fingerprint(a.fingerprint);
  RunOptions opts;
  if (!a.resume.empty()) opts.resume = a.resume;
  const fs::path latest = run_training(m, plan, fp, tc, mode, a.out, opts);
  // Full resolved configuration next to the checkpoints.
  write_text(fs::path(a.out) / "experiment_config.txt", emit_config(cfg));
  std::cout << latest.string() << "\n";
}

// ---- infer ------------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, input, output, mode = "normal";
  bool force_spacing = false, postprocess_cc = false;
  int net = 1;
};

void run_infer(const Globals& g, const InferArgs& a) {
  const ExperimentConfig cfg = base_config(g);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Architecture arch = checked_architecture(ck);
  if (a.net < 1 || static_cast<std::size_t>(a.net) > ck.params.size())
    throw Error(ErrorCode::ConfigError, "--net " + std::to_string(a.net) + " not in checkpoint (has " +
                                            std::to_string(ck.params.size()) + ")");
  const Network<float> net(arch);
  const NetParams<float>& params = ck.params[static_cast<std::size_t>(a.net - 1)];
  InferenceOptions opts;
  opts.mode = parse_inference_mode(a.mode);
  if (a.force_spacing) opts.force_spacing = cfg.spacing;
  opts.postprocess_cc = a.postprocess_cc;

  auto one = [&](const fs::path& in, const fs::path& out) {
    const Image raw = read_image(in);
    InferenceStats st;
    const LabelMap seg = predict_case(net, params, raw, ck.plan, ck.fingerprint, opts, &st);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_volume(seg, out);
    spdlog::info("{}: {} forward calls over {} passes", in.filename().string(), st.forward_calls, st.passes);
  };

  kv::Table echo{{"checkpoint", a.checkpoint},
                 {"net", std::to_string(a.net)},
                 {"mode", a.mode},
                 {"force_spacing", a.force_spacing ? "1" : "0"},
                 {"postprocess_cc", a.postprocess_cc ? "1" : "0"},
                 {"step_fraction", kv::format_double(opts.step_fraction)}};
  for (auto& e : to_table(cfg.spacing)) echo.push_back(e);

  if (fs::is_directory(a.input)) {
    const auto inputs = list_volumes(a.input);
    fs::create_directories(a.output);
    const auto workers = static_cast<std::size_t>(std::max(1, g.workers));
    for (std::size_t i = 0; i < inputs.size(); i += workers) {
      std::vector<std::future<void>> jobs;
      for (std::size_t k = i; k < std::min(inputs.size(), i + workers); ++k)
        jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred,
                                  [&, k] { one(inputs[k], fs::path(a.output) / inputs[k].filename()); }));
      for (auto& j : jobs) j.get();
    }
    write_text(fs::path(a.output) / "infer_config.txt", kv::emit(echo));
  } else {
    one(a.input, a.output);
    write_text(echo_path(a.output), kv::emit(echo));
  }
}

// ---- evaluate -------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, out;
  int classes = 4;
  double tolerance = kDefaultNsdTolerance;
};

void run_evaluate(const EvalArgs& a) {
  const Evaluation ev = evaluate(a.pred, a.gt, a.classes, a.tolerance);
  write_evaluation_csv(ev, a.out);
  write_text(echo_path(a.out), table_text({{"pred", a.pred},
                                           {"gt", a.gt},
                                           {"classes", std::to_string(a.classes)},
                                           {"tolerance_mm", kv::format_double(a.tolerance)}}));
  std::cout << "mean dsc " << ev.overall_dsc << " nsd " << ev.overall_nsd << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised 3D segmentation with cross pseudo supervision"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Experiment config (section.key = value)")->check(CLI::ExistingFile);
  app.add_option("--workers", g.workers, "Worker threads (1 = bit-deterministic)")->check(CLI::PositiveNumber);
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "critical", "off"}));

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic phantom dataset");
  synth->add_option("--labeled", sa.labeled, "Labeled cases")->capture_default_str();
  synth->add_option("--unlabeled", sa.unlabeled, "Unlabeled cases")->capture_default_str();
  synth->add_option("--test", sa.test, "Held-out labeled cases (imagesTs/labelsTs)")->capture_default_str();
  synth->add_option("--dims", sa.dims, "Cube edge in voxels")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--classes", sa.classes, "Classes including background")->capture_default_str();
  synth->add_option("--seed", sa.seed, "Base seed; case i uses seed + i")->required();
  synth->add_option("--out", sa.out, "Output directory")->required();

  std::string fp_manifest, fp_out;
  auto* fpc = app.add_subcommand("fingerprint", "Compute the dataset fingerprint");
  fpc->add_option("--manifest", fp_manifest)->required()->check(CLI::ExistingFile);
  fpc->add_option("--out", fp_out)->required();

  PlanArgs pa;
  auto* plan = app.add_subcommand("plan", "Derive a training plan from a fingerprint");
  plan->add_option("--fingerprint", pa.fingerprint)->required()->check(CLI::ExistingFile);
  plan->add_option("--manifest", pa.manifest, "Manifest supplying the class count")->check(CLI::ExistingFile);
  plan->add_option("--classes", pa.classes, "Class count including background");
  plan->add_option("--dim", pa.dim, "3d or 2d")->capture_default_str();
  plan->add_option("--max-patch-voxels", pa.c.max_patch_voxels)->capture_default_str();
  plan->add_option("--base-channels", pa.c.base_channels)->capture_default_str();
  plan->add_option("--max-channels", pa.c.max_channels)->capture_default_str();
  plan->add_option("--batch", pa.c.batch)->capture_default_str();
  plan->add_option("--patch", pa.patch, "Explicit patch z,y,x");
  plan->add_option("--out", pa.out)->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train CPS or the supervised baseline");
  train->add_option("--manifest", ta.manifest)->required()->check(CLI::ExistingFile);
  train->add_option("--plan", ta.plan)->required()->check(CLI::ExistingFile);
  train->add_option("--fingerprint", ta.fingerprint, "Defaults to recomputing it from the manifest")
      ->check(CLI::ExistingFile);
  train->add_option("--mode", ta.mode, "cps or baseline")->capture_default_str();
  train->add_option("--seed", ta.seed)->required();
  train->add_option("--epochs", ta.epochs)->check(CLI::PositiveNumber);
  train->add_option("--iterations", ta.iterations, "Iterations per epoch")->check(CLI::PositiveNumber);
  train->add_option("--lambda-max", ta.lambda_max)->check(CLI::NonNegativeNumber);
  train->add_option("--lr", ta.lr)->check(CLI::NonNegativeNumber);
  train->add_option("--resume", ta.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--out", ta.out)->required();

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Segment a volume or a directory of volumes");
  infer->add_option("--checkpoint", ia.checkpoint)->required()->check(CLI::ExistingFile);
  infer->add_option("--input", ia.input)->required()->check(CLI::ExistingPath);
  infer->add_option("--output", ia.output)->required();
  infer->add_option("--mode", ia.mode, "normal (mirror TTA) or fast")->capture_default_str();
  infer->add_flag("--force-spacing", ia.force_spacing, "Apply the slice-count spacing rule");
  infer->add_flag("--postprocess-cc", ia.postprocess_cc, "Keep the largest component per class");
  infer->add_option("--net", ia.net, "Which network of a cps checkpoint (1 or 2)")->capture_default_str();

  EvalArgs ea;
  auto* eval = app.add_subcommand("evaluate", "Score predictions against references");
  eval->add_option("--pred", ea.pred)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--gt", ea.gt)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--classes", ea.classes, "Class count including background")->capture_default_str();
  eval->add_option("--tolerance", ea.tolerance, "NSD tolerance in mm")->capture_default_str();
  eval->add_option("--out", ea.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  spdlog::set_level(spdlog::level::from_str(g.log_level));
  try {
    if (*synth) run_synth(g, sa, *synth);
    else if (*fpc) run_fingerprint(fp_manifest, fp_out);
    else if (*plan) run_plan(pa);
    else if (*train) run_train(g, ta, *train);
    else if (*infer) run_infer(g, ia);
    else if (*eval) run_evaluate(ea);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
