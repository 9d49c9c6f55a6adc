#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

#include "scn/cli.hpp"

namespace scn::cli {

namespace {

// Errors the user can fix by changing the command line or the config.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << text;
}

std::filesystem::path sibling(const std::filesystem::path& path, const std::string& suffix) {
  return path.string() + suffix;
}

void require_file(const std::filesystem::path& path, const std::string& what) {
  if (!std::filesystem::is_regular_file(path)) throw UsageError(what + " not found: " + path.string());
}

void require_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_regular_file(dir / "manifest.toml"))
    throw UsageError("not a dataset directory (no manifest.toml): " + dir.string());
}

RunConfig config_or_default(const std::string& path) {
  if (path.empty()) return RunConfig{};
  require_file(path, "config file");
  return read_run_config(path);
}

RunManifest manifest_for(const std::string& command, int argc, char** argv, const RunConfig& cfg) {
  RunManifest m;
  m.command = command;
  for (int i = 1; i < argc; ++i) m.args.emplace_back(argv[i]);
  m.config_toml = to_toml(cfg);
  m.seed = cfg.train.seed;
  return m;
}

void add_dataset_inputs(RunManifest& m, const std::filesystem::path& data) {
  m.inputs.emplace_back(data.string(), tree_hash(data, {"run_manifest.json"}));
}

std::pair<std::size_t, std::size_t> parse_range(const std::string& text) {
  const auto dots = text.find("..");
  try {
    if (dots == std::string::npos) {
      const auto v = static_cast<std::size_t>(std::stoul(text));
      return {v, v};
    }
    return {static_cast<std::size_t>(std::stoul(text.substr(0, dots))),
            static_cast<std::size_t>(std::stoul(text.substr(dots + 2)))};
  } catch (const std::exception&) {
    throw UsageError("--steps expects N or A..B, got '" + text + "'");
  }
}

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string out, config;
  std::uint64_t seed = 0;
  long num_sequences = -1;
  bool force = false;
};

int cmd_synth(const SynthArgs& a, int argc, char** argv) {
  RunConfig cfg = config_or_default(a.config);
  if (a.num_sequences >= 0) {
    const auto n = static_cast<std::size_t>(a.num_sequences);
    cfg.splits = {n, n, n};
  }
  const std::filesystem::path dir(a.out);
  if (std::filesystem::exists(dir)) {
    if (!std::filesystem::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
    if (!std::filesystem::is_empty(dir)) {
      if (!a.force) throw UsageError(dir.string() + " is not empty; pass --force to overwrite the dataset");
      for (const auto& split : kSplitNames) std::filesystem::remove_all(dir / split);
      std::filesystem::remove(dir / "manifest.toml");
      std::filesystem::remove(dir / "run_manifest.json");
    }
  }
  std::filesystem::create_directories(dir);
  write_synth_dataset(dir, cfg.synth, cfg.splits, a.seed);

  RunManifest m = manifest_for("synth", argc, argv, cfg);
  m.seed = a.seed;
  if (!a.config.empty()) m.inputs.emplace_back(a.config, file_hash(a.config));
  m.outputs = {"manifest.toml"};
  for (const auto& split : kSplitNames) m.outputs.push_back(split + "/");
  write_manifest(dir / "run_manifest.json", m);
  std::cout << "wrote " << cfg.splits.train << "/" << cfg.splits.val << "/" << cfg.splits.test
            << " train/val/test sequences to " << dir.string() << " (tree " << tree_hash(dir, {"run_manifest.json"})
            << ")\n";
  return kExitOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string data, config, out, teacher, log;
  long seed = -1;
  long epochs = -1;
};

int cmd_train(const TrainArgs& a, int argc, char** argv) {
  if (!a.teacher.empty()) require_file(a.teacher, "teacher checkpoint");
  require_dataset(a.data);
  RunConfig cfg = config_or_default(a.config);
  if (a.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(a.seed);
  if (a.epochs >= 0) cfg.train.epochs = static_cast<std::size_t>(a.epochs);
  cfg.train.kd_enabled = !a.teacher.empty();
  cfg.validate();

  const DatasetManifest dm = read_manifest(a.data);
  if (dm.class_names.size() != cfg.model.num_classes)
    throw UsageError("dataset has " + std::to_string(dm.class_names.size()) + " classes, model expects " +
                     std::to_string(cfg.model.num_classes));
  const Dataset train = load_dataset(a.data, "train", cfg.encoding);
  const Dataset val = load_dataset(a.data, "val", cfg.encoding);

  std::optional<Model<float>> teacher;
  if (!a.teacher.empty()) teacher.emplace(load_model(a.teacher));

  Model<float> student(cfg.model);
  init_params(student, cfg.train.seed, cfg.train.spiking_gain);

  const std::filesystem::path out(a.out);
  TrainOutputs outputs;
  outputs.best_checkpoint = out;
  outputs.last_checkpoint = sibling(out, ".last");
  outputs.log = a.log.empty() ? sibling(out, ".log.jsonl") : std::filesystem::path(a.log);
  outputs.config_snapshot = to_toml(cfg);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());

  const TrainResult r = train_loop(student, teacher ? &*teacher : nullptr, train, val, cfg.train, cfg.loss,
                                   cfg.decode, outputs);

  RunManifest m = manifest_for("train", argc, argv, cfg);
  add_dataset_inputs(m, a.data);
  if (!a.teacher.empty()) m.inputs.emplace_back(a.teacher, file_hash(a.teacher));
  m.outputs = {outputs.best_checkpoint.string(), outputs.last_checkpoint.string(), outputs.log.string()};
  write_manifest(sibling(out, ".manifest.json"), m);
  std::cout << "trained " << cfg.train.epochs << " epochs; best val mAP " << r.best_map << " (epoch " << r.best_epoch
            << ")\n";
  return kExitOk;
}

// --- eval / ablate -----------------------------------------------------------

struct EvalArgs {
  std::string ckpt, data, split = "val", report;
  long time_steps = -1;
  long window_ms = -1;
};

int cmd_eval(const EvalArgs& a, int argc, char** argv) {
  require_file(a.ckpt, "checkpoint");
  require_dataset(a.data);
  RunConfig cfg;
  const Model<float> model = load_model(a.ckpt, &cfg);
  const std::size_t steps = a.time_steps > 0 ? static_cast<std::size_t>(a.time_steps) : cfg.encoding.time_steps;
  const std::int64_t window = a.window_ms > 0 ? a.window_ms : cfg.encoding.window_ms;
  const EvalReport rep = eval_model(model, cfg, a.data, a.split, steps, window);

  nlohmann::json j = to_json(rep);
  j["time_steps"] = steps;
  j["window_ms"] = window;
  j["split"] = a.split;
  write_text(a.report, j.dump(2) + "\n");
  RunManifest m = manifest_for("eval", argc, argv, cfg);
  m.inputs.emplace_back(a.ckpt, file_hash(a.ckpt));
  add_dataset_inputs(m, a.data);
  m.outputs = {a.report};
  write_manifest(sibling(a.report, ".manifest.json"), m);
  std::cout << "mAP " << rep.map << "  mAP@0.50 " << rep.map_50 << "  mAP@0.75 " << rep.map_75 << "  (T=" << steps
            << ", window " << window << " ms, " << a.split << ")\n";
  return kExitOk;
}

struct AblateArgs {
  std::string ckpt, data, split = "val", steps = "1..10", mode = "fixed", plot, csv;
};

int cmd_ablate(const AblateArgs& a, int argc, char** argv) {
  require_file(a.ckpt, "checkpoint");
  require_dataset(a.data);
  const auto [first, last] = parse_range(a.steps);
  if (first < 1 || last < first) throw UsageError("--steps range must satisfy 1 <= A <= B");
  RunConfig cfg;
  const Model<float> model = load_model(a.ckpt, &cfg);
  const AblationMode mode = a.mode == "fixed" ? AblationMode::fixed : AblationMode::variable;
  const auto rows = ablate(model, cfg, a.data, a.split, first, last, mode);

  const std::filesystem::path csv = a.csv.empty() ? std::filesystem::path(a.plot).replace_extension(".csv")
                                                  : std::filesystem::path(a.csv);
  write_text(csv, ablation_csv(rows));
  write_text(a.plot, ablation_svg(rows, "mAP vs time steps (" + a.mode + " window)"));
  RunManifest m = manifest_for("ablate", argc, argv, cfg);
  m.inputs.emplace_back(a.ckpt, file_hash(a.ckpt));
  add_dataset_inputs(m, a.data);
  m.outputs = {csv.string(), a.plot};
  write_manifest(sibling(csv, ".manifest.json"), m);
  for (const auto& r : rows)
    std::cout << "T=" << r.time_steps << " window " << r.window_ms << " ms  mAP " << r.map << "\n";
  return kExitOk;
}

// --- energy ------------------------------------------------------------------

struct EnergyArgs {
  std::string ckpt, data, split = "val", report;
};

int cmd_energy(const EnergyArgs& a, int argc, char** argv) {
  require_file(a.ckpt, "checkpoint");
  require_dataset(a.data);
  RunConfig cfg;
  Model<float> model = load_model(a.ckpt, &cfg);
  const Dataset data = load_dataset(a.data, a.split, cfg.encoding);
  Model<float> fused = fuse_for_inference(model);
  std::vector<TensorF> inputs;
  for (std::size_t i = 0; i < data.size(); i += 8) inputs.push_back(batch_input(data, i, std::min<std::size_t>(8, data.size() - i)));
  const OpCounts counts = count_ops(fused, inputs);
  const EnergyReport rep = energy_estimate(counts, EnergyConstants{}, cfg.model.time_steps);

  nlohmann::json j = to_json(rep);
  j["spiking"] = cfg.model.spiking;
  j["split"] = a.split;
  write_text(a.report, j.dump(2) + "\n");
  RunManifest m = manifest_for("energy", argc, argv, cfg);
  m.inputs.emplace_back(a.ckpt, file_hash(a.ckpt));
  add_dataset_inputs(m, a.data);
  m.outputs = {a.report};
  write_manifest(sibling(a.report, ".manifest.json"), m);
  std::cout << "ACs/step " << counts.acs_total << "  MACs/step " << counts.macs_total << "  f " << counts.firing_rate
            << "  " << rep.energy_per_step_mj << " mJ/step, " << rep.energy_total_mj << " mJ total\n";
  return kExitOk;
}

// --- detect ------------------------------------------------------------------

struct DetectArgs {
  std::string ckpt, events, out, heatmap;
  std::int64_t at = 0;
};

int cmd_detect(const DetectArgs& a, int argc, char** argv) {
  require_file(a.ckpt, "checkpoint");
  require_file(a.events, "event file");
  RunConfig cfg;
  Model<float> model = load_model(a.ckpt, &cfg);
  const std::size_t w = cfg.synth.sensor_width, h = cfg.synth.sensor_height;
  const EventStream stream = read_events(a.events, w, h);
  const VoxelCube cube = encode_voxel_cube(stream, a.at, cfg.encoding, h, w);

  Dataset one;
  one.width = w;
  one.height = h;
  one.num_classes = cfg.model.num_classes;
  one.encoding = cfg.encoding;
  one.windows.push_back({0, a.at, {}});
  one.cubes.push_back(cube.data);
  Model<float> fused = fuse_for_inference(model);
  // a window without events has nothing to detect
  const bool empty = std::all_of(cube.data.values().begin(), cube.data.values().end(),
                                 [](std::uint8_t v) { return v == 0; });
  const std::vector<Detection> dets = empty ? std::vector<Detection>{} : detect(fused, one, cfg.decode, 1).at(0);

  nlohmann::json j{{"t_us", a.at}, {"window_ms", cfg.encoding.window_ms}, {"detections", to_json(dets)}};
  write_text(a.out, j.dump(2) + "\n");
  std::vector<std::string> outputs{a.out};

  if (!a.heatmap.empty()) {
    NoGradGuard no_grad;
    fused.reset_states();
    const auto out = fused.forward(VarF(batch_input(one, 0, 1)), cfg.encoding.time_steps);
    const TensorF hm = temporal_mean(out.heatmap, out.steps).value();
    const std::size_t k = hm.dim(1), gh = hm.dim(2), gw = hm.dim(3);
    const std::filesystem::path base(a.heatmap);
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<std::uint8_t> px(gh * gw);
      for (std::size_t i = 0; i < px.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(hm[c * gh * gw + i])));
        px[i] = static_cast<std::uint8_t>(std::lround(255.0 * p));
      }
      std::filesystem::path path = base;
      if (k > 1) path = base.parent_path() / (base.stem().string() + "_class" + std::to_string(c) + base.extension().string());
      write_pgm(path, gw, gh, px);
      outputs.push_back(path.string());
    }
  }
  RunManifest m = manifest_for("detect", argc, argv, cfg);
  m.inputs.emplace_back(a.ckpt, file_hash(a.ckpt));
  m.inputs.emplace_back(a.events, file_hash(a.events));
  m.outputs = outputs;
  write_manifest(sibling(a.out, ".manifest.json"), m);
  std::cout << dets.size() << " detections at t=" << a.at << " us\n";
  return kExitOk;
}

int exit_code(ErrorKind kind) {
  return kind == ErrorKind::usage || kind == ErrorKind::config ? kExitUsage : kExitFailure;
}

}  // namespace

EvalReport eval_model(const Model<float>& model, const RunConfig& cfg, const std::filesystem::path& data,
                      const std::string& split, std::size_t time_steps, std::int64_t window_ms) {
  EncodingConfig enc = cfg.encoding;
  enc.time_steps = time_steps;
  enc.window_ms = window_ms;
  const Dataset d = load_dataset(data, split, enc);
  return evaluate(model, d, cfg.decode);
}

std::vector<AblationRow> ablate(const Model<float>& model, const RunConfig& cfg, const std::filesystem::path& data,
                                const std::string& split, std::size_t first, std::size_t last, AblationMode mode) {
  std::vector<AblationRow> rows;
  for (std::size_t t = first; t <= last; ++t) {
    const std::int64_t window = mode == AblationMode::fixed ? 100 : 20 * static_cast<std::int64_t>(t);
    const EvalReport rep = eval_model(model, cfg, data, split, t, window);
    rows.push_back({t, window, rep.map, rep.map_50});
  }
  return rows;
}

int run(int argc, char** argv) {
  CLI::App app{"Spiking CenterNet: event-camera object detection with spiking networks"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic event dataset");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--seed", synth.seed, "dataset seed");
  s->add_option("--config", synth.config, "TOML config ([synth] and [splits] are used)");
  s->add_option("--num-sequences", synth.num_sequences, "sequences per split (overrides [splits])");
  s->add_flag("--force", synth.force, "overwrite an existing dataset");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model (with --teacher: knowledge distillation)");
  t->add_option("--data", train.data, "dataset directory")->required();
  t->add_option("--config", train.config, "TOML config");
  t->add_option("--out", train.out, "best checkpoint path (last goes to <out>.last)")->required();
  t->add_option("--teacher", train.teacher, "frozen non-spiking teacher checkpoint");
  t->add_option("--log", train.log, "JSON-lines log (default <out>.log.jsonl)");
  t->add_option("--seed", train.seed, "override [train] seed");
  t->add_option("--epochs", train.epochs, "override [train] epochs");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "COCO-style mAP of a checkpoint");
  e->add_option("--ckpt", eval.ckpt, "checkpoint")->required();
  e->add_option("--data", eval.data, "dataset directory")->required();
  e->add_option("--split", eval.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  e->add_option("--time-steps", eval.time_steps, "time steps per window (default: checkpoint config)");
  e->add_option("--window-ms", eval.window_ms, "window length in ms (default: checkpoint config)");
  e->add_option("--report", eval.report, "JSON report path")->required();

  AblateArgs abl;
  auto* b = app.add_subcommand("ablate", "mAP over a range of time steps");
  b->add_option("--ckpt", abl.ckpt, "checkpoint")->required();
  b->add_option("--data", abl.data, "dataset directory")->required();
  b->add_option("--split", abl.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  b->add_option("--steps", abl.steps, "range A..B (default 1..10)");
  b->add_option("--mode", abl.mode, "fixed: 100 ms windows; variable: 20 ms per step")
      ->check(CLI::IsMember({"fixed", "variable"}));
  b->add_option("--plot", abl.plot, "SVG plot path")->required();
  b->add_option("--csv", abl.csv, "CSV path (default: plot path with .csv)");

  EnergyArgs en;
  auto* g = app.add_subcommand("energy", "synaptic operations and energy of the fused model");
  g->add_option("--ckpt", en.ckpt, "checkpoint")->required();
  g->add_option("--data", en.data, "dataset directory")->required();
  g->add_option("--split", en.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  g->add_option("--report", en.report, "JSON report path")->required();

  DetectArgs det;
  auto* d = app.add_subcommand("detect", "detections for the window ending at one timestamp");
  d->add_option("--ckpt", det.ckpt, "checkpoint")->required();
  d->add_option("--events", det.events, "EVT-CSV file")->required();
  d->add_option("--at", det.at, "window end in microseconds")->required();
  d->add_option("--out", det.out, "JSON output path")->required();
  d->add_option("--heatmap", det.heatmap, "PGM path for the per-class heatmaps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth, argc, argv);
    if (*t) return cmd_train(train, argc, argv);
    if (*e) return cmd_eval(eval, argc, argv);
    if (*b) return cmd_ablate(abl, argc, argv);
    if (*g) return cmd_energy(en, argc, argv);
    if (*d) return cmd_detect(det, argc, argv);
  } catch (const UsageError& err) {
    std::cerr << "scn: " << err.what() << "\n";
    return kExitUsage;
  } catch (const Error& err) {
    std::cerr << "scn: " << err.what() << "\n";
    return exit_code(err.kind());
  } catch (const std::exception& err) {
    std::cerr << "scn: " << err.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace scn::cli
