// Command-line surface: simulate dynamic scans, train reconstructions,
// evaluate checkpoints against ground truth, and run FBP baselines.
//
// Exit codes: 0 success, 2 configuration/contract error, 3 numeric failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynct/io.hpp"
#include "dynct/phantom.hpp"
#include "dynct/pipeline.hpp"
#include "dynct/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dynct;

namespace {

std::string slurp_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
  if (!out) throw ConfigError("write to '" + path + "' failed");
}

ScanGeometry geometry_from_json_file(const std::string& path) {
  json j = json::parse(slurp_file(path), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object())
    throw ConfigError("'" + path + "' is not a JSON object");
  for (const auto& item : j.items()) {
    static const char* known[] = {"mode",          "n_detectors",
                                  "n_views",       "detector_spacing",
                                  "angle0",        "arc",
                                  "source_radius", "detector_radius"};
    if (std::none_of(std::begin(known), std::end(known),
                     [&](const char* k) { return item.key() == k; }))
      throw ConfigError("unknown key '" + item.key() + "' in '" + path + "'");
  }
  try {
    const std::string mode = j.at("mode").get<std::string>();
    const int nd = j.at("n_detectors").get<int>();
    const int nv = j.at("n_views").get<int>();
    const double spacing = j.value("detector_spacing", 0.0);
    const double angle0 = j.value("angle0", 0.0);
    const double arc = j.value("arc", 2.0 * kPi);
    if (mode == "parallel") {
      if (j.contains("source_radius") || j.contains("detector_radius"))
        throw ConfigError("parallel geometry takes no radii in '" + path +
                          "'");
      return ScanGeometry::parallel(nd, nv, spacing, angle0, arc);
    }
    if (mode == "fan") {
      if (!j.contains("source_radius") || !j.contains("detector_radius"))
        throw ConfigError("fan geometry needs source_radius and "
                          "detector_radius in '" +
                          path + "'");
      return ScanGeometry::fan(nd, nv, j["source_radius"].get<double>(),
                               j["detector_radius"].get<double>(), spacing,
                               angle0, arc);
    }
    throw ConfigError("unknown scan mode '" + mode + "' in '" + path +
                      "' (expected parallel or fan)");
  } catch (const json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

std::string phase_name(const std::string& dir, const char* stem, int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03d", stem, k);
  return dir + "/" + buf;
}

std::vector<Image> load_truth_stack(const std::string& dir, int phases) {
  if (phases < 1) throw ConfigError("need at least one phase");
  std::vector<Image> truth;
  truth.reserve(static_cast<size_t>(phases));
  for (int k = 0; k < phases; ++k)
    truth.push_back(load_image(phase_name(dir, "truth", k)));
  for (const Image& img : truth)
    if (img.grid.nx != truth[0].grid.nx || img.grid.ny != truth[0].grid.ny)
      throw ConfigError("truth images in '" + dir +
                        "' are not all on the same grid");
  return truth;
}

std::string scene_label(const std::string& truth_dir) {
  const std::string name = fs::path(truth_dir).filename().string();
  return name.empty() ? truth_dir : name;
}

double stack_max(const std::vector<Image>& stack) {
  double hi = 0.0;
  for (const Image& img : stack)
    for (double v : img.values) hi = std::max(hi, v);
  return hi > 0.0 ? hi : 1.0;
}

void export_stack(const std::string& dir, const char* stem,
                  const std::vector<Image>& stack, double window_hi) {
  fs::create_directories(dir);
  for (size_t k = 0; k < stack.size(); ++k) {
    const std::string base = phase_name(dir, stem, static_cast<int>(k));
    save_image(base, stack[k]);
    write_pgm(base + ".pgm", stack[k], 0.0, window_hi);
  }
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::string phantom, geom, out;
  int resolution = 128;
  int phases = 10;
  int samples = 0;
  bool noise = false;
  double photons = 1e5;
  uint64_t seed = 0;
};

void cmd_simulate(const SimulateArgs& a) {
  DynamicPhantom ph = load_phantom_spec(a.phantom);
  ScanGeometry g = geometry_from_json_file(a.geom);
  if (a.resolution < 4) throw ConfigError("resolution must be >= 4");
  const GridSpec grid{a.resolution, a.resolution};
  SimOptions opt;
  opt.n_samples = a.samples;
  opt.noise = a.noise;
  opt.photons = a.photons;
  opt.n_phases = a.phases;
  opt.seed = a.seed;
  SimOutput sim = simulate_scan(ph, g, grid, opt);

  fs::create_directories(a.out);
  save_projections(a.out + "/sinogram", sim.projections);

  double hi = 0.0;
  for (const auto& img : sim.truth)
    for (double v : img) hi = std::max(hi, v);
  if (hi <= 0.0) hi = 1.0;
  for (size_t k = 0; k < sim.truth.size(); ++k) {
    Image img;
    img.grid = grid;
    img.values = sim.truth[k];
    const std::string base =
        phase_name(a.out, "truth", static_cast<int>(k));
    save_image(base, img);
    write_pgm(base + ".pgm", img, 0.0, hi);
  }
  json manifest{{"n_phases", static_cast<int>(sim.phase_times.size())},
                {"phase_times", sim.phase_times},
                {"grid", {{"nx", grid.nx}, {"ny", grid.ny}}},
                {"display_window", {0.0, hi}},
                {"noise", a.noise}};
  spill_file(a.out + "/phases.json", manifest.dump(2) + "\n");

  std::cout << "simulated " << g.n_views << " views x " << g.n_detectors
            << " detectors, " << sim.phase_times.size()
            << " truth phases on a " << grid.nx << "x" << grid.ny
            << " grid\nwrote " << a.out << "/sinogram.{json,raw}"
            << (sim.projections.noise_variance ? " (+var.raw)" : "")
            << " and " << a.out << "/truth_*.{json,raw,pgm}\n";
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out, resume;
};

void cmd_train(const TrainArgs& a) {
  ProjectionSet data = load_projections(a.data + "/sinogram");
  fs::create_directories(a.out);

  const bool resuming = !a.resume.empty();
  Trainer tr = resuming
                   ? Trainer::load_checkpoint(a.resume, data)
                   : Trainer(TrainConfig::from_json_text(slurp_file(a.config)),
                             data);
  spill_file(a.out + "/config.json", tr.config().to_json_text());

  std::cout << "training " << variant_name(tr.config().variant) << " from "
            << (resuming ? "iteration " + std::to_string(tr.iteration())
                         : std::string("scratch"))
            << " to " << tr.config().iterations << " iterations\n";
  LossLog log;
  log.open(a.out + "/loss.log", /*append=*/resuming);
  tr.run(&log, a.out + "/model");
  log.close();
  std::cout << "wrote " << a.out << "/model.ckpt and " << a.out
            << "/loss.log\n";
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, truth, report, out;
  int phases = 10;
  bool tp = false;
};

void cmd_eval(const EvalArgs& a) {
  EvalModel model = load_eval_model(a.checkpoint);
  std::vector<Image> truth = load_truth_stack(a.truth, a.phases);
  const std::vector<double> times = phase_midpoints(a.phases);

  PhaseImages rec =
      reconstruct_phases(model, times, truth[0].grid, /*with_tp=*/a.tp);
  PhaseEvaluation ev =
      evaluate_phases(rec.ff, truth, times, variant_name(model.config.variant),
                      scene_label(a.truth));
  spill_file(a.report, report_json({ev}));

  if (!a.out.empty()) {
    const double hi = stack_max(truth);
    export_stack(a.out, "ff", rec.ff, hi);
    if (a.tp) export_stack(a.out, "tp", rec.tp, hi);
  }
  std::cout << ev.method << " @ iteration " << model.iteration << ": mean "
            << ev.mean_psnr << " dB over " << a.phases << " phases\nwrote "
            << a.report << "\n";
}

// ---------------------------------------------------------------- baseline

struct BaselineArgs {
  std::string data, mode = "full", truth, report, out, filter = "ram-lak";
  int width = 0;
  int phases = 10;
  int resolution = 0;
};

void cmd_baseline(const BaselineArgs& a) {
  ProjectionSet data = load_projections(a.data + "/sinogram");
  const std::vector<double> times = phase_midpoints(a.phases);
  const FbpFilter filter = filter_from_name(a.filter);

  std::vector<Image> truth;
  if (!a.truth.empty()) truth = load_truth_stack(a.truth, a.phases);
  GridSpec grid{128, 128};
  if (a.resolution > 0)
    grid = GridSpec{a.resolution, a.resolution};
  else if (!truth.empty())
    grid = truth[0].grid;

  std::vector<Image> recon;
  std::string method;
  if (a.mode == "full") {
    Image img = fbp_full(data, filter, grid);
    recon.assign(times.size(), img);
    method = "fbp-full";
  } else {
    if (a.width < 1)
      throw ConfigError("window mode needs --width >= 1");
    recon = fbp_windowed(data, filter, grid, times, a.width);
    method = "fbp-window-" + std::to_string(a.width);
  }

  if (!truth.empty()) {
    PhaseEvaluation ev =
        evaluate_phases(recon, truth, times, method, scene_label(a.truth));
    if (!a.report.empty()) spill_file(a.report, report_json({ev}));
    std::cout << method << ": mean " << ev.mean_psnr << " dB over "
              << a.phases << " phases\n";
  } else {
    std::cout << method << ": reconstructed " << recon.size() << " phase(s) on "
              << grid.nx << "x" << grid.ny << "\n";
  }
  if (!a.out.empty()) {
    const double hi = truth.empty() ? stack_max(recon) : stack_max(truth);
    if (a.mode == "full")
      export_stack(a.out, "full", {recon[0]}, hi);
    else
      export_stack(a.out, "window", recon, hi);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic CT reconstruction workbench"};
  app.require_subcommand(1);

  SimulateArgs sim;
  CLI::App* c_sim =
      app.add_subcommand("simulate", "Render a dynamic scan and ground truth");
  c_sim->add_option("--phantom", sim.phantom,
                    "Preset name or phantom JSON file")
      ->required();
  c_sim->add_option("--geom", sim.geom, "Scan geometry JSON file")->required();
  c_sim->add_option("--out", sim.out, "Output directory")->required();
  c_sim->add_option("--resolution", sim.resolution,
                    "Truth grid resolution (NxN)");
  c_sim->add_option("--phases", sim.phases, "Ground-truth phase count");
  c_sim->add_option("--samples", sim.samples,
                    "Quadrature samples per ray (0 = auto)");
  c_sim->add_flag("--noise", sim.noise, "Apply post-log Poisson noise");
  c_sim->add_option("--photons", sim.photons, "Photon count per ray");
  c_sim->add_option("--seed", sim.seed, "Noise RNG seed");

  TrainArgs tra;
  CLI::App* c_train =
      app.add_subcommand("train", "Fit the reconstruction to a sinogram");
  CLI::Option* o_cfg =
      c_train->add_option("--config", tra.config, "Training config JSON file");
  c_train->add_option("--data", tra.data, "Directory holding sinogram.*")
      ->required();
  c_train->add_option("--out", tra.out, "Output directory")->required();
  CLI::Option* o_resume = c_train->add_option(
      "--resume", tra.resume, "Continue from this checkpoint");
  o_cfg->excludes(o_resume);
  o_resume->excludes(o_cfg);

  EvalArgs ev;
  CLI::App* c_eval =
      app.add_subcommand("eval", "Score a checkpoint against ground truth");
  c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")
      ->required();
  c_eval->add_option("--truth", ev.truth, "Directory holding truth_*.{json,raw}")
      ->required();
  c_eval->add_option("--phases", ev.phases, "Phase count")->required();
  c_eval->add_option("--report", ev.report, "Report JSON output path")
      ->required();
  c_eval->add_option("--out", ev.out, "Export reconstructed phases here");
  c_eval->add_flag("--tp", ev.tp, "Also export the template branch");

  BaselineArgs base;
  CLI::App* c_base =
      app.add_subcommand("baseline", "FBP baselines over a sinogram");
  c_base->add_option("--data", base.data, "Directory holding sinogram.*")
      ->required();
  c_base->add_option("--mode", base.mode, "full or window")
      ->check(CLI::IsMember({"full", "window"}));
  c_base->add_option("--width", base.width, "Window width in views");
  c_base->add_option("--phases", base.phases, "Phase count");
  c_base->add_option("--filter", base.filter, "ram-lak, shepp-logan, or hann");
  c_base->add_option("--resolution", base.resolution,
                     "Grid resolution (0 = truth grid or 128)");
  c_base->add_option("--truth", base.truth, "Ground-truth directory");
  c_base->add_option("--report", base.report, "Report JSON output path");
  c_base->add_option("--out", base.out, "Export reconstructions here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_sim->parsed()) {
      cmd_simulate(sim);
    } else if (c_train->parsed()) {
      if (tra.resume.empty() && tra.config.empty())
        throw ConfigError("train needs --config (or --resume)");
      cmd_train(tra);
    } else if (c_eval->parsed()) {
      cmd_eval(ev);
    } else if (c_base->parsed()) {
      cmd_baseline(base);
    }
    return 0;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
