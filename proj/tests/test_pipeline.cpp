#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynct/phantom.hpp"
#include "dynct/pipeline.hpp"

using namespace dynct;
using ad::Tensor;

namespace {

ModelBundleConfig small_model() {
  ModelBundleConfig cfg;
  cfg.width = 8;
  cfg.recon_resolution = 16;
  cfg.n_views = 12;
  cfg.n_levels = 2;
  cfg.features_per_level = 2;
  cfg.log2_hashmap_size = 8;
  cfg.base_resolution = 4;
  return cfg;
}

void randomize_params(std::vector<Tensor> params, uint64_t seed) {
  Rng rng(seed);
  for (auto& p : params)
    for (double& v : p.values_mut()) v = uniform(rng, -0.3, 0.3);
}

std::vector<Image> truth_stack(const DynamicPhantom& ph, const GridSpec& grid,
                               const std::vector<double>& times) {
  std::vector<Image> out;
  for (double tv : times) {
    Image img;
    img.grid = grid;
    img.values = rasterize(ph, grid, tv);
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace

TEST_CASE("phase midpoints are the evaluation schedule") {
  auto t = phase_midpoints(4);
  REQUIRE(t.size() == 4);
  CHECK(t[0] == 0.125);
  CHECK(t[1] == 0.375);
  CHECK(t[2] == 0.625);
  CHECK(t[3] == 0.875);
  CHECK_THROWS_AS(phase_midpoints(0), ContractViolation);
}

TEST_CASE("phase reconstruction matches a direct single-batch evaluation") {
  EvalModel m{TrainConfig{}, 0,
              ModelBundle::create(Variant::InrDm, small_model(), 5),
              std::nullopt};
  randomize_params(m.bundle.all_params(), 99);

  // 70x70 spills over the internal chunk size, exercising the seams.
  const GridSpec grid{70, 70};
  PhaseImages out = reconstruct_phases(m, {0.37}, grid);
  REQUIRE(out.ff.size() == 1);
  REQUIRE(out.ff[0].values.size() == grid.count());
  CHECK(out.tp.empty());

  std::vector<double> xy(grid.count() * 2);
  for (int iy = 0; iy < grid.ny; ++iy)
    for (int ix = 0; ix < grid.nx; ++ix) {
      const size_t i = static_cast<size_t>(iy) * grid.nx + ix;
      xy[2 * i] = (ix + 0.5) / grid.nx;
      xy[2 * i + 1] = (iy + 0.5) / grid.ny;
    }
  ad::NoGradGuard ng;
  Tensor x = Tensor::from_values({static_cast<int>(grid.count()), 2}, xy);
  Tensor t = Tensor::full({static_cast<int>(grid.count()), 1}, 0.37);
  Tensor direct = m.bundle.image.eval_ff(m.bundle.bwd, nullptr, x, t);
  for (size_t i = 0; i < grid.count(); ++i)
    CHECK(out.ff[0].values[i] == direct.at(i));

  CHECK_THROWS_AS(reconstruct_phases(m, {}, grid), ContractViolation);
  CHECK_THROWS_AS(reconstruct_phases(m, {1.5}, grid), ContractViolation);
}

TEST_CASE("template branch ignores time while the field is zero") {
  // Freshly created DVF heads are the zero map, so the warped point equals
  // the query point at every phase and the template image cannot move.
  EvalModel m{TrainConfig{}, 0,
              ModelBundle::create(Variant::InrDm, small_model(), 8),
              std::nullopt};
  randomize_params(m.bundle.image.table_params(), 31);
  randomize_params(m.bundle.image.mlp_params(), 32);

  const GridSpec grid{24, 24};
  PhaseImages out =
      reconstruct_phases(m, {0.1, 0.5, 0.9}, grid, /*with_tp=*/true);
  REQUIRE(out.tp.size() == 3);
  CHECK(out.tp[0].values == out.tp[1].values);
  CHECK(out.tp[0].values == out.tp[2].values);
}

TEST_CASE("a trained prior-variant checkpoint reconstructs phases") {
  DynamicPhantom ph = DynamicPhantom::preset("translating-disk");
  ScanGeometry g = ScanGeometry::parallel(16, 12);
  ProjectionSet data = project(ph.field(), g, 16);

  TrainConfig cfg;
  cfg.variant = Variant::InrDmAr;
  cfg.rays_per_batch = 24;
  cfg.iterations = 1;
  cfg.pars = 3;
  cfg.seed = 4;
  cfg.n_samples = 8;
  cfg.model = small_model();
  Trainer tr(cfg, data);
  tr.step();
  const std::string ckpt =
      (std::filesystem::temp_directory_path() / "dynct_pipeline.ckpt")
          .string();
  tr.save_checkpoint(ckpt);

  EvalModel m = load_eval_model(ckpt);
  PhaseImages out = reconstruct_phases(m, phase_midpoints(2), GridSpec{20, 20},
                                       /*with_tp=*/true);
  REQUIRE(out.ff.size() == 2);
  REQUIRE(out.tp.size() == 2);
  for (const Image& img : out.ff)
    for (double v : img.values) CHECK(std::isfinite(v));
}

TEST_CASE("a full-width window reproduces the time-average baseline") {
  DynamicPhantom ph = DynamicPhantom::preset("translating-disk");
  ScanGeometry g = ScanGeometry::parallel(32, 30);
  ProjectionSet data = project(ph.field(), g, 48);
  const GridSpec grid{32, 32};

  Image full = fbp_full(data, FbpFilter::RamLak, grid);
  std::vector<Image> win =
      fbp_windowed(data, FbpFilter::RamLak, grid, phase_midpoints(3), 30);
  for (const Image& img : win) CHECK(img.values == full.values);

  CHECK_THROWS_AS(
      fbp_windowed(data, FbpFilter::RamLak, grid, phase_midpoints(3), 31),
      ContractViolation);
  CHECK_THROWS_AS(
      fbp_windowed(data, FbpFilter::RamLak, grid, phase_midpoints(3), 0),
      ContractViolation);
  CHECK_THROWS_AS(fbp_windowed(data, FbpFilter::RamLak, grid, {}, 5),
                  ContractViolation);
}

TEST_CASE("windowed baselines degrade as the window outgrows the motion") {
  DynamicPhantom ph = DynamicPhantom::preset("translating-disk");
  const GridSpec grid{48, 48};
  const std::vector<double> times = phase_midpoints(5);
  std::vector<Image> truth = truth_stack(ph, grid, times);

  auto mean_psnr = [&](const ProjectionSet& data, int width) {
    std::vector<Image> rec =
        fbp_windowed(data, FbpFilter::RamLak, grid, times, width);
    return evaluate_phases(rec, truth, times, "w", "s").mean_psnr;
  };

  // Three rotations over one motion cycle: every window of at least one
  // rotation has complete angular coverage, so image quality is governed
  // purely by how much motion the window integrates.
  ScanGeometry multi =
      ScanGeometry::parallel(48, 270, 0.0, 0.0, 3.0 * 2.0 * kPi);
  ProjectionSet data3 = project(ph.field(), multi, 72);
  const double one_rot = mean_psnr(data3, 90);
  const double two_rot = mean_psnr(data3, 180);
  const double all_rot = mean_psnr(data3, 270);
  CHECK(one_rot > two_rot);
  CHECK(two_rot > all_rot);

  // Single rotation: a short-scan window still beats the time average on a
  // moving scene because it integrates less motion.
  ScanGeometry single = ScanGeometry::parallel(48, 90);
  ProjectionSet data1 = project(ph.field(), single, 72);
  CHECK(mean_psnr(data1, 45) > mean_psnr(data1, 90));
}

TEST_CASE("phase evaluation aggregates support-masked metrics") {
  const GridSpec grid{16, 16};
  DynamicPhantom ph = DynamicPhantom::preset("translating-disk");
  const std::vector<double> times = phase_midpoints(3);
  std::vector<Image> truth = truth_stack(ph, grid, times);
  std::vector<Image> recon = truth;
  for (double& v : recon[1].values) v += 0.05;

  PhaseEvaluation ev = evaluate_phases(recon, truth, times, "m", "scene");
  CHECK(ev.method == "m");
  CHECK(ev.scene == "scene");
  REQUIRE(ev.metrics.size() == 3);
  CHECK(std::isinf(ev.metrics[0].psnr));
  CHECK(std::isfinite(ev.metrics[1].psnr));
  CHECK(ev.metrics[1].mse == doctest::Approx(0.0025).epsilon(1e-12));
  CHECK(std::isinf(ev.mean_psnr));

  std::vector<Image> short_stack(recon.begin(), recon.begin() + 2);
  CHECK_THROWS_AS(evaluate_phases(short_stack, truth, times, "m", "s"),
                  ContractViolation);
  std::vector<Image> wrong = recon;
  wrong[2].grid = GridSpec{8, 8};
  wrong[2].values.resize(64);
  CHECK_THROWS_AS(evaluate_phases(wrong, truth, times, "m", "s"),
                  ContractViolation);
}

TEST_CASE("reports encode records and non-finite sentinels") {
  PhaseEvaluation ev;
  ev.method = "fbp-full";
  ev.scene = "toy";
  ev.times = {0.25, 0.75};
  PsnrResult a;
  a.psnr = 31.5;
  a.mse = 4e-4;
  a.peak = 1.0;
  a.mask_count = 100;
  PsnrResult b;
  b.psnr = std::numeric_limits<double>::infinity();
  b.mse = 0.0;
  b.peak = 1.0;
  b.mask_count = 100;
  ev.metrics = {a, b};
  ev.mean_psnr = std::numeric_limits<double>::infinity();

  auto j = nlohmann::json::parse(report_json({ev}));
  REQUIRE(j["evaluations"].size() == 1);
  const auto& rec = j["evaluations"][0];
  CHECK(rec["method"] == "fbp-full");
  CHECK(rec["scene"] == "toy");
  CHECK(rec["mean_psnr_db"] == "+inf");
  REQUIRE(rec["phases"].size() == 2);
  CHECK(rec["phases"][0]["psnr_db"].get<double>() == 31.5);
  CHECK(rec["phases"][0]["mse"].get<double>() == 4e-4);
  CHECK(rec["phases"][1]["psnr_db"] == "+inf");
  CHECK(rec["phases"][1]["mask_count"].get<size_t>() == 100);
}
