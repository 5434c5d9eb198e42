#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "dynct/phantom.hpp"
#include "dynct/trainer.hpp"

using namespace dynct;
using ad::Tensor;

namespace {

namespace fs = std::filesystem;

fs::path tmp_file(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "dynct_trainer_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TrainConfig tiny_cfg(Variant v) {
  TrainConfig c;
  c.variant = v;
  c.rays_per_batch = 24;
  c.iterations = 4;
  c.pars = 3;
  c.seed = 7;
  c.n_samples = 8;
  c.model.width = 8;
  c.model.recon_resolution = 16;
  c.model.n_levels = 2;
  c.model.features_per_level = 2;
  c.model.log2_hashmap_size = 8;
  c.model.base_resolution = 4;
  return c;
}

ProjectionSet tiny_scan(int n_detectors = 16, int n_views = 12) {
  DynamicPhantom ph = DynamicPhantom::preset("translating-disk");
  ScanGeometry g = ScanGeometry::parallel(n_detectors, n_views);
  return project(ph.field(), g, 16);
}

std::vector<std::vector<double>> snapshot(ModelBundle& b) {
  std::vector<std::vector<double>> out;
  for (auto& p : b.all_params()) {
    auto v = p.values();
    out.emplace_back(v.begin(), v.end());
  }
  return out;
}

bool bitwise_equal(const std::vector<std::vector<double>>& a,
                   const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("cosine schedule hits its endpoints and decays monotonically") {
  const long long T = 500;
  CHECK(cosine_lr_scale(0, T) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::fabs(cosine_lr_scale(T - 1, T)) < 1e-6);
  CHECK(cosine_lr_scale((T - 1) / 2, T) ==
        doctest::Approx(0.5).epsilon(1e-2));
  double prev = 2.0;
  for (long long i = 0; i < T; ++i) {
    double s = cosine_lr_scale(i, T);
    CHECK(s < prev);
    CHECK(s >= 0.0);
    prev = s;
  }
  // Out-of-range iterations clamp instead of wrapping.
  CHECK(cosine_lr_scale(-5, T) == 1.0);
  CHECK(std::fabs(cosine_lr_scale(T + 5, T)) < 1e-12);
  // Degenerate one-iteration schedules stay at full rate.
  CHECK(cosine_lr_scale(0, 1) == 1.0);
  CHECK(cosine_lr_scale(0, 0) == 1.0);
}

TEST_CASE("ray sampling is deterministic, in range, and without replacement") {
  ScanGeometry g = ScanGeometry::parallel(16, 8);
  Rng r1(42), r2(42);
  auto a = sample_rays(g, 60, r1);
  auto b = sample_rays(g, 60, r2);
  CHECK(a == b);
  CHECK(a.size() == 60);
  std::vector<uint32_t> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  CHECK(sorted.back() < g.ray_count());

  // Asking for every ray yields a permutation.
  auto all = sample_rays(g, static_cast<int>(g.ray_count()), r1);
  std::sort(all.begin(), all.end());
  for (size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);

  CHECK_THROWS_AS(sample_rays(g, 0, r1), ContractViolation);
  CHECK_THROWS_AS(sample_rays(g, -3, r1), ContractViolation);
  CHECK_THROWS_AS(sample_rays(g, 129, r1), ContractViolation);
}

TEST_CASE("ray sampling covers all rays uniformly") {
  ScanGeometry g = ScanGeometry::parallel(8, 4);  // 32 rays
  const int batches = 100000, per_batch = 4;
  const size_t total = g.ray_count();
  Rng rng(2024);
  std::vector<long long> hits(total, 0);
  for (int b = 0; b < batches; ++b)
    for (uint32_t idx : sample_rays(g, per_batch, rng)) ++hits[idx];
  // Each ray is included with probability per_batch / total per batch, so
  // counts are Binomial(batches, 1/8). Chi-square over 32 bins ~ chi2(31).
  const double expected =
      static_cast<double>(batches) * per_batch / static_cast<double>(total);
  const double sd =
      std::sqrt(static_cast<double>(batches) * (1.0 / 8.0) * (7.0 / 8.0));
  double chi2 = 0.0;
  for (long long h : hits) {
    const double d = static_cast<double>(h) - expected;
    CHECK(std::fabs(d) < 4.0 * sd);
    chi2 += d * d / expected;
  }
  CHECK(chi2 < 31.0 + 3.0 * std::sqrt(62.0));
}

TEST_CASE("adam reproduces a scalar reference implementation") {
  const std::vector<double> w0 = {1.0, -2.0, 0.5};
  const std::vector<double> gv = {0.5, -0.25, 1.5};
  Tensor p = Tensor::from_values({3, 1}, w0, /*requires_grad=*/true);
  Tensor c = Tensor::from_values({3, 1}, gv);
  Adam opt;
  const double lr = 0.1;
  opt.add_group({p}, lr);

  std::vector<double> ref = w0, m(3, 0.0), v(3, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ad::Tape& tape = ad::Tape::active();
  for (int step = 1; step <= 7; ++step) {
    const double scale = 1.0 - 0.1 * step;
    size_t mark = tape.size();
    p.zero_grad();
    Tensor loss = ad::sum(ad::mul(p, c));
    tape.backward(loss);
    tape.truncate(mark);
    opt.step(scale);

    for (int i = 0; i < 3; ++i) {
      m[static_cast<size_t>(i)] =
          b1 * m[static_cast<size_t>(i)] + (1 - b1) * gv[static_cast<size_t>(i)];
      v[static_cast<size_t>(i)] = b2 * v[static_cast<size_t>(i)] +
                                  (1 - b2) * gv[static_cast<size_t>(i)] *
                                      gv[static_cast<size_t>(i)];
      const double mh = m[static_cast<size_t>(i)] / (1 - std::pow(b1, step));
      const double vh = v[static_cast<size_t>(i)] / (1 - std::pow(b2, step));
      ref[static_cast<size_t>(i)] -=
          lr * scale * mh / (std::sqrt(vh) + eps);
    }
    for (int i = 0; i < 3; ++i)
      CHECK(p.at(static_cast<size_t>(i)) ==
            doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-14));
  }
  CHECK(opt.step_count() == 7);
  CHECK(opt.n_slots() == 1);
}

TEST_CASE("adam treats a never-written gradient as zero") {
  Tensor p = Tensor::from_values({2, 1}, {3.0, -1.0}, /*requires_grad=*/true);
  Adam opt;
  opt.add_group({p}, 0.5);
  opt.step(1.0);
  CHECK(p.at(0) == 3.0);
  CHECK(p.at(1) == -1.0);
  CHECK(opt.step_count() == 1);
}

TEST_CASE("adam rejects nonpositive learning rates") {
  Tensor p = Tensor::from_values({1, 1}, {1.0}, true);
  Adam opt;
  CHECK_THROWS_AS(opt.add_group({p}, 0.0), ContractViolation);
  CHECK_THROWS_AS(opt.add_group({p}, -1e-3), ContractViolation);
}

TEST_CASE("train config survives a JSON round trip") {
  TrainConfig c = tiny_cfg(Variant::InrDm);
  c.rays_per_batch = 96;
  c.iterations = 123;
  c.lr_hashgrid = 1e-2;
  c.lr_other = 2e-3;
  c.weights.lambda_tp = 0.25;
  c.weights.lambda_dm = 2.0;
  c.weights.lambda_rgt = 0.05;
  c.pars = 5;
  c.seed = 99;
  c.par_filter = FbpFilter::Hann;
  c.log_every = 10;
  c.checkpoint_every = 50;
  c.model.dvf_output_scale = 0.07;
  c.model.dvf_output_clamp = 0.2;

  const std::string text = c.to_json_text();
  TrainConfig d = TrainConfig::from_json_text(text);
  CHECK(d.to_json_text() == text);
  CHECK(d.variant == c.variant);
  CHECK(d.rays_per_batch == c.rays_per_batch);
  CHECK(d.iterations == c.iterations);
  CHECK(d.lr_hashgrid == c.lr_hashgrid);
  CHECK(d.lr_other == c.lr_other);
  CHECK(d.weights.lambda_tp == c.weights.lambda_tp);
  CHECK(d.weights.lambda_dm == c.weights.lambda_dm);
  CHECK(d.weights.lambda_rgt == c.weights.lambda_rgt);
  CHECK(d.pars == c.pars);
  CHECK(d.seed == c.seed);
  CHECK(d.n_samples == c.n_samples);
  CHECK(d.par_filter == c.par_filter);
  CHECK(d.log_every == c.log_every);
  CHECK(d.checkpoint_every == c.checkpoint_every);
  CHECK(d.model.width == c.model.width);
  CHECK(d.model.recon_resolution == c.model.recon_resolution);
  CHECK(d.model.n_levels == c.model.n_levels);
  CHECK(d.model.log2_hashmap_size == c.model.log2_hashmap_size);
  CHECK(d.model.base_resolution == c.model.base_resolution);
  CHECK(d.model.dvf_output_scale == c.model.dvf_output_scale);
  CHECK(d.model.dvf_output_clamp == c.model.dvf_output_clamp);

  // Sparse configs inherit defaults for everything unspecified.
  TrainConfig sparse = TrainConfig::from_json_text("{\"seed\": 3}");
  CHECK(sparse.seed == 3);
  CHECK(sparse.variant == Variant::InrDmAr);
  CHECK(sparse.rays_per_batch == 1024);
}

TEST_CASE("train config rejects malformed or out-of-contract JSON") {
  CHECK_THROWS_AS(TrainConfig::from_json_text("3"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{\"rays\": 1}"), ConfigError);
  CHECK_THROWS_AS(
      TrainConfig::from_json_text("{\"weights\": {\"lambda\": 1}}"),
      ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{\"model\": {\"depth\": 3}}"),
                  ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{\"rays_per_batch\": \"x\"}"),
                  ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{\"rays_per_batch\": 0}"),
                  ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{\"iterations\": -1}"),
                  ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{\"lr_other\": 0}"),
                  ConfigError);
  CHECK_THROWS_AS(
      TrainConfig::from_json_text("{\"weights\": {\"lambda_tp\": 1.0}}"),
      ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{\"variant\": \"mlp\"}"),
                  ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{\"par_filter\": \"box\"}"),
                  ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{\"pars\": 0}"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{\"log_every\": 0}"),
                  ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json_text("{\"checkpoint_every\": -2}"),
                  ConfigError);
  CHECK_THROWS_AS(
      TrainConfig::from_json_text("{\"model\": {\"log2_hashmap_size\": 31}}"),
      ConfigError);
}

TEST_CASE("trainer wires the full objective and touches the parameters") {
  ProjectionSet data = tiny_scan();
  TrainConfig cfg = tiny_cfg(Variant::InrDmAr);
  Trainer tr(cfg, data);

  CHECK(tr.config().model.n_views == data.geom.n_views);
  CHECK(tr.fidelity_samples() == 8);
  REQUIRE(tr.pars() != nullptr);
  CHECK(tr.pars()->count() == 3);

  auto before = snapshot(tr.bundle());
  LossReport r = tr.step();
  CHECK(tr.iteration() == 1);
  for (double v : {r.fdl_tp, r.fdl_ff, r.dm, r.rgt, r.total})
    CHECK(std::isfinite(v));
  const LossWeights& w = cfg.weights;
  CHECK(r.total == doctest::Approx(w.lambda_tp * r.fdl_tp +
                                   (1 - w.lambda_tp) * r.fdl_ff +
                                   w.lambda_dm * r.dm + w.lambda_rgt * r.rgt)
                       .epsilon(1e-12));
  auto after = snapshot(tr.bundle());
  CHECK_FALSE(bitwise_equal(before, after));
}

TEST_CASE("plain variant trains without a prior stack or registration term") {
  ProjectionSet data = tiny_scan();
  Trainer tr(tiny_cfg(Variant::InrBase), data);
  CHECK(tr.pars() == nullptr);
  LossReport r = tr.step();
  CHECK(r.rgt == 0.0);
  CHECK(std::isfinite(r.total));
}

TEST_CASE("trainer rejects inconsistent inputs") {
  ProjectionSet data = tiny_scan();
  TrainConfig cfg = tiny_cfg(Variant::InrDm);
  cfg.rays_per_batch = static_cast<int>(data.geom.ray_count()) + 1;
  CHECK_THROWS_AS(Trainer(cfg, data), ConfigError);

  ProjectionSet bad = data;
  bad.values.pop_back();
  CHECK_THROWS_AS(Trainer(tiny_cfg(Variant::InrDm), bad), ContractViolation);
}

TEST_CASE("checkpoints restore training bitwise") {
  ProjectionSet data = tiny_scan();
  TrainConfig cfg = tiny_cfg(Variant::InrDmAr);
  cfg.iterations = 6;

  Trainer a(cfg, data);
  for (int i = 0; i < 3; ++i) a.step();
  const fs::path ckpt = tmp_file("mid.ckpt");
  a.save_checkpoint(ckpt.string());

  Trainer b = Trainer::load_checkpoint(ckpt.string(), data);
  CHECK(b.iteration() == 3);
  CHECK(bitwise_equal(snapshot(a.bundle()), snapshot(b.bundle())));
  REQUIRE(b.pars() != nullptr);
  CHECK(b.pars()->count() == a.pars()->count());

  // Identical futures: same batches, same losses, same parameter updates.
  for (int i = 0; i < 3; ++i) {
    LossReport ra = a.step();
    LossReport rb = b.step();
    CHECK(ra.fdl_tp == rb.fdl_tp);
    CHECK(ra.fdl_ff == rb.fdl_ff);
    CHECK(ra.dm == rb.dm);
    CHECK(ra.rgt == rb.rgt);
    CHECK(ra.total == rb.total);
  }
  CHECK(bitwise_equal(snapshot(a.bundle()), snapshot(b.bundle())));
}

TEST_CASE("checkpoints refuse a different scan or a corrupt file") {
  ProjectionSet data = tiny_scan();
  TrainConfig cfg = tiny_cfg(Variant::InrDm);
  Trainer a(cfg, data);
  a.step();
  const fs::path ckpt = tmp_file("guard.ckpt");
  a.save_checkpoint(ckpt.string());

  ProjectionSet other = tiny_scan(16, 10);
  CHECK_THROWS_AS(Trainer::load_checkpoint(ckpt.string(), other),
                  ConfigError);

  // Truncation anywhere in the stream surfaces as a config error.
  const std::string whole = slurp(ckpt);
  const fs::path cut = tmp_file("cut.ckpt");
  {
    std::ofstream out(cut, std::ios::binary);
    out.write(whole.data(),
              static_cast<std::streamsize>(whole.size() / 2));
  }
  CHECK_THROWS_AS(Trainer::load_checkpoint(cut.string(), data), ConfigError);
  CHECK_THROWS_AS(load_eval_model(cut.string()), ConfigError);

  const fs::path junk = tmp_file("junk.ckpt");
  {
    std::ofstream out(junk, std::ios::binary);
    out << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(load_eval_model(junk.string()), ConfigError);
}

TEST_CASE("an evaluation model is self-contained") {
  ProjectionSet data = tiny_scan();
  TrainConfig cfg = tiny_cfg(Variant::InrDmAr);
  Trainer a(cfg, data);
  a.step();
  a.step();
  const fs::path ckpt = tmp_file("eval.ckpt");
  a.save_checkpoint(ckpt.string());

  EvalModel m = load_eval_model(ckpt.string());
  CHECK(m.iteration == 2);
  CHECK(m.config.variant == Variant::InrDmAr);
  CHECK(m.config.model.n_views == data.geom.n_views);
  CHECK(bitwise_equal(snapshot(a.bundle()), snapshot(m.bundle)));
  REQUIRE(m.pars.has_value());
  ArSampler s = m.sampler();
  REQUIRE(static_cast<bool>(s));

  // The sampler agrees with the trainer's own fusion input.
  Tensor xs = Tensor::from_values({3, 2}, {0.31, 0.52, 0.48, 0.39, 0.7, 0.66});
  ad::NoGradGuard ng;
  Tensor from_eval = s(xs);
  Tensor from_train = mc_reconstruct(*a.pars(), a.bundle().fwd, xs);
  for (size_t i = 0; i < from_eval.size(); ++i)
    CHECK(from_eval.at(i) == from_train.at(i));

  // Variants without the prior have no sampler.
  Trainer base(tiny_cfg(Variant::InrBase), data);
  const fs::path ckpt2 = tmp_file("eval_base.ckpt");
  base.save_checkpoint(ckpt2.string());
  EvalModel mb = load_eval_model(ckpt2.string());
  CHECK_FALSE(mb.pars.has_value());
  CHECK_FALSE(static_cast<bool>(mb.sampler()));
}

TEST_CASE("a zero-iteration run checkpoints the initial state") {
  ProjectionSet data = tiny_scan();
  TrainConfig cfg = tiny_cfg(Variant::InrDm);
  cfg.iterations = 0;
  Trainer tr(cfg, data);
  const fs::path base = tmp_file("init");
  tr.run(nullptr, base.string());

  EvalModel m = load_eval_model(base.string() + ".ckpt");
  CHECK(m.iteration == 0);
  ModelBundle fresh =
      ModelBundle::create(m.config.variant, m.config.model, m.config.seed);
  CHECK(bitwise_equal(snapshot(fresh), snapshot(m.bundle)));
}

TEST_CASE("resuming reproduces the loss log bitwise") {
  ProjectionSet data = tiny_scan();
  TrainConfig cfg = tiny_cfg(Variant::InrDm);
  cfg.iterations = 6;

  const fs::path full_log = tmp_file("full.log");
  const fs::path split_log = tmp_file("split.log");
  fs::remove(full_log);
  fs::remove(split_log);

  {
    Trainer a(cfg, data);
    LossLog log;
    log.open(full_log.string(), /*append=*/false);
    a.run(&log);
    log.close();
  }
  const fs::path ckpt = tmp_file("resume.ckpt");
  {
    Trainer b(cfg, data);
    LossLog log;
    log.open(split_log.string(), /*append=*/false);
    for (int i = 0; i < 3; ++i) {
      long long it = b.iteration();
      LossReport r = b.step();
      log.write(it, r);
    }
    log.close();
    b.save_checkpoint(ckpt.string());
  }
  {
    Trainer c = Trainer::load_checkpoint(ckpt.string(), data);
    LossLog log;
    log.open(split_log.string(), /*append=*/true);
    c.run(&log);
    log.close();
  }
  CHECK(slurp(full_log) == slurp(split_log));
}

TEST_CASE("training reduces the objective on a simple scene") {
  DynamicPhantom ph = DynamicPhantom::preset("translating-disk");
  ScanGeometry g = ScanGeometry::parallel(24, 18);
  ProjectionSet data = project(ph.field(), g, 24);

  int improved = 0;
  for (uint64_t seed : {11ull, 22ull, 33ull}) {
    TrainConfig cfg = tiny_cfg(Variant::InrDm);
    cfg.seed = seed;
    cfg.rays_per_batch = 48;
    cfg.n_samples = 12;
    cfg.iterations = 60;
    Trainer tr(cfg, data);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 60; ++i) {
      double t = tr.step().total;
      if (i < 5) first += t;
      if (i >= 55) last += t;
    }
    if (last < first) ++improved;
  }
  CHECK(improved >= 2);
}
