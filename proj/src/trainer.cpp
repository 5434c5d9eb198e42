#include "dynct/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace dynct {

using ad::Tensor;
using nlohmann::json;

double cosine_lr_scale(long long iteration, long long total) {
  const long long last = std::max<long long>(total - 1, 1);
  const long long i = std::clamp<long long>(iteration, 0, last);
  return 0.5 *
         (1.0 + std::cos(kPi * static_cast<double>(i) /
                         static_cast<double>(last)));
}

std::vector<uint32_t> sample_rays(const ScanGeometry& g, int n, Rng& rng) {
  const size_t total = g.ray_count();
  if (n <= 0) throw ContractViolation("sample_rays: need at least one ray");
  if (static_cast<size_t>(n) > total)
    throw ContractViolation("sample_rays: more rays requested than exist");
  // Partial Fisher-Yates: the first n slots become a uniform sample
  // without replacement.
  std::vector<uint32_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0u);
  for (int i = 0; i < n; ++i) {
    std::uniform_int_distribution<size_t> pick(static_cast<size_t>(i),
                                               total - 1);
    std::swap(idx[static_cast<size_t>(i)], idx[pick(rng)]);
  }
  idx.resize(static_cast<size_t>(n));
  return idx;
}

void Adam::add_group(const std::vector<Tensor>& params, double lr) {
  if (!(lr > 0)) throw ContractViolation("adam: learning rate must be > 0");
  for (const auto& p : params) {
    Slot s;
    s.param = p;
    s.lr = lr;
    s.m.assign(p.size(), 0.0);
    s.v.assign(p.size(), 0.0);
    slots_.push_back(std::move(s));
  }
}

void Adam::step(double lr_scale) {
  if (slots_.empty()) return;
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    auto g = s.param.grad();
    auto vals = s.param.values_mut();
    const double lr = s.lr * lr_scale;
    for (size_t i = 0; i < vals.size(); ++i) {
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      vals[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg_.eps);
    }
  }
}

void Adam::save(BinWriter& w) const {
  w.i64(t_);
  w.u64(slots_.size());
  for (const auto& s : slots_) {
    w.vec(s.m);
    w.vec(s.v);
  }
}

void Adam::load(BinReader& r) {
  t_ = r.i64();
  if (r.u64() != slots_.size())
    throw ConfigError(
        "checkpoint optimizer state does not match this configuration");
  for (auto& s : slots_) {
    s.m = r.vec();
    s.v = r.vec();
    if (s.m.size() != s.param.size() || s.v.size() != s.param.size())
      throw ConfigError(
          "checkpoint optimizer state does not match this configuration");
  }
}

void Adam::skip(BinReader& r) {
  r.i64();
  const uint64_t n = r.u64();
  for (uint64_t i = 0; i < n; ++i) {
    r.vec();
    r.vec();
  }
}

namespace {

void expect_keys(const json& j, std::initializer_list<const char*> keys,
                 const char* where) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError(std::string("unknown key '") + item.key() + "' in " +
                        where);
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (rays_per_batch < 1)
    throw ConfigError("train config: rays_per_batch must be >= 1");
  if (iterations < 0)
    throw ConfigError("train config: iterations must be >= 0");
  if (!(lr_hashgrid > 0) || !(lr_other > 0))
    throw ConfigError("train config: learning rates must be > 0");
  if (pars < 1) throw ConfigError("train config: pars must be >= 1");
  if (n_samples < 0)
    throw ConfigError("train config: n_samples must be >= 0");
  if (log_every < 1) throw ConfigError("train config: log_every must be >= 1");
  if (checkpoint_every < 0)
    throw ConfigError("train config: checkpoint_every must be >= 0");
  weights.validate();
  if (model.recon_resolution < 4)
    throw ConfigError("train config: recon_resolution must be >= 4");
  if (model.width < 1 || model.n_levels < 1 || model.features_per_level < 1 ||
      model.base_resolution < 2 || model.log2_hashmap_size < 4 ||
      model.log2_hashmap_size > 30)
    throw ConfigError("train config: invalid model block");
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object())
    throw ConfigError("train config is not a JSON object");
  TrainConfig c;
  try {
    expect_keys(j,
                {"variant", "rays_per_batch", "iterations", "lr_hashgrid",
                 "lr_other", "weights", "pars", "seed", "n_samples",
                 "par_filter", "model", "log_every", "checkpoint_every"},
                "train config");
    if (j.contains("variant"))
      c.variant = variant_from_name(j["variant"].get<std::string>());
    if (j.contains("rays_per_batch"))
      c.rays_per_batch = j["rays_per_batch"].get<int>();
    if (j.contains("iterations"))
      c.iterations = j["iterations"].get<long long>();
    if (j.contains("lr_hashgrid"))
      c.lr_hashgrid = j["lr_hashgrid"].get<double>();
    if (j.contains("lr_other")) c.lr_other = j["lr_other"].get<double>();
    if (j.contains("weights")) {
      const json& w = j["weights"];
      expect_keys(w, {"lambda_tp", "lambda_dm", "lambda_rgt"},
                  "train config weights");
      if (w.contains("lambda_tp"))
        c.weights.lambda_tp = w["lambda_tp"].get<double>();
      if (w.contains("lambda_dm"))
        c.weights.lambda_dm = w["lambda_dm"].get<double>();
      if (w.contains("lambda_rgt"))
        c.weights.lambda_rgt = w["lambda_rgt"].get<double>();
    }
    if (j.contains("pars")) c.pars = j["pars"].get<int>();
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    if (j.contains("n_samples")) c.n_samples = j["n_samples"].get<int>();
    if (j.contains("par_filter"))
      c.par_filter = filter_from_name(j["par_filter"].get<std::string>());
    if (j.contains("model")) {
      const json& m = j["model"];
      expect_keys(m,
                  {"spatial_dim", "width", "recon_resolution", "n_views",
                   "n_levels", "features_per_level", "log2_hashmap_size",
                   "base_resolution", "dvf_output_scale", "dvf_output_clamp"},
                  "train config model");
      if (m.contains("spatial_dim"))
        c.model.spatial_dim = m["spatial_dim"].get<int>();
      if (m.contains("width")) c.model.width = m["width"].get<int>();
      if (m.contains("recon_resolution"))
        c.model.recon_resolution = m["recon_resolution"].get<int>();
      if (m.contains("n_views")) c.model.n_views = m["n_views"].get<int>();
      if (m.contains("n_levels")) c.model.n_levels = m["n_levels"].get<int>();
      if (m.contains("features_per_level"))
        c.model.features_per_level = m["features_per_level"].get<int>();
      if (m.contains("log2_hashmap_size"))
        c.model.log2_hashmap_size = m["log2_hashmap_size"].get<int>();
      if (m.contains("base_resolution"))
        c.model.base_resolution = m["base_resolution"].get<int>();
      if (m.contains("dvf_output_scale"))
        c.model.dvf_output_scale = m["dvf_output_scale"].get<double>();
      if (m.contains("dvf_output_clamp"))
        c.model.dvf_output_clamp = m["dvf_output_clamp"].get<double>();
    }
    if (j.contains("log_every"))
      c.log_every = j["log_every"].get<long long>();
    if (j.contains("checkpoint_every"))
      c.checkpoint_every = j["checkpoint_every"].get<long long>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string TrainConfig::to_json_text() const {
  json j{{"variant", variant_name(variant)},
         {"rays_per_batch", rays_per_batch},
         {"iterations", iterations},
         {"lr_hashgrid", lr_hashgrid},
         {"lr_other", lr_other},
         {"weights",
          {{"lambda_tp", weights.lambda_tp},
           {"lambda_dm", weights.lambda_dm},
           {"lambda_rgt", weights.lambda_rgt}}},
         {"pars", pars},
         {"seed", seed},
         {"n_samples", n_samples},
         {"par_filter", filter_name(par_filter)},
         {"model",
          {{"spatial_dim", model.spatial_dim},
           {"width", model.width},
           {"recon_resolution", model.recon_resolution},
           {"n_views", model.n_views},
           {"n_levels", model.n_levels},
           {"features_per_level", model.features_per_level},
           {"log2_hashmap_size", model.log2_hashmap_size},
           {"base_resolution", model.base_resolution},
           {"dvf_output_scale", model.dvf_output_scale},
           {"dvf_output_clamp", model.dvf_output_clamp}}},
         {"log_every", log_every},
         {"checkpoint_every", checkpoint_every}};
  return j.dump(2) + "\n";
}

namespace {

TrainConfig adapt_config(TrainConfig cfg, const ProjectionSet& data) {
  cfg.validate();
  data.geom.validate();
  cfg.model.n_views = data.geom.n_views;
  return cfg;
}

uint64_t sampler_seed(uint64_t seed) {
  // distinct stream from the parameter-initialization seed
  return seed ^ 0xD1B54A32D192ED03ull;
}

}  // namespace

Trainer::Trainer(const TrainConfig& cfg, const ProjectionSet& data)
    : Trainer(cfg, data, FromCheckpoint{}) {
  if (cfg_.variant == Variant::InrDmAr) {
    FbpConfig fc;
    fc.filter = cfg_.par_filter;
    fc.grid = recon_grid_;
    pars_ = make_pars(data_, fc, cfg_.pars);
    const Image full = par_sum(*pars_);
    double lo = full.values[0], hi = full.values[0];
    for (double v : full.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (!(hi > lo)) {
      lo = 0.0;
      hi = 1.0;
    }
    bundle_.image.set_ar_range(lo, hi);
  }
}

Trainer::Trainer(const TrainConfig& cfg, const ProjectionSet& data,
                 FromCheckpoint)
    : cfg_(adapt_config(cfg, data)),
      data_(data),
      recon_grid_{cfg_.model.recon_resolution, cfg_.model.recon_resolution},
      n_samples_(cfg_.n_samples > 0 ? cfg_.n_samples
                                    : default_samples(recon_grid_)),
      bundle_(ModelBundle::create(cfg_.variant, cfg_.model, cfg_.seed)),
      rng_(sampler_seed(cfg_.seed)) {
  if (data_.values.size() != data_.geom.ray_count())
    throw ContractViolation("trainer: sinogram size does not match geometry");
  if (static_cast<size_t>(cfg_.rays_per_batch) > data_.geom.ray_count())
    throw ConfigError("train config: rays_per_batch exceeds the ray count");

  std::set<const ad::Node*> fwd_nodes;
  for (auto& p : bundle_.fwd_params()) fwd_nodes.insert(p.node().get());
  std::vector<Tensor> main_tables, main_mlps, fwd_tables, fwd_mlps;
  for (auto& p : bundle_.table_params())
    (fwd_nodes.count(p.node().get()) ? fwd_tables : main_tables).push_back(p);
  for (auto& p : bundle_.mlp_params())
    (fwd_nodes.count(p.node().get()) ? fwd_mlps : main_mlps).push_back(p);
  main_.add_group(main_tables, cfg_.lr_hashgrid);
  main_.add_group(main_mlps, cfg_.lr_other);
  if (cfg_.variant != Variant::InrBase) {
    rgt_.add_group(fwd_tables, cfg_.lr_hashgrid);
    rgt_.add_group(fwd_mlps, cfg_.lr_other);
  }
}

std::pair<Tensor, Tensor> Trainer::draw_points(long long n) {
  std::vector<double> x(static_cast<size_t>(n) * 2);
  std::vector<double> t(static_cast<size_t>(n));
  for (auto& v : x) v = uniform(rng_, 0.0, 1.0);
  for (auto& v : t) v = uniform(rng_, 0.0, 1.0);
  return {Tensor::from_values({static_cast<int>(n), 2}, std::move(x)),
          Tensor::from_values({static_cast<int>(n), 1}, std::move(t))};
}

LossReport Trainer::step() {
  ad::Tape& tape = ad::Tape::active();
  const size_t mark = tape.size();

  auto picks = sample_rays(data_.geom, cfg_.rays_per_batch, rng_);
  RayBatch batch = make_ray_batch(data_, picks, n_samples_);

  ArSampler ar;
  const ArSampler* arp = nullptr;
  if (pars_) {
    ar = [this](const Tensor& xs) {
      return mc_reconstruct(*pars_, bundle_.fwd, xs);
    };
    arp = &ar;
  }
  FidelityTerms fid = fidelity_loss(bundle_.image, bundle_.bwd, arp, batch);

  const long long n_reg = std::max<long long>(
      1, static_cast<long long>(cfg_.rays_per_batch) * n_samples_ / 4);
  Tensor dm, rgt;
  if (cfg_.variant == Variant::InrBase) {
    auto [x, t] = draw_points(n_reg);
    dm = l2_dvf_penalty(bundle_.bwd, x, t);
    rgt = Tensor::scalar(0.0);
  } else {
    auto [xs, ts] = draw_points(n_reg);
    dm = diffeo_loss(bundle_.fwd, bundle_.bwd, xs, ts);
    auto [xd, td] = draw_points(n_reg);
    rgt = registration_loss(bundle_.image, bundle_.fwd, bundle_.bwd, xd, td);
  }
  Tensor total = total_loss(fid.tp, fid.ff, dm, rgt, cfg_.weights);

  LossReport rep;
  rep.fdl_tp = fid.tp.value();
  rep.fdl_ff = fid.ff.value();
  rep.dm = dm.value();
  rep.rgt = rgt.value();
  rep.total = total.value();
  const struct {
    const char* name;
    double v;
  } terms[] = {{"fdl_tp", rep.fdl_tp},
               {"fdl_ff", rep.fdl_ff},
               {"dm", rep.dm},
               {"rgt", rep.rgt},
               {"total", rep.total}};
  for (const auto& term : terms)
    if (!std::isfinite(term.v))
      throw NumericError("training diverged at iteration " +
                         std::to_string(iter_) + ": " + term.name + " = " +
                         std::to_string(term.v));

  for (auto& p : bundle_.all_params()) p.zero_grad();
  tape.backward(total);
  tape.truncate(mark);

  const double s = cosine_lr_scale(iter_, cfg_.iterations);
  main_.step(s);
  if (cfg_.variant != Variant::InrBase) rgt_.step(s);
  ++iter_;
  return rep;
}

void Trainer::run(LossLog* log, const std::string& checkpoint_basename) {
  while (iter_ < cfg_.iterations) {
    const long long i = iter_;
    LossReport r = step();
    if (log && (i % cfg_.log_every == 0 || i + 1 == cfg_.iterations))
      log->write(i, r);
    if (!checkpoint_basename.empty() && cfg_.checkpoint_every > 0 &&
        (i + 1) % cfg_.checkpoint_every == 0 && i + 1 < cfg_.iterations)
      save_checkpoint(checkpoint_basename + ".ckpt");
  }
  if (!checkpoint_basename.empty())
    save_checkpoint(checkpoint_basename + ".ckpt");
}

namespace {

constexpr const char* kCkptMagic = "dynct-checkpoint";
constexpr uint32_t kCkptVersion = 1;

struct CheckpointHead {
  TrainConfig cfg;
  uint8_t fan = 0;
  uint32_t n_detectors = 0;
  uint32_t n_views = 0;
  long long iteration = 0;
  std::string rng_state;
  std::vector<std::vector<double>> params;
};

CheckpointHead read_head(BinReader& r, const std::string& path) {
  if (r.str() != kCkptMagic)
    throw ConfigError("'" + path + "' is not a checkpoint file");
  const uint32_t version = r.u32();
  if (version != kCkptVersion)
    throw ConfigError("'" + path + "' uses unsupported checkpoint version " +
                      std::to_string(version));
  CheckpointHead h;
  h.cfg = TrainConfig::from_json_text(r.str());
  h.fan = r.u8();
  h.n_detectors = r.u32();
  h.n_views = r.u32();
  h.iteration = r.i64();
  h.rng_state = r.str();
  const uint32_t np = r.u32();
  h.params.resize(np);
  for (auto& blob : h.params) blob = r.vec();
  return h;
}

void restore_params(ModelBundle& b,
                    const std::vector<std::vector<double>>& blobs,
                    const std::string& path) {
  auto params = b.all_params();
  if (params.size() != blobs.size())
    throw ConfigError("'" + path +
                      "' does not match this model configuration");
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != blobs[i].size())
      throw ConfigError("'" + path +
                        "' does not match this model configuration");
    auto vals = params[i].values_mut();
    std::copy(blobs[i].begin(), blobs[i].end(), vals.begin());
  }
}

void write_pars(BinWriter& w, const ParStack& ps) {
  w.u32(static_cast<uint32_t>(ps.images.at(0).grid.nx));
  w.u32(static_cast<uint32_t>(ps.images.at(0).grid.ny));
  w.u32(static_cast<uint32_t>(ps.count()));
  for (int k = 0; k < ps.count(); ++k) {
    w.f64(ps.times[static_cast<size_t>(k)]);
    w.u32(static_cast<uint32_t>(ps.view_ranges[static_cast<size_t>(k)].first));
    w.u32(
        static_cast<uint32_t>(ps.view_ranges[static_cast<size_t>(k)].second));
    w.vec(ps.images[static_cast<size_t>(k)].values);
  }
}

ParStack read_pars(BinReader& r, const std::string& path) {
  GridSpec grid;
  grid.nx = static_cast<int>(r.u32());
  grid.ny = static_cast<int>(r.u32());
  const uint32_t k = r.u32();
  ParStack ps;
  for (uint32_t i = 0; i < k; ++i) {
    ps.times.push_back(r.f64());
    const int v0 = static_cast<int>(r.u32());
    const int v1 = static_cast<int>(r.u32());
    ps.view_ranges.emplace_back(v0, v1);
    Image img;
    img.grid = grid;
    img.values = r.vec();
    if (img.values.size() != grid.count())
      throw ConfigError("'" + path + "' holds a corrupt PAR stack");
    ps.images.push_back(std::move(img));
  }
  return ps;
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path) {
  BinWriter w(path);
  w.str(kCkptMagic);
  w.u32(kCkptVersion);
  w.str(cfg_.to_json_text());
  w.u8(data_.geom.mode == ScanMode::Fan ? 1 : 0);
  w.u32(static_cast<uint32_t>(data_.geom.n_detectors));
  w.u32(static_cast<uint32_t>(data_.geom.n_views));
  w.i64(iter_);
  {
    std::ostringstream ss;
    ss << rng_;
    w.str(ss.str());
  }
  auto params = bundle_.all_params();
  w.u32(static_cast<uint32_t>(params.size()));
  for (auto& p : params) w.vec(p.values());
  main_.save(w);
  rgt_.save(w);
  w.u8(pars_ ? 1 : 0);
  if (pars_) {
    write_pars(w, *pars_);
    w.f64(bundle_.image.config().ar_lo);
    w.f64(bundle_.image.config().ar_hi);
  }
  w.close();
}

Trainer Trainer::load_checkpoint(const std::string& path,
                                 const ProjectionSet& data) {
  BinReader r(path);
  CheckpointHead h = read_head(r, path);
  if ((h.fan == 1) != (data.geom.mode == ScanMode::Fan) ||
      h.n_detectors != static_cast<uint32_t>(data.geom.n_detectors) ||
      h.n_views != static_cast<uint32_t>(data.geom.n_views))
    throw ConfigError("'" + path + "' was trained on a different scan");

  Trainer t(h.cfg, data, FromCheckpoint{});
  restore_params(t.bundle_, h.params, path);
  t.iter_ = h.iteration;
  {
    std::istringstream ss(h.rng_state);
    ss >> t.rng_;
    if (!ss) throw ConfigError("'" + path + "' holds a corrupt RNG state");
  }
  t.main_.load(r);
  t.rgt_.load(r);
  const bool has_pars = r.u8() != 0;
  if (has_pars != (t.cfg_.variant == Variant::InrDmAr))
    throw ConfigError("'" + path +
                      "' PAR stack is inconsistent with its variant");
  if (has_pars) {
    t.pars_ = read_pars(r, path);
    const double lo = r.f64();
    const double hi = r.f64();
    t.bundle_.image.set_ar_range(lo, hi);
  }
  return t;
}

ArSampler EvalModel::sampler() const {
  if (!pars) return {};
  const ParStack* ps = &*pars;
  const DvfInr* fwd = &bundle.fwd;
  return [ps, fwd](const Tensor& xs) { return mc_reconstruct(*ps, *fwd, xs); };
}

EvalModel load_eval_model(const std::string& checkpoint_path) {
  BinReader r(checkpoint_path);
  CheckpointHead h = read_head(r, checkpoint_path);
  EvalModel m{h.cfg, h.iteration,
              ModelBundle::create(h.cfg.variant, h.cfg.model, h.cfg.seed),
              std::nullopt};
  restore_params(m.bundle, h.params, checkpoint_path);
  Adam::skip(r);
  Adam::skip(r);
  const bool has_pars = r.u8() != 0;
  if (has_pars != (m.config.variant == Variant::InrDmAr))
    throw ConfigError("'" + checkpoint_path +
                      "' PAR stack is inconsistent with its variant");
  if (has_pars) {
    m.pars = read_pars(r, checkpoint_path);
    const double lo = r.f64();
    const double hi = r.f64();
    m.bundle.image.set_ar_range(lo, hi);
  }
  return m;
}

}  // namespace dynct
