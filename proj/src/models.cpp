#include "dynct/models.hpp"

#include <string>

namespace dynct {

using ad::Tensor;

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::InrBase: return "inr-base";
    case Variant::InrDm: return "inr-dm";
    case Variant::InrDmAr: return "inr-dm-ar";
  }
  return "inr-dm-ar";
}

Variant variant_from_name(const std::string& name) {
  if (name == "inr-base") return Variant::InrBase;
  if (name == "inr-dm") return Variant::InrDm;
  if (name == "inr-dm-ar") return Variant::InrDmAr;
  throw ConfigError("unknown variant '" + name +
                    "' (expected inr-base, inr-dm, or inr-dm-ar)");
}

PredictionBlock::PredictionBlock(int in_dim, int out_dim, Rng& rng, int hidden,
                                 int mid)
    : in_(in_dim),
      phi1_(in_dim, hidden, mid, rng),
      phi2_(in_dim + mid, hidden, out_dim, rng, /*zero_output=*/true) {}

Tensor PredictionBlock::eval(const Tensor& z, bool frozen) const {
  Tensor mid = phi1_.eval(z, frozen);
  return phi2_.eval(ad::concat_cols({z, mid}), frozen);
}

std::vector<Tensor> PredictionBlock::params() {
  std::vector<Tensor> out = phi1_.params();
  for (auto& p : phi2_.params()) out.push_back(p);
  return out;
}

DvfInr::DvfInr(DvfDirection dir, const DvfConfig& cfg, Rng& rng)
    : dir_(dir),
      cfg_(cfg),
      enc_(cfg.spatial_grid, cfg.temporal_grid, cfg.width, rng),
      pred_(cfg.width, cfg.spatial_dim, rng) {
  if (!(cfg.output_scale > 0) || !(cfg.output_clamp > 0))
    throw ContractViolation("dvf: output scale and clamp must be > 0");
}

Tensor DvfInr::displacement(const Tensor& x, const Tensor& t,
                            bool frozen) const {
  if (x.shape().size() != 2 || x.dim(1) != cfg_.spatial_dim)
    throw ContractViolation("dvf: x must be [n," +
                            std::to_string(cfg_.spatial_dim) + "]");
  queries_ += x.dim(0);
  Tensor raw = pred_.eval(enc_.encode(x, t, frozen), frozen);
  return ad::clamp(ad::scale(raw, cfg_.output_scale), -cfg_.output_clamp,
                   cfg_.output_clamp);
}

std::vector<Tensor> DvfInr::mlp_params() {
  std::vector<Tensor> out = enc_.mlp_params();
  for (auto& p : pred_.params()) out.push_back(p);
  return out;
}

Tensor backward_warp(const DvfInr& bwd, const Tensor& x_d, const Tensor& t,
                     bool frozen) {
  if (bwd.direction() != DvfDirection::DynamicToStatic)
    throw ContractViolation(
        "backward_warp: field must map dynamic -> static");
  return ad::clamp(ad::add(x_d, bwd.displacement(x_d, t, frozen)), 0.0, 1.0);
}

ImageModel::ImageModel(const ImageModelConfig& cfg, Rng& rng)
    : cfg_(cfg),
      tp_grid_(cfg.tp_grid, rng),
      tp_pred_(cfg.tp_grid.output_dim(), 1, rng, cfg.width, cfg.width),
      ff_enc_(cfg.ff_spatial_grid, cfg.ff_temporal_grid, cfg.width, rng),
      ff_pred_(cfg.width + (cfg.ar_input ? 1 : 0), 1, rng, cfg.width,
               cfg.width) {
  if (cfg.ar_input && !(cfg.ar_hi > cfg.ar_lo))
    throw ContractViolation("image model: ar normalization range is empty");
}

void ImageModel::set_ar_range(double lo, double hi) {
  if (!(hi > lo))
    throw ContractViolation("image model: ar normalization range is empty");
  cfg_.ar_lo = lo;
  cfg_.ar_hi = hi;
}

Tensor ImageModel::normalize_ar(const Tensor& raw) const {
  return ad::scale(ad::add_scalar(raw, -cfg_.ar_lo),
                   1.0 / (cfg_.ar_hi - cfg_.ar_lo));
}

Tensor ImageModel::eval_tp(const DvfInr& bwd, const Tensor& x_d,
                           const Tensor& t, bool frozen_image,
                           bool frozen_dvf) const {
  queries_ += x_d.dim(0);
  Tensor x_s = backward_warp(bwd, x_d, t, frozen_dvf);
  return tp_pred_.eval(tp_grid_.encode(x_s, frozen_image), frozen_image);
}

Tensor ImageModel::eval_ff(const DvfInr& bwd, const ArSampler* ar,
                           const Tensor& x_d, const Tensor& t,
                           bool frozen_image, bool frozen_dvf) const {
  queries_ += x_d.dim(0);
  if (cfg_.ar_input && !ar)
    throw ConfigError(
        "image model: fusion branch requires an analytic-reconstruction "
        "sampler");
  if (!cfg_.ar_input && ar)
    throw ConfigError(
        "image model: analytic-reconstruction input is disabled for this "
        "variant");
  Tensor feat = ff_enc_.encode(x_d, t, frozen_image);
  if (cfg_.ar_input) {
    Tensor x_s = backward_warp(bwd, x_d, t, frozen_dvf);
    feat = ad::concat_cols({feat, normalize_ar((*ar)(x_s))});
  }
  return ff_pred_.eval(feat, frozen_image);
}

ImageModel::DualEval ImageModel::eval_dual(const DvfInr& bwd,
                                           const ArSampler* ar,
                                           const Tensor& x_d,
                                           const Tensor& t) const {
  queries_ += x_d.dim(0);
  if (cfg_.ar_input && !ar)
    throw ConfigError(
        "image model: fusion branch requires an analytic-reconstruction "
        "sampler");
  DualEval out;
  out.x_s = backward_warp(bwd, x_d, t);
  out.mu_tp = tp_pred_.eval(tp_grid_.encode(out.x_s));
  Tensor feat = ff_enc_.encode(x_d, t);
  if (cfg_.ar_input) feat = ad::concat_cols({feat, normalize_ar((*ar)(out.x_s))});
  out.mu_ff = ff_pred_.eval(feat);
  return out;
}

std::vector<Tensor> ImageModel::table_params() {
  std::vector<Tensor> out;
  for (auto& t : tp_grid_.tables()) out.push_back(t);
  for (auto& t : ff_enc_.table_params()) out.push_back(t);
  return out;
}

std::vector<Tensor> ImageModel::mlp_params() {
  std::vector<Tensor> out = tp_pred_.params();
  for (auto& p : ff_enc_.mlp_params()) out.push_back(p);
  for (auto& p : ff_pred_.params()) out.push_back(p);
  return out;
}

HashGridConfig ModelBundleConfig::spatial_grid() const {
  HashGridConfig g;
  g.input_dim = spatial_dim;
  g.n_levels = n_levels;
  g.features_per_level = features_per_level;
  g.log2_hashmap_size = log2_hashmap_size;
  g.base_resolution = base_resolution;
  g.per_level_scale = HashGridConfig::scale_for_max_resolution(
      base_resolution, n_levels,
      std::max(2 * recon_resolution, base_resolution));
  return g;
}

HashGridConfig ModelBundleConfig::temporal_grid() const {
  HashGridConfig g = spatial_grid();
  g.input_dim = 1;
  g.per_level_scale = HashGridConfig::scale_for_max_resolution(
      base_resolution, n_levels, std::max(2 * n_views, base_resolution));
  return g;
}

ModelBundle ModelBundle::create(Variant v, const ModelBundleConfig& cfg,
                                uint64_t seed) {
  Rng rng(seed);
  DvfConfig dvf;
  dvf.spatial_dim = cfg.spatial_dim;
  dvf.width = cfg.width;
  dvf.output_scale = cfg.dvf_output_scale;
  dvf.output_clamp = cfg.dvf_output_clamp;
  dvf.spatial_grid = cfg.spatial_grid();
  dvf.temporal_grid = cfg.temporal_grid();

  ImageModelConfig img;
  img.spatial_dim = cfg.spatial_dim;
  img.width = cfg.width;
  img.ar_input = v == Variant::InrDmAr;
  img.tp_grid = cfg.spatial_grid();
  img.ff_spatial_grid = cfg.spatial_grid();
  img.ff_temporal_grid = cfg.temporal_grid();

  return ModelBundle{v, cfg, DvfInr(DvfDirection::DynamicToStatic, dvf, rng),
                     DvfInr(DvfDirection::StaticToDynamic, dvf, rng),
                     ImageModel(img, rng)};
}

std::vector<Tensor> ModelBundle::table_params() {
  std::vector<Tensor> out = bwd.table_params();
  for (auto& p : fwd.table_params()) out.push_back(p);
  for (auto& p : image.table_params()) out.push_back(p);
  return out;
}

std::vector<Tensor> ModelBundle::mlp_params() {
  std::vector<Tensor> out = bwd.mlp_params();
  for (auto& p : fwd.mlp_params()) out.push_back(p);
  for (auto& p : image.mlp_params()) out.push_back(p);
  return out;
}

std::vector<Tensor> ModelBundle::fwd_params() {
  std::vector<Tensor> out = fwd.table_params();
  for (auto& p : fwd.mlp_params()) out.push_back(p);
  return out;
}

std::vector<Tensor> ModelBundle::all_params() {
  std::vector<Tensor> out = table_params();
  for (auto& p : mlp_params()) out.push_back(p);
  return out;
}

}  // namespace dynct
