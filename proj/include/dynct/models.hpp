#pragma once

// Implicit neural representations for dynamic CT:
//  - PredictionBlock: phi(z) = phi2(concat(z, phi1(z))), a pair of
//    one-hidden-layer MLPs with a feature shortcut. The output layer
//    starts at zero so every head begins as the zero map.
//  - DvfInr: a displacement vector field over (x, t), fusion-encoded, with
//    a fixed output scaling and clamp. Two directions exist: dynamic ->
//    static (backward warping of query points) and static -> dynamic
//    (forward warping for registration and motion-compensated analytic
//    reconstruction).
//  - ImageModel: two attenuation heads sharing the backward DVF. The
//    template branch mu_TP encodes the warped static point x_s; the fusion
//    branch mu_FF encodes the dynamic query (x, t) directly and may take a
//    normalized analytically-reconstructed value at x_s as an extra input.

#include <functional>
#include <vector>

#include "dynct/encoders.hpp"
#include "dynct/tensor.hpp"

namespace dynct {

enum class Variant { InrBase, InrDm, InrDmAr };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

class PredictionBlock {
 public:
  PredictionBlock(int in_dim, int out_dim, Rng& rng, int hidden = 32,
                  int mid = 32);
  ad::Tensor eval(const ad::Tensor& z, bool frozen = false) const;
  std::vector<ad::Tensor> params();
  int in_dim() const { return in_; }

 private:
  int in_;
  Mlp1 phi1_, phi2_;
};

enum class DvfDirection { DynamicToStatic, StaticToDynamic };

struct DvfConfig {
  int spatial_dim = 2;
  int width = 32;
  double output_scale = 0.25;
  double output_clamp = 0.5;  // per-axis displacement bound
  HashGridConfig spatial_grid;
  HashGridConfig temporal_grid;
};

class DvfInr {
 public:
  DvfInr(DvfDirection dir, const DvfConfig& cfg, Rng& rng);

  // x: [n, d], t: [n, 1] -> displacement [n, d]
  ad::Tensor displacement(const ad::Tensor& x, const ad::Tensor& t,
                          bool frozen = false) const;

  DvfDirection direction() const { return dir_; }
  const DvfConfig& config() const { return cfg_; }
  std::vector<ad::Tensor> table_params() { return enc_.table_params(); }
  std::vector<ad::Tensor> mlp_params();
  // Total query points evaluated so far (cost audit).
  long long query_points() const { return queries_; }
  void reset_query_count() { queries_ = 0; }

 private:
  DvfDirection dir_;
  DvfConfig cfg_;
  FusionEncoder4D enc_;
  PredictionBlock pred_;
  mutable long long queries_ = 0;
};

// x_s = clamp(x_d + D(x_d, t), [0,1]); requires a dynamic->static field.
ad::Tensor backward_warp(const DvfInr& bwd, const ad::Tensor& x_d,
                         const ad::Tensor& t, bool frozen = false);

// Sampler for analytically reconstructed attenuation at static points,
// typically wrapping mc_reconstruct over a frozen PAR stack.
using ArSampler = std::function<ad::Tensor(const ad::Tensor& x_s)>;

struct ImageModelConfig {
  int spatial_dim = 2;
  int width = 32;
  bool ar_input = false;   // append mu_AR(x_s) to the fusion branch
  double ar_lo = 0.0;      // affine normalization of the AR input:
  double ar_hi = 1.0;      // (mu_AR - lo) / (hi - lo)
  HashGridConfig tp_grid;       // static spatial grid (d-D)
  HashGridConfig ff_spatial_grid;
  HashGridConfig ff_temporal_grid;
};

class ImageModel {
 public:
  ImageModel(const ImageModelConfig& cfg, Rng& rng);

  struct DualEval {
    ad::Tensor x_s;    // [n, d]
    ad::Tensor mu_tp;  // [n, 1]
    ad::Tensor mu_ff;  // [n, 1] (undefined unless requested)
  };

  // Template branch: mu_TP(x, t) = phi_TP(gamma(x_s)).
  ad::Tensor eval_tp(const DvfInr& bwd, const ad::Tensor& x_d,
                     const ad::Tensor& t, bool frozen_image = false,
                     bool frozen_dvf = false) const;
  // Fusion branch: mu_FF(x, t) = phi_FF(e4d(x, t) [, norm(mu_AR(x_s))]).
  // `ar` must be provided exactly when the model was built with ar_input.
  ad::Tensor eval_ff(const DvfInr& bwd, const ArSampler* ar,
                     const ad::Tensor& x_d, const ad::Tensor& t,
                     bool frozen_image = false, bool frozen_dvf = false) const;
  // Both heads sharing one warp evaluation.
  DualEval eval_dual(const DvfInr& bwd, const ArSampler* ar,
                     const ad::Tensor& x_d, const ad::Tensor& t) const;

  const ImageModelConfig& config() const { return cfg_; }
  void set_ar_range(double lo, double hi);
  std::vector<ad::Tensor> table_params();
  std::vector<ad::Tensor> mlp_params();
  long long query_points() const { return queries_; }

 private:
  ad::Tensor normalize_ar(const ad::Tensor& raw) const;

  ImageModelConfig cfg_;
  HashGrid tp_grid_;
  PredictionBlock tp_pred_;
  FusionEncoder4D ff_enc_;
  PredictionBlock ff_pred_;
  mutable long long queries_ = 0;
};

struct ModelBundleConfig {
  int spatial_dim = 2;
  int width = 32;
  int recon_resolution = 128;  // finest spatial level ~ 2x this
  int n_views = 360;           // finest temporal level ~ 2x this
  int n_levels = 16;
  int features_per_level = 2;
  int log2_hashmap_size = 19;
  int base_resolution = 16;
  double dvf_output_scale = 0.25;
  double dvf_output_clamp = 0.5;

  HashGridConfig spatial_grid() const;
  HashGridConfig temporal_grid() const;
};

// The full trainable state of one reconstruction: both DVF directions and
// the dual-branch image model.
struct ModelBundle {
  Variant variant = Variant::InrDmAr;
  ModelBundleConfig config;
  DvfInr bwd;
  DvfInr fwd;
  ImageModel image;

  static ModelBundle create(Variant v, const ModelBundleConfig& cfg,
                            uint64_t seed);

  std::vector<ad::Tensor> table_params();   // hashgrid learning-rate group
  std::vector<ad::Tensor> mlp_params();     // everything else
  std::vector<ad::Tensor> fwd_params();     // forward DVF only
  std::vector<ad::Tensor> all_params();
};

}  // namespace dynct
