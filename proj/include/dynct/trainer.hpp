#pragma once

// Self-supervised optimization loop.
//
// Each iteration renders a freshly sampled ray batch through both
// attenuation heads, assembles the variant's total loss (frequency-domain
// fidelity + diffeomorphism or L2 regularizer + registration term), runs
// one reverse pass, and applies two Adam updates: the main parameter set
// (backward DVF + image model) and, for the DVF-regularized variants, the
// forward DVF with its own moment accumulators. Learning rates follow a
// cosine annealing from the configured base rates to zero.
//
// Checkpoints are single self-contained binary files: configuration,
// iteration counter, sampler RNG state, every parameter tensor, both
// optimizer states, and (for the analytic-reconstruction variant) the
// partial-reconstruction stack with its normalization range. Resuming from
// a checkpoint continues the loss log bitwise-identically to an
// uninterrupted run.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dynct/io.hpp"
#include "dynct/losses.hpp"
#include "dynct/models.hpp"
#include "dynct/recon.hpp"

namespace dynct {

// 0.5 * (1 + cos(pi * i / max(T-1, 1))) with i clamped to [0, T-1]:
// 1 at the first iteration, exactly 0 at the last.
double cosine_lr_scale(long long iteration, long long total);

// n distinct ray storage indices, uniform without replacement.
std::vector<uint32_t> sample_rays(const ScanGeometry& g, int n, Rng& rng);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void add_group(const std::vector<ad::Tensor>& params, double lr);
  // One update from the gradients currently stored on the parameters;
  // each group's rate is lr * lr_scale.
  void step(double lr_scale);

  long long step_count() const { return t_; }
  size_t n_slots() const { return slots_.size(); }  // one per tensor
  void save(BinWriter& w) const;
  void load(BinReader& r);  // ConfigError if shapes do not line up
  static void skip(BinReader& r);  // advance past a saved state unread

 private:
  struct Slot {
    ad::Tensor param;
    double lr = 0.0;
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::vector<Slot> slots_;
  long long t_ = 0;
};

struct TrainConfig {
  Variant variant = Variant::InrDmAr;
  int rays_per_batch = 1024;
  long long iterations = 20000;
  double lr_hashgrid = 3e-2;
  double lr_other = 3e-3;
  LossWeights weights;
  int pars = 24;      // partial-angle reconstruction count
  uint64_t seed = 0;
  int n_samples = 0;  // quadrature points per ray; 0 = grid default
  FbpFilter par_filter = FbpFilter::RamLak;
  ModelBundleConfig model;
  long long log_every = 1;
  long long checkpoint_every = 0;  // 0 = only on request

  void validate() const;
  static TrainConfig from_json_text(const std::string& text);
  std::string to_json_text() const;
};

class Trainer {
 public:
  // `data.geom.n_views` overrides the model config's view count so the
  // temporal encoding always matches the scan.
  Trainer(const TrainConfig& cfg, const ProjectionSet& data);

  LossReport step();
  // Run the remaining iterations. Logs one line per log_every iterations
  // (plus the final one); with a basename, writes `<basename>.ckpt` every
  // checkpoint_every iterations and at the end.
  void run(LossLog* log, const std::string& checkpoint_basename = "");

  long long iteration() const { return iter_; }
  const TrainConfig& config() const { return cfg_; }
  ModelBundle& bundle() { return bundle_; }
  const ModelBundle& bundle() const { return bundle_; }
  const GridSpec& recon_grid() const { return recon_grid_; }
  int fidelity_samples() const { return n_samples_; }
  const ParStack* pars() const { return pars_ ? &*pars_ : nullptr; }

  void save_checkpoint(const std::string& path);
  static Trainer load_checkpoint(const std::string& path,
                                 const ProjectionSet& data);

 private:
  struct FromCheckpoint {};  // tag: skip the analytic-prior build
  Trainer(const TrainConfig& cfg, const ProjectionSet& data, FromCheckpoint);

  std::pair<ad::Tensor, ad::Tensor> draw_points(long long n);

  TrainConfig cfg_;
  ProjectionSet data_;
  GridSpec recon_grid_;
  int n_samples_ = 0;
  ModelBundle bundle_;
  std::optional<ParStack> pars_;
  Adam main_, rgt_;
  Rng rng_;
  long long iter_ = 0;
};

// Inference-side view of a checkpoint: the trained models plus whatever the
// fusion head needs to evaluate (no sinogram, no optimizer state). The
// sampler closure borrows from this object, which must outlive it.
struct EvalModel {
  TrainConfig config;
  long long iteration = 0;
  ModelBundle bundle;
  std::optional<ParStack> pars;

  ArSampler sampler() const;  // empty unless the AR variant
};

EvalModel load_eval_model(const std::string& checkpoint_path);

}  // namespace dynct
