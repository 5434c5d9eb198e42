#pragma once

// Input encodings for the implicit neural representations:
//  - HashGrid: multi-resolution grid of trainable feature vectors with
//    multilinear interpolation. Levels whose dense vertex count fits the
//    table use direct indexing; larger levels hash the integer vertex with
//    per-axis primes (1, 2654435761, 805459861) combined by xor.
//  - Mlp1: one-hidden-layer perceptron, ReLU hidden activation, linear out.
//  - FusionEncoder4D: fuses separate spatial and temporal hashgrid
//    features through aligned branches plus their elementwise product,
//    reducing a (2+1)-D query to two low-dimensional encodings.

#include <vector>

#include "dynct/tensor.hpp"
#include "dynct/util.hpp"

namespace dynct {

struct HashGridConfig {
  int input_dim = 2;  // 1..3
  int n_levels = 16;
  int features_per_level = 2;
  int log2_hashmap_size = 19;
  int base_resolution = 16;
  double per_level_scale = 1.5;

  int level_resolution(int level) const;
  size_t level_table_size(int level) const;
  bool level_uses_hashing(int level) const;
  int output_dim() const { return n_levels * features_per_level; }
  void validate() const;

  // Geometric growth rate so the finest level lands on max_resolution.
  static double scale_for_max_resolution(int base_resolution, int n_levels,
                                         int max_resolution);
};

class HashGrid {
 public:
  HashGrid(HashGridConfig cfg, Rng& rng);

  // coords: [n, input_dim], clamped to [0,1] per axis (coordinate
  // gradients vanish where clamped) -> features [n, output_dim].
  ad::Tensor encode(const ad::Tensor& coords, bool frozen = false) const;

  const HashGridConfig& config() const { return cfg_; }
  std::vector<ad::Tensor>& tables() { return tables_; }
  const std::vector<ad::Tensor>& tables() const { return tables_; }

 private:
  HashGridConfig cfg_;
  std::vector<ad::Tensor> tables_;  // per level [table_size, features]
};

class Mlp1 {
 public:
  // Weights and biases start at U(+-1/sqrt(fan_in)); zero_output
  // additionally zeroes the output layer so the net starts as the zero map.
  Mlp1(int in_dim, int hidden_dim, int out_dim, Rng& rng,
       bool zero_output = false);

  ad::Tensor eval(const ad::Tensor& x, bool frozen = false) const;
  std::vector<ad::Tensor> params();
  int in_dim() const { return in_; }
  int out_dim() const { return out_; }

 private:
  int in_, hidden_, out_;
  ad::Tensor w1_, b1_, w2_, b2_;
};

class FusionEncoder4D {
 public:
  // width is the feature width of both aligned branches and the output.
  // The aligned spatial and temporal features are multiplied elementwise,
  // so their widths must agree; distinct align widths are accepted only to
  // let callers probe that contract.
  FusionEncoder4D(const HashGridConfig& spatial_cfg,
                  const HashGridConfig& temporal_cfg, int width, Rng& rng,
                  int align_x_width = -1, int align_t_width = -1);

  // x: [n, spatial_dim], t: [n, 1] -> [n, width]
  ad::Tensor encode(const ad::Tensor& x, const ad::Tensor& t,
                    bool frozen = false) const;

  int output_dim() const { return width_; }
  const HashGrid& spatial() const { return spatial_; }
  const HashGrid& temporal() const { return temporal_; }
  // Trainable parameters, split by learning-rate group.
  std::vector<ad::Tensor> table_params();
  std::vector<ad::Tensor> mlp_params();

 private:
  int width_;
  HashGrid spatial_, temporal_;
  Mlp1 align_x_, align_t_, branch_x_, branch_t_, branch_xt_, fuse_;
};

}  // namespace dynct
