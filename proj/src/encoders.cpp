#include "dynct/encoders.hpp"

#include <cmath>
#include <cstdint>

namespace dynct {

using ad::Tensor;

namespace {

// Negative-side slope of the hidden activations in every MLP.
constexpr double kHiddenSlope = 0.01;

constexpr uint64_t kPrimes[3] = {1u, 2654435761u, 805459861u};

struct LevelLayout {
  int res;
  size_t table_size;
  bool hashed;
  size_t stride[3];  // direct-indexing strides
};

LevelLayout layout_for(const HashGridConfig& cfg, int level) {
  LevelLayout L;
  L.res = cfg.level_resolution(level);
  size_t dense = 1;
  for (int a = 0; a < cfg.input_dim; ++a) {
    L.stride[a] = dense;
    dense *= static_cast<size_t>(L.res) + 1;
  }
  const size_t cap = size_t{1} << cfg.log2_hashmap_size;
  L.hashed = dense > cap;
  L.table_size = L.hashed ? cap : dense;
  return L;
}

size_t slot_of(const LevelLayout& L, const int* corner, int dim) {
  if (!L.hashed) {
    size_t s = 0;
    for (int a = 0; a < dim; ++a)
      s += static_cast<size_t>(corner[a]) * L.stride[a];
    return s;
  }
  uint64_t h = 0;
  for (int a = 0; a < dim; ++a)
    h ^= static_cast<uint64_t>(corner[a]) * kPrimes[a];
  return static_cast<size_t>(h % L.table_size);
}

}  // namespace

int HashGridConfig::level_resolution(int level) const {
  // floor with a tiny guard against pow() landing just under an integer
  return static_cast<int>(std::floor(
      base_resolution * std::pow(per_level_scale, level) + 1e-9));
}

size_t HashGridConfig::level_table_size(int level) const {
  return layout_for(*this, level).table_size;
}

bool HashGridConfig::level_uses_hashing(int level) const {
  return layout_for(*this, level).hashed;
}

void HashGridConfig::validate() const {
  if (input_dim < 1 || input_dim > 3)
    throw ContractViolation("hashgrid: input_dim must be 1..3");
  if (n_levels < 1 || features_per_level < 1)
    throw ContractViolation("hashgrid: levels and features must be >= 1");
  if (log2_hashmap_size < 1 || log2_hashmap_size > 30)
    throw ContractViolation("hashgrid: log2_hashmap_size out of range");
  if (base_resolution < 1)
    throw ContractViolation("hashgrid: base resolution must be >= 1");
  if (!(per_level_scale >= 1.0))
    throw ContractViolation("hashgrid: per-level scale must be >= 1");
}

double HashGridConfig::scale_for_max_resolution(int base_resolution,
                                                int n_levels,
                                                int max_resolution) {
  if (n_levels <= 1) return 1.0;
  if (max_resolution < base_resolution)
    throw ContractViolation("hashgrid: max resolution below base resolution");
  return std::exp(std::log(static_cast<double>(max_resolution) /
                           base_resolution) /
                  (n_levels - 1));
}

HashGrid::HashGrid(HashGridConfig cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  tables_.reserve(static_cast<size_t>(cfg_.n_levels));
  for (int l = 0; l < cfg_.n_levels; ++l) {
    const size_t ts = cfg_.level_table_size(l);
    std::vector<double> init(ts * cfg_.features_per_level);
    for (double& v : init) v = uniform(rng, -1e-4, 1e-4);
    tables_.push_back(Tensor::from_values(
        {static_cast<int>(ts), cfg_.features_per_level}, std::move(init),
        true));
  }
}

Tensor HashGrid::encode(const Tensor& coords, bool frozen) const {
  const int dim = cfg_.input_dim;
  if (coords.shape().size() != 2 || coords.dim(1) != dim)
    throw ContractViolation("hashgrid: coords must be [n," +
                            std::to_string(dim) + "]");
  const int n = coords.dim(0);
  const int F = cfg_.features_per_level;
  const int L = cfg_.n_levels;
  const int out_dim = cfg_.output_dim();
  const int ncorner = 1 << dim;

  std::vector<LevelLayout> layouts;
  layouts.reserve(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l) layouts.push_back(layout_for(cfg_, l));

  std::vector<double> out(static_cast<size_t>(n) * out_dim, 0.0);
  auto coord_vals = coords.values();
  for (int r = 0; r < n; ++r) {
    double x[3], f[3];
    int base_corner[3];
    for (int l = 0; l < L; ++l) {
      const LevelLayout& lay = layouts[static_cast<size_t>(l)];
      for (int a = 0; a < dim; ++a) {
        double c = coord_vals[static_cast<size_t>(r) * dim + a];
        x[a] = c < 0 ? 0.0 : (c > 1 ? 1.0 : c);
        double pos = x[a] * lay.res;
        int i = static_cast<int>(std::floor(pos));
        if (i > lay.res - 1) i = lay.res - 1;
        if (i < 0) i = 0;
        base_corner[a] = i;
        f[a] = pos - i;
      }
      const auto& tv = tables_[static_cast<size_t>(l)].values();
      for (int c = 0; c < ncorner; ++c) {
        double w = 1.0;
        int corner[3];
        for (int a = 0; a < dim; ++a) {
          const bool hi = (c >> a) & 1;
          corner[a] = base_corner[a] + (hi ? 1 : 0);
          w *= hi ? f[a] : 1.0 - f[a];
        }
        if (w == 0.0) continue;
        const size_t slot = slot_of(lay, corner, dim);
        for (int k = 0; k < F; ++k)
          out[static_cast<size_t>(r) * out_dim + l * F + k] +=
              w * tv[slot * F + k];
      }
    }
  }

  // `frozen` pins the tables only; coordinate gradients still flow so a
  // frozen network can steer upstream inputs (e.g. warped query points).
  std::vector<Tensor> track;
  track.push_back(coords);
  for (const Tensor& t : tables_)
    track.push_back(frozen ? t.frozen() : t);

  const bool coords_live = track[0].requires_grad();
  std::vector<bool> table_live(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l)
    table_live[static_cast<size_t>(l)] = track[static_cast<size_t>(l) + 1]
                                             .requires_grad();

  auto cfg = cfg_;
  auto coords_node = coords.node();
  std::vector<std::shared_ptr<ad::Node>> table_nodes;
  for (const Tensor& t : tables_) table_nodes.push_back(t.node());

  return ad::make_op(
      {n, out_dim}, std::move(out), track,
      [=](const std::vector<double>& dy, ad::AdjointStore& adj) {
        const int d = cfg.input_dim;
        const int nc = 1 << d;
        std::vector<double>* dcoords =
            coords_live ? &adj.at(coords_node.get(),
                                  static_cast<size_t>(n) * d)
                        : nullptr;
        for (int l = 0; l < L; ++l) {
          const LevelLayout& lay = layouts[static_cast<size_t>(l)];
          const auto& tv = table_nodes[static_cast<size_t>(l)]->values;
          std::vector<double>* dtab =
              table_live[static_cast<size_t>(l)]
                  ? &adj.at(table_nodes[static_cast<size_t>(l)].get(),
                            tv.size())
                  : nullptr;
          if (!dtab && !dcoords) continue;
          for (int r = 0; r < n; ++r) {
            double x[3], f[3];
            int base_corner[3];
            bool saturated[3];
            for (int a = 0; a < d; ++a) {
              double c =
                  coords_node->values[static_cast<size_t>(r) * d + a];
              saturated[a] = c < 0.0 || c > 1.0;
              x[a] = c < 0 ? 0.0 : (c > 1 ? 1.0 : c);
              double pos = x[a] * lay.res;
              int i = static_cast<int>(std::floor(pos));
              if (i > lay.res - 1) i = lay.res - 1;
              if (i < 0) i = 0;
              base_corner[a] = i;
              f[a] = pos - i;
            }
            for (int c = 0; c < nc; ++c) {
              int corner[3];
              double w = 1.0;
              for (int a = 0; a < d; ++a) {
                const bool hi = (c >> a) & 1;
                corner[a] = base_corner[a] + (hi ? 1 : 0);
                w *= hi ? f[a] : 1.0 - f[a];
              }
              const size_t slot = slot_of(lay, corner, d);
              for (int k = 0; k < F; ++k) {
                const double g =
                    dy[static_cast<size_t>(r) * out_dim + l * F + k];
                if (g == 0.0) continue;
                if (dtab && w != 0.0) (*dtab)[slot * F + k] += w * g;
                if (dcoords) {
                  for (int a = 0; a < d; ++a) {
                    if (saturated[a]) continue;
                    double dw = (c >> a) & 1 ? 1.0 : -1.0;
                    for (int b = 0; b < d; ++b) {
                      if (b == a) continue;
                      dw *= (c >> b) & 1 ? f[b] : 1.0 - f[b];
                    }
                    (*dcoords)[static_cast<size_t>(r) * d + a] +=
                        g * dw * lay.res * tv[slot * F + k];
                  }
                }
              }
            }
          }
        }
      });
}

Mlp1::Mlp1(int in_dim, int hidden_dim, int out_dim, Rng& rng, bool zero_output)
    : in_(in_dim), hidden_(hidden_dim), out_(out_dim) {
  if (in_dim < 1 || hidden_dim < 1 || out_dim < 1)
    throw ContractViolation("mlp: dimensions must be >= 1");
  auto init = [&rng](std::vector<int> shape, int fan_in, bool zero) {
    size_t n = 1;
    for (int e : shape) n *= static_cast<size_t>(e);
    std::vector<double> v(n, 0.0);
    if (!zero) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& x : v) x = uniform(rng, -bound, bound);
    }
    return Tensor::from_values(std::move(shape), std::move(v), true);
  };
  w1_ = init({hidden_, in_}, in_, false);
  b1_ = init({hidden_}, in_, false);
  w2_ = init({out_, hidden_}, hidden_, zero_output);
  b2_ = init({out_}, hidden_, zero_output);
}

Tensor Mlp1::eval(const Tensor& x, bool frozen) const {
  if (x.shape().size() != 2 || x.dim(1) != in_)
    throw ContractViolation("mlp: input must be [n," + std::to_string(in_) +
                            "]");
  auto p = [frozen](const Tensor& t) { return frozen ? t.frozen() : t; };
  // Leaky rather than plain relu: the displacement heads are pushed toward
  // zero output early in training (any warp hurts while the template is
  // still rough), and with a zero-slope basin an entire hidden layer can
  // land there and never recover — after which no gradient reaches the
  // encoder tables behind it.
  Tensor h = ad::leaky_relu(ad::linear(x, p(w1_), p(b1_)), kHiddenSlope);
  return ad::linear(h, p(w2_), p(b2_));
}

std::vector<Tensor> Mlp1::params() { return {w1_, b1_, w2_, b2_}; }

FusionEncoder4D::FusionEncoder4D(const HashGridConfig& spatial_cfg,
                                 const HashGridConfig& temporal_cfg, int width,
                                 Rng& rng, int align_x_width,
                                 int align_t_width)
    : width_(width),
      spatial_(spatial_cfg, rng),
      temporal_([&] {
        HashGridConfig c = temporal_cfg;
        c.input_dim = 1;
        return c;
      }(), rng),
      align_x_(spatial_cfg.output_dim(), width,
               align_x_width > 0 ? align_x_width : width, rng),
      align_t_(temporal_.config().output_dim(), width,
               align_t_width > 0 ? align_t_width : width, rng),
      branch_x_(align_x_.out_dim(), width, width, rng),
      branch_t_(align_t_.out_dim(), width, width, rng),
      branch_xt_(align_x_.out_dim(), width, width, rng),
      fuse_(3 * width, width, width, rng) {
  if (width < 1) throw ContractViolation("fusion: width must be >= 1");
  if (align_x_.out_dim() != align_t_.out_dim())
    throw ContractViolation(
        "fusion: aligned spatial and temporal feature widths differ (" +
        std::to_string(align_x_.out_dim()) + " vs " +
        std::to_string(align_t_.out_dim()) + ")");
}

Tensor FusionEncoder4D::encode(const Tensor& x, const Tensor& t,
                               bool frozen) const {
  if (x.shape().size() != 2 || t.shape().size() != 2 || t.dim(1) != 1)
    throw ContractViolation("fusion: expected x [n,d] and t [n,1]");
  if (x.dim(0) != t.dim(0))
    throw ContractViolation("fusion: x and t row counts differ");
  Tensor hx = align_x_.eval(spatial_.encode(x, frozen), frozen);
  Tensor ht = align_t_.eval(temporal_.encode(t, frozen), frozen);
  Tensor cross = ad::mul(hx, ht);
  return fuse_.eval(
      ad::concat_cols({branch_x_.eval(hx, frozen), branch_t_.eval(ht, frozen),
                       branch_xt_.eval(cross, frozen)}),
      frozen);
}

std::vector<Tensor> FusionEncoder4D::table_params() {
  std::vector<Tensor> out;
  for (auto& t : spatial_.tables()) out.push_back(t);
  for (auto& t : temporal_.tables()) out.push_back(t);
  return out;
}

std::vector<Tensor> FusionEncoder4D::mlp_params() {
  std::vector<Tensor> out;
  for (Mlp1* m : {&align_x_, &align_t_, &branch_x_, &branch_t_, &branch_xt_,
                  &fuse_})
    for (auto& p : m->params()) out.push_back(p);
  return out;
}

}  // namespace dynct
