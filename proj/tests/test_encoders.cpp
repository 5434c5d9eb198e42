#include <doctest.h>

#include <cmath>

#include "dynct/encoders.hpp"
#include "test_helpers.hpp"

using namespace dynct;
using ad::Tensor;

namespace {

HashGridConfig tiny2d() {
  HashGridConfig c;
  c.input_dim = 2;
  c.n_levels = 1;
  c.features_per_level = 2;
  c.base_resolution = 4;
  c.per_level_scale = 1.0;
  return c;
}

}  // namespace

TEST_CASE("level resolutions grow geometrically to the target") {
  HashGridConfig c;
  c.base_resolution = 16;
  c.n_levels = 16;
  c.per_level_scale = HashGridConfig::scale_for_max_resolution(16, 16, 256);
  CHECK(c.level_resolution(0) == 16);
  CHECK(c.level_resolution(15) == 256);
  for (int l = 1; l < 16; ++l)
    CHECK(c.level_resolution(l) >= c.level_resolution(l - 1));
}

TEST_CASE("dense levels index directly, oversized levels hash") {
  HashGridConfig c;
  c.input_dim = 2;
  c.log2_hashmap_size = 8;  // 256 slots
  c.base_resolution = 8;
  c.n_levels = 3;
  c.per_level_scale = 4.0;
  CHECK_FALSE(c.level_uses_hashing(0));  // 81 vertices
  CHECK(c.level_table_size(0) == 81);
  CHECK(c.level_uses_hashing(1));  // 33^2 > 256
  CHECK(c.level_table_size(1) == 256);

  // 1-D grids stay direct for any practical resolution
  HashGridConfig t;
  t.input_dim = 1;
  t.log2_hashmap_size = 19;
  t.base_resolution = 16;
  t.n_levels = 16;
  t.per_level_scale = HashGridConfig::scale_for_max_resolution(16, 16, 1080);
  for (int l = 0; l < t.n_levels; ++l) CHECK_FALSE(t.level_uses_hashing(l));
}

TEST_CASE("encoding at a vertex returns that vertex's features") {
  Rng rng(1);
  HashGrid grid(tiny2d(), rng);
  // vertex (i, j) of the 4x4 level sits at (i/4, j/4); slot = j*5 + i
  const int i = 2, j = 3;
  Tensor x = Tensor::from_values({1, 2}, {i / 4.0, j / 4.0});
  Tensor e = grid.encode(x);
  const auto& table = grid.tables()[0];
  const size_t slot = static_cast<size_t>(j) * 5 + i;
  CHECK(e.at(0) == doctest::Approx(table.at(slot * 2)).epsilon(1e-12));
  CHECK(e.at(1) == doctest::Approx(table.at(slot * 2 + 1)).epsilon(1e-12));
}

TEST_CASE("encoding at a cell center averages the four corners") {
  Rng rng(2);
  HashGrid grid(tiny2d(), rng);
  Tensor x = Tensor::from_values({1, 2}, {0.125, 0.375});  // center of cell (0,1)
  Tensor e = grid.encode(x);
  const auto& t = grid.tables()[0];
  for (int k = 0; k < 2; ++k) {
    double avg = (t.at((1 * 5 + 0) * 2 + k) + t.at((1 * 5 + 1) * 2 + k) +
                  t.at((2 * 5 + 0) * 2 + k) + t.at((2 * 5 + 1) * 2 + k)) /
                 4.0;
    CHECK(e.at(static_cast<size_t>(k)) == doctest::Approx(avg).epsilon(1e-12));
  }
}

TEST_CASE("encoding is continuous across cell boundaries") {
  Rng rng(3);
  HashGridConfig c = tiny2d();
  c.n_levels = 3;
  c.per_level_scale = 2.0;
  HashGrid grid(c, rng);
  const double eps = 1e-9;
  Tensor lo = grid.encode(Tensor::from_values({1, 2}, {0.25 - eps, 0.5 - eps}));
  Tensor hi = grid.encode(Tensor::from_values({1, 2}, {0.25 + eps, 0.5 + eps}));
  for (size_t k = 0; k < lo.size(); ++k)
    CHECK(std::fabs(lo.at(k) - hi.at(k)) < 1e-10);
}

TEST_CASE("hashed lookups are deterministic") {
  Rng rng(4);
  HashGridConfig c;
  c.input_dim = 2;
  c.n_levels = 2;
  c.base_resolution = 32;
  c.per_level_scale = 2.0;
  c.log2_hashmap_size = 6;  // force collisions
  HashGrid grid(c, rng);
  CHECK(c.level_uses_hashing(0));
  Tensor x = Tensor::from_values({2, 2}, {0.317, 0.823, 0.317, 0.823});
  Tensor e = grid.encode(x);
  for (int k = 0; k < c.output_dim(); ++k)
    CHECK(e.at(static_cast<size_t>(k)) ==
          e.at(static_cast<size_t>(c.output_dim() + k)));
}

TEST_CASE("coordinates outside the unit cube saturate") {
  Rng rng(5);
  HashGrid grid(tiny2d(), rng);
  Tensor inside = Tensor::from_values({1, 2}, {1.0, 0.4});
  Tensor outside = Tensor::from_values({1, 2}, {1.3, 0.4}, true);
  Tensor ei = grid.encode(inside);
  Tensor eo = grid.encode(outside);
  for (size_t k = 0; k < ei.size(); ++k) CHECK(ei.at(k) == eo.at(k));
  // saturated axis receives zero coordinate gradient
  ad::Tape::active().backward(ad::sum(eo));
  CHECK(outside.grad()[0] == 0.0);
  ad::Tape::active().clear();
}

TEST_CASE("hashgrid gradients match finite differences") {
  Rng rng(6);
  HashGridConfig c = tiny2d();
  c.n_levels = 2;
  c.per_level_scale = 3.0;
  HashGrid grid(c, rng);
  // both table entries and coordinates; scale tables up so finite
  // differences are well above rounding noise
  for (auto& t : grid.tables())
    for (auto& v : t.values_mut()) v *= 1e3;
  Tensor coords = Tensor::from_values({3, 2}, {0.21, 0.68, 0.43, 0.11, 0.9, 0.37},
                                      true);
  Rng wrng(7);
  std::vector<double> wv(3 * static_cast<size_t>(c.output_dim()));
  for (auto& v : wv) v = uniform(wrng, -1.0, 1.0);
  Tensor w = Tensor::from_values({3, c.output_dim()}, wv);
  auto loss = [&] { return ad::sum(ad::mul(grid.encode(coords), w)); };
  std::vector<Tensor> params{coords};
  for (auto& t : grid.tables()) params.push_back(t);
  CHECK(testutil::max_grad_rel_err(loss, params, 1e-6) < 1e-4);
}

TEST_CASE("mlp computes an affine-relu-affine pipeline") {
  Rng rng(8);
  Mlp1 mlp(2, 2, 1, rng);
  auto p = mlp.params();
  p[0].values_mut()[0] = 1.0;  // w1 = [[1, -1], [0, 2]]
  p[0].values_mut()[1] = -1.0;
  p[0].values_mut()[2] = 0.0;
  p[0].values_mut()[3] = 2.0;
  p[1].values_mut()[0] = 0.0;  // b1 = [0, -1]
  p[1].values_mut()[1] = -1.0;
  p[2].values_mut()[0] = 3.0;  // w2 = [3, 1]
  p[2].values_mut()[1] = 1.0;
  p[3].values_mut()[0] = 0.5;  // b2
  Tensor x = Tensor::from_values({1, 2}, {2.0, 1.0});
  // h = relu([2*1+1*(-1), 2*0+1*2-1]) = [1, 1]; y = 3*1 + 1*1 + 0.5
  CHECK(mlp.eval(x).value() == doctest::Approx(4.5));
}

TEST_CASE("mlp gradients match finite differences") {
  Rng rng(9);
  Mlp1 mlp(3, 4, 2, rng);
  Tensor x = Tensor::from_values({2, 3}, {0.3, -0.2, 0.9, -0.6, 0.1, 0.4},
                                 true);
  auto loss = [&] { return ad::mean(ad::mul(mlp.eval(x), mlp.eval(x))); };
  auto params = mlp.params();
  params.push_back(x);
  CHECK(testutil::max_grad_rel_err(loss, params) < 1e-4);
}

TEST_CASE("zero-output mlp starts as the zero map") {
  Rng rng(10);
  Mlp1 mlp(2, 8, 3, rng, true);
  Tensor x = Tensor::from_values({2, 2}, {0.2, 0.8, -0.5, 0.1});
  Tensor y = mlp.eval(x);
  for (size_t i = 0; i < y.size(); ++i) CHECK(y.at(i) == 0.0);
}

TEST_CASE("fusion encoder separates space and time") {
  Rng rng(11);
  HashGridConfig sp = tiny2d();
  sp.n_levels = 4;
  sp.per_level_scale = 2.0;
  HashGridConfig tm = sp;
  FusionEncoder4D enc(sp, tm, 8, rng);
  Tensor x = Tensor::from_values({2, 2}, {0.4, 0.6, 0.4, 0.6});
  Tensor t = Tensor::from_values({2, 1}, {0.2, 0.8});
  Tensor out = enc.encode(x, t);
  REQUIRE(out.shape() == std::vector<int>{2, 8});
  double diff = 0;
  for (int k = 0; k < 8; ++k)
    diff += std::fabs(out.at(static_cast<size_t>(k)) -
                      out.at(static_cast<size_t>(8 + k)));
  CHECK(diff > 0.0);  // same point, different times -> different features
}

TEST_CASE("fusion encoder rejects mismatched branch widths") {
  Rng rng(12);
  HashGridConfig sp = tiny2d();
  CHECK_THROWS_WITH_AS(FusionEncoder4D(sp, sp, 8, rng, 8, 6),
                       doctest::Contains("widths differ"), ContractViolation);
}

TEST_CASE("fusion encoder gradients match finite differences") {
  Rng rng(13);
  HashGridConfig sp = tiny2d();
  sp.n_levels = 2;
  sp.per_level_scale = 2.0;
  FusionEncoder4D enc(sp, sp, 4, rng);
  for (auto& t : enc.table_params())
    for (auto& v : t.values_mut()) v *= 1e3;
  // probe points off every level's grid lines: interpolation is piecewise
  // linear, so central differences straddling a vertex would see a kink
  Tensor x = Tensor::from_values({2, 2}, {0.31, 0.71, 0.61, 0.21}, true);
  Tensor t = Tensor::from_values({2, 1}, {0.26, 0.77}, true);
  auto loss = [&] { return ad::mean(ad::mul(enc.encode(x, t), enc.encode(x, t))); };
  std::vector<Tensor> params{x, t};
  for (auto& p : enc.table_params()) params.push_back(p);
  for (auto& p : enc.mlp_params()) params.push_back(p);
  CHECK(testutil::max_grad_rel_err(loss, params, 1e-6) < 1e-4);
}

TEST_CASE("frozen evaluation blocks parameter gradients") {
  Rng rng(14);
  HashGridConfig sp = tiny2d();
  FusionEncoder4D enc(sp, sp, 4, rng);
  Tensor x = Tensor::from_values({1, 2}, {0.5, 0.5}, true);
  Tensor t = Tensor::from_values({1, 1}, {0.5});
  ad::Tape::active().backward(ad::sum(enc.encode(x, t, true)));
  for (auto& p : enc.mlp_params()) {
    auto g = p.grad();
    for (double v : g) CHECK(v == 0.0);
  }
  // while the coordinate input still receives one
  double gsum = 0;
  for (double v : x.grad()) gsum += std::fabs(v);
  CHECK(gsum >= 0.0);
  ad::Tape::active().clear();
}
