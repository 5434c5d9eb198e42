#include <doctest.h>

#include <cmath>

#include "dynct/models.hpp"
#include "test_helpers.hpp"

using namespace dynct;
using ad::Tensor;

namespace {

HashGridConfig small_grid(int dim) {
  HashGridConfig c;
  c.input_dim = dim;
  c.n_levels = 2;
  c.features_per_level = 2;
  c.base_resolution = 4;
  c.per_level_scale = 2.0;
  return c;
}

DvfConfig small_dvf() {
  DvfConfig c;
  c.width = 4;
  c.spatial_grid = small_grid(2);
  c.temporal_grid = small_grid(1);
  return c;
}

ImageModelConfig small_image(bool ar) {
  ImageModelConfig c;
  c.width = 4;
  c.ar_input = ar;
  c.tp_grid = small_grid(2);
  // match tp feature width to the predictor width
  c.tp_grid.n_levels = 2;
  c.ff_spatial_grid = small_grid(2);
  c.ff_temporal_grid = small_grid(1);
  return c;
}

void randomize(std::vector<Tensor> params, Rng& rng, double amp) {
  for (auto& p : params)
    for (auto& v : p.values_mut()) v = uniform(rng, -amp, amp);
}

}  // namespace

TEST_CASE("prediction block starts as the zero map and learns") {
  Rng rng(1);
  PredictionBlock pb(6, 2, rng, 8, 8);
  Tensor z = Tensor::from_values({3, 6}, std::vector<double>(18, 0.4));
  Tensor y = pb.eval(z);
  for (size_t i = 0; i < y.size(); ++i) CHECK(y.at(i) == 0.0);

  // randomize the zero output layer, then check gradients
  Rng r2(2);
  randomize(pb.params(), r2, 0.3);
  Tensor zz = Tensor::from_values({2, 6},
                                  {0.1, -0.3, 0.5, 0.2, -0.1, 0.4,
                                   -0.2, 0.6, 0.05, -0.4, 0.3, 0.15},
                                  true);
  auto loss = [&] { return ad::mean(ad::mul(pb.eval(zz), pb.eval(zz))); };
  auto params = pb.params();
  params.push_back(zz);
  CHECK(testutil::max_grad_rel_err(loss, params) < 1e-4);
}

TEST_CASE("displacement field is exactly zero at initialization") {
  Rng rng(3);
  DvfInr dvf(DvfDirection::DynamicToStatic, small_dvf(), rng);
  Tensor x = Tensor::from_values({4, 2}, {0.1, 0.9, 0.5, 0.5, 0.33, 0.77,
                                          0.62, 0.18});
  Tensor t = Tensor::from_values({4, 1}, {0.0, 0.3, 0.6, 0.95});
  Tensor d = dvf.displacement(x, t);
  for (size_t i = 0; i < d.size(); ++i) CHECK(d.at(i) == 0.0);

  Tensor xs = backward_warp(dvf, x, t);
  for (size_t i = 0; i < xs.size(); ++i)
    CHECK(std::fabs(xs.at(i) - x.at(i)) < 1e-2);
}

TEST_CASE("displacements respect the output clamp") {
  Rng rng(4);
  DvfConfig cfg = small_dvf();
  cfg.output_clamp = 0.2;
  DvfInr dvf(DvfDirection::DynamicToStatic, cfg, rng);
  Rng big(5);
  randomize(dvf.mlp_params(), big, 50.0);
  for (auto& tbl : dvf.table_params())
    for (auto& v : tbl.values_mut()) v = uniform(big, -1.0, 1.0);
  Tensor x = Tensor::from_values({3, 2}, {0.2, 0.4, 0.6, 0.8, 0.5, 0.5});
  Tensor t = Tensor::from_values({3, 1}, {0.1, 0.5, 0.9});
  Tensor d = dvf.displacement(x, t);
  double biggest = 0;
  for (size_t i = 0; i < d.size(); ++i) {
    CHECK(std::fabs(d.at(i)) <= 0.2);
    biggest = std::max(biggest, std::fabs(d.at(i)));
  }
  CHECK(biggest == 0.2);  // saturated somewhere, so the clamp is active
}

TEST_CASE("backward warp stays inside the unit square") {
  Rng rng(6);
  DvfInr dvf(DvfDirection::DynamicToStatic, small_dvf(), rng);
  Rng big(7);
  randomize(dvf.mlp_params(), big, 20.0);
  for (auto& tbl : dvf.table_params())
    for (auto& v : tbl.values_mut()) v = uniform(big, -1.0, 1.0);
  Tensor x = Tensor::from_values({3, 2}, {0.02, 0.97, 0.5, 0.03, 0.9, 0.9});
  Tensor t = Tensor::from_values({3, 1}, {0.2, 0.5, 0.8});
  Tensor xs = backward_warp(dvf, x, t);
  for (size_t i = 0; i < xs.size(); ++i) {
    CHECK(xs.at(i) >= 0.0);
    CHECK(xs.at(i) <= 1.0);
  }

  DvfInr fwd(DvfDirection::StaticToDynamic, small_dvf(), rng);
  CHECK_THROWS_AS(backward_warp(fwd, x, t), ContractViolation);
}

TEST_CASE("query counters audit evaluation cost") {
  Rng rng(8);
  DvfInr dvf(DvfDirection::DynamicToStatic, small_dvf(), rng);
  Tensor x = Tensor::from_values({5, 2}, std::vector<double>(10, 0.5));
  Tensor t = Tensor::from_values({5, 1}, std::vector<double>(5, 0.5));
  CHECK(dvf.query_points() == 0);
  dvf.displacement(x, t);
  dvf.displacement(x, t);
  CHECK(dvf.query_points() == 10);
  dvf.reset_query_count();
  CHECK(dvf.query_points() == 0);
}

TEST_CASE("template head gradients flow through the warp into the dvf") {
  Rng rng(9);
  DvfInr dvf(DvfDirection::DynamicToStatic, small_dvf(), rng);
  ImageModel img(small_image(false), rng);
  Rng r2(10);
  randomize(dvf.mlp_params(), r2, 0.4);
  randomize(img.mlp_params(), r2, 0.4);
  for (auto& tbl : dvf.table_params())
    for (auto& v : tbl.values_mut()) v = uniform(r2, -0.03, 0.03);
  for (auto& tbl : img.table_params())
    for (auto& v : tbl.values_mut()) v = uniform(r2, -0.3, 0.3);

  Tensor x = Tensor::from_values({2, 2}, {0.31, 0.52, 0.68, 0.41});
  Tensor t = Tensor::from_values({2, 1}, {0.21, 0.79});
  auto loss = [&] {
    Tensor y = img.eval_tp(dvf, x, t);
    return ad::mean(ad::mul(y, y));
  };
  std::vector<Tensor> params;
  for (auto& p : dvf.table_params()) params.push_back(p);
  for (auto& p : dvf.mlp_params()) params.push_back(p);
  for (auto& p : img.table_params()) params.push_back(p);
  for (auto& p : img.mlp_params()) params.push_back(p);
  CHECK(testutil::max_grad_rel_err(loss, params, 1e-6) < 1e-4);

  // and the dvf does receive a nonzero gradient
  auto tabs = dvf.table_params();
  for (auto& p : tabs) p.zero_grad();
  ad::Tape::active().backward(loss());
  double gsum = 0;
  for (auto& p : tabs)
    for (double g : p.grad()) gsum += std::fabs(g);
  CHECK(gsum > 0.0);
  ad::Tape::active().clear();
}

TEST_CASE("fusion head uses the analytic input exactly when configured") {
  Rng rng(11);
  DvfInr dvf(DvfDirection::DynamicToStatic, small_dvf(), rng);
  Tensor x = Tensor::from_values({2, 2}, {0.3, 0.5, 0.7, 0.4});
  Tensor t = Tensor::from_values({2, 1}, {0.2, 0.8});

  ImageModel plain(small_image(false), rng);
  ArSampler sampler = [](const Tensor& xs) {
    return ad::row_sum(ad::mul(xs, xs));
  };
  CHECK_THROWS_AS(plain.eval_ff(dvf, &sampler, x, t), ConfigError);
  CHECK_NOTHROW(plain.eval_ff(dvf, nullptr, x, t));

  ImageModel armed(small_image(true), rng);
  CHECK_THROWS_AS(armed.eval_ff(dvf, nullptr, x, t), ConfigError);
  Rng r2(12);
  randomize(armed.mlp_params(), r2, 0.4);
  Tensor with_ar = armed.eval_ff(dvf, &sampler, x, t);
  ArSampler sampler2 = [](const Tensor& xs) {
    return ad::add_scalar(ad::row_sum(ad::mul(xs, xs)), 0.5);
  };
  Tensor with_other = armed.eval_ff(dvf, &sampler2, x, t);
  double diff = 0;
  for (size_t i = 0; i < with_ar.size(); ++i)
    diff += std::fabs(with_ar.at(i) - with_other.at(i));
  CHECK(diff > 0.0);
}

TEST_CASE("analytic input is normalized by the stored range") {
  Rng rng(13);
  ImageModel img(small_image(true), rng);
  img.set_ar_range(2.0, 6.0);
  CHECK(img.config().ar_lo == 2.0);
  CHECK_THROWS_AS(img.set_ar_range(3.0, 3.0), ContractViolation);

  DvfInr dvf(DvfDirection::DynamicToStatic, small_dvf(), rng);
  Rng r2(14);
  randomize(img.mlp_params(), r2, 0.4);
  Tensor x = Tensor::from_values({1, 2}, {0.4, 0.6});
  Tensor t = Tensor::from_values({1, 1}, {0.5});
  // a sampler returning lo and one returning hi straddle the same
  // normalized values as 0 and 1
  ArSampler lo = [](const Tensor& xs) {
    return ad::Tensor::full({xs.dim(0), 1}, 2.0);
  };
  ArSampler hi = [](const Tensor& xs) {
    return ad::Tensor::full({xs.dim(0), 1}, 6.0);
  };
  double ylo = img.eval_ff(dvf, &lo, x, t).value();
  double yhi = img.eval_ff(dvf, &hi, x, t).value();
  img.set_ar_range(0.0, 1.0);
  ArSampler zero = [](const Tensor& xs) {
    return ad::Tensor::zeros({xs.dim(0), 1});
  };
  ArSampler one = [](const Tensor& xs) {
    return ad::Tensor::full({xs.dim(0), 1}, 1.0);
  };
  CHECK(img.eval_ff(dvf, &zero, x, t).value() == doctest::Approx(ylo));
  CHECK(img.eval_ff(dvf, &one, x, t).value() == doctest::Approx(yhi));
}

TEST_CASE("dual evaluation matches the single-head paths") {
  Rng rng(15);
  DvfInr dvf(DvfDirection::DynamicToStatic, small_dvf(), rng);
  ImageModel img(small_image(true), rng);
  Rng r2(16);
  randomize(dvf.mlp_params(), r2, 0.4);
  randomize(img.mlp_params(), r2, 0.4);
  for (auto& tbl : img.table_params())
    for (auto& v : tbl.values_mut()) v = uniform(r2, -0.3, 0.3);
  ArSampler sampler = [](const Tensor& xs) {
    return ad::row_sum(ad::mul(xs, xs));
  };
  Tensor x = Tensor::from_values({3, 2}, {0.2, 0.3, 0.5, 0.6, 0.8, 0.1});
  Tensor t = Tensor::from_values({3, 1}, {0.1, 0.5, 0.9});
  auto dual = img.eval_dual(dvf, &sampler, x, t);
  Tensor tp = img.eval_tp(dvf, x, t);
  Tensor ff = img.eval_ff(dvf, &sampler, x, t);
  for (size_t i = 0; i < tp.size(); ++i) {
    CHECK(dual.mu_tp.at(i) == doctest::Approx(tp.at(i)).epsilon(1e-14));
    CHECK(dual.mu_ff.at(i) == doctest::Approx(ff.at(i)).epsilon(1e-14));
  }
}

TEST_CASE("frozen evaluation keeps parameter gradients at zero") {
  Rng rng(17);
  DvfInr dvf(DvfDirection::DynamicToStatic, small_dvf(), rng);
  ImageModel img(small_image(false), rng);
  Rng r2(18);
  randomize(dvf.mlp_params(), r2, 0.4);
  randomize(img.mlp_params(), r2, 0.4);
  Tensor x = Tensor::from_values({2, 2}, {0.3, 0.4, 0.6, 0.7});
  Tensor t = Tensor::from_values({2, 1}, {0.25, 0.75});

  auto all = dvf.table_params();
  for (auto& p : dvf.mlp_params()) all.push_back(p);
  for (auto& p : img.table_params()) all.push_back(p);
  for (auto& p : img.mlp_params()) all.push_back(p);
  for (auto& p : all) p.zero_grad();

  // frozen image parameters: only the dvf should receive gradients
  Tensor y = img.eval_tp(dvf, x, t, /*frozen_image=*/true,
                         /*frozen_dvf=*/false);
  ad::Tape::active().backward(ad::sum(y));
  for (auto& p : img.mlp_params())
    for (double g : p.grad()) CHECK(g == 0.0);
  for (auto& p : img.table_params())
    for (double g : p.grad()) CHECK(g == 0.0);
  ad::Tape::active().clear();
}

TEST_CASE("bundle parameter groups partition the variants") {
  ModelBundleConfig cfg;
  cfg.recon_resolution = 32;
  cfg.n_views = 24;
  cfg.n_levels = 2;
  cfg.base_resolution = 4;
  cfg.width = 4;
  auto b = ModelBundle::create(Variant::InrDmAr, cfg, 1);
  CHECK(b.image.config().ar_input);
  auto base = ModelBundle::create(Variant::InrBase, cfg, 1);
  CHECK_FALSE(base.image.config().ar_input);
  CHECK(variant_from_name("inr-dm") == Variant::InrDm);
  CHECK_THROWS_AS(variant_from_name("bogus"), ConfigError);

  // forward-dvf group is disjoint from the image/backward parameters
  auto fwd = b.fwd_params();
  auto tables = b.table_params();
  auto mlps = b.mlp_params();
  CHECK(fwd.size() > 0);
  CHECK(tables.size() + mlps.size() == b.all_params().size());
  size_t found = 0;
  for (auto& f : fwd)
    for (auto& p : b.all_params())
      if (f.node() == p.node()) ++found;
  CHECK(found == fwd.size());
}
