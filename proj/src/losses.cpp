#include "dynct/losses.hpp"

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dynct {

namespace {

struct DftBasis {
  ad::Tensor cos_kj;   // [n,n]: cos(2 pi k j / n)
  ad::Tensor msin_kj;  // [n,n]: -sin(2 pi k j / n)
};

// Constant basis matrices so the transform is two matmuls; cached per
// length (the trainer reuses one batch size for a whole run).
const DftBasis& dft_basis(int n) {
  static std::unordered_map<int, DftBasis> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<double> c(static_cast<size_t>(n) * n);
  std::vector<double> s(static_cast<size_t>(n) * n);
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j) {
      // Reduce k*j mod n before forming the angle to keep large products
      // from losing precision.
      long long r = (static_cast<long long>(k) * j) % n;
      double ang = 2.0 * kPi * static_cast<double>(r) / n;
      c[static_cast<size_t>(k) * n + j] = std::cos(ang);
      s[static_cast<size_t>(k) * n + j] = -std::sin(ang);
    }
  }
  DftBasis b{ad::Tensor::from_values({n, n}, std::move(c)),
             ad::Tensor::from_values({n, n}, std::move(s))};
  return cache.emplace(n, std::move(b)).first->second;
}

void check_column(const ad::Tensor& v, const char* who) {
  if (!v.defined() || v.shape().size() != 2 || v.dim(1) != 1 || v.dim(0) < 1)
    throw ContractViolation(std::string(who) + ": expected a [n,1] column");
}

void check_points(const ad::Tensor& x, const ad::Tensor& t, const char* who) {
  if (!x.defined() || x.shape().size() != 2 || x.dim(1) < 1)
    throw ContractViolation(std::string(who) + ": points must be [n,d]");
  check_column(t, who);
  if (t.dim(0) != x.dim(0))
    throw ContractViolation(std::string(who) + ": sample count mismatch");
}

// Copy of x with `delta` added to column `col`, as a plain constant.
ad::Tensor shifted(const ad::Tensor& x, int col, double delta) {
  std::vector<double> v(x.values().begin(), x.values().end());
  const int d = x.dim(1);
  for (size_t i = static_cast<size_t>(col); i < v.size();
       i += static_cast<size_t>(d))
    v[i] += delta;
  return ad::Tensor::from_values({x.dim(0), d}, std::move(v));
}

DisplacementFn wrap(const DvfInr& field) {
  return [&field](const ad::Tensor& x, const ad::Tensor& t) {
    return field.displacement(x, t);
  };
}

}  // namespace

void LossWeights::validate() const {
  if (!(lambda_tp > 0.0 && lambda_tp < 1.0))
    throw ConfigError("loss weights: lambda_tp must lie in (0,1)");
  if (!(lambda_dm >= 0.0))
    throw ConfigError("loss weights: lambda_dm must be >= 0");
  if (!(lambda_rgt >= 0.0))
    throw ConfigError("loss weights: lambda_rgt must be >= 0");
}

ad::Tensor fourier_l1(const ad::Tensor& p_hat, const ad::Tensor& p) {
  check_column(p_hat, "fourier_l1");
  check_column(p, "fourier_l1");
  if (p_hat.dim(0) != p.dim(0))
    throw ContractViolation("fourier_l1: length mismatch");
  const DftBasis& b = dft_basis(p_hat.dim(0));
  ad::Tensor d = ad::sub(p_hat, p);
  ad::Tensor re = ad::matmul(b.cos_kj, d);
  ad::Tensor im = ad::matmul(b.msin_kj, d);
  return ad::mean(ad::complex_abs(re, im));
}

FidelityTerms fidelity_loss(const ImageModel& model, const DvfInr& bwd,
                            const ArSampler* ar, const RayBatch& batch) {
  ImageModel::DualEval dual =
      model.eval_dual(bwd, ar, batch.coords, batch.times);
  ad::Tensor p_tp = render_from_samples(dual.mu_tp, batch);
  ad::Tensor p_ff = render_from_samples(dual.mu_ff, batch);
  return {fourier_l1(p_tp, batch.measured),
          fourier_l1(p_ff, batch.measured)};
}

ad::Tensor diffeo_loss(const DisplacementFn& fwd, const DisplacementFn& bwd,
                       const ad::Tensor& x_s, const ad::Tensor& t,
                       double fd_step) {
  check_points(x_s, t, "diffeo_loss");
  if (!(fd_step > 0.0))
    throw ContractViolation("diffeo_loss: fd_step must be positive");
  auto composite = [&](const ad::Tensor& xs) {
    ad::Tensor df = fwd(xs, t);
    ad::Tensor db = bwd(ad::add(xs, df), t);
    return ad::add(df, db);
  };
  const int d = x_s.dim(1);
  ad::Tensor sq_norm;  // [n,1], sum over Jacobian entries per sample
  for (int j = 0; j < d; ++j) {
    ad::Tensor cp = composite(shifted(x_s, j, fd_step));
    ad::Tensor cm = composite(shifted(x_s, j, -fd_step));
    ad::Tensor col = ad::scale(ad::sub(cp, cm), 1.0 / (2.0 * fd_step));
    ad::Tensor sq = ad::row_sum(ad::mul(col, col));
    sq_norm = sq_norm.defined() ? ad::add(sq_norm, sq) : sq;
  }
  return ad::mean(sq_norm);
}

ad::Tensor diffeo_loss(const DvfInr& fwd, const DvfInr& bwd,
                       const ad::Tensor& x_s, const ad::Tensor& t,
                       double fd_step) {
  if (fwd.direction() != DvfDirection::StaticToDynamic)
    throw ContractViolation("diffeo_loss: fwd must map static -> dynamic");
  if (bwd.direction() != DvfDirection::DynamicToStatic)
    throw ContractViolation("diffeo_loss: bwd must map dynamic -> static");
  return diffeo_loss(wrap(fwd), wrap(bwd), x_s, t, fd_step);
}

ad::Tensor registration_loss(const ImageModel& model,
                             const DisplacementFn& fwd, const DvfInr& bwd,
                             const ad::Tensor& x_d, const ad::Tensor& t) {
  check_points(x_d, t, "registration_loss");
  if (bwd.direction() != DvfDirection::DynamicToStatic)
    throw ContractViolation("registration_loss: bwd must map dynamic -> static");
  ad::Tensor x_s, fixed;
  {
    ad::NoGradGuard ng;
    x_s = ad::add(x_d, bwd.displacement(x_d, t));
    fixed = model.eval_tp(bwd, x_d, t);
  }
  ad::Tensor x_d_hat = ad::add(x_s, fwd(x_s, t));
  ad::Tensor moving = model.eval_tp(bwd, x_d_hat, t, /*frozen_image=*/true,
                                    /*frozen_dvf=*/true);
  return ad::mean(ad::abs(ad::sub(moving, fixed)));
}

ad::Tensor registration_loss(const ImageModel& model, const DvfInr& fwd,
                             const DvfInr& bwd, const ad::Tensor& x_d,
                             const ad::Tensor& t) {
  if (fwd.direction() != DvfDirection::StaticToDynamic)
    throw ContractViolation(
        "registration_loss: fwd must map static -> dynamic");
  return registration_loss(model, wrap(fwd), bwd, x_d, t);
}

ad::Tensor l2_dvf_penalty(const DisplacementFn& field, const ad::Tensor& x,
                          const ad::Tensor& t) {
  check_points(x, t, "l2_dvf_penalty");
  ad::Tensor d = field(x, t);
  return ad::mean(ad::row_sum(ad::mul(d, d)));
}

ad::Tensor l2_dvf_penalty(const DvfInr& field, const ad::Tensor& x,
                          const ad::Tensor& t) {
  return l2_dvf_penalty(wrap(field), x, t);
}

ad::Tensor total_loss(const ad::Tensor& fdl_tp, const ad::Tensor& fdl_ff,
                      const ad::Tensor& dm, const ad::Tensor& rgt,
                      const LossWeights& w) {
  w.validate();
  ad::Tensor fid = ad::add(ad::scale(fdl_tp, w.lambda_tp),
                           ad::scale(fdl_ff, 1.0 - w.lambda_tp));
  ad::Tensor reg =
      ad::add(ad::scale(dm, w.lambda_dm), ad::scale(rgt, w.lambda_rgt));
  return ad::add(fid, reg);
}

}  // namespace dynct
