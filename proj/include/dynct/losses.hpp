#pragma once

// Training objectives for dynamic-CT INR reconstruction.
//
//  - fourier_l1: frequency-domain data fidelity. The residual between a
//    rendered and a measured projection batch is discrete-Fourier
//    transformed along the (sorted) batch axis and the mean complex modulus
//    over frequency bins is returned.
//  - fidelity_loss: fourier_l1 of both attenuation heads of an ImageModel,
//    rendered through one RayBatch, against the measured values.
//  - diffeo_loss: inverse-consistency regularizer. Penalizes the mean
//    squared Frobenius norm of the spatial Jacobian of the composite
//    displacement  D_fwd(x,t) + D_bwd(x + D_fwd(x,t), t),  which is
//    identically zero when the two fields are exact inverses. The Jacobian
//    is formed by central differences whose evaluations stay on the tape,
//    so the loss is differentiable in the network parameters (sample
//    coordinates themselves are treated as constants).
//  - registration_loss: mean absolute template-head difference between a
//    round-tripped dynamic point and the original one. Everything except
//    the forward field is held fixed, so gradients reach only the forward
//    field's parameters.
//  - l2_dvf_penalty: mean squared displacement norm; the baseline variant
//    uses it in place of diffeo_loss.
//  - total_loss: the weighted combination of the four terms.

#include <functional>

#include "dynct/geometry.hpp"
#include "dynct/models.hpp"
#include "dynct/tensor.hpp"

namespace dynct {

struct LossWeights {
  double lambda_tp = 0.5;   // fidelity blend: lambda*tp + (1-lambda)*ff
  double lambda_dm = 1.0;   // diffeomorphism / L2 regularizer weight
  double lambda_rgt = 0.1;  // registration term weight
  // lambda_tp must lie in the open interval (0,1); the others must be >= 0.
  void validate() const;
};

// Scalar snapshot of one iteration's loss terms for logging.
struct LossReport {
  double fdl_tp = 0.0;
  double fdl_ff = 0.0;
  double dm = 0.0;
  double rgt = 0.0;
  double total = 0.0;
};

// Displacement field: x [n,d], t [n,1] -> displacement [n,d]. Used so the
// regularizers accept either a DvfInr or an analytic field.
using DisplacementFn =
    std::function<ad::Tensor(const ad::Tensor& x, const ad::Tensor& t)>;

// rho(p_hat, p) over columns [n,1]: (1/n) * sum_k |DFT_k(p_hat - p)| with
// the unnormalized length-n DFT, differentiable via real/imaginary parts.
ad::Tensor fourier_l1(const ad::Tensor& p_hat, const ad::Tensor& p);

struct FidelityTerms {
  ad::Tensor tp;
  ad::Tensor ff;
};

// Evaluate both heads at every quadrature point of the batch, integrate
// along each ray, and score each rendered projection against the measured
// one. `ar` as in ImageModel::eval_ff.
FidelityTerms fidelity_loss(const ImageModel& model, const DvfInr& bwd,
                            const ArSampler* ar, const RayBatch& batch);

// Samples x_s [n,d] with times t [n,1]; fd_step is the central-difference
// step of the spatial Jacobian.
ad::Tensor diffeo_loss(const DisplacementFn& fwd, const DisplacementFn& bwd,
                       const ad::Tensor& x_s, const ad::Tensor& t,
                       double fd_step = 1e-3);
ad::Tensor diffeo_loss(const DvfInr& fwd, const DvfInr& bwd,
                       const ad::Tensor& x_s, const ad::Tensor& t,
                       double fd_step = 1e-3);

// x_s = x_d + D_bwd(x_d,t) and the fixed image mu_TP(x_d,t) are computed
// without recording; the moving image is mu_TP at x_s + D_fwd(x_s,t) with
// all parameters frozen, so only `fwd` is trained.
ad::Tensor registration_loss(const ImageModel& model,
                             const DisplacementFn& fwd, const DvfInr& bwd,
                             const ad::Tensor& x_d, const ad::Tensor& t);
ad::Tensor registration_loss(const ImageModel& model, const DvfInr& fwd,
                             const DvfInr& bwd, const ad::Tensor& x_d,
                             const ad::Tensor& t);

// mean_i ||D(x_i, t_i)||^2
ad::Tensor l2_dvf_penalty(const DisplacementFn& field, const ad::Tensor& x,
                          const ad::Tensor& t);
ad::Tensor l2_dvf_penalty(const DvfInr& field, const ad::Tensor& x,
                          const ad::Tensor& t);

// lambda_tp*fdl_tp + (1-lambda_tp)*fdl_ff + lambda_dm*dm + lambda_rgt*rgt.
// The baseline variant passes its L2 penalty in the dm slot and a zero
// scalar for rgt.
ad::Tensor total_loss(const ad::Tensor& fdl_tp, const ad::Tensor& fdl_ff,
                      const ad::Tensor& dm, const ad::Tensor& rgt,
                      const LossWeights& w);

}  // namespace dynct
