#pragma once

// Filtered backprojection and partial-angle reconstruction (PAR).
//
// Filtering follows the classical discrete pipeline: each projection row is
// zero-padded to a power of two, multiplied in the frequency domain by the
// band-limited ramp response (optionally windowed), and transformed back.
// Backprojection is pixel-driven with linear detector interpolation, using
// the full scan's angular step for every view so that reconstruction is
// additive across views: summing the K partial-angle reconstructions of a
// tiling reproduces the full-scan reconstruction exactly.
//
// Fan-beam data is rescaled to isocenter detector coordinates, cosine
// pre-weighted, and backprojected with the standard inverse-square
// magnification weight.

#include <utility>
#include <vector>

#include "dynct/geometry.hpp"
#include "dynct/models.hpp"

namespace dynct {

enum class FbpFilter { RamLak, SheppLogan, Hann };

const char* filter_name(FbpFilter f);
FbpFilter filter_from_name(const std::string& name);

// Frequency response (length m, power of two): band-limited ramp times the
// filter window, indexed by FFT bin.
std::vector<double> filter_response(FbpFilter f, int m);

struct FbpConfig {
  FbpFilter filter = FbpFilter::RamLak;
  GridSpec grid{128, 128};
  // Half-open view window [view_begin, view_end); -1 selects all views.
  int view_begin = 0;
  int view_end = -1;
};

Image fbp(const ProjectionSet& p, const FbpConfig& cfg);

// K partial-angle reconstructions tiling the scan into contiguous view
// windows, each stamped with its central acquisition time.
struct ParStack {
  std::vector<Image> images;
  std::vector<double> times;
  std::vector<std::pair<int, int>> view_ranges;
  int count() const { return static_cast<int>(images.size()); }
};

ParStack make_pars(const ProjectionSet& p, const FbpConfig& cfg, int k);

// Pixel-wise sum of all partial reconstructions (== full-scan FBP).
Image par_sum(const ParStack& pars);

// Motion-compensated analytic reconstruction at static points:
//   mu_AR(x_s) = sum_k PAR_k(x_s + D_fwd(x_s, t_k)).
// PAR pixel values are constants; gradients flow only through the forward
// DVF (and into x_s if it is itself differentiable).
ad::Tensor mc_reconstruct(const ParStack& pars, const DvfInr& fwd,
                          const ad::Tensor& x_s, bool frozen_dvf = false);

// Same reconstruction with the static->dynamic displacement supplied as a
// plain function (x_s [n,2], t [n,1]) -> [n,2], e.g. ground-truth motion.
ad::Tensor mc_reconstruct(
    const ParStack& pars,
    const std::function<ad::Tensor(const ad::Tensor&, const ad::Tensor&)>&
        fwd,
    const ad::Tensor& x_s);

}  // namespace dynct
