#pragma once

// Image quality metrics over the reconstructable support.

#include <span>

#include "dynct/geometry.hpp"

namespace dynct {

struct PsnrResult {
  double psnr = 0.0;  // dB; +infinity when the masked error vanishes
  double mse = 0.0;
  double peak = 0.0;  // max of the reference over the evaluated mask
  size_t mask_count = 0;
};

// PSNR = 10 log10(peak^2 / MSE) where both statistics are taken over the
// support mask (inscribed circle) by default, or the full grid otherwise.
// An all-excluded mask is a contract violation; zero MSE yields +infinity.
PsnrResult psnr(std::span<const double> reference,
                std::span<const double> test, const GridSpec& grid,
                bool support_only = true);

}  // namespace dynct
