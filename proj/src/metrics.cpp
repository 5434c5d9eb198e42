#include "dynct/metrics.hpp"

#include <cmath>
#include <limits>

namespace dynct {

PsnrResult psnr(std::span<const double> reference,
                std::span<const double> test, const GridSpec& grid,
                bool support_only) {
  if (reference.size() != grid.count() || test.size() != grid.count())
    throw ContractViolation("psnr: image sizes do not match grid");
  PsnrResult r;
  double se = 0.0;
  for (int iy = 0; iy < grid.ny; ++iy) {
    for (int ix = 0; ix < grid.nx; ++ix) {
      if (support_only &&
          !grid.inside_support((ix + 0.5) / grid.nx, (iy + 0.5) / grid.ny))
        continue;
      const size_t i = static_cast<size_t>(iy) * grid.nx + ix;
      const double d = reference[i] - test[i];
      se += d * d;
      r.peak = std::max(r.peak, reference[i]);
      ++r.mask_count;
    }
  }
  if (r.mask_count == 0)
    throw ContractViolation("psnr: evaluation mask is empty");
  r.mse = se / static_cast<double>(r.mask_count);
  if (r.mse == 0.0 || r.peak == 0.0) {
    r.psnr = r.mse == 0.0 ? std::numeric_limits<double>::infinity()
                          : -std::numeric_limits<double>::infinity();
    return r;
  }
  r.psnr = 10.0 * std::log10(r.peak * r.peak / r.mse);
  return r;
}

}  // namespace dynct
