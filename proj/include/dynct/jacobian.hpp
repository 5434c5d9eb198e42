#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dynct/tensor.hpp"

namespace dynct::ad {

enum class JacobianMethod { ReversePerRow, CentralFd };

// Differentiable map from one [1,D] input point to a [1,M] output row.
using VectorMap = std::function<Tensor(const Tensor& x)>;

struct JacobianResult {
  int rows = 0;  // output components M
  int cols = 0;  // input components D
  std::vector<double> j;  // row-major M x D
  double at(int r, int c) const {
    return j[static_cast<size_t>(r) * cols + c];
  }
};

// Dense Jacobian of f at point x. ReversePerRow runs one backward pass per
// output component on a scratch region of the active tape (restored on
// exit); CentralFd uses symmetric differences with the given step. Non-
// finite outputs raise NumericError naming the offending component.
JacobianResult input_jacobian(const VectorMap& f, std::span<const double> x,
                              JacobianMethod method,
                              double fd_step = 1e-3);

}  // namespace dynct::ad
