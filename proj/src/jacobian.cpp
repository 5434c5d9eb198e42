#include "dynct/jacobian.hpp"

#include <cmath>
#include <string>

namespace dynct::ad {
namespace {

void check_finite(const Tensor& y, const char* what) {
  for (size_t i = 0; i < y.size(); ++i)
    if (!std::isfinite(y.at(i)))
      throw NumericError(std::string("input_jacobian: non-finite ") + what +
                         " at component " + std::to_string(i));
}

JacobianResult reverse_per_row(const VectorMap& f, std::span<const double> x) {
  Tape& tape = Tape::active();
  size_t mark = tape.size();
  Tensor xin = Tensor::from_values({1, static_cast<int>(x.size())},
                                   {x.begin(), x.end()}, true);
  Tensor y = f(xin);
  check_finite(y, "output");
  if (y.shape().size() != 2 || y.dim(0) != 1)
    throw ContractViolation("input_jacobian: map must return a [1,M] tensor");
  JacobianResult res;
  res.rows = y.dim(1);
  res.cols = static_cast<int>(x.size());
  res.j.resize(static_cast<size_t>(res.rows) * res.cols);
  for (int r = 0; r < res.rows; ++r) {
    xin.zero_grad();
    Tensor yr = res.rows == 1 ? y : slice_cols(y, r, r + 1);
    tape.backward(yr);
    auto g = xin.grad();
    for (int c = 0; c < res.cols; ++c)
      res.j[static_cast<size_t>(r) * res.cols + c] = g[static_cast<size_t>(c)];
  }
  tape.truncate(mark);
  return res;
}

JacobianResult central_fd(const VectorMap& f, std::span<const double> x,
                          double h) {
  if (!(h > 0)) throw ContractViolation("input_jacobian: fd step must be > 0");
  Tape& tape = Tape::active();
  size_t mark = tape.size();
  NoGradGuard ng;
  int d = static_cast<int>(x.size());
  JacobianResult res;
  res.cols = d;
  std::vector<double> p(x.begin(), x.end());
  for (int c = 0; c < d; ++c) {
    p[static_cast<size_t>(c)] = x[static_cast<size_t>(c)] + h;
    Tensor yp = f(Tensor::from_values({1, d}, p, false));
    p[static_cast<size_t>(c)] = x[static_cast<size_t>(c)] - h;
    Tensor ym = f(Tensor::from_values({1, d}, p, false));
    p[static_cast<size_t>(c)] = x[static_cast<size_t>(c)];
    check_finite(yp, "probe");
    check_finite(ym, "probe");
    if (res.rows == 0) {
      res.rows = static_cast<int>(yp.size());
      res.j.resize(static_cast<size_t>(res.rows) * d);
    }
    for (int r = 0; r < res.rows; ++r)
      res.j[static_cast<size_t>(r) * d + c] =
          (yp.at(static_cast<size_t>(r)) - ym.at(static_cast<size_t>(r))) /
          (2.0 * h);
  }
  tape.truncate(mark);
  return res;
}

}  // namespace

JacobianResult input_jacobian(const VectorMap& f, std::span<const double> x,
                              JacobianMethod method, double fd_step) {
  if (x.empty()) throw ContractViolation("input_jacobian: empty input point");
  switch (method) {
    case JacobianMethod::ReversePerRow:
      return reverse_per_row(f, x);
    case JacobianMethod::CentralFd:
      return central_fd(f, x, fd_step);
  }
  throw ContractViolation("input_jacobian: unknown method");
}

}  // namespace dynct::ad
