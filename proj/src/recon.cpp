#include "dynct/recon.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dynct {
namespace {

// Iterative radix-2 FFT (unnormalized); inverse divides by n.
void fft(std::vector<double>& re, std::vector<double>& im, bool inverse) {
  const size_t n = re.size();
  if (n == 0 || (n & (n - 1)))
    throw ContractViolation("fft: length must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * kPi / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (size_t k = 0; k < len / 2; ++k) {
        const size_t a = i + k, b = i + k + len / 2;
        const double tr = re[b] * cr - im[b] * ci;
        const double ti = re[b] * ci + im[b] * cr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
  if (inverse)
    for (size_t i = 0; i < n; ++i) {
      re[i] /= static_cast<double>(n);
      im[i] /= static_cast<double>(n);
    }
}

int padded_length(int n) {
  int m = 64;
  while (m < 2 * n) m <<= 1;
  return m;
}

double lerp_row(const std::vector<double>& row, double pos) {
  if (pos <= -1.0 || pos >= static_cast<double>(row.size())) return 0.0;
  const int i = static_cast<int>(std::floor(pos));
  const double f = pos - i;
  const double lo = i >= 0 ? row[static_cast<size_t>(i)] : 0.0;
  const double hi = i + 1 < static_cast<int>(row.size())
                        ? row[static_cast<size_t>(i) + 1]
                        : 0.0;
  return lo * (1.0 - f) + hi * f;
}

struct ViewFrame {
  double d0x, d0y;  // central ray direction
  double ex, ey;    // detector axis
};

ViewFrame frame_of(double theta) {
  return {-std::sin(theta), std::cos(theta), std::cos(theta),
          std::sin(theta)};
}

}  // namespace

const char* filter_name(FbpFilter f) {
  switch (f) {
    case FbpFilter::RamLak: return "ram-lak";
    case FbpFilter::SheppLogan: return "shepp-logan";
    case FbpFilter::Hann: return "hann";
  }
  return "ram-lak";
}

FbpFilter filter_from_name(const std::string& name) {
  if (name == "ram-lak" || name == "ramlak") return FbpFilter::RamLak;
  if (name == "shepp-logan") return FbpFilter::SheppLogan;
  if (name == "hann") return FbpFilter::Hann;
  throw ConfigError("unknown filter '" + name +
                    "' (expected ram-lak, shepp-logan, or hann)");
}

std::vector<double> filter_response(FbpFilter f, int m) {
  if (m < 2 || (m & (m - 1)))
    throw ContractViolation("filter_response: length must be a power of two");
  // Band-limited ramp: transform of the unit-spacing spatial kernel
  // h(0) = 1/4, h(n odd) = -1/(pi n)^2, h(n even) = 0, laid out with
  // wrap-around symmetry so its transform is real.
  std::vector<double> re(static_cast<size_t>(m), 0.0),
      im(static_cast<size_t>(m), 0.0);
  re[0] = 0.25;
  for (int n = 1; n <= m / 2; n += 2) {
    const double v = -1.0 / (kPi * n * kPi * n);
    re[static_cast<size_t>(n)] = v;
    re[static_cast<size_t>(m - n)] = v;
  }
  fft(re, im, false);
  for (size_t k = 0; k < re.size(); ++k) {
    const int kk = static_cast<int>(k);
    const double freq =
        static_cast<double>(kk <= m / 2 ? kk : kk - m) / m;  // cycles/sample
    double window = 1.0;
    switch (f) {
      case FbpFilter::RamLak:
        break;
      case FbpFilter::SheppLogan:
        if (freq != 0.0) {
          const double a = kPi * freq;  // sinc reaching zero at 2x Nyquist
          window = std::sin(a) / a;
        }
        break;
      case FbpFilter::Hann:
        window = 0.5 * (1.0 + std::cos(2.0 * kPi * freq));
        break;
    }
    re[k] = std::max(re[k], 0.0) * window;
  }
  return re;
}

Image fbp(const ProjectionSet& p, const FbpConfig& cfg) {
  const ScanGeometry& g = p.geom;
  g.validate();
  if (p.values.size() != g.ray_count())
    throw ContractViolation("fbp: sinogram size does not match geometry");
  if (cfg.grid.nx <= 0 || cfg.grid.ny <= 0)
    throw ContractViolation("fbp: empty reconstruction grid");
  const int nv = g.n_views, nu = g.n_detectors;
  const int begin = cfg.view_begin;
  const int end = cfg.view_end < 0 ? nv : cfg.view_end;
  if (begin < 0 || end > nv || begin >= end)
    throw ContractViolation("fbp: view window [" + std::to_string(begin) +
                            "," + std::to_string(end) + ") invalid for " +
                            std::to_string(nv) + " views");

  const bool fan = g.mode == ScanMode::Fan;
  // isocenter-rescaled detector spacing and coordinates for fan data
  const double mag = fan ? g.source_radius /
                               (g.source_radius + g.detector_radius)
                         : 1.0;
  const double du = g.detector_spacing * mag;

  // full-scan angular step and redundancy: a (near) 2pi orbit measures
  // every line twice
  const double dbeta =
      nv > 1 ? g.angles[1] - g.angles[0] : 2.0 * kPi;
  const double redundancy = dbeta * nv >= 1.5 * kPi ? 0.5 : 1.0;

  const int m = padded_length(nu);
  const std::vector<double> H = filter_response(cfg.filter, m);

  // filter the selected rows
  std::vector<std::vector<double>> rows(static_cast<size_t>(end - begin));
  for (int v = begin; v < end; ++v) {
    std::vector<double> re(static_cast<size_t>(m), 0.0),
        im(static_cast<size_t>(m), 0.0);
    for (int u = 0; u < nu; ++u) {
      double val = p.values[static_cast<size_t>(v) * nu + u];
      if (fan) {
        const double s = (u - (nu - 1) / 2.0) * du;
        val *= g.source_radius /
               std::hypot(g.source_radius, s);
      }
      re[static_cast<size_t>(u)] = val;
    }
    fft(re, im, false);
    for (size_t k = 0; k < re.size(); ++k) {
      re[k] *= H[k];
      im[k] *= H[k];
    }
    fft(re, im, true);
    rows[static_cast<size_t>(v - begin)].assign(re.begin(),
                                                re.begin() + nu);
  }

  // pixel-driven backprojection
  Image out;
  out.grid = cfg.grid;
  out.values.assign(cfg.grid.count(), 0.0);
  const double scale = redundancy * dbeta / du;
  for (int iy = 0; iy < cfg.grid.ny; ++iy) {
    const double y = (iy + 0.5) / cfg.grid.ny;
    for (int ix = 0; ix < cfg.grid.nx; ++ix) {
      const double x = (ix + 0.5) / cfg.grid.nx;
      if (!cfg.grid.inside_support(x, y)) continue;
      const double rx = x - kSupportCenter[0], ry = y - kSupportCenter[1];
      double acc = 0.0;
      for (int v = begin; v < end; ++v) {
        const ViewFrame fr = frame_of(g.angles[static_cast<size_t>(v)]);
        const std::vector<double>& row = rows[static_cast<size_t>(v - begin)];
        if (!fan) {
          const double s = rx * fr.ex + ry * fr.ey;
          acc += lerp_row(row, s / du + (nu - 1) / 2.0);
        } else {
          const double u_mag =
              (g.source_radius + rx * fr.d0x + ry * fr.d0y) / g.source_radius;
          const double s = (rx * fr.ex + ry * fr.ey) / u_mag;
          acc += lerp_row(row, s / du + (nu - 1) / 2.0) / (u_mag * u_mag);
        }
      }
      out.values[static_cast<size_t>(iy) * cfg.grid.nx + ix] = acc * scale;
    }
  }
  if (!ad::all_finite(out.values))
    throw NumericError("fbp: non-finite reconstruction value");
  return out;
}

ParStack make_pars(const ProjectionSet& p, const FbpConfig& cfg, int k) {
  const int nv = p.geom.n_views;
  if (k < 1 || k > nv)
    throw ContractViolation("make_pars: window count must be in [1, n_views]");
  ParStack stack;
  for (int i = 0; i < k; ++i) {
    const int begin = static_cast<int>(static_cast<long long>(i) * nv / k);
    const int end = static_cast<int>(static_cast<long long>(i + 1) * nv / k);
    FbpConfig wcfg = cfg;
    wcfg.view_begin = begin;
    wcfg.view_end = end;
    stack.images.push_back(fbp(p, wcfg));
    stack.view_ranges.emplace_back(begin, end);
    stack.times.push_back(
        0.5 * (p.geom.timestamps[static_cast<size_t>(begin)] +
               p.geom.timestamps[static_cast<size_t>(end) - 1]));
  }
  return stack;
}

Image par_sum(const ParStack& pars) {
  if (pars.images.empty()) throw ContractViolation("par_sum: empty stack");
  Image out = pars.images[0];
  for (int k = 1; k < pars.count(); ++k)
    for (size_t i = 0; i < out.values.size(); ++i)
      out.values[i] += pars.images[static_cast<size_t>(k)].values[i];
  return out;
}

ad::Tensor mc_reconstruct(
    const ParStack& pars,
    const std::function<ad::Tensor(const ad::Tensor&, const ad::Tensor&)>&
        fwd,
    const ad::Tensor& x_s) {
  if (pars.images.empty())
    throw ContractViolation("mc_reconstruct: empty PAR stack");
  if (x_s.shape().size() != 2 || x_s.dim(1) != 2)
    throw ContractViolation("mc_reconstruct: points must be [n,2]");
  const int n = x_s.dim(0);
  ad::Tensor acc;
  for (int k = 0; k < pars.count(); ++k) {
    ad::Tensor tk = ad::Tensor::full({n, 1}, pars.times[static_cast<size_t>(k)]);
    ad::Tensor moved = ad::add(x_s, fwd(x_s, tk));
    ad::Tensor sampled = sample_image(pars.images[static_cast<size_t>(k)], moved);
    acc = k == 0 ? sampled : ad::add(acc, sampled);
  }
  return acc;
}

ad::Tensor mc_reconstruct(const ParStack& pars, const DvfInr& fwd,
                          const ad::Tensor& x_s, bool frozen_dvf) {
  if (fwd.direction() != DvfDirection::StaticToDynamic)
    throw ContractViolation(
        "mc_reconstruct: field must map static -> dynamic");
  return mc_reconstruct(
      pars,
      [&fwd, frozen_dvf](const ad::Tensor& x, const ad::Tensor& t) {
        return fwd.displacement(x, t, frozen_dvf);
      },
      x_s);
}

}  // namespace dynct
