#include "dynct/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

namespace dynct {

using ad::Tensor;
using nlohmann::json;

std::vector<double> phase_midpoints(int count) {
  if (count < 1)
    throw ContractViolation("phase_midpoints: need at least one phase");
  std::vector<double> t(static_cast<size_t>(count));
  for (int p = 0; p < count; ++p)
    t[static_cast<size_t>(p)] = (p + 0.5) / count;
  return t;
}

PhaseImages reconstruct_phases(EvalModel& model,
                               const std::vector<double>& times,
                               const GridSpec& grid, bool with_tp) {
  if (times.empty())
    throw ContractViolation("reconstruct_phases: need at least one phase");
  for (double tv : times)
    if (!(tv >= 0.0 && tv <= 1.0))
      throw ContractViolation(
          "reconstruct_phases: phase times must lie in [0, 1]");
  if (grid.nx < 1 || grid.ny < 1)
    throw ContractViolation("reconstruct_phases: empty grid");

  ArSampler ar = model.sampler();
  const ArSampler* arp = ar ? &ar : nullptr;

  const size_t n = grid.count();
  std::vector<double> xy(n * 2);
  for (int iy = 0; iy < grid.ny; ++iy)
    for (int ix = 0; ix < grid.nx; ++ix) {
      const size_t i = static_cast<size_t>(iy) * grid.nx + ix;
      xy[2 * i] = (ix + 0.5) / grid.nx;
      xy[2 * i + 1] = (iy + 0.5) / grid.ny;
    }

  ad::NoGradGuard ng;
  PhaseImages out;
  out.times = times;
  const size_t chunk = 4096;
  for (double tv : times) {
    Image ff;
    ff.grid = grid;
    ff.values.resize(n);
    Image tp;
    if (with_tp) {
      tp.grid = grid;
      tp.values.resize(n);
    }
    for (size_t ofs = 0; ofs < n; ofs += chunk) {
      const size_t m = std::min(chunk, n - ofs);
      Tensor x = Tensor::from_values(
          {static_cast<int>(m), 2},
          std::vector<double>(xy.begin() + static_cast<long>(2 * ofs),
                              xy.begin() + static_cast<long>(2 * (ofs + m))));
      Tensor t = Tensor::full({static_cast<int>(m), 1}, tv);
      if (with_tp) {
        ImageModel::DualEval dual =
            model.bundle.image.eval_dual(model.bundle.bwd, arp, x, t);
        std::copy(dual.mu_ff.values().begin(), dual.mu_ff.values().end(),
                  ff.values.begin() + static_cast<long>(ofs));
        std::copy(dual.mu_tp.values().begin(), dual.mu_tp.values().end(),
                  tp.values.begin() + static_cast<long>(ofs));
      } else {
        Tensor mu = model.bundle.image.eval_ff(model.bundle.bwd, arp, x, t);
        std::copy(mu.values().begin(), mu.values().end(),
                  ff.values.begin() + static_cast<long>(ofs));
      }
    }
    out.ff.push_back(std::move(ff));
    if (with_tp) out.tp.push_back(std::move(tp));
  }
  return out;
}

Image fbp_full(const ProjectionSet& data, FbpFilter filter,
               const GridSpec& grid) {
  FbpConfig cfg;
  cfg.filter = filter;
  cfg.grid = grid;
  return fbp(data, cfg);
}

std::vector<Image> fbp_windowed(const ProjectionSet& data, FbpFilter filter,
                                const GridSpec& grid,
                                const std::vector<double>& times, int width) {
  data.geom.validate();
  if (times.empty())
    throw ContractViolation("fbp_windowed: need at least one phase");
  if (width < 1) throw ContractViolation("fbp_windowed: width must be >= 1");
  if (width > data.geom.n_views)
    throw ContractViolation("fbp_windowed: window is wider than the scan");

  std::vector<Image> out;
  out.reserve(times.size());
  for (double tv : times) {
    int center = 0;
    double best = std::numeric_limits<double>::infinity();
    for (int v = 0; v < data.geom.n_views; ++v) {
      const double d = std::fabs(data.geom.timestamps[static_cast<size_t>(v)] - tv);
      if (d < best) {
        best = d;
        center = v;
      }
    }
    const int v0 =
        std::clamp(center - width / 2, 0, data.geom.n_views - width);
    // Reconstruct the window as a scan of its own arc: a short window then
    // receives short-scan view weights instead of partial-sum weights, so
    // the baseline image keeps the full attenuation scale.
    ProjectionSet window;
    window.geom = data.geom;
    window.geom.n_views = width;
    window.geom.angles.assign(
        data.geom.angles.begin() + v0,
        data.geom.angles.begin() + v0 + width);
    window.geom.timestamps.assign(
        data.geom.timestamps.begin() + v0,
        data.geom.timestamps.begin() + v0 + width);
    window.values.assign(
        data.values.begin() + static_cast<long>(v0) * data.geom.n_detectors,
        data.values.begin() +
            static_cast<long>(v0 + width) * data.geom.n_detectors);
    FbpConfig cfg;
    cfg.filter = filter;
    cfg.grid = grid;
    out.push_back(fbp(window, cfg));
  }
  return out;
}

PhaseEvaluation evaluate_phases(const std::vector<Image>& recon,
                                const std::vector<Image>& truth,
                                const std::vector<double>& times,
                                const std::string& method,
                                const std::string& scene) {
  if (recon.empty() || recon.size() != truth.size() ||
      recon.size() != times.size())
    throw ContractViolation(
        "evaluate_phases: reconstruction, truth, and time counts must match");
  PhaseEvaluation ev;
  ev.method = method;
  ev.scene = scene;
  ev.times = times;
  double sum = 0.0;
  for (size_t p = 0; p < recon.size(); ++p) {
    const Image& r = recon[p];
    const Image& g = truth[p];
    if (r.grid.nx != g.grid.nx || r.grid.ny != g.grid.ny)
      throw ContractViolation("evaluate_phases: grids do not match");
    PsnrResult m = psnr(g.values, r.values, g.grid, /*support_only=*/true);
    sum += m.psnr;
    ev.metrics.push_back(m);
  }
  ev.mean_psnr = sum / static_cast<double>(recon.size());
  return ev;
}

namespace {

json encode_db(double v) {
  if (std::isfinite(v)) return v;
  return v > 0 ? "+inf" : "-inf";
}

}  // namespace

std::string report_json(const std::vector<PhaseEvaluation>& evals) {
  json out;
  out["evaluations"] = json::array();
  for (const PhaseEvaluation& ev : evals) {
    json rec{{"method", ev.method},
             {"scene", ev.scene},
             {"mean_psnr_db", encode_db(ev.mean_psnr)},
             {"phases", json::array()}};
    for (size_t p = 0; p < ev.metrics.size(); ++p) {
      const PsnrResult& m = ev.metrics[p];
      rec["phases"].push_back({{"time", ev.times[p]},
                               {"psnr_db", encode_db(m.psnr)},
                               {"mse", m.mse},
                               {"peak", m.peak},
                               {"mask_count", m.mask_count}});
    }
    out["evaluations"].push_back(std::move(rec));
  }
  return out.dump(2) + "\n";
}

}  // namespace dynct
