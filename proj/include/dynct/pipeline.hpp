#pragma once

// Reconstruction and evaluation workflows shared by the command-line tool
// and the test harnesses: phase-wise sampling of a trained model, FBP
// baselines (time-average and sliding-window), and per-phase PSNR reports.

#include <string>
#include <vector>

#include "dynct/metrics.hpp"
#include "dynct/recon.hpp"
#include "dynct/trainer.hpp"

namespace dynct {

struct PhaseImages {
  std::vector<double> times;
  std::vector<Image> ff;  // fused reconstruction, one image per phase
  std::vector<Image> tp;  // template branch, filled only when requested
};

// Evenly spaced phase midpoints (p + 0.5) / count, matching the simulator's
// ground-truth export schedule.
std::vector<double> phase_midpoints(int count);

// Gradient-free, batched sampling of the trained model on `grid` at each
// phase time. `with_tp` additionally exports the template branch.
PhaseImages reconstruct_phases(EvalModel& model,
                               const std::vector<double>& times,
                               const GridSpec& grid, bool with_tp = false);

// Time-average baseline: one FBP image over every view.
Image fbp_full(const ProjectionSet& data, FbpFilter filter,
               const GridSpec& grid);

// Sliding-window baseline: `width` consecutive views whose window is
// centered (clamped to the scan) on the view timestamp nearest each phase
// time. Each window is reconstructed as a scan of its own arc, so short
// windows keep the full attenuation scale (short-scan weighting) instead
// of the partial-sum weighting used for prior tiles. A window wider than
// the scan is a contract violation.
std::vector<Image> fbp_windowed(const ProjectionSet& data, FbpFilter filter,
                                const GridSpec& grid,
                                const std::vector<double>& times, int width);

struct PhaseEvaluation {
  std::string method;
  std::string scene;
  std::vector<double> times;
  std::vector<PsnrResult> metrics;  // one per phase, support-masked
  double mean_psnr = 0.0;           // dB, arithmetic mean over phases
};

// Support-masked PSNR of each phase image against its ground-truth phase.
// Grids must agree; a single reconstruction (time-average baseline) may be
// evaluated against every phase by passing it repeated.
PhaseEvaluation evaluate_phases(const std::vector<Image>& recon,
                                const std::vector<Image>& truth,
                                const std::vector<double>& times,
                                const std::string& method,
                                const std::string& scene);

// JSON document holding one record per evaluation. Non-finite PSNR values
// are encoded as the strings "+inf" / "-inf".
std::string report_json(const std::vector<PhaseEvaluation>& evals);

}  // namespace dynct
