#pragma once

// Analytic dynamic phantoms: geometric primitives carried by smooth,
// invertible motion models, evaluated in closed form at any (x, y, t).
//
// Every part owns a backward map B_t taking an observed point to the
// part's rest frame: an inverted time-varying affine (translation,
// rotation, anisotropic scaling about the part center) plus an optional
// sinusoidal displacement field. The part contributes value(t) wherever
// B_t(x) falls inside its rest-frame primitive, so by construction
// eval(x, t) == eval(B_t(x), 0) for parts without contrast change.
//
// All motions share the time profile g(t) = sin(2 pi f t + phase) -
// sin(phase), which vanishes at t = 0: the phantom at t = 0 is the rest
// configuration, and with f = 1 the motion completes one cycle over the
// scan.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dynct/geometry.hpp"

namespace dynct {

struct MotionParams {
  std::array<double, 2> translate{0, 0};  // displacement amplitude
  double rotate = 0;                      // radians amplitude
  std::array<double, 2> scale{0, 0};      // relative amplitude per axis
  double frequency = 1.0;                 // cycles per unit time
  double phase = 0.0;
  // Rotation/scaling act about this point; defaults to the part center.
  std::optional<std::array<double, 2>> anchor;

  double profile(double t) const;  // g(t)
  bool is_static() const;
  void validate() const;
};

// Backward sinusoidal displacement d(x, t) = amplitude * sin(2 pi k.x +
// spatial_phase) * g(t), added to the affine-inverted point.
struct NonrigidParams {
  std::array<double, 2> amplitude{0, 0};
  std::array<double, 2> wavevec{1, 0};  // cycles per unit length
  double spatial_phase = 0.0;
  double frequency = 1.0;
  double phase = 0.0;
};

struct Primitive {
  enum class Kind { Disk, Ellipse, Rect };
  Kind kind = Kind::Disk;
  std::array<double, 2> center{0.5, 0.5};
  double a = 0.2, b = 0.2;  // semi-axes / half extents in the rest frame
  double angle = 0.0;
  double value = 1.0;      // attenuation at t = 0
  double value_end = 1.0;  // attenuation at t = 1 (linear ramp)
  std::array<double, 2> window{0.0, 1.0};  // active time interval

  bool contains(double x, double y) const;  // rest frame
};

struct PhantomPart {
  Primitive prim;
  MotionParams motion;
  std::optional<NonrigidParams> nonrigid;

  // Observed point -> rest frame at time t.
  std::array<double, 2> backward_map(double x, double y, double t) const;
};

struct DynamicPhantom {
  std::vector<PhantomPart> parts;

  double eval(double x, double y, double t) const;
  FieldFn field() const;

  // Whole-phantom backward map; requires every part to share one motion
  // model (true for the topology-preserving presets).
  bool shared_motion() const;
  std::array<double, 2> backward_map(double x, double y, double t) const;

  void validate() const;

  static DynamicPhantom preset(const std::string& name);
  static std::vector<std::string> preset_names();
  // JSON round-trip of the full phantom description.
  static DynamicPhantom from_json_text(const std::string& text);
  std::string to_json_text() const;
};

// Accepts a preset name or a path to a phantom JSON file.
DynamicPhantom load_phantom_spec(const std::string& name_or_path);

// Pixel values are area averages over an antialias x antialias subsample
// of each pixel (1 = point sampling at pixel centers).
std::vector<double> rasterize(const DynamicPhantom& ph, const GridSpec& grid,
                              double t, int antialias = 4);

// Post-log Poisson measurement noise: counts ~ Poisson(photons * exp(-p)),
// floored at 0.5 counts, returned as -log(counts / photons). Also returns
// the first-order variance estimate exp(p) / photons per ray.
struct NoisyProjection {
  std::vector<double> values;
  std::vector<double> variance;
};
NoisyProjection apply_poisson_noise(std::span<const double> clean,
                                    double photons, Rng& rng);

struct SimOptions {
  int n_samples = 0;  // 0: default_samples(grid)
  bool noise = false;
  double photons = 1e5;
  int n_phases = 10;
  uint64_t seed = 0;
};

struct SimOutput {
  ProjectionSet projections;
  GridSpec grid;
  std::vector<double> phase_times;          // midpoints (p + 0.5) / P
  std::vector<std::vector<double>> truth;   // per phase, rasterized phantom
};

SimOutput simulate_scan(const DynamicPhantom& ph, const ScanGeometry& g,
                        const GridSpec& grid, const SimOptions& opt);

}  // namespace dynct
