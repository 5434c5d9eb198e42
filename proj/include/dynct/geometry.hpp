#pragma once

// 2-D computed-tomography scan geometry and line-integral projection.
//
// Conventions (used across the whole library):
//  - The image lives on the unit square [0,1]^2; the reconstructable
//    support is the inscribed circle (center (0.5,0.5), radius 0.5) and
//    attenuation is treated as 0 outside it.
//  - A view at angle theta has ray direction d = (-sin theta, cos theta);
//    the detector axis is e = (cos theta, sin theta). At theta = 0 rays
//    point along +y.
//  - Projections are stored row-major with the detector index u fastest:
//    element (v, u) lives at v * n_detectors + u.
//  - Each view v carries a normalized acquisition timestamp t_v in [0,1];
//    by default t_v = v / n_views (frame start times of one motion cycle).

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "dynct/tensor.hpp"
#include "dynct/util.hpp"

namespace dynct {

enum class ScanMode { Parallel, Fan };

struct GridSpec {
  int nx = 0;
  int ny = 0;
  // Pixel (ix, iy) center: ((ix+0.5)/nx, (iy+0.5)/ny); index iy*nx + ix.
  double pixel_w() const { return 1.0 / nx; }
  double pixel_h() const { return 1.0 / ny; }
  size_t count() const { return static_cast<size_t>(nx) * ny; }
  bool inside_support(double x, double y) const {
    double dx = x - 0.5, dy = y - 0.5;
    return dx * dx + dy * dy <= 0.25;
  }
};

constexpr double kSupportRadius = 0.5;
constexpr std::array<double, 2> kSupportCenter{0.5, 0.5};

struct ScanGeometry {
  ScanMode mode = ScanMode::Parallel;
  int n_detectors = 0;
  int n_views = 0;
  double detector_spacing = 0.0;  // fan: spacing on the physical detector
  double source_radius = 0.0;     // fan only, distance source - isocenter
  double detector_radius = 0.0;   // fan only, distance isocenter - detector
  std::vector<double> angles;     // per view, radians
  std::vector<double> timestamps; // per view, in [0,1]

  size_t ray_count() const {
    return static_cast<size_t>(n_detectors) * n_views;
  }
  void validate() const;

  // Uniform scan over [0, arc) starting at angle0, timestamps v / n_views.
  // spacing <= 0 picks a default that exactly covers the support.
  static ScanGeometry parallel(int n_detectors, int n_views,
                               double spacing = 0.0, double angle0 = 0.0,
                               double arc = 2.0 * kPi);
  static ScanGeometry fan(int n_detectors, int n_views, double source_radius,
                          double detector_radius, double spacing = 0.0,
                          double angle0 = 0.0, double arc = 2.0 * kPi);
};

struct Ray {
  std::array<double, 2> origin{0, 0};
  std::array<double, 2> dir{0, 0};  // unit length
  double t = 0;                     // acquisition time of the parent view
  double s_entry = 0, s_exit = 0;   // support-circle hit interval (== if miss)
  double length() const { return s_exit - s_entry; }
};

// Ray for detector u of view v.
Ray make_ray(const ScanGeometry& g, int v, int u);
// All rays in storage order (u fastest).
std::vector<Ray> make_rays(const ScanGeometry& g);

using FieldFn = std::function<double(double x, double y, double t)>;

// Midpoint-quadrature line integral with n samples over the support chord.
double render_ray(const FieldFn& field, const Ray& ray, int n_samples);

struct ProjectionSet {
  ScanGeometry geom;
  std::vector<double> values;  // ray_count(), u fastest
  // Optional per-ray variance estimate of post-log noise (metadata only).
  std::optional<std::vector<double>> noise_variance;
};

// Default sample count: 1.5x the longer image side.
int default_samples(const GridSpec& grid);

ProjectionSet project(const FieldFn& field, const ScanGeometry& g,
                      int n_samples);

// Linear projector of a pixel image (bilinear interpolation between pixel
// centers, zero beyond the outermost centers) and its exact adjoint. The
// pair satisfies <P x, y> == <x, P^T y> to rounding error.
std::vector<double> project_grid(std::span<const double> image,
                                 const GridSpec& grid, const ScanGeometry& g,
                                 int n_samples);
std::vector<double> backproject(std::span<const double> sino,
                                const GridSpec& grid, const ScanGeometry& g,
                                int n_samples);

struct Image {
  GridSpec grid;
  std::vector<double> values;  // row-major, x fastest
};

// Bilinear interpolation between pixel centers; zero beyond the outermost
// centers.
double sample_bilinear(const GridSpec& grid, std::span<const double> image,
                       double x, double y);

// Differentiable-in-coordinates bilinear sampling of a fixed image:
// coords [n,2] -> values [n,1]. Pixel values are constants; points outside
// the grid read (and propagate) zero.
ad::Tensor sample_image(const Image& img, const ad::Tensor& coords);

// Batched sample layout for differentiable rendering: all quadrature points
// of the picked rays, grouped per ray in storage (v,u) order.
struct RayBatch {
  std::vector<uint32_t> rays;  // ascending storage indices
  int n_rays = 0;
  int n_samples = 0;
  ad::Tensor coords;    // [R*S, 2]
  ad::Tensor times;     // [R*S, 1]
  ad::Tensor ds;        // [R, 1] quadrature step per ray
  ad::Tensor measured;  // [R, 1] measured projection values
};

RayBatch make_ray_batch(const ProjectionSet& p, std::span<const uint32_t> picks,
                        int n_samples);

// Quadrature sum per ray: attenuation samples [R*S,1] -> projections [R,1].
ad::Tensor render_from_samples(const ad::Tensor& point_values,
                               const RayBatch& batch);

}  // namespace dynct
