#include "dynct/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dynct {
namespace {

// Support-circle intersection interval for a unit-direction ray.
void clip_to_support(Ray& r) {
  double ox = r.origin[0] - kSupportCenter[0];
  double oy = r.origin[1] - kSupportCenter[1];
  double b = ox * r.dir[0] + oy * r.dir[1];
  double c = ox * ox + oy * oy - kSupportRadius * kSupportRadius;
  double disc = b * b - c;
  if (disc <= 0) {
    r.s_entry = r.s_exit = 0;
    return;
  }
  double sq = std::sqrt(disc);
  r.s_entry = -b - sq;
  r.s_exit = -b + sq;
}

struct BilinearFootprint {
  int idx[4];
  double w[4];
  int n = 0;
};

// Bilinear weights at point p over pixel centers, rows with weight 0 or
// out-of-grid corners dropped (zero padding beyond outer centers).
BilinearFootprint footprint(const GridSpec& grid, double px, double py) {
  BilinearFootprint f;
  double gx = px * grid.nx - 0.5;
  double gy = py * grid.ny - 0.5;
  int ix = static_cast<int>(std::floor(gx));
  int iy = static_cast<int>(std::floor(gy));
  double fx = gx - ix, fy = gy - iy;
  const double wx[2] = {1.0 - fx, fx};
  const double wy[2] = {1.0 - fy, fy};
  for (int cy = 0; cy < 2; ++cy) {
    int y = iy + cy;
    if (y < 0 || y >= grid.ny) continue;
    for (int cx = 0; cx < 2; ++cx) {
      int x = ix + cx;
      if (x < 0 || x >= grid.nx) continue;
      double w = wx[cx] * wy[cy];
      if (w == 0.0) continue;
      f.idx[f.n] = y * grid.nx + x;
      f.w[f.n] = w;
      ++f.n;
    }
  }
  return f;
}

}  // namespace

void ScanGeometry::validate() const {
  if (n_detectors <= 0 || n_views <= 0)
    throw ContractViolation("geometry: detector and view counts must be > 0");
  if (!(detector_spacing > 0))
    throw ContractViolation("geometry: detector spacing must be > 0");
  if (angles.size() != static_cast<size_t>(n_views) ||
      timestamps.size() != static_cast<size_t>(n_views))
    throw ContractViolation("geometry: angles/timestamps must have one entry per view");
  for (size_t i = 0; i < timestamps.size(); ++i) {
    if (timestamps[i] < 0 || timestamps[i] > 1)
      throw ContractViolation("geometry: timestamps must lie in [0,1]");
    if (i && timestamps[i] < timestamps[i - 1])
      throw ContractViolation("geometry: timestamps must be non-decreasing");
  }
  for (size_t i = 1; i < angles.size(); ++i)
    if (angles[i] <= angles[i - 1])
      throw ContractViolation("geometry: angles must be strictly increasing");
  if (mode == ScanMode::Fan) {
    if (!(source_radius > kSupportRadius))
      throw ContractViolation("geometry: fan source must sit outside the support");
    if (!(detector_radius > 0))
      throw ContractViolation("geometry: fan detector radius must be > 0");
  }
}

ScanGeometry ScanGeometry::parallel(int n_detectors, int n_views,
                                    double spacing, double angle0,
                                    double arc) {
  ScanGeometry g;
  g.mode = ScanMode::Parallel;
  g.n_detectors = n_detectors;
  g.n_views = n_views;
  g.detector_spacing =
      spacing > 0 ? spacing : 2.0 * kSupportRadius / n_detectors;
  for (int v = 0; v < n_views; ++v) {
    g.angles.push_back(angle0 + arc * v / n_views);
    g.timestamps.push_back(static_cast<double>(v) / n_views);
  }
  g.validate();
  return g;
}

ScanGeometry ScanGeometry::fan(int n_detectors, int n_views,
                               double source_radius, double detector_radius,
                               double spacing, double angle0, double arc) {
  ScanGeometry g;
  g.mode = ScanMode::Fan;
  g.n_detectors = n_detectors;
  g.n_views = n_views;
  g.source_radius = source_radius;
  g.detector_radius = detector_radius;
  if (spacing > 0) {
    g.detector_spacing = spacing;
  } else {
    // Cover the support fan with a 2% margin.
    double half_fan = std::asin(kSupportRadius / source_radius);
    g.detector_spacing = 2.04 * (source_radius + detector_radius) *
                         std::tan(half_fan) / n_detectors;
  }
  for (int v = 0; v < n_views; ++v) {
    g.angles.push_back(angle0 + arc * v / n_views);
    g.timestamps.push_back(static_cast<double>(v) / n_views);
  }
  g.validate();
  return g;
}

Ray make_ray(const ScanGeometry& g, int v, int u) {
  if (v < 0 || v >= g.n_views || u < 0 || u >= g.n_detectors)
    throw ContractViolation("make_ray: view/detector index out of range");
  const double theta = g.angles[static_cast<size_t>(v)];
  const double d0x = -std::sin(theta), d0y = std::cos(theta);
  const double ex = std::cos(theta), ey = std::sin(theta);
  const double su = (u - (g.n_detectors - 1) / 2.0) * g.detector_spacing;
  Ray r;
  r.t = g.timestamps[static_cast<size_t>(v)];
  if (g.mode == ScanMode::Parallel) {
    r.origin = {kSupportCenter[0] + su * ex - d0x,
                kSupportCenter[1] + su * ey - d0y};
    r.dir = {d0x, d0y};
  } else {
    const double sx = kSupportCenter[0] - g.source_radius * d0x;
    const double sy = kSupportCenter[1] - g.source_radius * d0y;
    const double px = kSupportCenter[0] + g.detector_radius * d0x + su * ex;
    const double py = kSupportCenter[1] + g.detector_radius * d0y + su * ey;
    double dx = px - sx, dy = py - sy;
    double len = std::hypot(dx, dy);
    r.origin = {sx, sy};
    r.dir = {dx / len, dy / len};
  }
  clip_to_support(r);
  return r;
}

std::vector<Ray> make_rays(const ScanGeometry& g) {
  g.validate();
  std::vector<Ray> rays;
  rays.reserve(g.ray_count());
  for (int v = 0; v < g.n_views; ++v)
    for (int u = 0; u < g.n_detectors; ++u) rays.push_back(make_ray(g, v, u));
  return rays;
}

double render_ray(const FieldFn& field, const Ray& ray, int n_samples) {
  if (n_samples <= 0)
    throw ContractViolation("render_ray: sample count must be > 0");
  const double len = ray.length();
  if (len <= 0) return 0.0;
  const double ds = len / n_samples;
  double acc = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    const double s = ray.s_entry + (i + 0.5) * ds;
    acc += field(ray.origin[0] + s * ray.dir[0],
                 ray.origin[1] + s * ray.dir[1], ray.t);
  }
  return acc * ds;
}

int default_samples(const GridSpec& grid) {
  return static_cast<int>(std::ceil(1.5 * std::max(grid.nx, grid.ny)));
}

ProjectionSet project(const FieldFn& field, const ScanGeometry& g,
                      int n_samples) {
  g.validate();
  ProjectionSet p;
  p.geom = g;
  p.values.reserve(g.ray_count());
  for (int v = 0; v < g.n_views; ++v)
    for (int u = 0; u < g.n_detectors; ++u)
      p.values.push_back(render_ray(field, make_ray(g, v, u), n_samples));
  if (!ad::all_finite(p.values))
    throw NumericError("project: non-finite projection value");
  return p;
}

std::vector<double> project_grid(std::span<const double> image,
                                 const GridSpec& grid, const ScanGeometry& g,
                                 int n_samples) {
  if (image.size() != grid.count())
    throw ContractViolation("project_grid: image size does not match grid");
  std::vector<double> sino(g.ray_count(), 0.0);
  size_t r = 0;
  for (int v = 0; v < g.n_views; ++v) {
    for (int u = 0; u < g.n_detectors; ++u, ++r) {
      Ray ray = make_ray(g, v, u);
      double len = ray.length();
      if (len <= 0) continue;
      double ds = len / n_samples;
      double acc = 0.0;
      for (int i = 0; i < n_samples; ++i) {
        double s = ray.s_entry + (i + 0.5) * ds;
        auto f = footprint(grid, ray.origin[0] + s * ray.dir[0],
                           ray.origin[1] + s * ray.dir[1]);
        for (int k = 0; k < f.n; ++k)
          acc += f.w[k] * image[static_cast<size_t>(f.idx[k])];
      }
      sino[r] = acc * ds;
    }
  }
  return sino;
}

std::vector<double> backproject(std::span<const double> sino,
                                const GridSpec& grid, const ScanGeometry& g,
                                int n_samples) {
  if (sino.size() != g.ray_count())
    throw ContractViolation("backproject: sinogram size does not match geometry");
  std::vector<double> image(grid.count(), 0.0);
  size_t r = 0;
  for (int v = 0; v < g.n_views; ++v) {
    for (int u = 0; u < g.n_detectors; ++u, ++r) {
      Ray ray = make_ray(g, v, u);
      double len = ray.length();
      if (len <= 0) continue;
      double ds = len / n_samples;
      double val = sino[r] * ds;
      if (val == 0.0) continue;
      for (int i = 0; i < n_samples; ++i) {
        double s = ray.s_entry + (i + 0.5) * ds;
        auto f = footprint(grid, ray.origin[0] + s * ray.dir[0],
                           ray.origin[1] + s * ray.dir[1]);
        for (int k = 0; k < f.n; ++k)
          image[static_cast<size_t>(f.idx[k])] += f.w[k] * val;
      }
    }
  }
  return image;
}

double sample_bilinear(const GridSpec& grid, std::span<const double> image,
                       double x, double y) {
  if (image.size() != grid.count())
    throw ContractViolation("sample_bilinear: image size does not match grid");
  auto f = footprint(grid, x, y);
  double acc = 0.0;
  for (int k = 0; k < f.n; ++k)
    acc += f.w[k] * image[static_cast<size_t>(f.idx[k])];
  return acc;
}

ad::Tensor sample_image(const Image& img, const ad::Tensor& coords) {
  if (coords.shape().size() != 2 || coords.dim(1) != 2)
    throw ContractViolation("sample_image: coords must be [n,2]");
  if (img.values.size() != img.grid.count())
    throw ContractViolation("sample_image: image size does not match grid");
  const int n = coords.dim(0);
  std::vector<double> out(static_cast<size_t>(n));
  for (int r = 0; r < n; ++r)
    out[static_cast<size_t>(r)] =
        sample_bilinear(img.grid, img.values, coords.at(static_cast<size_t>(r) * 2),
                        coords.at(static_cast<size_t>(r) * 2 + 1));
  const bool live = coords.requires_grad();
  auto cnode = coords.node();
  auto pix = std::make_shared<std::vector<double>>(img.values);
  GridSpec grid = img.grid;
  return ad::make_op(
      {n, 1}, std::move(out), {coords},
      [=](const std::vector<double>& dy, ad::AdjointStore& adj) {
        if (!live) return;
        auto& dc = adj.at(cnode.get(), static_cast<size_t>(n) * 2);
        const std::vector<double>& v = *pix;
        for (int r = 0; r < n; ++r) {
          const double g = dy[static_cast<size_t>(r)];
          if (g == 0.0) continue;
          const double px = cnode->values[static_cast<size_t>(r) * 2];
          const double py = cnode->values[static_cast<size_t>(r) * 2 + 1];
          const double gx = px * grid.nx - 0.5, gy = py * grid.ny - 0.5;
          const int ix = static_cast<int>(std::floor(gx));
          const int iy = static_cast<int>(std::floor(gy));
          const double fx = gx - ix, fy = gy - iy;
          auto at = [&](int xx, int yy) -> double {
            if (xx < 0 || xx >= grid.nx || yy < 0 || yy >= grid.ny) return 0.0;
            return v[static_cast<size_t>(yy) * grid.nx + xx];
          };
          const double v00 = at(ix, iy), v10 = at(ix + 1, iy);
          const double v01 = at(ix, iy + 1), v11 = at(ix + 1, iy + 1);
          const double ddx =
              ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy) * grid.nx;
          const double ddy =
              ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx) * grid.ny;
          dc[static_cast<size_t>(r) * 2] += g * ddx;
          dc[static_cast<size_t>(r) * 2 + 1] += g * ddy;
        }
      });
}

RayBatch make_ray_batch(const ProjectionSet& p, std::span<const uint32_t> picks,
                        int n_samples) {
  if (picks.empty())
    throw ContractViolation("make_ray_batch: empty ray selection");
  if (n_samples <= 0)
    throw ContractViolation("make_ray_batch: sample count must be > 0");
  RayBatch b;
  b.rays.assign(picks.begin(), picks.end());
  std::sort(b.rays.begin(), b.rays.end());
  b.n_rays = static_cast<int>(b.rays.size());
  b.n_samples = n_samples;
  const size_t total = b.rays.size() * static_cast<size_t>(n_samples);
  std::vector<double> coords(total * 2), times(total), ds(b.rays.size()),
      meas(b.rays.size());
  for (size_t i = 0; i < b.rays.size(); ++i) {
    uint32_t idx = b.rays[i];
    if (idx >= p.geom.ray_count())
      throw ContractViolation("make_ray_batch: ray index out of range");
    int v = static_cast<int>(idx) / p.geom.n_detectors;
    int u = static_cast<int>(idx) % p.geom.n_detectors;
    Ray ray = make_ray(p.geom, v, u);
    double len = ray.length();
    double step = len > 0 ? len / n_samples : 0.0;
    ds[i] = step;
    meas[i] = p.values[idx];
    for (int k = 0; k < n_samples; ++k) {
      double s = ray.s_entry + (k + 0.5) * step;
      size_t row = i * static_cast<size_t>(n_samples) + k;
      coords[row * 2] = ray.origin[0] + s * ray.dir[0];
      coords[row * 2 + 1] = ray.origin[1] + s * ray.dir[1];
      times[row] = ray.t;
    }
  }
  b.coords = ad::Tensor::from_values({static_cast<int>(total), 2},
                                     std::move(coords));
  b.times =
      ad::Tensor::from_values({static_cast<int>(total), 1}, std::move(times));
  b.ds = ad::Tensor::from_values({b.n_rays, 1}, std::move(ds));
  b.measured =
      ad::Tensor::from_values({b.n_rays, 1}, std::move(meas));
  return b;
}

ad::Tensor render_from_samples(const ad::Tensor& point_values,
                               const RayBatch& batch) {
  if (point_values.shape() !=
      std::vector<int>{batch.n_rays * batch.n_samples, 1})
    throw ContractViolation(
        "render_from_samples: point values do not match batch layout");
  return ad::mul(ad::segment_sum(point_values, batch.n_rays, batch.n_samples),
                 batch.ds);
}

}  // namespace dynct
