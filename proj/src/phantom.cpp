#include "dynct/phantom.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace dynct {

using nlohmann::json;

double MotionParams::profile(double t) const {
  return std::sin(2.0 * kPi * frequency * t + phase) - std::sin(phase);
}

bool MotionParams::is_static() const {
  return translate[0] == 0 && translate[1] == 0 && rotate == 0 &&
         scale[0] == 0 && scale[1] == 0;
}

void MotionParams::validate() const {
  // |g| <= 2, so the scale factors 1 + scale_a * g stay positive when
  // |scale_a| < 0.5.
  if (std::fabs(scale[0]) >= 0.5 || std::fabs(scale[1]) >= 0.5)
    throw ContractViolation("motion: scale amplitude must stay below 0.5");
  if (frequency < 0)
    throw ContractViolation("motion: frequency must be >= 0");
}

bool Primitive::contains(double x, double y) const {
  const double dx = x - center[0], dy = y - center[1];
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double px = dx * ca + dy * sa;
  const double py = -dx * sa + dy * ca;
  switch (kind) {
    case Kind::Disk:
    case Kind::Ellipse: {
      const double qa = px / a, qb = py / b;
      return qa * qa + qb * qb <= 1.0;
    }
    case Kind::Rect:
      return std::fabs(px) <= a && std::fabs(py) <= b;
  }
  return false;
}

std::array<double, 2> PhantomPart::backward_map(double x, double y,
                                                double t) const {
  const double g = motion.profile(t);
  const std::array<double, 2> c = motion.anchor.value_or(prim.center);
  // invert: y = c + translate*g + R(rotate*g) S(t) (p - c)
  double rx = x - c[0] - motion.translate[0] * g;
  double ry = y - c[1] - motion.translate[1] * g;
  const double ang = -motion.rotate * g;
  const double ca = std::cos(ang), sa = std::sin(ang);
  const double ux = rx * ca - ry * sa;
  const double uy = rx * sa + ry * ca;
  const double sx = 1.0 + motion.scale[0] * g;
  const double sy = 1.0 + motion.scale[1] * g;
  double px = c[0] + ux / sx;
  double py = c[1] + uy / sy;
  if (nonrigid) {
    const NonrigidParams& nr = *nonrigid;
    const double gn = std::sin(2.0 * kPi * nr.frequency * t + nr.phase) -
                      std::sin(nr.phase);
    const double s = std::sin(
        2.0 * kPi * (nr.wavevec[0] * x + nr.wavevec[1] * y) + nr.spatial_phase);
    px += nr.amplitude[0] * s * gn;
    py += nr.amplitude[1] * s * gn;
  }
  return {px, py};
}

double DynamicPhantom::eval(double x, double y, double t) const {
  double acc = 0.0;
  for (const PhantomPart& part : parts) {
    const Primitive& pr = part.prim;
    if (t < pr.window[0] || t > pr.window[1]) continue;
    auto rest = part.backward_map(x, y, t);
    if (!pr.contains(rest[0], rest[1])) continue;
    acc += pr.value + (pr.value_end - pr.value) * t;
  }
  return acc;
}

FieldFn DynamicPhantom::field() const {
  return [ph = *this](double x, double y, double t) {
    return ph.eval(x, y, t);
  };
}

bool DynamicPhantom::shared_motion() const {
  if (parts.empty()) return false;
  for (const PhantomPart& p : parts) {
    if (p.nonrigid.has_value() != parts[0].nonrigid.has_value()) return false;
    const MotionParams &a = p.motion, &b = parts[0].motion;
    if (a.translate != b.translate || a.rotate != b.rotate ||
        a.scale != b.scale || a.frequency != b.frequency || a.phase != b.phase)
      return false;
    // rotation/scale need a common anchor point for one global map
    if ((a.rotate != 0 || a.scale[0] != 0 || a.scale[1] != 0) &&
        a.anchor.value_or(p.prim.center) !=
            b.anchor.value_or(parts[0].prim.center))
      return false;
  }
  return true;
}

std::array<double, 2> DynamicPhantom::backward_map(double x, double y,
                                                   double t) const {
  if (!shared_motion())
    throw ContractViolation(
        "backward_map: parts do not share a single motion model");
  return parts[0].backward_map(x, y, t);
}

void DynamicPhantom::validate() const {
  if (parts.empty()) throw ContractViolation("phantom: no parts");
  for (const PhantomPart& p : parts) {
    p.motion.validate();
    if (!(p.prim.a > 0) || !(p.prim.b > 0))
      throw ContractViolation("phantom: primitive extents must be > 0");
    if (p.prim.window[0] > p.prim.window[1])
      throw ContractViolation("phantom: empty activity window");
  }
}

namespace {

const char* kind_name(Primitive::Kind k) {
  switch (k) {
    case Primitive::Kind::Disk: return "disk";
    case Primitive::Kind::Ellipse: return "ellipse";
    case Primitive::Kind::Rect: return "rect";
  }
  return "disk";
}

Primitive::Kind kind_from(const std::string& s) {
  if (s == "disk") return Primitive::Kind::Disk;
  if (s == "ellipse") return Primitive::Kind::Ellipse;
  if (s == "rect") return Primitive::Kind::Rect;
  throw ConfigError("phantom: unknown primitive kind '" + s + "'");
}

json motion_to_json(const MotionParams& m) {
  json j{{"translate", m.translate}, {"rotate", m.rotate},
         {"scale", m.scale},         {"frequency", m.frequency},
         {"phase", m.phase}};
  if (m.anchor) j["anchor"] = *m.anchor;
  return j;
}

MotionParams motion_from_json(const json& j) {
  MotionParams m;
  m.translate = j.value("translate", m.translate);
  m.rotate = j.value("rotate", m.rotate);
  m.scale = j.value("scale", m.scale);
  m.frequency = j.value("frequency", m.frequency);
  m.phase = j.value("phase", m.phase);
  if (j.contains("anchor"))
    m.anchor = j.at("anchor").get<std::array<double, 2>>();
  return m;
}

}  // namespace

std::string DynamicPhantom::to_json_text() const {
  json parts_j = json::array();
  for (const PhantomPart& p : parts) {
    json pj{{"kind", kind_name(p.prim.kind)},
            {"center", p.prim.center},
            {"a", p.prim.a},
            {"b", p.prim.b},
            {"angle", p.prim.angle},
            {"value", p.prim.value},
            {"value_end", p.prim.value_end},
            {"window", p.prim.window},
            {"motion", motion_to_json(p.motion)}};
    if (p.nonrigid) {
      const NonrigidParams& nr = *p.nonrigid;
      pj["nonrigid"] = {{"amplitude", nr.amplitude},
                        {"wavevec", nr.wavevec},
                        {"spatial_phase", nr.spatial_phase},
                        {"frequency", nr.frequency},
                        {"phase", nr.phase}};
    }
    parts_j.push_back(pj);
  }
  return json{{"parts", parts_j}}.dump(2);
}

DynamicPhantom DynamicPhantom::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("phantom: invalid JSON: ") + e.what());
  }
  DynamicPhantom ph;
  try {
    for (const json& pj : j.at("parts")) {
      PhantomPart p;
      p.prim.kind = kind_from(pj.at("kind").get<std::string>());
      p.prim.center = pj.value("center", p.prim.center);
      p.prim.a = pj.value("a", p.prim.a);
      p.prim.b = pj.value("b", p.prim.b);
      p.prim.angle = pj.value("angle", p.prim.angle);
      p.prim.value = pj.value("value", p.prim.value);
      p.prim.value_end = pj.value("value_end", p.prim.value);
      p.prim.window = pj.value("window", p.prim.window);
      if (pj.contains("motion")) p.motion = motion_from_json(pj.at("motion"));
      if (pj.contains("nonrigid")) {
        const json& nj = pj.at("nonrigid");
        NonrigidParams nr;
        nr.amplitude = nj.value("amplitude", nr.amplitude);
        nr.wavevec = nj.value("wavevec", nr.wavevec);
        nr.spatial_phase = nj.value("spatial_phase", nr.spatial_phase);
        nr.frequency = nj.value("frequency", nr.frequency);
        nr.phase = nj.value("phase", nr.phase);
        p.nonrigid = nr;
      }
      ph.parts.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("phantom: bad description: ") + e.what());
  }
  try {
    ph.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  return ph;
}

std::vector<std::string> DynamicPhantom::preset_names() {
  return {"static-disk", "translating-disk", "deforming-ellipse",
          "freeform-mix"};
}

DynamicPhantom DynamicPhantom::preset(const std::string& name) {
  DynamicPhantom ph;
  auto part = [](Primitive::Kind k, std::array<double, 2> c, double a,
                 double b, double value) {
    PhantomPart p;
    p.prim.kind = k;
    p.prim.center = c;
    p.prim.a = a;
    p.prim.b = b;
    p.prim.value = value;
    p.prim.value_end = value;
    return p;
  };
  if (name == "static-disk") {
    ph.parts.push_back(part(Primitive::Kind::Disk, {0.5, 0.5}, 0.35, 0.35,
                            1.0));
  } else if (name == "translating-disk") {
    PhantomPart p = part(Primitive::Kind::Disk, {0.5, 0.5}, 0.15, 0.15, 1.0);
    p.motion.translate = {0.025, 0.012};
    ph.parts.push_back(p);
  } else if (name == "deforming-ellipse") {
    // One pulsating body with an inner chamber and an off-center marker,
    // all carried by the same beat about the image center. The beat is
    // strong enough that a half-scan window blurs visibly, which is what
    // separates motion-compensated reconstructions from time-windowed ones.
    MotionParams beat;
    beat.scale = {0.13, -0.10};
    beat.rotate = 0.12;
    beat.anchor = {{0.5, 0.5}};
    PhantomPart body =
        part(Primitive::Kind::Ellipse, {0.5, 0.5}, 0.3, 0.22, 0.8);
    body.prim.angle = 0.3;
    body.motion = beat;
    PhantomPart core =
        part(Primitive::Kind::Ellipse, {0.48, 0.52}, 0.14, 0.09, 0.5);
    core.prim.angle = 0.3;
    core.motion = beat;
    PhantomPart marker =
        part(Primitive::Kind::Disk, {0.63, 0.46}, 0.035, 0.035, 0.9);
    marker.motion = beat;
    ph.parts.push_back(body);
    ph.parts.push_back(core);
    ph.parts.push_back(marker);
  } else if (name == "freeform-mix") {
    MotionParams beat;
    beat.scale = {0.05, -0.04};
    PhantomPart body =
        part(Primitive::Kind::Ellipse, {0.5, 0.5}, 0.3, 0.22, 0.7);
    body.motion = beat;
    PhantomPart wanderer =
        part(Primitive::Kind::Disk, {0.35, 0.6}, 0.05, 0.05, 0.5);
    wanderer.motion.translate = {0.03, -0.02};
    wanderer.motion.phase = 0.7;
    PhantomPart popup =
        part(Primitive::Kind::Disk, {0.62, 0.42}, 0.04, 0.04, 0.6);
    popup.prim.window = {0.3, 0.8};
    popup.prim.value_end = 0.2;
    ph.parts.push_back(body);
    ph.parts.push_back(wanderer);
    ph.parts.push_back(popup);
  } else {
    throw ConfigError("phantom: unknown preset '" + name + "'");
  }
  ph.validate();
  return ph;
}

DynamicPhantom load_phantom_spec(const std::string& name_or_path) {
  for (const std::string& n : DynamicPhantom::preset_names())
    if (n == name_or_path) return DynamicPhantom::preset(n);
  std::ifstream in(name_or_path);
  if (!in)
    throw ConfigError("phantom: '" + name_or_path +
                      "' is neither a preset nor a readable file");
  std::stringstream ss;
  ss << in.rdbuf();
  return DynamicPhantom::from_json_text(ss.str());
}

std::vector<double> rasterize(const DynamicPhantom& ph, const GridSpec& grid,
                              double t, int antialias) {
  if (antialias < 1)
    throw ContractViolation("rasterize: antialias factor must be >= 1");
  std::vector<double> img(grid.count());
  const double inv = 1.0 / antialias;
  for (int iy = 0; iy < grid.ny; ++iy) {
    for (int ix = 0; ix < grid.nx; ++ix) {
      double acc = 0.0;
      for (int sy = 0; sy < antialias; ++sy)
        for (int sx = 0; sx < antialias; ++sx)
          acc += ph.eval((ix + (sx + 0.5) * inv) / grid.nx,
                         (iy + (sy + 0.5) * inv) / grid.ny, t);
      img[static_cast<size_t>(iy) * grid.nx + ix] =
          acc * inv * inv;
    }
  }
  return img;
}

NoisyProjection apply_poisson_noise(std::span<const double> clean,
                                    double photons, Rng& rng) {
  if (!(photons > 0))
    throw ContractViolation("noise: photon count must be > 0");
  NoisyProjection out;
  out.values.reserve(clean.size());
  out.variance.reserve(clean.size());
  for (double p : clean) {
    const double lam = photons * std::exp(-p);
    double counts =
        static_cast<double>(std::poisson_distribution<long long>(lam)(rng));
    counts = std::max(counts, 0.5);
    out.values.push_back(-std::log(counts / photons));
    out.variance.push_back(std::exp(p) / photons);
  }
  return out;
}

SimOutput simulate_scan(const DynamicPhantom& ph, const ScanGeometry& g,
                        const GridSpec& grid, const SimOptions& opt) {
  ph.validate();
  if (opt.n_phases <= 0)
    throw ContractViolation("simulate: phase count must be > 0");
  const int n_samples =
      opt.n_samples > 0 ? opt.n_samples : default_samples(grid);
  SimOutput out;
  out.grid = grid;
  out.projections = project(ph.field(), g, n_samples);
  if (opt.noise) {
    Rng rng(opt.seed);
    NoisyProjection np =
        apply_poisson_noise(out.projections.values, opt.photons, rng);
    out.projections.values = std::move(np.values);
    out.projections.noise_variance = std::move(np.variance);
  }
  for (int p = 0; p < opt.n_phases; ++p) {
    const double tp = (p + 0.5) / opt.n_phases;
    out.phase_times.push_back(tp);
    out.truth.push_back(rasterize(ph, grid, tp));
  }
  return out;
}

}  // namespace dynct
