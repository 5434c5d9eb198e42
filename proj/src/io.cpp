#include "dynct/io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <limits>

#include <nlohmann/json.hpp>

namespace dynct {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "raw array and checkpoint formats assume a little-endian host");
static_assert(std::numeric_limits<double>::is_iec559,
              "raw array formats assume IEEE-754 doubles");

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded())
    throw ConfigError("'" + path + "' is not valid JSON");
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
  if (!out) throw ConfigError("write to '" + path + "' failed");
}

// The sidecar stores the raw file's bare name; resolve it next to the
// sidecar itself so directories can be moved around freely.
std::string sibling(const std::string& sidecar_path, const std::string& name) {
  return (fs::path(sidecar_path).parent_path() / name).string();
}

}  // namespace

void write_raw(const std::string& path, std::span<const double> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!out) throw ConfigError("write to '" + path + "' failed");
}

std::vector<double> read_raw(const std::string& path, size_t expect) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  const auto bytes = static_cast<size_t>(in.tellg());
  if (bytes % sizeof(double) != 0)
    throw ConfigError("'" + path + "' is not a float64 array");
  const size_t n = bytes / sizeof(double);
  if (expect > 0 && n != expect)
    throw ConfigError("'" + path + "' holds " + std::to_string(n) +
                      " values, expected " + std::to_string(expect));
  std::vector<double> data(n);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(bytes));
  if (!in) throw ConfigError("read from '" + path + "' failed");
  return data;
}

void save_image(const std::string& basename, const Image& img) {
  if (img.values.size() != img.grid.count())
    throw ContractViolation("save_image: value count does not match grid");
  const std::string raw_name = fs::path(basename).filename().string() + ".raw";
  write_raw(basename + ".raw", img.values);
  json j{{"kind", "image"},
         {"nx", img.grid.nx},
         {"ny", img.grid.ny},
         {"data", raw_name}};
  write_text_file(basename + ".json", j.dump(2) + "\n");
}

Image load_image(const std::string& basename) {
  const std::string sidecar = basename + ".json";
  json j = read_json_file(sidecar);
  if (j.value("kind", "") != "image")
    throw ConfigError("'" + sidecar + "' is not an image sidecar");
  Image img;
  img.grid.nx = j.at("nx").get<int>();
  img.grid.ny = j.at("ny").get<int>();
  if (img.grid.nx < 1 || img.grid.ny < 1)
    throw ConfigError("'" + sidecar + "' has an invalid grid");
  img.values = read_raw(sibling(sidecar, j.at("data").get<std::string>()),
                        img.grid.count());
  return img;
}

void save_projections(const std::string& basename, const ProjectionSet& p) {
  p.geom.validate();
  if (p.values.size() != p.geom.ray_count())
    throw ContractViolation(
        "save_projections: value count does not match geometry");
  const std::string stem = fs::path(basename).filename().string();
  write_raw(basename + ".raw", p.values);
  json j{{"kind", "sinogram"},
         {"mode", p.geom.mode == ScanMode::Fan ? "fan" : "parallel"},
         {"n_detectors", p.geom.n_detectors},
         {"n_views", p.geom.n_views},
         {"detector_spacing", p.geom.detector_spacing},
         {"source_radius", p.geom.source_radius},
         {"detector_radius", p.geom.detector_radius},
         {"angles", p.geom.angles},
         {"timestamps", p.geom.timestamps},
         {"data", stem + ".raw"}};
  if (p.noise_variance) {
    if (p.noise_variance->size() != p.values.size())
      throw ContractViolation("save_projections: variance size mismatch");
    write_raw(basename + ".var.raw", *p.noise_variance);
    j["noise_variance"] = stem + ".var.raw";
  }
  write_text_file(basename + ".json", j.dump(2) + "\n");
}

ProjectionSet load_projections(const std::string& basename) {
  const std::string sidecar = basename + ".json";
  json j = read_json_file(sidecar);
  if (j.value("kind", "") != "sinogram")
    throw ConfigError("'" + sidecar + "' is not a sinogram sidecar");
  ProjectionSet p;
  const std::string mode = j.at("mode").get<std::string>();
  if (mode == "fan")
    p.geom.mode = ScanMode::Fan;
  else if (mode == "parallel")
    p.geom.mode = ScanMode::Parallel;
  else
    throw ConfigError("'" + sidecar + "': unknown scan mode '" + mode + "'");
  p.geom.n_detectors = j.at("n_detectors").get<int>();
  p.geom.n_views = j.at("n_views").get<int>();
  p.geom.detector_spacing = j.at("detector_spacing").get<double>();
  p.geom.source_radius = j.value("source_radius", 0.0);
  p.geom.detector_radius = j.value("detector_radius", 0.0);
  p.geom.angles = j.at("angles").get<std::vector<double>>();
  p.geom.timestamps = j.at("timestamps").get<std::vector<double>>();
  try {
    p.geom.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError("'" + sidecar + "': " + e.what());
  }
  p.values = read_raw(sibling(sidecar, j.at("data").get<std::string>()),
                      p.geom.ray_count());
  if (j.contains("noise_variance"))
    p.noise_variance = read_raw(
        sibling(sidecar, j.at("noise_variance").get<std::string>()),
        p.geom.ray_count());
  return p;
}

void write_pgm(const std::string& path, const Image& img, double lo,
               double hi) {
  if (!(hi > lo)) throw ContractViolation("write_pgm: empty display window");
  if (img.values.size() != img.grid.count())
    throw ContractViolation("write_pgm: value count does not match grid");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << "P5\n" << img.grid.nx << " " << img.grid.ny << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(img.grid.nx));
  for (int iy = img.grid.ny - 1; iy >= 0; --iy) {
    for (int ix = 0; ix < img.grid.nx; ++ix) {
      double v = (img.values[static_cast<size_t>(iy) * img.grid.nx + ix] - lo) /
                 (hi - lo);
      v = v < 0 ? 0 : (v > 1 ? 1 : v);
      row[static_cast<size_t>(ix)] =
          static_cast<unsigned char>(v * 255.0 + 0.5);
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw ConfigError("write to '" + path + "' failed");
}

void LossLog::open(const std::string& path, bool append) {
  close();
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw ConfigError("cannot open loss log '" + path + "'");
  path_ = path;
}

std::string LossLog::format_line(long long iteration, const LossReport& r) {
  json j{{"iteration", iteration}, {"fdl_tp", r.fdl_tp}, {"fdl_ff", r.fdl_ff},
         {"dm", r.dm},             {"rgt", r.rgt},       {"total", r.total}};
  return j.dump();
}

void LossLog::write(long long iteration, const LossReport& r) {
  if (!out_.is_open())
    throw ContractViolation("loss log: write before open");
  out_ << format_line(iteration, r) << '\n';
  out_.flush();
  if (!out_) throw ConfigError("write to loss log '" + path_ + "' failed");
}

void LossLog::close() {
  if (out_.is_open()) out_.close();
}

BinWriter::BinWriter(const std::string& path)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
  if (!out_) throw ConfigError("cannot write '" + path + "'");
}

BinWriter::~BinWriter() {
  if (out_.is_open()) out_.close();
}

namespace {
template <class T>
void write_pod(std::ofstream& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(buf, sizeof(T));
}
}  // namespace

void BinWriter::u8(uint8_t v) { write_pod(out_, v); }
void BinWriter::u32(uint32_t v) { write_pod(out_, v); }
void BinWriter::u64(uint64_t v) { write_pod(out_, v); }
void BinWriter::i64(int64_t v) { write_pod(out_, v); }
void BinWriter::f64(double v) { write_pod(out_, v); }

void BinWriter::str(const std::string& s) {
  u64(s.size());
  out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinWriter::vec(std::span<const double> v) {
  u64(v.size());
  out_.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void BinWriter::close() {
  out_.flush();
  if (!out_) throw ConfigError("write to '" + path_ + "' failed");
  out_.close();
}

BinReader::BinReader(const std::string& path)
    : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw ConfigError("cannot open '" + path + "'");
}

void BinReader::bytes(void* dst, size_t n) {
  in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (!in_)
    throw ConfigError("'" + path_ + "' is truncated or unreadable");
}

uint8_t BinReader::u8() {
  uint8_t v;
  bytes(&v, sizeof v);
  return v;
}
uint32_t BinReader::u32() {
  uint32_t v;
  bytes(&v, sizeof v);
  return v;
}
uint64_t BinReader::u64() {
  uint64_t v;
  bytes(&v, sizeof v);
  return v;
}
int64_t BinReader::i64() {
  int64_t v;
  bytes(&v, sizeof v);
  return v;
}
double BinReader::f64() {
  double v;
  bytes(&v, sizeof v);
  return v;
}

std::string BinReader::str() {
  const uint64_t n = u64();
  if (n > (1ull << 32))
    throw ConfigError("'" + path_ + "' holds an implausible string length");
  std::string s(static_cast<size_t>(n), '\0');
  if (n) bytes(s.data(), static_cast<size_t>(n));
  return s;
}

std::vector<double> BinReader::vec() {
  const uint64_t n = u64();
  if (n > (1ull << 33))
    throw ConfigError("'" + path_ + "' holds an implausible array length");
  std::vector<double> v(static_cast<size_t>(n));
  if (n) bytes(v.data(), static_cast<size_t>(n) * sizeof(double));
  return v;
}

bool BinReader::at_end() { return in_.peek() == std::ifstream::traits_type::eof(); }

}  // namespace dynct
