#pragma once

// On-disk formats.
//
//  - Arrays are raw little-endian float64 files next to a JSON sidecar that
//    records the shape plus domain metadata (images carry their grid,
//    sinograms their full scan geometry). The pairing is lossless: loading
//    returns bitwise-identical values.
//  - Previews are binary 8-bit PGM files with a linear display window,
//    written with +y up.
//  - Loss logs are newline-delimited JSON, one object per iteration.
//  - Checkpoints and other binary records go through BinWriter/BinReader,
//    little-endian streams with length-prefixed strings and arrays.

#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "dynct/geometry.hpp"
#include "dynct/losses.hpp"

namespace dynct {

void write_raw(const std::string& path, std::span<const double> data);
// `expect` > 0 enforces an element count; mismatches raise ConfigError.
std::vector<double> read_raw(const std::string& path, size_t expect = 0);

// `basename` (may include directories) becomes basename.json plus
// basename.raw; sinograms with a noise estimate add basename.var.raw.
void save_image(const std::string& basename, const Image& img);
Image load_image(const std::string& basename);
void save_projections(const std::string& basename, const ProjectionSet& p);
ProjectionSet load_projections(const std::string& basename);

// Values in [lo, hi] map linearly to 0..255; outside values saturate.
void write_pgm(const std::string& path, const Image& img, double lo,
               double hi);

class LossLog {
 public:
  void open(const std::string& path, bool append);
  bool is_open() const { return out_.is_open(); }
  void write(long long iteration, const LossReport& r);
  void close();

  // The exact line written for one iteration (no trailing newline).
  static std::string format_line(long long iteration, const LossReport& r);

 private:
  std::ofstream out_;
  std::string path_;
};

class BinWriter {
 public:
  explicit BinWriter(const std::string& path);
  ~BinWriter();
  BinWriter(const BinWriter&) = delete;
  BinWriter& operator=(const BinWriter&) = delete;

  void u8(uint8_t v);
  void u32(uint32_t v);
  void u64(uint64_t v);
  void i64(int64_t v);
  void f64(double v);
  void str(const std::string& s);         // u64 length + bytes
  void vec(std::span<const double> v);    // u64 count + raw values
  void close();                           // flush and verify

 private:
  std::ofstream out_;
  std::string path_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path);

  uint8_t u8();
  uint32_t u32();
  uint64_t u64();
  int64_t i64();
  double f64();
  std::string str();
  std::vector<double> vec();
  bool at_end();

 private:
  void bytes(void* dst, size_t n);
  std::ifstream in_;
  std::string path_;
};

}  // namespace dynct
