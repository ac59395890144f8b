#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "casreg/types.hpp"

namespace casreg {

// Raster container: magic "RCV1", four u32 little-endian fields C, D, H, W,
// then C*D*H*W f32 little-endian samples, channel-major, x fastest within a
// channel. Volumes and segmentations use C=1, flows C=3 (x, y, z
// displacement). Segmentation labels are stored as their exact float values.

namespace detail {

inline void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), std::streamsize(n));
  if (!os) throw IoError("short write");
}

inline void read_exact(std::ifstream& is, void* p, std::size_t n,
                       const std::string& path) {
  is.read(static_cast<char*>(p), std::streamsize(n));
  if (std::size_t(is.gcount()) != n)
    throw LengthError(path + ": truncated, wanted " + std::to_string(n) +
                      " more bytes");
}

inline std::uint32_t read_u32(std::ifstream& is, const std::string& path) {
  unsigned char b[4];
  read_exact(is, b, 4, path);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
         std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void write_u32(std::ofstream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>(v >> 8 & 0xff),
                        static_cast<unsigned char>(v >> 16 & 0xff),
                        static_cast<unsigned char>(v >> 24 & 0xff)};
  write_bytes(os, b, 4);
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  return is;
}

struct RasterHeader {
  std::uint32_t c, d, h, w;
};

inline RasterHeader read_raster_header(std::ifstream& is,
                                       const std::string& path) {
  char magic[4];
  read_exact(is, magic, 4, path);
  if (std::memcmp(magic, "RCV1", 4) != 0)
    throw FormatError(path + ": bad magic, not an RCV1 file");
  RasterHeader hd;
  hd.c = read_u32(is, path);
  hd.d = read_u32(is, path);
  hd.h = read_u32(is, path);
  hd.w = read_u32(is, path);
  if (hd.c == 0 || hd.d == 0 || hd.h == 0 || hd.w == 0)
    throw FormatError(path + ": zero dimension in header");
  return hd;
}

inline void write_raster(const std::string& path, std::uint32_t c, Dims3 dims,
                         const float* data) {
  auto os = open_out(path);
  write_bytes(os, "RCV1", 4);
  write_u32(os, c);
  write_u32(os, std::uint32_t(dims.d));
  write_u32(os, std::uint32_t(dims.h));
  write_u32(os, std::uint32_t(dims.w));
  write_bytes(os, data, sizeof(float) * std::size_t(c) *
                            std::size_t(dims.voxels()));
  os.close();
  if (!os) throw IoError("failed to finalize " + path);
}

inline std::vector<float> read_raster(const std::string& path,
                                      std::uint32_t want_c, Dims3& dims) {
  auto is = open_in(path);
  RasterHeader hd = read_raster_header(is, path);
  if (hd.c != want_c)
    throw FormatError(path + ": expected " + std::to_string(want_c) +
                      " channel(s), file has " + std::to_string(hd.c));
  dims = Dims3{int(hd.d), int(hd.h), int(hd.w)};
  std::vector<float> data(std::size_t(want_c) * std::size_t(dims.voxels()));
  read_exact(is, data.data(), sizeof(float) * data.size(), path);
  if (is.peek() != std::ifstream::traits_type::eof())
    throw FormatError(path + ": trailing bytes after payload");
  return data;
}

}  // namespace detail

inline void save_volume(const Volume& v, const std::string& path) {
  detail::write_raster(path, 1, v.dims, v.voxels.data());
}

inline Volume load_volume(const std::string& path) {
  Dims3 dims{};
  std::vector<float> data = detail::read_raster(path, 1, dims);
  Volume v = Volume::zeros(dims);
  std::memcpy(v.voxels.data(), data.data(), sizeof(float) * data.size());
  validate_volume(v, path.c_str());
  return v;
}

inline void save_flow(const FlowField& f, const std::string& path) {
  detail::write_raster(path, 3, f.dims, f.disp.data());
}

inline FlowField load_flow(const std::string& path) {
  Dims3 dims{};
  std::vector<float> data = detail::read_raster(path, 3, dims);
  FlowField f = FlowField::zeros(dims);
  std::memcpy(f.disp.data(), data.data(), sizeof(float) * data.size());
  if (!f.disp.allFinite()) throw DataError(path + ": non-finite displacement");
  return f;
}

inline void save_segmentation(const Segmentation& s,
                              const std::string& path) {
  std::vector<float> data(s.labels.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = float(s.labels[i]);
  detail::write_raster(path, 1, s.dims, data.data());
}

inline Segmentation load_segmentation(const std::string& path) {
  Dims3 dims{};
  std::vector<float> data = detail::read_raster(path, 1, dims);
  Segmentation s = Segmentation::zeros(dims);
  for (std::size_t i = 0; i < data.size(); ++i) {
    float v = data[i];
    if (!(v >= 0) || v != std::floor(v))
      throw DataError(path + ": label value " + std::to_string(v) +
                      " is not a non-negative integer");
    s.labels[i] = std::int32_t(v);
  }
  return s;
}

// Landmarks: one "x y z" triple per text line.

inline void save_landmarks(const LandmarkSet& lms, const std::string& path) {
  auto os = detail::open_out(path);
  for (const auto& p : lms.points) {
    char line[128];
    std::snprintf(line, sizeof(line), "%.17g %.17g %.17g\n", p.x(), p.y(),
                  p.z());
    os << line;
  }
  os.close();
  if (!os) throw IoError("failed to finalize " + path);
}

inline LandmarkSet load_landmarks(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  LandmarkSet lms;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    double x, y, z;
    char extra;
    int got = std::sscanf(line.c_str(), " %lf %lf %lf %c", &x, &y, &z, &extra);
    if (got != 3)
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected three coordinates");
    lms.points.emplace_back(x, y, z);
  }
  return lms;
}

}  // namespace casreg
