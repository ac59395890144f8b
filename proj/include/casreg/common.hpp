#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace casreg {

// Voxel lattice extents, (D, H, W) = (z, y, x) counts. Storage everywhere is
// channel-major, then z, y, x with x fastest.
struct Dims3 {
  int d = 0;
  int h = 0;
  int w = 0;

  std::int64_t voxels() const { return std::int64_t(d) * h * w; }
  bool operator==(const Dims3&) const = default;
};

inline Dims3 cube(int n) { return Dims3{n, n, n}; }

inline std::string to_string(const Dims3& dims) {
  return std::to_string(dims.d) + "x" + std::to_string(dims.h) + "x" +
         std::to_string(dims.w);
}

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File does not carry the expected structure (magic, channel count, ...).
struct FormatError : Error {
  using Error::Error;
};
// Payload shorter/longer than the header promises.
struct LengthError : Error {
  using Error::Error;
};
// Values violate a data invariant (non-finite, non-integral labels, ...).
struct DataError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};

inline void require_same_dims(const Dims3& a, const Dims3& b, const char* what) {
  if (!(a == b))
    throw ShapeError(std::string(what) + ": dims mismatch " + to_string(a) +
                     " vs " + to_string(b));
}

}  // namespace casreg
