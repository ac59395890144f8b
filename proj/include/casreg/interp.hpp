#pragma once

#include <cmath>

#include "casreg/common.hpp"

namespace casreg {

/// Trilinear stencil at a continuous sample point. Out-of-bound coordinates
/// are clamped to the valid range per axis before the corner decomposition,
/// so boundary samples degrade to nearest-point along the offending axis.
struct TrilinearStencil {
  int x0, x1, y0, y1, z0, z1;
  double fx, fy, fz;
  bool clamped_x, clamped_y, clamped_z;

  TrilinearStencil(double x, double y, double z, Dims3 dims) {
    clamped_x = clamp_axis(x, dims.w);
    clamped_y = clamp_axis(y, dims.h);
    clamped_z = clamp_axis(z, dims.d);
    split(x, dims.w, x0, x1, fx);
    split(y, dims.h, y0, y1, fy);
    split(z, dims.d, z0, z1, fz);
  }

  template <class Scalar>
  double sample(const Scalar* grid, Dims3 dims) const {
    auto at = [&](int z, int y, int x) {
      return double(grid[(std::int64_t(z) * dims.h + y) * dims.w + x]);
    };
    double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
    double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
    double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
    double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
    double c0 = c00 * (1 - fy) + c01 * fy;
    double c1 = c10 * (1 - fy) + c11 * fy;
    return c0 * (1 - fz) + c1 * fz;
  }

 private:
  static bool clamp_axis(double& v, int n) {
    if (v < 0) {
      v = 0;
      return true;
    }
    if (v > n - 1) {
      v = n - 1;
      return true;
    }
    return false;
  }

  static void split(double v, int n, int& i0, int& i1, double& f) {
    i0 = int(std::floor(v));
    if (i0 > n - 1) i0 = n - 1;
    if (i0 < 0) i0 = 0;
    f = v - i0;
    i1 = i0 + 1 < n ? i0 + 1 : n - 1;
  }
};

/// Nearest-voxel sample with the same per-axis clamping convention.
template <class Scalar>
Scalar sample_nearest(const Scalar* grid, Dims3 dims, double x, double y,
                      double z) {
  auto snap = [](double v, int n) {
    int i = int(std::llround(v));
    if (i < 0) i = 0;
    if (i > n - 1) i = n - 1;
    return i;
  };
  int xi = snap(x, dims.w), yi = snap(y, dims.h), zi = snap(z, dims.d);
  return grid[(std::int64_t(zi) * dims.h + yi) * dims.w + xi];
}

}  // namespace casreg
