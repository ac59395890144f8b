#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <vector>

#include "casreg/common.hpp"

namespace casreg {

template <class Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <class Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;

template <class Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;

/// Dense scalar intensity grid over the voxel lattice, x fastest.
template <class Scalar>
struct VolumeT {
  Dims3 dims;
  ArrayX<Scalar> voxels;

  static VolumeT zeros(Dims3 d) {
    return VolumeT{d, ArrayX<Scalar>::Zero(d.voxels())};
  }

  std::int64_t index(int z, int y, int x) const {
    return (std::int64_t(z) * dims.h + y) * dims.w + x;
  }
  Scalar& at(int z, int y, int x) { return voxels[index(z, y, x)]; }
  Scalar at(int z, int y, int x) const { return voxels[index(z, y, x)]; }
};

/// Dense displacement grid; channel 0 = x, 1 = y, 2 = z displacement, in
/// voxel units. The mapped point for output voxel p is p + u(p).
template <class Scalar>
struct FlowFieldT {
  Dims3 dims;
  ArrayX<Scalar> disp;  // 3 * voxels, channel-major

  static FlowFieldT zeros(Dims3 d) {
    return FlowFieldT{d, ArrayX<Scalar>::Zero(3 * d.voxels())};
  }

  std::int64_t index(int c, int z, int y, int x) const {
    return ((std::int64_t(c) * dims.d + z) * dims.h + y) * dims.w + x;
  }
  Scalar& at(int c, int z, int y, int x) { return disp[index(c, z, y, x)]; }
  Scalar at(int c, int z, int y, int x) const { return disp[index(c, z, y, x)]; }
};

using Volume = VolumeT<float>;
using FlowField = FlowFieldT<float>;

/// Non-negative integer labels on the lattice; 0 is background.
struct Segmentation {
  Dims3 dims;
  std::vector<std::int32_t> labels;

  static Segmentation zeros(Dims3 d) {
    return Segmentation{d, std::vector<std::int32_t>(std::size_t(d.voxels()), 0)};
  }

  std::int64_t index(int z, int y, int x) const {
    return (std::int64_t(z) * dims.h + y) * dims.w + x;
  }
  std::int32_t& at(int z, int y, int x) { return labels[std::size_t(index(z, y, x))]; }
  std::int32_t at(int z, int y, int x) const { return labels[std::size_t(index(z, y, x))]; }
};

/// Ordered landmark list in continuous (x, y, z) voxel coordinates; index i
/// in one set corresponds to index i in the paired set.
struct LandmarkSet {
  std::vector<Vec3<double>> points;

  std::size_t size() const { return points.size(); }
};

/// Global linear map plus translation, acting on (x, y, z) coordinates about
/// the volume center.
template <class Scalar>
struct AffineTransformT {
  Mat3<Scalar> linear = Mat3<Scalar>::Identity();
  Vec3<Scalar> translation = Vec3<Scalar>::Zero();
};

using AffineTransform = AffineTransformT<float>;

/// One fixed/moving pair with exact ground truth, the desk-scale stand-in
/// for a real registration dataset.
struct SyntheticSample {
  Volume fixed;
  Volume moving;
  FlowField gt_flow;  // warping moving by gt_flow reconstructs fixed
  Segmentation fixed_seg;
  Segmentation moving_seg;
  LandmarkSet fixed_lms;
  LandmarkSet moving_lms;
  std::uint64_t seed = 0;
};

template <class Scalar>
void validate_volume(const VolumeT<Scalar>& v, const char* what) {
  if (v.dims.d < 2 || v.dims.h < 2 || v.dims.w < 2)
    throw DataError(std::string(what) + ": dims must all be >= 2, got " +
                    to_string(v.dims));
  if (v.voxels.size() != v.dims.voxels())
    throw DataError(std::string(what) + ": voxel count " +
                    std::to_string(v.voxels.size()) + " does not match dims " +
                    to_string(v.dims));
  if (!v.voxels.allFinite())
    throw DataError(std::string(what) + ": non-finite voxel values");
}

/// Min-max rescale to [0, 1]; constant volumes map to all zeros.
template <class Scalar>
VolumeT<Scalar> normalize_unit(const VolumeT<Scalar>& v) {
  Scalar lo = v.voxels.minCoeff();
  Scalar hi = v.voxels.maxCoeff();
  if (!(hi > lo)) return VolumeT<Scalar>::zeros(v.dims);
  return VolumeT<Scalar>{v.dims, (v.voxels - lo) / (hi - lo)};
}

}  // namespace casreg
