#pragma once

#include <Eigen/LU>
#include <cmath>
#include <cstdint>

#include "casreg/interp.hpp"
#include "casreg/types.hpp"

namespace casreg {

/// Backward warp: out(p) = in(p + u(p)) with trilinear interpolation.
template <class Scalar>
VolumeT<Scalar> warp_linear(const VolumeT<Scalar>& in,
                            const FlowFieldT<Scalar>& flow) {
  require_same_dims(in.dims, flow.dims, "warp_linear");
  Dims3 dims = in.dims;
  VolumeT<Scalar> out = VolumeT<Scalar>::zeros(dims);
  std::int64_t i = 0;
  const std::int64_t n = dims.voxels();
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.h; ++y)
      for (int x = 0; x < dims.w; ++x, ++i) {
        TrilinearStencil st(x + double(flow.disp[i]),
                            y + double(flow.disp[n + i]),
                            z + double(flow.disp[2 * n + i]), dims);
        out.voxels[i] = Scalar(st.sample(in.voxels.data(), dims));
      }
  return out;
}

/// Backward warp of integer labels with nearest-voxel lookup.
inline Segmentation warp_nearest(const Segmentation& in,
                                 const FlowField& flow) {
  require_same_dims(in.dims, flow.dims, "warp_nearest");
  Dims3 dims = in.dims;
  Segmentation out = Segmentation::zeros(dims);
  std::int64_t i = 0;
  const std::int64_t n = dims.voxels();
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.h; ++y)
      for (int x = 0; x < dims.w; ++x, ++i)
        out.labels[std::size_t(i)] = sample_nearest(
            in.labels.data(), dims, x + double(flow.disp[i]),
            y + double(flow.disp[n + i]), z + double(flow.disp[2 * n + i]));
  return out;
}

/// Composition of two displacement fields applied in sequence: `earlier`
/// acts first, `later` refines. The result maps p through both:
///   v(p) = u_later(p) + u_earlier(p + u_later(p))
/// so warping once by v matches warping by `earlier` then by `later`.
template <class Scalar>
FlowFieldT<Scalar> compose(const FlowFieldT<Scalar>& earlier,
                           const FlowFieldT<Scalar>& later) {
  require_same_dims(earlier.dims, later.dims, "compose");
  Dims3 dims = earlier.dims;
  FlowFieldT<Scalar> out = FlowFieldT<Scalar>::zeros(dims);
  std::int64_t i = 0;
  const std::int64_t n = dims.voxels();
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.h; ++y)
      for (int x = 0; x < dims.w; ++x, ++i) {
        double lx = later.disp[i];
        double ly = later.disp[n + i];
        double lz = later.disp[2 * n + i];
        TrilinearStencil st(x + lx, y + ly, z + lz, dims);
        out.disp[i] = Scalar(lx + st.sample(earlier.disp.data(), dims));
        out.disp[n + i] =
            Scalar(ly + st.sample(earlier.disp.data() + n, dims));
        out.disp[2 * n + i] =
            Scalar(lz + st.sample(earlier.disp.data() + 2 * n, dims));
      }
  return out;
}

/// Dense flow realizing an affine transform about the volume center:
///   u(p) = (A - I)(p - c) + b,   c = ((w-1)/2, (h-1)/2, (d-1)/2).
template <class Scalar>
FlowFieldT<Scalar> affine_to_flow(const AffineTransformT<Scalar>& t,
                                  Dims3 dims) {
  FlowFieldT<Scalar> out = FlowFieldT<Scalar>::zeros(dims);
  Mat3<double> r = t.linear.template cast<double>() - Mat3<double>::Identity();
  Vec3<double> b = t.translation.template cast<double>();
  Vec3<double> c(0.5 * (dims.w - 1), 0.5 * (dims.h - 1), 0.5 * (dims.d - 1));
  std::int64_t i = 0;
  const std::int64_t n = dims.voxels();
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.h; ++y)
      for (int x = 0; x < dims.w; ++x, ++i) {
        Vec3<double> u = r * (Vec3<double>(x, y, z) - c) + b;
        out.disp[i] = Scalar(u.x());
        out.disp[n + i] = Scalar(u.y());
        out.disp[2 * n + i] = Scalar(u.z());
      }
  return out;
}

/// Image of a continuous point under the flow: p + u(p), u sampled
/// trilinearly. The point itself must lie on the lattice.
template <class Scalar>
Vec3<double> transform_point(const FlowFieldT<Scalar>& flow,
                             const Vec3<double>& p) {
  if (p.x() < 0 || p.x() > flow.dims.w - 1 || p.y() < 0 ||
      p.y() > flow.dims.h - 1 || p.z() < 0 || p.z() > flow.dims.d - 1)
    throw DataError("transform_point: point outside lattice");
  const std::int64_t n = flow.dims.voxels();
  TrilinearStencil st(p.x(), p.y(), p.z(), flow.dims);
  return p + Vec3<double>(st.sample(flow.disp.data(), flow.dims),
                          st.sample(flow.disp.data() + n, flow.dims),
                          st.sample(flow.disp.data() + 2 * n, flow.dims));
}

/// Fraction of interior voxels whose forward-difference Jacobian of the
/// deformation p + u(p) has non-positive determinant. Interior excludes the
/// last plane along each axis so every difference is in range.
template <class Scalar>
double folding_fraction(const FlowFieldT<Scalar>& flow) {
  Dims3 dims = flow.dims;
  const std::int64_t n = dims.voxels();
  auto u = [&](int c, std::int64_t i) { return double(flow.disp[c * n + i]); };
  std::int64_t folded = 0, total = 0;
  for (int z = 0; z + 1 < dims.d; ++z)
    for (int y = 0; y + 1 < dims.h; ++y)
      for (int x = 0; x + 1 < dims.w; ++x) {
        std::int64_t i = (std::int64_t(z) * dims.h + y) * dims.w + x;
        std::int64_t ix = i + 1, iy = i + dims.w,
                     iz = i + std::int64_t(dims.h) * dims.w;
        Mat3<double> j;
        for (int c = 0; c < 3; ++c) {
          j(c, 0) = u(c, ix) - u(c, i);
          j(c, 1) = u(c, iy) - u(c, i);
          j(c, 2) = u(c, iz) - u(c, i);
        }
        j += Mat3<double>::Identity();
        if (j.determinant() <= 0) ++folded;
        ++total;
      }
  if (total == 0) throw ShapeError("folding_fraction: no interior voxels");
  return double(folded) / double(total);
}

/// Mean squared forward difference of the displacement, averaged over the
/// actual number of in-range neighbor pairs across all three channels.
template <class Scalar>
double tv2_value(const FlowFieldT<Scalar>& flow) {
  Dims3 dims = flow.dims;
  const std::int64_t n = dims.voxels();
  double sum = 0;
  std::int64_t pairs = 3 * (std::int64_t(dims.d) * dims.h * (dims.w - 1) +
                            std::int64_t(dims.d) * (dims.h - 1) * dims.w +
                            std::int64_t(dims.d - 1) * dims.h * dims.w);
  for (int c = 0; c < 3; ++c) {
    const Scalar* u = flow.disp.data() + c * n;
    for (int z = 0; z < dims.d; ++z)
      for (int y = 0; y < dims.h; ++y)
        for (int x = 0; x < dims.w; ++x) {
          std::int64_t i = (std::int64_t(z) * dims.h + y) * dims.w + x;
          if (x + 1 < dims.w) {
            double d = double(u[i + 1]) - double(u[i]);
            sum += d * d;
          }
          if (y + 1 < dims.h) {
            double d = double(u[i + dims.w]) - double(u[i]);
            sum += d * d;
          }
          if (z + 1 < dims.d) {
            double d = double(u[i + std::int64_t(dims.h) * dims.w]) -
                       double(u[i]);
            sum += d * d;
          }
        }
  }
  if (pairs == 0) throw ShapeError("tv2_value: no neighbor pairs");
  return sum / double(pairs);
}

}  // namespace casreg
