#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "casreg/flow_ops.hpp"
#include "casreg/rng.hpp"
#include "casreg/types.hpp"

namespace casreg {

namespace synth_detail {

constexpr std::uint64_t kSceneTag = 1;
constexpr std::uint64_t kFlowTag = 2;
constexpr std::uint64_t kNoiseTag = 3;

struct Ellipsoid {
  Vec3<double> center;
  Vec3<double> radii;
  Mat3<double> world_to_local;  // rotation, applied to (p - center)
  double base, gain;            // intensity profile base + gain * (1 - q)
  // Multiplicative texture riding the local frame. Three waves with
  // independent directions: the texture gradient must span all of R^3, or
  // displacement along the missing direction is invisible to intensity
  // similarity and registration drifts freely there. Wavelengths stay
  // >= 6 voxels so trilinear resampling keeps the self-consistency gate.
  std::array<Vec3<double>, 3> tex_k{Vec3<double>::Zero(), Vec3<double>::Zero(),
                                    Vec3<double>::Zero()};
  std::array<double, 3> tex_phase{0, 0, 0};
  double tex_amp = 0;

  // Normalized squared radius: 0 at center, 1 on the surface.
  double q(const Vec3<double>& p) const {
    Vec3<double> l = world_to_local * (p - center);
    return (l.cwiseQuotient(radii)).squaredNorm();
  }

  // Smoothstep membership over a shell about 1.5 voxels thick.
  double membership(double q) const {
    double r_geo = std::cbrt(radii.x() * radii.y() * radii.z());
    double delta = 1.5 / r_geo;
    double s = std::sqrt(q);
    if (s <= 1 - delta) return 1;
    if (s >= 1 + delta) return 0;
    double t = (1 + delta - s) / (2 * delta);
    return t * t * (3 - 2 * t);
  }

  double shade(const Vec3<double>& p) const {
    double qq = q(p);
    double m = membership(qq);
    if (m == 0) return 0;
    double profile = std::max(base + gain * (1 - qq), 0.0);
    if (tex_amp > 0) {
      Vec3<double> l = world_to_local * (p - center);
      double wave = 0;
      for (int w = 0; w < 3; ++w)
        wave += std::cos(tex_k[std::size_t(w)].dot(l) + tex_phase[std::size_t(w)]);
      profile *= 1 + tex_amp * wave / 3;
    }
    return m * profile;
  }
};

inline Mat3<double> random_rotation(Rng& rng) {
  double a = rng.normal(), b = rng.normal(), c = rng.normal(),
         d = rng.normal();
  double n = std::sqrt(a * a + b * b + c * c + d * d);
  if (n < 1e-12) return Mat3<double>::Identity();
  a /= n, b /= n, c /= n, d /= n;
  Mat3<double> r;
  r << 1 - 2 * (c * c + d * d), 2 * (b * c - a * d), 2 * (b * d + a * c),
      2 * (b * c + a * d), 1 - 2 * (b * b + d * d), 2 * (c * d - a * b),
      2 * (b * d - a * c), 2 * (c * d + a * b), 1 - 2 * (b * b + c * c);
  return r;
}

inline Vec3<double> random_unit(Rng& rng) {
  for (int i = 0; i < 16; ++i) {
    Vec3<double> v(rng.normal(), rng.normal(), rng.normal());
    double n = v.norm();
    if (n > 1e-6) return v / n;
  }
  return Vec3<double>(1, 0, 0);
}

// Analytic scene: one body ellipsoid, five satellite blobs strictly inside
// it, and one interior sub-structure that defines label 2. Evaluable at any
// continuous point, which keeps warped-view construction exact.
struct Scene {
  Dims3 dims;
  std::vector<Ellipsoid> blobs;  // [0] = body, [1..5] satellites
  Ellipsoid sub;
  struct Wave {
    Vec3<double> freq;
    double phase;
  };
  std::array<Wave, 4> waves;

  double background(const Vec3<double>& p) const {
    double acc = 0;
    for (const Wave& w : waves)
      acc += std::cos(2 * M_PI *
                          (w.freq.x() * p.x() / dims.w +
                           w.freq.y() * p.y() / dims.h +
                           w.freq.z() * p.z() / dims.d) +
                      w.phase);
    return 0.10 + 0.015 * acc;
  }

  double intensity(const Vec3<double>& p) const {
    double v = background(p);
    for (const Ellipsoid& e : blobs) v = std::max(v, e.shade(p));
    v = std::max(v, sub.shade(p));
    return v;
  }

  // Crisp labels: 2 inside the sub-structure, 1 inside the body, else 0.
  std::int32_t label(const Vec3<double>& p) const {
    if (sub.q(p) <= 1) return 2;
    if (blobs[0].q(p) <= 1) return 1;
    return 0;
  }
};

inline Scene make_scene(std::uint64_t seed, Dims3 dims) {
  Rng rng(derive_seed(seed, kSceneTag));
  Scene sc;
  sc.dims = dims;

  Vec3<double> extent(dims.w, dims.h, dims.d);
  Vec3<double> center = 0.5 * (extent - Vec3<double>::Ones());

  Ellipsoid body;
  body.center = center + Vec3<double>(rng.uniform(-0.05, 0.05) * dims.w,
                                      rng.uniform(-0.05, 0.05) * dims.h,
                                      rng.uniform(-0.05, 0.05) * dims.d);
  body.radii = Vec3<double>(rng.uniform(0.28, 0.36) * dims.w,
                            rng.uniform(0.28, 0.36) * dims.h,
                            rng.uniform(0.28, 0.36) * dims.d);
  body.world_to_local = random_rotation(rng);
  body.base = 0.35;
  body.gain = 0.35;
  // Wavelengths of 6..9 voxels pin correspondence inside the body while
  // keeping trilinear resampling within the self-consistency gates. An
  // orthonormal wave frame keeps the three directions well conditioned.
  // The satellites are a few voxels across and localize themselves.
  Mat3<double> tex_frame = random_rotation(rng);
  for (int w = 0; w < 3; ++w) {
    body.tex_k[std::size_t(w)] =
        (2 * M_PI / rng.uniform(6.0, 9.0)) * tex_frame.row(w).transpose();
    body.tex_phase[std::size_t(w)] = rng.uniform(0, 2 * M_PI);
  }
  body.tex_amp = 0.18;
  sc.blobs.push_back(body);

  Mat3<double> body_axes = body.world_to_local.transpose();
  double r_geo = std::cbrt(body.radii.x() * body.radii.y() * body.radii.z());
  for (int i = 0; i < 5; ++i) {
    Ellipsoid sat;
    Vec3<double> dir = random_unit(rng);
    double frac = rng.uniform(0.18, 0.55);
    sat.center = body.center + body_axes * (frac * body.radii.cwiseProduct(dir));
    sat.radii = Vec3<double>(rng.uniform(0.16, 0.24) * r_geo,
                             rng.uniform(0.16, 0.24) * r_geo,
                             rng.uniform(0.16, 0.24) * r_geo);
    sat.world_to_local = random_rotation(rng);
    sat.base = 0.40;
    sat.gain = 0.50;
    sc.blobs.push_back(sat);
  }

  // Place the sub-structure so no landmark (blob center) falls inside it;
  // landmark labels stay 1 that way.
  for (int attempt = 0;; ++attempt) {
    if (attempt == 20)
      throw DataError("make_scene: cannot place sub-structure clear of "
                      "landmarks, seed " + std::to_string(seed));
    Vec3<double> dir = random_unit(rng);
    sc.sub.center = body.center + body_axes * (0.45 * body.radii.cwiseProduct(dir));
    sc.sub.radii = Vec3<double>(rng.uniform(0.24, 0.30) * body.radii.x(),
                                rng.uniform(0.24, 0.30) * body.radii.y(),
                                rng.uniform(0.24, 0.30) * body.radii.z());
    sc.sub.world_to_local = random_rotation(rng);
    sc.sub.base = 0.50;
    sc.sub.gain = 0.45;
    bool clear = true;
    for (const Ellipsoid& e : sc.blobs)
      clear = clear && sc.sub.q(e.center) > 1.3;
    if (clear) break;
  }

  for (Scene::Wave& w : sc.waves) {
    w.freq = Vec3<double>(1 + rng.uniform_int(4), 1 + rng.uniform_int(4),
                          1 + rng.uniform_int(4));
    w.phase = rng.uniform(0, 2 * M_PI);
  }
  return sc;
}

inline void require_base_dims(Dims3 dims) {
  for (int n : {dims.d, dims.h, dims.w})
    if (n < 16 || n % 16 != 0)
      throw ConfigError("generator dims must be >= 16 and divisible by 16, "
                        "got " + to_string(dims));
}

inline void render(const Scene& sc, Volume& vol, Segmentation& seg) {
  Dims3 dims = sc.dims;
  std::int64_t i = 0;
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.h; ++y)
      for (int x = 0; x < dims.w; ++x, ++i) {
        Vec3<double> p(x, y, z);
        vol.voxels[i] = float(sc.intensity(p));
        seg.labels[std::size_t(i)] = sc.label(p);
      }
}

inline double foreground_dice(const Segmentation& a, const Segmentation& b) {
  std::int64_t inter = 0, ca = 0, cb = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    bool fa = a.labels[i] > 0, fb = b.labels[i] > 0;
    inter += fa && fb;
    ca += fa;
    cb += fb;
  }
  if (ca + cb == 0) return 1.0;
  return 2.0 * double(inter) / double(ca + cb);
}

}  // namespace synth_detail

/// Deterministic synthetic scene: smooth organ-like body with interior
/// blobs on a low-amplitude noise background. Landmarks are the six blob
/// centers; label 1 is the body, label 2 an interior sub-structure.
inline std::tuple<Volume, Segmentation, LandmarkSet> generate_base(
    std::uint64_t seed, Dims3 dims) {
  synth_detail::require_base_dims(dims);
  synth_detail::Scene sc = synth_detail::make_scene(seed, dims);
  Volume vol = Volume::zeros(dims);
  Segmentation seg = Segmentation::zeros(dims);
  synth_detail::render(sc, vol, seg);
  LandmarkSet lms;
  for (const auto& e : sc.blobs) lms.points.push_back(e.center);
  return {std::move(vol), std::move(seg), std::move(lms)};
}

/// Per-channel Gaussian white noise blurred by a separable Gaussian of
/// standard deviation sigma, rescaled so the maximum displacement magnitude
/// over voxels equals amplitude exactly.
inline FlowField smooth_random_flow(std::uint64_t seed, Dims3 dims,
                                    double sigma, double amplitude) {
  if (!(sigma > 0)) throw ConfigError("smooth_random_flow: sigma must be > 0");
  if (!(amplitude >= 0))
    throw ConfigError("smooth_random_flow: amplitude must be >= 0");
  FlowField out = FlowField::zeros(dims);
  if (amplitude == 0) return out;

  const std::int64_t n = dims.voxels();
  Rng rng(derive_seed(seed, synth_detail::kNoiseTag));
  std::vector<double> u(std::size_t(3 * n));
  for (double& v : u) v = rng.normal();

  int radius = int(std::ceil(3 * sigma));
  std::vector<double> kernel(std::size_t(2 * radius + 1));
  double ksum = 0;
  for (int i = -radius; i <= radius; ++i)
    ksum += kernel[std::size_t(i + radius)] =
        std::exp(-0.5 * (i / sigma) * (i / sigma));
  for (double& k : kernel) k /= ksum;

  // Separable zero-padded convolution along x, y, z in turn.
  std::vector<double> tmp(static_cast<std::size_t>(n));
  int ext[3] = {dims.w, dims.h, dims.d};
  std::int64_t stride[3] = {1, dims.w, std::int64_t(dims.h) * dims.w};
  for (int c = 0; c < 3; ++c) {
    double* ch = u.data() + c * n;
    for (int axis = 0; axis < 3; ++axis) {
      std::int64_t i = 0;
      for (int z = 0; z < dims.d; ++z)
        for (int y = 0; y < dims.h; ++y)
          for (int x = 0; x < dims.w; ++x, ++i) {
            int pos[3] = {x, y, z};
            int lo = std::max(-radius, -pos[axis]);
            int hi = std::min(radius, ext[axis] - 1 - pos[axis]);
            double acc = 0;
            for (int k = lo; k <= hi; ++k)
              acc += kernel[std::size_t(k + radius)] * ch[i + k * stride[axis]];
            tmp[std::size_t(i)] = acc;
          }
      std::copy(tmp.begin(), tmp.end(), ch);
    }
  }

  double max_norm = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    double nn = u[std::size_t(i)] * u[std::size_t(i)] +
                u[std::size_t(n + i)] * u[std::size_t(n + i)] +
                u[std::size_t(2 * n + i)] * u[std::size_t(2 * n + i)];
    max_norm = std::max(max_norm, nn);
  }
  max_norm = std::sqrt(max_norm);
  if (max_norm == 0) return out;
  double scale = amplitude / max_norm;
  for (std::int64_t i = 0; i < 3 * n; ++i)
    out.disp[i] = float(scale * u[std::size_t(i)]);
  return out;
}

/// Fixed/moving pair with exact ground truth. The fixed side is exactly the
/// generate_base output; gt_flow composes a small random affine with a
/// smooth random deformation; the moving image is the analytic scene seen
/// through the inverse deformation, so warping moving by gt_flow recovers
/// fixed up to interpolation error. Self-consistency is asserted before
/// returning, with up to five re-draws of the deformation.
inline SyntheticSample generate_pair(std::uint64_t seed, Dims3 dims,
                                     double max_disp, double affine_jitter) {
  synth_detail::require_base_dims(dims);
  int min_dim = std::min({dims.d, dims.h, dims.w});
  if (!(max_disp >= 0) || max_disp > min_dim / 4.0)
    throw ConfigError("generate_pair: max_disp must be in [0, min(dims)/4]");
  if (!(affine_jitter >= 0))
    throw ConfigError("generate_pair: affine_jitter must be >= 0");

  synth_detail::Scene sc = synth_detail::make_scene(seed, dims);
  SyntheticSample s;
  s.seed = seed;
  s.fixed = Volume::zeros(dims);
  s.fixed_seg = Segmentation::zeros(dims);
  synth_detail::render(sc, s.fixed, s.fixed_seg);
  for (const auto& e : sc.blobs) s.fixed_lms.points.push_back(e.center);

  if (max_disp == 0 && affine_jitter == 0) {
    s.moving = s.fixed;
    s.moving_seg = s.fixed_seg;
    s.moving_lms = s.fixed_lms;
    s.gt_flow = FlowField::zeros(dims);
    return s;
  }

  const std::int64_t n = dims.voxels();
  for (int attempt = 0; attempt < 5; ++attempt) {
    Rng rng(derive_seed(seed, synth_detail::kFlowTag, std::uint64_t(attempt)));
    AffineTransformT<float> aff;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        aff.linear(r, c) = float((r == c ? 1 : 0) +
                                 rng.uniform(-affine_jitter, affine_jitter));
    for (int c = 0; c < 3; ++c)
      aff.translation[c] =
          float(rng.uniform(-1, 1) * affine_jitter * min_dim / 4.0);

    FlowField smooth = smooth_random_flow(
        derive_seed(seed, synth_detail::kNoiseTag, std::uint64_t(attempt)),
        dims, min_dim / 4.0, max_disp);
    s.gt_flow = compose(affine_to_flow(aff, dims), smooth);

    // Moving view: moving(y) = scene(p) where p + u(p) = y, found by
    // fixed-point iteration (the deformation is contractive by the max_disp
    // precondition).
    s.moving = Volume::zeros(dims);
    s.moving_seg = Segmentation::zeros(dims);
    std::int64_t i = 0;
    for (int z = 0; z < dims.d; ++z)
      for (int y = 0; y < dims.h; ++y)
        for (int x = 0; x < dims.w; ++x, ++i) {
          Vec3<double> target(x, y, z);
          Vec3<double> p = target;
          for (int it = 0; it < 60; ++it) {
            TrilinearStencil st(p.x(), p.y(), p.z(), dims);
            Vec3<double> next =
                target - Vec3<double>(st.sample(s.gt_flow.disp.data(), dims),
                                      st.sample(s.gt_flow.disp.data() + n, dims),
                                      st.sample(s.gt_flow.disp.data() + 2 * n,
                                                dims));
            double step = (next - p).cwiseAbs().maxCoeff();
            p = next;
            if (step < 1e-9) break;
          }
          s.moving.voxels[i] = float(sc.intensity(p));
          s.moving_seg.labels[std::size_t(i)] = sc.label(p);
        }

    s.moving_lms.points.clear();
    for (const auto& c : s.fixed_lms.points)
      s.moving_lms.points.push_back(transform_point(s.gt_flow, c));

    // Self-consistency gate; a failed draw is discarded.
    Volume rec = warp_linear(s.moving, s.gt_flow);
    double mae = double((rec.voxels - s.fixed.voxels).abs().mean());
    double dice = synth_detail::foreground_dice(
        warp_nearest(s.moving_seg, s.gt_flow), s.fixed_seg);
    bool lms_ok = true;
    for (std::size_t k = 0; k < s.fixed_lms.size(); ++k) {
      Vec3<double> t = transform_point(s.gt_flow, s.fixed_lms.points[k]);
      lms_ok = lms_ok && (t - s.moving_lms.points[k]).norm() <= 0.5;
      const Vec3<double>& m = s.moving_lms.points[k];
      lms_ok = lms_ok && m.x() >= 0 && m.x() <= dims.w - 1 && m.y() >= 0 &&
               m.y() <= dims.h - 1 && m.z() >= 0 && m.z() <= dims.d - 1;
    }
    if (mae < 0.02 && dice >= 0.95 && lms_ok) return s;
  }
  throw DataError("generate_pair: self-consistency failed after 5 attempts, "
                  "seed " + std::to_string(seed));
}

}  // namespace casreg
