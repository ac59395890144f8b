#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "casreg/rng.hpp"
#include "casreg/tape.hpp"

namespace casreg {

template <class S>
struct ParamTensor {
  std::string name;
  Shape shape;
  ArrayX<S> value;
};

template <class S>
struct NetParams {
  std::vector<ParamTensor<S>> tensors;  // registration order is normative

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].name == name) return int(i);
    return -1;
  }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& t : tensors) n += t.value.size();
    return n;
  }
};

/// Creates one tape parameter per tensor; returns ids aligned with the
/// tensor list. Reusing the returned ids across several forward builds on
/// the same tape is what shares weights (gradients then accumulate over all
/// uses).
template <class S>
std::vector<int> bind_params(const NetParams<S>& p, Tape<S>& tape) {
  std::vector<int> ids;
  ids.reserve(p.tensors.size());
  for (const auto& t : p.tensors) ids.push_back(tape.param(t.shape, t.value, t.name));
  return ids;
}

struct DeformableNetConfig {
  int levels = 4;
  int base_channels = 16;
  int channel_mult = 1;
};

struct AffineNetConfig {
  int levels = 4;
  int base_channels = 16;
  int channel_mult = 1;
};

template <class S>
struct DeformableNet {
  DeformableNetConfig cfg;
  NetParams<S> params;
};

template <class S>
struct AffineNet {
  AffineNetConfig cfg;
  NetParams<S> params;
};

namespace nets_detail {

constexpr std::uint64_t kDeformTag = 11;
constexpr std::uint64_t kAffineTag = 12;

// Encoder channel ladder: base at the first level, 2*base below, all scaled
// by the width multiplier.
inline int ladder(int level, int base, int mult) {
  return mult * (level == 0 ? base : 2 * base);
}

inline void check_cfg(int levels, int base, int mult) {
  if (levels < 2 || base < 1 || mult < 1)
    throw ConfigError("net config: need levels >= 2, base_channels >= 1, "
                      "channel_mult >= 1");
}

template <class S>
void add_tensor(NetParams<S>& p, std::string name, Shape shape, Rng* rng,
                int fan_in) {
  ParamTensor<S> t{std::move(name), shape, ArrayX<S>::Zero(shape.size())};
  if (rng) {
    double bound = 1.0 / std::sqrt(double(fan_in));
    for (std::int64_t i = 0; i < t.value.size(); ++i)
      t.value[i] = S(rng->uniform(-bound, bound));
  }
  p.tensors.push_back(std::move(t));
}

// Hidden conv: fan-in-scaled uniform weights, zero bias.
template <class S>
void add_conv(NetParams<S>& p, const std::string& stem, int c_out, int c_in,
              Rng& rng) {
  add_tensor(p, stem + ".w", Shape::kernel5(c_out, c_in, 3), &rng, c_in * 27);
  add_tensor<S>(p, stem + ".b", Shape::vec(c_out), nullptr, 0);
}

// Deconv weights are (C_in, C_out, 4, 4, 4); each output voxel sees 8 taps
// per input channel, hence the fan-in.
template <class S>
void add_deconv(NetParams<S>& p, const std::string& stem, int c_in, int c_out,
                Rng& rng) {
  add_tensor(p, stem + ".w", Shape::kernel5(c_in, c_out, 4), &rng, c_in * 8);
  add_tensor<S>(p, stem + ".b", Shape::vec(c_out), nullptr, 0);
}

template <class S>
int conv_block(Tape<S>& tape, const std::vector<int>& ids, int slot, int x,
               int stride) {
  return tape.leaky_relu(tape.conv(x, ids[std::size_t(slot)],
                                   ids[std::size_t(slot) + 1], stride));
}

}  // namespace nets_detail

/// Miniature encoder-decoder flow predictor. Encoder: `levels` stride-2
/// convs; decoder: deconvs with skip concatenation back to full resolution;
/// final 3-channel prediction conv is zero-initialized so a fresh net
/// predicts the zero flow.
template <class S>
DeformableNet<S> init_deformable(std::uint64_t seed, DeformableNetConfig cfg) {
  using namespace nets_detail;
  check_cfg(cfg.levels, cfg.base_channels, cfg.channel_mult);
  Rng rng(derive_seed(seed, kDeformTag));
  DeformableNet<S> net;
  net.cfg = cfg;
  const int L = cfg.levels;
  auto ch = [&](int i) { return ladder(i, cfg.base_channels, cfg.channel_mult); };
  int prev = 2;
  for (int i = 0; i < L; ++i) {
    add_conv<S>(net.params, "enc" + std::to_string(i), ch(i), prev, rng);
    prev = ch(i);
  }
  for (int i = L - 1; i >= 1; --i) {
    int c_in = i == L - 1 ? ch(L - 1) : 2 * ch(i);
    add_deconv<S>(net.params, "dec" + std::to_string(i), c_in, ch(i - 1), rng);
  }
  int head = cfg.base_channels * cfg.channel_mult;
  add_deconv<S>(net.params, "dec0", 2 * ch(0), head, rng);
  add_tensor<S>(net.params, "pred.w", Shape::kernel5(3, head + 2, 3), nullptr, 0);
  add_tensor<S>(net.params, "pred.b", Shape::vec(3), nullptr, 0);
  return net;
}

/// Builds the deformable forward pass; returns the 3xDxHxW flow node.
template <class S>
int deformable_forward(const DeformableNet<S>& net, Tape<S>& tape,
                       const std::vector<int>& ids, int warped, int fixed) {
  using namespace nets_detail;
  const auto& ws = tape.node(warped).shape;
  const auto& fs = tape.node(fixed).shape;
  if (ws.rank != 4 || ws.c() != 1 || fs.rank != 4 || fs.c() != 1 ||
      !(ws.spatial() == fs.spatial()))
    throw ShapeError("deformable_forward: inputs must be matching 1xDxHxW");
  const int L = net.cfg.levels;
  Dims3 d = ws.spatial();
  int div = 1 << L;
  if (d.d % div || d.h % div || d.w % div)
    throw ShapeError("deformable_forward: dims " + to_string(d) +
                     " not divisible by 2^levels = " + std::to_string(div));

  int x = tape.concat_channels(warped, fixed);
  const int input2 = x;
  std::vector<int> enc;
  for (int i = 0; i < L; ++i) {
    x = conv_block(tape, ids, 2 * i, x, 2);
    enc.push_back(x);
  }
  int slot = 2 * L;
  for (int i = L - 1; i >= 1; --i, slot += 2) {
    x = tape.leaky_relu(
        tape.deconv(x, ids[std::size_t(slot)], ids[std::size_t(slot) + 1]));
    x = tape.concat_channels(x, enc[std::size_t(i) - 1]);
  }
  x = tape.leaky_relu(
      tape.deconv(x, ids[std::size_t(slot)], ids[std::size_t(slot) + 1]));
  x = tape.concat_channels(x, input2);
  slot += 2;
  return tape.conv(x, ids[std::size_t(slot)], ids[std::size_t(slot) + 1], 1);
}

/// Affine predictor: stride-2 conv ladder to a 2x2x2 grid, flatten, one
/// dense layer to 12 outputs (residual linear part row-major, then
/// translation). Dense layer is zero-initialized: fresh net predicts the
/// identity transform.
template <class S>
AffineNet<S> init_affine(std::uint64_t seed, AffineNetConfig cfg) {
  using namespace nets_detail;
  check_cfg(cfg.levels, cfg.base_channels, cfg.channel_mult);
  Rng rng(derive_seed(seed, kAffineTag));
  AffineNet<S> net;
  net.cfg = cfg;
  const int L = cfg.levels;
  auto ch = [&](int i) { return ladder(i, cfg.base_channels, cfg.channel_mult); };
  int prev = 2;
  for (int i = 0; i < L; ++i) {
    add_conv<S>(net.params, "enc" + std::to_string(i), ch(i), prev, rng);
    prev = ch(i);
  }
  add_tensor<S>(net.params, "head.w", Shape::mat(12, ch(L - 1) * 8), nullptr, 0);
  add_tensor<S>(net.params, "head.b", Shape::vec(12), nullptr, 0);
  return net;
}

/// Builds the affine forward pass; returns the 12-entry theta node.
template <class S>
int affine_forward(const AffineNet<S>& net, Tape<S>& tape,
                   const std::vector<int>& ids, int moving, int fixed) {
  using namespace nets_detail;
  const auto& ms = tape.node(moving).shape;
  const auto& fs = tape.node(fixed).shape;
  if (ms.rank != 4 || ms.c() != 1 || fs.rank != 4 || fs.c() != 1 ||
      !(ms.spatial() == fs.spatial()))
    throw ShapeError("affine_forward: inputs must be matching 1xDxHxW");
  const int L = net.cfg.levels;
  int x = tape.concat_channels(moving, fixed);
  for (int i = 0; i < L; ++i) x = conv_block(tape, ids, 2 * i, x, 2);
  if (!(tape.node(x).shape.spatial() == cube(2)))
    throw ShapeError("affine_forward: dims " + to_string(ms.spatial()) +
                     " do not reach a 2x2x2 grid after " + std::to_string(L) +
                     " levels");
  return tape.dense(x, ids[std::size_t(2 * L)], ids[std::size_t(2 * L) + 1]);
}

/// Affine regularization terms on theta: orthogonality ||M^T M - I||_F^2 and
/// determinant (det M - 1)^2, with M = I + R.
template <class S>
std::pair<int, int> affine_reg_losses(Tape<S>& tape, int theta) {
  return {tape.ortho_loss(theta), tape.det_loss(theta)};
}

/// Decodes a theta node's values into the transform it represents.
template <class S>
AffineTransformT<S> theta_to_transform(const Tape<S>& tape, int theta) {
  const auto& v = tape.node(theta).val;
  if (v.size() != 12) throw ShapeError("theta_to_transform: need 12 entries");
  AffineTransformT<S> t;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      t.linear(r, c) = (r == c ? S(1) : S(0)) + v[3 * r + c];
  for (int r = 0; r < 3; ++r) t.translation[r] = v[9 + r];
  return t;
}

}  // namespace casreg
