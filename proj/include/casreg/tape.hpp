#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/LU>

#include "casreg/interp.hpp"
#include "casreg/types.hpp"

namespace casreg {

/// Rank-annotated dense extents, rank <= 5. Activations are rank 4
/// (C, D, H, W); conv kernels rank 5; dense weights rank 2; biases rank 1.
struct Shape {
  std::array<int, 5> dim{1, 1, 1, 1, 1};
  int rank = 0;

  static Shape scalar() { return tensor4(1, 1, 1, 1); }
  static Shape vec(int n) { return Shape{{n, 1, 1, 1, 1}, 1}; }
  static Shape mat(int rows, int cols) { return Shape{{rows, cols, 1, 1, 1}, 2}; }
  static Shape tensor4(int c, int d, int h, int w) {
    return Shape{{c, d, h, w, 1}, 4};
  }
  static Shape kernel5(int a, int b, int k) { return Shape{{a, b, k, k, k}, 5}; }

  std::int64_t size() const {
    std::int64_t n = 1;
    for (int i = 0; i < rank; ++i) n *= dim[std::size_t(i)];
    return n;
  }
  // Rank-4 accessors.
  int c() const { return dim[0]; }
  int d() const { return dim[1]; }
  int h() const { return dim[2]; }
  int w() const { return dim[3]; }
  Dims3 spatial() const { return Dims3{dim[1], dim[2], dim[3]}; }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
  std::string out = "(";
  for (int i = 0; i < s.rank; ++i)
    out += (i ? "," : "") + std::to_string(s.dim[std::size_t(i)]);
  return out + ")";
}

enum class OpKind {
  kInput,
  kParam,
  kConv,
  kDeconv,
  kLeakyRelu,
  kAdd,
  kScale,
  kConcatC,
  kWarp,
  kCorrLoss,
  kTv2Loss,
  kDense,
  kAffineFlow,
  kOrthoLoss,
  kDetLoss,
};

template <class S>
struct Node {
  Shape shape;
  ArrayX<S> val;
  ArrayX<S> grad;  // sized lazily by backward
  OpKind kind = OpKind::kInput;
  std::array<int, 3> in{-1, -1, -1};
  int stride = 1;            // kConv
  double factor = 1;         // kScale
  std::string name;          // kParam
  std::vector<double> aux;   // forward statistics cached for backward
};

/// Eager reverse-mode tape over dense tensors. Nodes are appended in
/// topological order; forward values are computed at construction time and
/// backward runs one reverse sweep, accumulating into leaf gradients.
template <class S>
class Tape {
 public:
  using NodeT = Node<S>;

  int input(Shape shape, ArrayX<S> values) {
    return push_leaf(OpKind::kInput, shape, std::move(values), "");
  }

  int param(Shape shape, ArrayX<S> values, std::string name) {
    int id = push_leaf(OpKind::kParam, shape, std::move(values),
                       std::move(name));
    param_ids_.push_back(id);
    return id;
  }

  const NodeT& node(int id) const { return nodes_[std::size_t(id)]; }
  NodeT& node(int id) { return nodes_[std::size_t(id)]; }
  int size() const { return int(nodes_.size()); }
  const std::vector<int>& params() const { return param_ids_; }

  // --- operators ---

  int conv(int x, int w, int b, int stride) {
    const NodeT &xn = node(x), &wn = node(w), &bn = node(b);
    if (stride != 1 && stride != 2)
      throw ShapeError("conv: stride must be 1 or 2");
    if (xn.shape.rank != 4 || wn.shape.rank != 5 || bn.shape.rank != 1)
      throw ShapeError("conv: rank mismatch");
    if (wn.shape.dim[2] != 3 || wn.shape.dim[3] != 3 || wn.shape.dim[4] != 3)
      throw ShapeError("conv: kernel must be 3x3x3");
    if (wn.shape.dim[1] != xn.shape.c())
      throw ShapeError("conv: input channels " + std::to_string(xn.shape.c()) +
                       " vs kernel " + std::to_string(wn.shape.dim[1]));
    if (bn.shape.dim[0] != wn.shape.dim[0])
      throw ShapeError("conv: bias size mismatch");
    if (xn.shape.d() % stride || xn.shape.h() % stride || xn.shape.w() % stride)
      throw ShapeError("conv: spatial dims not divisible by stride");
    Shape os = Shape::tensor4(wn.shape.dim[0], xn.shape.d() / stride,
                              xn.shape.h() / stride, xn.shape.w() / stride);
    NodeT n = make(OpKind::kConv, os, {x, w, b});
    n.stride = stride;
    conv_forward(xn, wn, bn, n, stride);
    return push(std::move(n));
  }

  int deconv(int x, int w, int b) {
    const NodeT &xn = node(x), &wn = node(w), &bn = node(b);
    if (xn.shape.rank != 4 || wn.shape.rank != 5 || bn.shape.rank != 1)
      throw ShapeError("deconv: rank mismatch");
    if (wn.shape.dim[2] != 4 || wn.shape.dim[3] != 4 || wn.shape.dim[4] != 4)
      throw ShapeError("deconv: kernel must be 4x4x4");
    if (wn.shape.dim[0] != xn.shape.c())
      throw ShapeError("deconv: input channels mismatch");
    if (bn.shape.dim[0] != wn.shape.dim[1])
      throw ShapeError("deconv: bias size mismatch");
    Shape os = Shape::tensor4(wn.shape.dim[1], 2 * xn.shape.d(),
                              2 * xn.shape.h(), 2 * xn.shape.w());
    NodeT n = make(OpKind::kDeconv, os, {x, w, b});
    deconv_forward(xn, wn, bn, n);
    return push(std::move(n));
  }

  int leaky_relu(int x) {
    const NodeT& xn = node(x);
    NodeT n = make(OpKind::kLeakyRelu, xn.shape, {x});
    n.val = (xn.val > S(0)).select(xn.val, S(0.1) * xn.val);
    return push(std::move(n));
  }

  int add(int a, int b) {
    const NodeT &an = node(a), &bn = node(b);
    if (!(an.shape == bn.shape))
      throw ShapeError("add: shape mismatch " + to_string(an.shape) + " vs " +
                       to_string(bn.shape));
    NodeT n = make(OpKind::kAdd, an.shape, {a, b});
    n.val = an.val + bn.val;
    return push(std::move(n));
  }

  int scale(int x, double factor) {
    const NodeT& xn = node(x);
    NodeT n = make(OpKind::kScale, xn.shape, {x});
    n.factor = factor;
    n.val = xn.val * S(factor);
    return push(std::move(n));
  }

  int concat_channels(int a, int b) {
    const NodeT &an = node(a), &bn = node(b);
    if (an.shape.rank != 4 || bn.shape.rank != 4 ||
        an.shape.spatial() != bn.shape.spatial())
      throw ShapeError("concat_channels: spatial mismatch");
    Shape os = Shape::tensor4(an.shape.c() + bn.shape.c(), an.shape.d(),
                              an.shape.h(), an.shape.w());
    NodeT n = make(OpKind::kConcatC, os, {a, b});
    n.val.resize(os.size());
    n.val.head(an.val.size()) = an.val;
    n.val.tail(bn.val.size()) = bn.val;
    return push(std::move(n));
  }

  int warp(int image, int flow) {
    const NodeT &in = node(image), &fn = node(flow);
    if (in.shape.rank != 4 || in.shape.c() != 1)
      throw ShapeError("warp: image must be 1xDxHxW");
    if (fn.shape.rank != 4 || fn.shape.c() != 3)
      throw ShapeError("warp: flow must be 3xDxHxW");
    if (!(in.shape.spatial() == fn.shape.spatial()))
      throw ShapeError("warp: spatial mismatch");
    NodeT n = make(OpKind::kWarp, in.shape, {image, flow});
    n.val.resize(in.val.size());
    Dims3 dims = in.shape.spatial();
    const std::int64_t nv = dims.voxels();
    std::int64_t i = 0;
    for (int z = 0; z < dims.d; ++z)
      for (int y = 0; y < dims.h; ++y)
        for (int x = 0; x < dims.w; ++x, ++i) {
          TrilinearStencil st(x + double(fn.val[i]), y + double(fn.val[nv + i]),
                              z + double(fn.val[2 * nv + i]), dims);
          n.val[i] = S(st.sample(in.val.data(), dims));
        }
    return push(std::move(n));
  }

  int corr_loss(int a, int b) {
    const NodeT &an = node(a), &bn = node(b);
    if (!(an.shape == bn.shape))
      throw ShapeError("corr_loss: shape mismatch");
    if (an.val.size() < 2) throw ShapeError("corr_loss: needs >= 2 voxels");
    const std::int64_t n64 = an.val.size();
    double mu_a = 0, mu_b = 0;
    for (std::int64_t i = 0; i < n64; ++i) {
      mu_a += double(an.val[i]);
      mu_b += double(bn.val[i]);
    }
    mu_a /= double(n64);
    mu_b /= double(n64);
    double cov = 0, var_a = 0, var_b = 0;
    for (std::int64_t i = 0; i < n64; ++i) {
      double da = double(an.val[i]) - mu_a;
      double db = double(bn.val[i]) - mu_b;
      cov += da * db;
      var_a += da * da;
      var_b += db * db;
    }
    cov /= double(n64);
    double sig_a = std::sqrt(var_a / double(n64));
    double sig_b = std::sqrt(var_b / double(n64));
    double denom = sig_a * sig_b + kCorrEps;
    double cc = cov / denom;
    NodeT n = make(OpKind::kCorrLoss, Shape::scalar(), {a, b});
    n.val.resize(1);
    n.val[0] = S(1.0 - cc);
    n.aux = {mu_a, mu_b, cov, sig_a, sig_b, denom};
    return push(std::move(n));
  }

  int tv2_loss(int flow) {
    const NodeT& fn = node(flow);
    if (fn.shape.rank != 4 || fn.shape.c() != 3)
      throw ShapeError("tv2_loss: flow must be 3xDxHxW");
    Dims3 dims = fn.shape.spatial();
    const std::int64_t nv = dims.voxels();
    std::int64_t pairs = tv2_pairs(dims);
    if (pairs == 0) throw ShapeError("tv2_loss: no neighbor pairs");
    double sum = 0;
    for (int c = 0; c < 3; ++c) {
      const S* u = fn.val.data() + c * nv;
      std::int64_t i = 0;
      for (int z = 0; z < dims.d; ++z)
        for (int y = 0; y < dims.h; ++y)
          for (int x = 0; x < dims.w; ++x, ++i) {
            if (x + 1 < dims.w) {
              double dd = double(u[i + 1]) - double(u[i]);
              sum += dd * dd;
            }
            if (y + 1 < dims.h) {
              double dd = double(u[i + dims.w]) - double(u[i]);
              sum += dd * dd;
            }
            if (z + 1 < dims.d) {
              double dd =
                  double(u[i + std::int64_t(dims.h) * dims.w]) - double(u[i]);
              sum += dd * dd;
            }
          }
    }
    NodeT n = make(OpKind::kTv2Loss, Shape::scalar(), {flow});
    n.val.resize(1);
    n.val[0] = S(sum / double(pairs));
    return push(std::move(n));
  }

  int dense(int x, int w, int b) {
    const NodeT &xn = node(x), &wn = node(w), &bn = node(b);
    if (wn.shape.rank != 2 || bn.shape.rank != 1)
      throw ShapeError("dense: weight/bias rank mismatch");
    if (wn.shape.dim[1] != xn.val.size())
      throw ShapeError("dense: input size " + std::to_string(xn.val.size()) +
                       " vs weight cols " + std::to_string(wn.shape.dim[1]));
    if (bn.shape.dim[0] != wn.shape.dim[0])
      throw ShapeError("dense: bias size mismatch");
    int rows = wn.shape.dim[0];
    NodeT n = make(OpKind::kDense, Shape::tensor4(rows, 1, 1, 1), {x, w, b});
    n.val.resize(rows);
    const std::int64_t cols = xn.val.size();
    for (int r = 0; r < rows; ++r) {
      double acc = double(bn.val[r]);
      const S* wr = wn.val.data() + std::int64_t(r) * cols;
      for (std::int64_t k = 0; k < cols; ++k)
        acc += double(wr[k]) * double(xn.val[k]);
      n.val[r] = S(acc);
    }
    return push(std::move(n));
  }

  /// theta is the 12-vector (residual linear part R row-major, then b);
  /// output is the dense displacement of the affine map I + R about the
  /// volume center, matching affine_to_flow.
  int affine_flow(int theta, Dims3 dims) {
    const NodeT& tn = node(theta);
    if (tn.val.size() != 12)
      throw ShapeError("affine_flow: theta must have 12 entries");
    Shape os = Shape::tensor4(3, dims.d, dims.h, dims.w);
    NodeT n = make(OpKind::kAffineFlow, os, {theta});
    n.val.resize(os.size());
    const std::int64_t nv = dims.voxels();
    double cx = 0.5 * (dims.w - 1), cy = 0.5 * (dims.h - 1),
           cz = 0.5 * (dims.d - 1);
    std::int64_t i = 0;
    for (int z = 0; z < dims.d; ++z)
      for (int y = 0; y < dims.h; ++y)
        for (int x = 0; x < dims.w; ++x, ++i) {
          double px = x - cx, py = y - cy, pz = z - cz;
          for (int r = 0; r < 3; ++r)
            n.val[r * nv + i] = S(double(tn.val[3 * r]) * px +
                                  double(tn.val[3 * r + 1]) * py +
                                  double(tn.val[3 * r + 2]) * pz +
                                  double(tn.val[9 + r]));
        }
    return push(std::move(n));
  }

  /// ||M^T M - I||_F^2 with M = I + R, R from theta's first 9 entries.
  int ortho_loss(int theta) {
    Mat3<double> m = theta_linear(node(theta));
    Mat3<double> g = m.transpose() * m - Mat3<double>::Identity();
    NodeT n = make(OpKind::kOrthoLoss, Shape::scalar(), {theta});
    n.val.resize(1);
    n.val[0] = S(g.squaredNorm());
    return push(std::move(n));
  }

  /// (det(M) - 1)^2 with M = I + R.
  int det_loss(int theta) {
    Mat3<double> m = theta_linear(node(theta));
    double det = m.determinant();
    NodeT n = make(OpKind::kDetLoss, Shape::scalar(), {theta});
    n.val.resize(1);
    n.val[0] = S((det - 1) * (det - 1));
    n.aux = {det};
    return push(std::move(n));
  }

  // --- backward ---

  void backward(int loss) {
    if (node(loss).shape.size() != 1)
      throw ContractError("backward: loss node is not scalar");
    std::vector<char> needed(nodes_.size(), 0);
    needed[std::size_t(loss)] = 1;
    for (int id = loss; id >= 0; --id) {
      if (!needed[std::size_t(id)]) continue;
      for (int in : nodes_[std::size_t(id)].in)
        if (in >= 0) needed[std::size_t(in)] = 1;
    }
    for (NodeT& n : nodes_) n.grad = ArrayX<S>::Zero(n.val.size());
    node(loss).grad[0] = S(1);
    for (int id = loss; id >= 0; --id) {
      if (!needed[std::size_t(id)]) continue;
      backward_node(id);
    }
  }

  void zero_grads() {
    for (NodeT& n : nodes_) n.grad = ArrayX<S>();
  }

  static constexpr double kCorrEps = 1e-8;

 private:
  static std::int64_t tv2_pairs(Dims3 d) {
    return 3 * (std::int64_t(d.d) * d.h * (d.w - 1) +
                std::int64_t(d.d) * (d.h - 1) * d.w +
                std::int64_t(d.d - 1) * d.h * d.w);
  }

  static Mat3<double> theta_linear(const NodeT& tn) {
    if (tn.val.size() != 12)
      throw ShapeError("affine loss: theta must have 12 entries");
    Mat3<double> m;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        m(r, c) = (r == c ? 1.0 : 0.0) + double(tn.val[3 * r + c]);
    return m;
  }

  NodeT make(OpKind kind, Shape shape, std::initializer_list<int> ins) {
    NodeT n;
    n.kind = kind;
    n.shape = shape;
    int k = 0;
    for (int i : ins) n.in[std::size_t(k++)] = i;
    return n;
  }

  int push_leaf(OpKind kind, Shape shape, ArrayX<S> values, std::string name) {
    if (values.size() != shape.size())
      throw ShapeError("leaf: value count " + std::to_string(values.size()) +
                       " does not match shape " + to_string(shape));
    NodeT n;
    n.kind = kind;
    n.shape = shape;
    n.val = std::move(values);
    n.name = std::move(name);
    return push(std::move(n));
  }

  int push(NodeT n) {
#ifndef NDEBUG
    if (!n.val.allFinite())
      throw DataError("tape: non-finite values out of op " +
                      std::to_string(int(n.kind)));
#endif
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  static void conv_forward(const NodeT& xn, const NodeT& wn, const NodeT& bn,
                           NodeT& out, int s) {
    const int ci = xn.shape.c(), co = out.shape.c();
    const int D = xn.shape.d(), H = xn.shape.h(), W = xn.shape.w();
    const int Do = out.shape.d(), Ho = out.shape.h(), Wo = out.shape.w();
    out.val.resize(out.shape.size());
    for (int o = 0; o < co; ++o)
      out.val.segment(std::int64_t(o) * Do * Ho * Wo,
                      std::int64_t(Do) * Ho * Wo)
          .setConstant(bn.val[o]);
    for (int o = 0; o < co; ++o)
      for (int i = 0; i < ci; ++i)
        for (int dz = 0; dz < 3; ++dz)
          for (int dy = 0; dy < 3; ++dy)
            for (int dx = 0; dx < 3; ++dx) {
              S wv = wn.val[(((std::int64_t(o) * ci + i) * 3 + dz) * 3 + dy) *
                                3 +
                            dx];
              if (wv == S(0)) continue;
              int zlo = dz == 0 ? 1 : 0, zhi = std::min(Do - 1, (D - dz) / s);
              int ylo = dy == 0 ? 1 : 0, yhi = std::min(Ho - 1, (H - dy) / s);
              int xlo = dx == 0 ? 1 : 0, xhi = std::min(Wo - 1, (W - dx) / s);
              for (int zo = zlo; zo <= zhi; ++zo) {
                int zi = s * zo + dz - 1;
                for (int yo = ylo; yo <= yhi; ++yo) {
                  int yi = s * yo + dy - 1;
                  const S* irow = xn.val.data() +
                                  ((std::int64_t(i) * D + zi) * H + yi) * W +
                                  (s * xlo + dx - 1);
                  S* orow = out.val.data() +
                            ((std::int64_t(o) * Do + zo) * Ho + yo) * Wo + xlo;
                  for (int k = 0; k <= xhi - xlo; ++k)
                    orow[k] += wv * irow[std::int64_t(k) * s];
                }
              }
            }
  }

  void conv_backward(NodeT& n) {
    NodeT &xn = node(n.in[0]), &wn = node(n.in[1]), &bn = node(n.in[2]);
    const int s = n.stride;
    const int ci = xn.shape.c(), co = n.shape.c();
    const int D = xn.shape.d(), H = xn.shape.h(), W = xn.shape.w();
    const int Do = n.shape.d(), Ho = n.shape.h(), Wo = n.shape.w();
    for (int o = 0; o < co; ++o) {
      double acc = 0;
      const S* g = n.grad.data() + std::int64_t(o) * Do * Ho * Wo;
      for (std::int64_t k = 0; k < std::int64_t(Do) * Ho * Wo; ++k)
        acc += double(g[k]);
      bn.grad[o] += S(acc);
    }
    for (int o = 0; o < co; ++o)
      for (int i = 0; i < ci; ++i)
        for (int dz = 0; dz < 3; ++dz)
          for (int dy = 0; dy < 3; ++dy)
            for (int dx = 0; dx < 3; ++dx) {
              std::int64_t widx =
                  (((std::int64_t(o) * ci + i) * 3 + dz) * 3 + dy) * 3 + dx;
              S wv = wn.val[widx];
              double wacc = 0;
              int zlo = dz == 0 ? 1 : 0, zhi = std::min(Do - 1, (D - dz) / s);
              int ylo = dy == 0 ? 1 : 0, yhi = std::min(Ho - 1, (H - dy) / s);
              int xlo = dx == 0 ? 1 : 0, xhi = std::min(Wo - 1, (W - dx) / s);
              for (int zo = zlo; zo <= zhi; ++zo) {
                int zi = s * zo + dz - 1;
                for (int yo = ylo; yo <= yhi; ++yo) {
                  int yi = s * yo + dy - 1;
                  const S* irow = xn.val.data() +
                                  ((std::int64_t(i) * D + zi) * H + yi) * W +
                                  (s * xlo + dx - 1);
                  S* girow = xn.grad.data() +
                             ((std::int64_t(i) * D + zi) * H + yi) * W +
                             (s * xlo + dx - 1);
                  const S* grow = n.grad.data() +
                                  ((std::int64_t(o) * Do + zo) * Ho + yo) * Wo +
                                  xlo;
                  for (int k = 0; k <= xhi - xlo; ++k) {
                    wacc += double(irow[std::int64_t(k) * s]) * double(grow[k]);
                    girow[std::int64_t(k) * s] += wv * grow[k];
                  }
                }
              }
              wn.grad[widx] += S(wacc);
            }
  }

  static void deconv_forward(const NodeT& xn, const NodeT& wn, const NodeT& bn,
                             NodeT& out) {
    const int ci = xn.shape.c(), co = out.shape.c();
    const int D = xn.shape.d(), H = xn.shape.h(), W = xn.shape.w();
    const int Do = out.shape.d(), Ho = out.shape.h(), Wo = out.shape.w();
    out.val.resize(out.shape.size());
    for (int o = 0; o < co; ++o)
      out.val.segment(std::int64_t(o) * Do * Ho * Wo,
                      std::int64_t(Do) * Ho * Wo)
          .setConstant(bn.val[o]);
    for (int i = 0; i < ci; ++i)
      for (int o = 0; o < co; ++o)
        for (int dz = 0; dz < 4; ++dz)
          for (int dy = 0; dy < 4; ++dy)
            for (int dx = 0; dx < 4; ++dx) {
              S wv = wn.val[(((std::int64_t(i) * co + o) * 4 + dz) * 4 + dy) *
                                4 +
                            dx];
              if (wv == S(0)) continue;
              int zlo = dz == 0 ? 1 : 0, zhi = D - 1 - (dz == 3 ? 1 : 0);
              int ylo = dy == 0 ? 1 : 0, yhi = H - 1 - (dy == 3 ? 1 : 0);
              int xlo = dx == 0 ? 1 : 0, xhi = W - 1 - (dx == 3 ? 1 : 0);
              for (int zi = zlo; zi <= zhi; ++zi) {
                int zo = 2 * zi + dz - 1;
                for (int yi = ylo; yi <= yhi; ++yi) {
                  int yo = 2 * yi + dy - 1;
                  const S* irow = xn.val.data() +
                                  ((std::int64_t(i) * D + zi) * H + yi) * W +
                                  xlo;
                  S* orow = out.val.data() +
                            ((std::int64_t(o) * Do + zo) * Ho + yo) * Wo +
                            (2 * xlo + dx - 1);
                  for (int k = 0; k <= xhi - xlo; ++k)
                    orow[2 * std::int64_t(k)] += wv * irow[k];
                }
              }
            }
  }

  void deconv_backward(NodeT& n) {
    NodeT &xn = node(n.in[0]), &wn = node(n.in[1]), &bn = node(n.in[2]);
    const int ci = xn.shape.c(), co = n.shape.c();
    const int D = xn.shape.d(), H = xn.shape.h(), W = xn.shape.w();
    const int Do = n.shape.d(), Ho = n.shape.h(), Wo = n.shape.w();
    for (int o = 0; o < co; ++o) {
      double acc = 0;
      const S* g = n.grad.data() + std::int64_t(o) * Do * Ho * Wo;
      for (std::int64_t k = 0; k < std::int64_t(Do) * Ho * Wo; ++k)
        acc += double(g[k]);
      bn.grad[o] += S(acc);
    }
    for (int i = 0; i < ci; ++i)
      for (int o = 0; o < co; ++o)
        for (int dz = 0; dz < 4; ++dz)
          for (int dy = 0; dy < 4; ++dy)
            for (int dx = 0; dx < 4; ++dx) {
              std::int64_t widx =
                  (((std::int64_t(i) * co + o) * 4 + dz) * 4 + dy) * 4 + dx;
              S wv = wn.val[widx];
              double wacc = 0;
              int zlo = dz == 0 ? 1 : 0, zhi = D - 1 - (dz == 3 ? 1 : 0);
              int ylo = dy == 0 ? 1 : 0, yhi = H - 1 - (dy == 3 ? 1 : 0);
              int xlo = dx == 0 ? 1 : 0, xhi = W - 1 - (dx == 3 ? 1 : 0);
              for (int zi = zlo; zi <= zhi; ++zi) {
                int zo = 2 * zi + dz - 1;
                for (int yi = ylo; yi <= yhi; ++yi) {
                  int yo = 2 * yi + dy - 1;
                  const S* irow = xn.val.data() +
                                  ((std::int64_t(i) * D + zi) * H + yi) * W +
                                  xlo;
                  S* girow = xn.grad.data() +
                             ((std::int64_t(i) * D + zi) * H + yi) * W + xlo;
                  const S* grow = n.grad.data() +
                                  ((std::int64_t(o) * Do + zo) * Ho + yo) * Wo +
                                  (2 * xlo + dx - 1);
                  for (int k = 0; k <= xhi - xlo; ++k) {
                    wacc += double(irow[k]) * double(grow[2 * std::int64_t(k)]);
                    girow[k] += wv * grow[2 * std::int64_t(k)];
                  }
                }
              }
              wn.grad[widx] += S(wacc);
            }
  }

  void warp_backward(NodeT& n) {
    NodeT &in = node(n.in[0]), &fn = node(n.in[1]);
    Dims3 dims = in.shape.spatial();
    const std::int64_t nv = dims.voxels();
    auto vidx = [&](int z, int y, int x) {
      return (std::int64_t(z) * dims.h + y) * dims.w + x;
    };
    std::int64_t i = 0;
    for (int z = 0; z < dims.d; ++z)
      for (int y = 0; y < dims.h; ++y)
        for (int x = 0; x < dims.w; ++x, ++i) {
          S g = n.grad[i];
          if (g == S(0)) continue;
          TrilinearStencil st(x + double(fn.val[i]), y + double(fn.val[nv + i]),
                              z + double(fn.val[2 * nv + i]), dims);
          double wx0 = 1 - st.fx, wx1 = st.fx;
          double wy0 = 1 - st.fy, wy1 = st.fy;
          double wz0 = 1 - st.fz, wz1 = st.fz;
          // Image gradient: scatter the corner weights.
          in.grad[vidx(st.z0, st.y0, st.x0)] += S(wz0 * wy0 * wx0) * g;
          in.grad[vidx(st.z0, st.y0, st.x1)] += S(wz0 * wy0 * wx1) * g;
          in.grad[vidx(st.z0, st.y1, st.x0)] += S(wz0 * wy1 * wx0) * g;
          in.grad[vidx(st.z0, st.y1, st.x1)] += S(wz0 * wy1 * wx1) * g;
          in.grad[vidx(st.z1, st.y0, st.x0)] += S(wz1 * wy0 * wx0) * g;
          in.grad[vidx(st.z1, st.y0, st.x1)] += S(wz1 * wy0 * wx1) * g;
          in.grad[vidx(st.z1, st.y1, st.x0)] += S(wz1 * wy1 * wx0) * g;
          in.grad[vidx(st.z1, st.y1, st.x1)] += S(wz1 * wy1 * wx1) * g;
          // Flow gradient: spatial derivative of the trilinear sample,
          // zero along any clamped axis.
          auto v = [&](int zz, int yy, int xx) {
            return double(in.val[vidx(zz, yy, xx)]);
          };
          if (!st.clamped_x) {
            double d = wz0 * wy0 * (v(st.z0, st.y0, st.x1) - v(st.z0, st.y0, st.x0)) +
                       wz0 * wy1 * (v(st.z0, st.y1, st.x1) - v(st.z0, st.y1, st.x0)) +
                       wz1 * wy0 * (v(st.z1, st.y0, st.x1) - v(st.z1, st.y0, st.x0)) +
                       wz1 * wy1 * (v(st.z1, st.y1, st.x1) - v(st.z1, st.y1, st.x0));
            fn.grad[i] += S(d) * g;
          }
          if (!st.clamped_y) {
            double d = wz0 * wx0 * (v(st.z0, st.y1, st.x0) - v(st.z0, st.y0, st.x0)) +
                       wz0 * wx1 * (v(st.z0, st.y1, st.x1) - v(st.z0, st.y0, st.x1)) +
                       wz1 * wx0 * (v(st.z1, st.y1, st.x0) - v(st.z1, st.y0, st.x0)) +
                       wz1 * wx1 * (v(st.z1, st.y1, st.x1) - v(st.z1, st.y0, st.x1));
            fn.grad[nv + i] += S(d) * g;
          }
          if (!st.clamped_z) {
            double d = wy0 * wx0 * (v(st.z1, st.y0, st.x0) - v(st.z0, st.y0, st.x0)) +
                       wy0 * wx1 * (v(st.z1, st.y0, st.x1) - v(st.z0, st.y0, st.x1)) +
                       wy1 * wx0 * (v(st.z1, st.y1, st.x0) - v(st.z0, st.y1, st.x0)) +
                       wy1 * wx1 * (v(st.z1, st.y1, st.x1) - v(st.z0, st.y1, st.x1));
            fn.grad[2 * nv + i] += S(d) * g;
          }
        }
  }

  void corr_backward(NodeT& n) {
    NodeT &an = node(n.in[0]), &bn = node(n.in[1]);
    const double mu_a = n.aux[0], mu_b = n.aux[1], cov = n.aux[2],
                 sig_a = n.aux[3], sig_b = n.aux[4], denom = n.aux[5];
    const double g = double(n.grad[0]);
    if (g == 0) return;
    const std::int64_t n64 = an.val.size();
    // d(1-cc)/da_i = -[(b_i-mu_b) - cov*sig_b/(sig_a*denom) * (a_i-mu_a)]
    //               / (n * denom); the sigma term drops for constant input.
    const double ka = sig_a > 0 ? cov * sig_b / (sig_a * denom) : 0;
    const double kb = sig_b > 0 ? cov * sig_a / (sig_b * denom) : 0;
    const double inv = 1.0 / (double(n64) * denom);
    for (std::int64_t i = 0; i < n64; ++i) {
      double da = double(an.val[i]) - mu_a;
      double db = double(bn.val[i]) - mu_b;
      an.grad[i] += S(-g * inv * (db - ka * da));
      bn.grad[i] += S(-g * inv * (da - kb * db));
    }
  }

  void tv2_backward(NodeT& n) {
    NodeT& fn = node(n.in[0]);
    Dims3 dims = fn.shape.spatial();
    const std::int64_t nv = dims.voxels();
    const double g = double(n.grad[0]);
    if (g == 0) return;
    const double k = 2.0 * g / double(tv2_pairs(dims));
    for (int c = 0; c < 3; ++c) {
      const S* u = fn.val.data() + c * nv;
      S* gu = fn.grad.data() + c * nv;
      std::int64_t i = 0;
      for (int z = 0; z < dims.d; ++z)
        for (int y = 0; y < dims.h; ++y)
          for (int x = 0; x < dims.w; ++x, ++i) {
            if (x + 1 < dims.w) {
              double d = k * (double(u[i + 1]) - double(u[i]));
              gu[i + 1] += S(d);
              gu[i] -= S(d);
            }
            if (y + 1 < dims.h) {
              double d = k * (double(u[i + dims.w]) - double(u[i]));
              gu[i + dims.w] += S(d);
              gu[i] -= S(d);
            }
            if (z + 1 < dims.d) {
              std::int64_t step = std::int64_t(dims.h) * dims.w;
              double d = k * (double(u[i + step]) - double(u[i]));
              gu[i + step] += S(d);
              gu[i] -= S(d);
            }
          }
    }
  }

  void affine_flow_backward(NodeT& n) {
    NodeT& tn = node(n.in[0]);
    Dims3 dims = n.shape.spatial();
    const std::int64_t nv = dims.voxels();
    double cx = 0.5 * (dims.w - 1), cy = 0.5 * (dims.h - 1),
           cz = 0.5 * (dims.d - 1);
    for (int r = 0; r < 3; ++r) {
      double gx = 0, gy = 0, gz = 0, gb = 0;
      const S* g = n.grad.data() + r * nv;
      std::int64_t i = 0;
      for (int z = 0; z < dims.d; ++z)
        for (int y = 0; y < dims.h; ++y)
          for (int x = 0; x < dims.w; ++x, ++i) {
            double gv = double(g[i]);
            gx += gv * (x - cx);
            gy += gv * (y - cy);
            gz += gv * (z - cz);
            gb += gv;
          }
      tn.grad[3 * r] += S(gx);
      tn.grad[3 * r + 1] += S(gy);
      tn.grad[3 * r + 2] += S(gz);
      tn.grad[9 + r] += S(gb);
    }
  }

  void ortho_backward(NodeT& n) {
    NodeT& tn = node(n.in[0]);
    const double g = double(n.grad[0]);
    if (g == 0) return;
    Mat3<double> m = theta_linear(tn);
    Mat3<double> gm =
        4.0 * m * (m.transpose() * m - Mat3<double>::Identity());
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) tn.grad[3 * r + c] += S(g * gm(r, c));
  }

  void det_backward(NodeT& n) {
    NodeT& tn = node(n.in[0]);
    const double g = double(n.grad[0]);
    if (g == 0) return;
    Mat3<double> m = theta_linear(tn);
    const double det = n.aux[0];
    // d det / d m = cofactor matrix.
    Mat3<double> cof;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        int r1 = (r + 1) % 3, r2 = (r + 2) % 3;
        int c1 = (c + 1) % 3, c2 = (c + 2) % 3;
        cof(r, c) = m(r1, c1) * m(r2, c2) - m(r1, c2) * m(r2, c1);
      }
    Mat3<double> gm = 2.0 * (det - 1) * cof;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) tn.grad[3 * r + c] += S(g * gm(r, c));
  }

  void backward_node(int id) {
    NodeT& n = nodes_[std::size_t(id)];
    switch (n.kind) {
      case OpKind::kInput:
      case OpKind::kParam:
        return;
      case OpKind::kConv:
        conv_backward(n);
        return;
      case OpKind::kDeconv:
        deconv_backward(n);
        return;
      case OpKind::kLeakyRelu: {
        NodeT& xn = node(n.in[0]);
        xn.grad += (xn.val > S(0)).select(n.grad, S(0.1) * n.grad);
        return;
      }
      case OpKind::kAdd:
        node(n.in[0]).grad += n.grad;
        node(n.in[1]).grad += n.grad;
        return;
      case OpKind::kScale:
        node(n.in[0]).grad += S(n.factor) * n.grad;
        return;
      case OpKind::kConcatC: {
        NodeT &an = node(n.in[0]), &bn = node(n.in[1]);
        an.grad += n.grad.head(an.val.size());
        bn.grad += n.grad.tail(bn.val.size());
        return;
      }
      case OpKind::kWarp:
        warp_backward(n);
        return;
      case OpKind::kCorrLoss:
        corr_backward(n);
        return;
      case OpKind::kTv2Loss:
        tv2_backward(n);
        return;
      case OpKind::kDense: {
        NodeT &xn = node(n.in[0]), &wn = node(n.in[1]), &bn = node(n.in[2]);
        const int rows = int(n.val.size());
        const std::int64_t cols = xn.val.size();
        for (int r = 0; r < rows; ++r) {
          S gr = n.grad[r];
          bn.grad[r] += gr;
          if (gr == S(0)) continue;
          const S* wr = wn.val.data() + std::int64_t(r) * cols;
          S* gwr = wn.grad.data() + std::int64_t(r) * cols;
          for (std::int64_t k = 0; k < cols; ++k) {
            gwr[k] += gr * xn.val[k];
            xn.grad[k] += gr * wr[k];
          }
        }
        return;
      }
      case OpKind::kAffineFlow:
        affine_flow_backward(n);
        return;
      case OpKind::kOrthoLoss:
        ortho_backward(n);
        return;
      case OpKind::kDetLoss:
        det_backward(n);
        return;
    }
  }

  std::vector<NodeT> nodes_;
  std::vector<int> param_ids_;
};

}  // namespace casreg
