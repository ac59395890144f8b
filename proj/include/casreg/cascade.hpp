#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "casreg/flow_ops.hpp"
#include "casreg/nets.hpp"
#include "casreg/tape.hpp"

namespace casreg {

/// Affine top-level cascade plus n deformable cascades. Cascade k always
/// consumes the output of cascade k-1, never the original moving image.
struct CascadeModel {
  AffineNet<float> affine;
  std::vector<DeformableNet<float>> cascades;

  int n() const { return int(cascades.size()); }
};

inline CascadeModel init_model(std::uint64_t seed, int n,
                               AffineNetConfig aff_cfg = {},
                               DeformableNetConfig def_cfg = {}) {
  if (n < 1) throw ConfigError("init_model: need at least one cascade");
  CascadeModel m;
  m.affine = init_affine<float>(derive_seed(seed, 100), aff_cfg);
  for (int k = 0; k < n; ++k)
    m.cascades.push_back(
        init_deformable<float>(derive_seed(seed, 200, std::uint64_t(k)), def_cfg));
  return m;
}

/// Model tensors in registration order (affine net first, then each cascade),
/// names prefixed by their slot. This order is normative for checkpoints and
/// optimizer state.
inline std::vector<std::pair<std::string, ParamTensor<float>*>> model_tensors(
    CascadeModel& m) {
  std::vector<std::pair<std::string, ParamTensor<float>*>> out;
  for (auto& t : m.affine.params.tensors) out.emplace_back("affine." + t.name, &t);
  for (int k = 0; k < m.n(); ++k)
    for (auto& t : m.cascades[std::size_t(k)].params.tensors)
      out.emplace_back("cascade" + std::to_string(k + 1) + "." + t.name, &t);
  return out;
}

enum class ExpandMode { kPlain, kPerCascade, kWholeBlock };

inline std::string to_string(ExpandMode m) {
  switch (m) {
    case ExpandMode::kPlain: return "plain";
    case ExpandMode::kPerCascade: return "per_cascade";
    case ExpandMode::kWholeBlock: return "whole_block";
  }
  return "?";
}

inline ExpandMode expand_mode_from_string(const std::string& s) {
  if (s == "plain") return ExpandMode::kPlain;
  if (s == "per_cascade") return ExpandMode::kPerCascade;
  if (s == "whole_block") return ExpandMode::kWholeBlock;
  throw ConfigError("unknown expansion mode: " + s);
}

/// Test-time execution order over the model's deformable cascades, by index,
/// possibly with repetition. No parameters are copied.
struct CascadeSchedule {
  std::vector<int> order;
  ExpandMode mode = ExpandMode::kPlain;
  int r = 1;
};

inline CascadeSchedule expand_shared(const CascadeModel& m, int r,
                                     ExpandMode mode) {
  if (r < 1) throw ConfigError("expand_shared: r must be >= 1");
  CascadeSchedule s;
  s.r = r;
  s.mode = r == 1 ? ExpandMode::kPlain : mode;
  if (r == 1 || mode == ExpandMode::kPlain) {
    for (int k = 0; k < m.n(); ++k) s.order.push_back(k);
    if (r > 1)
      throw ConfigError("expand_shared: plain mode requires r == 1");
    return s;
  }
  if (mode == ExpandMode::kPerCascade) {
    for (int k = 0; k < m.n(); ++k)
      for (int j = 0; j < r; ++j) s.order.push_back(k);
  } else {
    for (int j = 0; j < r; ++j)
      for (int k = 0; k < m.n(); ++k) s.order.push_back(k);
  }
  return s;
}

/// One tape-parameter binding of the whole model. Schedule entries that
/// repeat a cascade reuse its binding, which is exactly what shares weights.
struct BoundModel {
  std::vector<int> affine_ids;
  std::vector<std::vector<int>> cascade_ids;
};

inline BoundModel bind_model(const CascadeModel& m, Tape<float>& tape) {
  BoundModel b;
  b.affine_ids = bind_params(m.affine.params, tape);
  for (const auto& c : m.cascades)
    b.cascade_ids.push_back(bind_params(c.params, tape));
  return b;
}

/// Node ids out of one forward pass. flows[0] is the affine flow; flows[k]
/// for k >= 1 is the k-th executed deformable cascade's prediction.
/// warped[k] is I_m^(k) with warped[0] the affine-warped moving image.
struct CascadeOutputs {
  int theta = -1;
  std::vector<int> flows;
  std::vector<int> warped;
  int final_warped = -1;
};

/// Forward recursion: affine first on (I_m, I_f), then each scheduled
/// cascade on (previous warped, I_f). Inputs are expected normalized to
/// [0, 1]. With record=false only the final warped id is kept in `warped`.
inline CascadeOutputs forward(const CascadeModel& m, const BoundModel& bound,
                              const CascadeSchedule& schedule,
                              Tape<float>& tape, int moving, int fixed,
                              bool record = true) {
  Dims3 dims = tape.node(moving).shape.spatial();
  CascadeOutputs out;
  out.theta = affine_forward(m.affine, tape, bound.affine_ids, moving, fixed);
  int aff_flow = tape.affine_flow(out.theta, dims);
  out.flows.push_back(aff_flow);
  int cur = tape.warp(moving, aff_flow);
  if (record) out.warped.push_back(cur);
  for (int k : schedule.order) {
    int flow = deformable_forward(m.cascades[std::size_t(k)], tape,
                                  bound.cascade_ids[std::size_t(k)], cur, fixed);
    out.flows.push_back(flow);
    cur = tape.warp(cur, flow);
    if (record) out.warped.push_back(cur);
  }
  if (!record) out.warped.push_back(cur);
  out.final_warped = cur;
  return out;
}

struct LossWeights {
  double lambda_tv = 0.5;
  double lambda_ortho = 0.1;
  double lambda_det = 0.1;
};

/// Loss node ids plus their forward values. Logged components are the
/// weighted contributions, so total == sim + tv2 + ortho + det exactly.
struct LossTerms {
  int total = -1;
  int sim = -1;
  std::vector<int> tv2;
  int ortho = -1;
  int det = -1;
  double total_v = 0, sim_v = 0, tv2_v = 0, ortho_v = 0, det_v = 0;
};

/// Joint unsupervised loss: similarity on the final warped image only, L2
/// variation on every deformable flow (never the affine flow), and the
/// affine orthogonality/determinant regularizers.
inline LossTerms total_loss(Tape<float>& tape, const CascadeOutputs& out,
                            int fixed, const LossWeights& w) {
  LossTerms t;
  t.sim = tape.corr_loss(out.final_warped, fixed);
  t.sim_v = double(tape.node(t.sim).val[0]);
  int acc = t.sim;
  for (std::size_t k = 1; k < out.flows.size(); ++k) {
    int tv = tape.tv2_loss(out.flows[k]);
    t.tv2.push_back(tv);
    t.tv2_v += w.lambda_tv * double(tape.node(tv).val[0]);
    acc = tape.add(acc, tape.scale(tv, w.lambda_tv));
  }
  auto [ortho, det] = affine_reg_losses(tape, out.theta);
  t.ortho = ortho;
  t.det = det;
  t.ortho_v = w.lambda_ortho * double(tape.node(ortho).val[0]);
  t.det_v = w.lambda_det * double(tape.node(det).val[0]);
  acc = tape.add(acc, tape.scale(ortho, w.lambda_ortho));
  acc = tape.add(acc, tape.scale(det, w.lambda_det));
  t.total = acc;
  t.total_v = double(tape.node(t.total).val[0]);
  return t;
}

/// Graph audit for the defining contract: no similarity node may read any
/// intermediate warped image; similarity is measured on the final warped
/// image only.
inline bool similarity_gating_holds(const Tape<float>& tape,
                                    const CascadeOutputs& out) {
  std::vector<int> intermediates(out.warped.begin(),
                                 out.warped.end() - (out.warped.empty() ? 0 : 1));
  for (int id = 0; id < tape.size(); ++id) {
    const auto& n = tape.node(id);
    if (n.kind != OpKind::kCorrLoss) continue;
    for (int in : n.in)
      for (int bad : intermediates)
        if (in == bad) return false;
  }
  return true;
}

/// Pearson correlation coefficient over all voxels, with the same epsilon
/// guard as the loss (constant input gives 0).
template <class Scalar>
double correlation_coefficient(const VolumeT<Scalar>& a,
                               const VolumeT<Scalar>& b) {
  require_same_dims(a.dims, b.dims, "correlation_coefficient");
  const std::int64_t n = a.voxels.size();
  double mu_a = 0, mu_b = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    mu_a += double(a.voxels[i]);
    mu_b += double(b.voxels[i]);
  }
  mu_a /= double(n);
  mu_b /= double(n);
  double cov = 0, va = 0, vb = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    double da = double(a.voxels[i]) - mu_a;
    double db = double(b.voxels[i]) - mu_b;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  cov /= double(n);
  double sig = std::sqrt(va / double(n)) * std::sqrt(vb / double(n));
  return cov / (sig + Tape<float>::kCorrEps);
}

/// Full registration output. final_flow is the fold of compose over the
/// per-cascade flows with the affine flow earliest; final_warped is the raw
/// moving image resampled once through final_flow.
struct RegistrationResult {
  FlowField final_flow;
  Volume final_warped;
  std::vector<FlowField> flows;
  std::vector<Volume> warped;  // normalized-intensity chain, when recorded
  double similarity = 0;
  double folding = 0;
};

namespace cascade_detail {

inline FlowField node_flow(const Tape<float>& tape, int id) {
  const auto& n = tape.node(id);
  FlowField f = FlowField::zeros(n.shape.spatial());
  f.disp = n.val;
  return f;
}

inline Volume node_volume(const Tape<float>& tape, int id) {
  const auto& n = tape.node(id);
  Volume v = Volume::zeros(n.shape.spatial());
  v.voxels = n.val;
  return v;
}

}  // namespace cascade_detail

/// Inference-only registration of one pair (raw intensities in, raw warped
/// image out; the nets see unit-normalized copies).
inline RegistrationResult register_pair(const CascadeModel& m,
                                        const CascadeSchedule& schedule,
                                        const Volume& moving,
                                        const Volume& fixed,
                                        bool keep_intermediates = false) {
  require_same_dims(moving.dims, fixed.dims, "register_pair");
  Tape<float> tape;
  BoundModel bound = bind_model(m, tape);
  Volume mn = normalize_unit(moving), fn = normalize_unit(fixed);
  Shape vs = Shape::tensor4(1, moving.dims.d, moving.dims.h, moving.dims.w);
  int mid = tape.input(vs, mn.voxels);
  int fid = tape.input(vs, fn.voxels);
  CascadeOutputs out = forward(m, bound, schedule, tape, mid, fid, true);

  RegistrationResult res;
  for (int id : out.flows)
    res.flows.push_back(cascade_detail::node_flow(tape, id));
  res.final_flow = res.flows[0];
  for (std::size_t k = 1; k < res.flows.size(); ++k)
    res.final_flow = compose(res.final_flow, res.flows[k]);
  res.final_warped = warp_linear(moving, res.final_flow);
  res.similarity = correlation_coefficient(res.final_warped, fixed);
  res.folding = folding_fraction(res.final_flow);
  if (keep_intermediates)
    for (int id : out.warped)
      res.warped.push_back(cascade_detail::node_volume(tape, id));
  return res;
}

}  // namespace casreg
