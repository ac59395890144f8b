// Acceptance gate for the registration engine. Each criterion prints one
// PASS/FAIL line; the exit status is nonzero if any criterion fails. All
// tolerances are pinned here.
//
//   1 gradient checks        per-op < 1e-4, end-to-end 2-cascade < 1e-3
//   2 warp oracles           hand oracles to 1e-6, composed-warp MAE < 5e-3
//   3 metric oracles         dice / landmark / tv2 / correlation invariance
//   4 cascade-count trend    dice up, gaps >= 0.005, endpoint error down
//   5 shared-weight sweep    similarity non-decreasing over r, dice guard
//   6 loss gating audit      no similarity node reads intermediate images
//   7 determinism            repeated train/eval runs are bit-identical
//   8 schedule oracle        1e-4 / 5e-5 / 2.5e-5 at the 0.6/0.8 breakpoints

#include <sys/wait.h>

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "casreg/checkpoint.hpp"
#include "casreg/eval.hpp"
#include "casreg/gradcheck.hpp"
#include "casreg/synth.hpp"
#include "casreg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace casreg;
using clk = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

int g_failures = 0;

template <class F>
void criterion(int idx, const char* name, F body) {
  auto t0 = clk::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.ok = false;
    o.detail = std::string("exception: ") + e.what();
  }
  double s = std::chrono::duration<double>(clk::now() - t0).count();
  std::printf("criterion %d  %-22s %s  (%.1f s)  %s\n", idx, name,
              o.ok ? "PASS" : "FAIL", s, o.detail.c_str());
  std::fflush(stdout);
  g_failures += !o.ok;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

ArrayX<double> randn(Rng& rng, std::int64_t n, double scale = 1.0) {
  ArrayX<double> out(n);
  for (std::int64_t i = 0; i < n; ++i) out[i] = scale * rng.normal();
  return out;
}

ArrayX<double> rand_range(Rng& rng, std::int64_t n, double lo, double hi) {
  ArrayX<double> out(n);
  for (std::int64_t i = 0; i < n; ++i) out[i] = rng.uniform(lo, hi);
  return out;
}

// Fixed-weight reduction to a scalar so tensor-valued ops can be checked.
int weighted_sum(Tape<double>& tape, int x, const ArrayX<double>& w) {
  int wid = tape.input(Shape::mat(1, w.size()), w);
  int bid = tape.input(Shape::vec(1), ArrayX<double>::Zero(1));
  return tape.dense(x, wid, bid);
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run_cli(const std::string& work, const std::string& args) {
  static int invocation = 0;
  std::string base = work + "/cli_" + std::to_string(invocation++);
  std::string cmd = std::string(CASREG_BIN) + " " + args + " > " + base +
                    ".out 2> " + base + ".err";
  int rc = std::system(cmd.c_str());
  return (rc != -1 && WIFEXITED(rc)) ? WEXITSTATUS(rc) : -1;
}

// Artifacts shared between criteria: the fixed test manifest, the trained
// models from the cascade-count trend, and their evaluations.
struct Shared {
  std::string work;
  std::string testset;
  std::vector<LoadedSample> manifest;
  std::vector<CascadeModel> models;  // n = 1, 2, 3 after criterion 4
  bool trained = false;

  TrainConfig train_cfg(int n) const {
    TrainConfig cfg;  // 2000 steps at 32^3, max_disp 4 by default
    cfg.cascades = n;
    cfg.base_channels = 8;
    cfg.seed = 1;
    return cfg;
  }
};

// ------------------------------------------------------------ criterion 1

Outcome check_gradients() {
  auto t0 = clk::now();
  Rng rng(5);
  double per_op = 0;
  std::string worst_op = "none";
  auto track = [&](const char* op, double rel) {
    if (rel > per_op) {
      per_op = rel;
      worst_op = op;
    }
  };
  GradCheckOptions opt;
  opt.max_coords = 40;

  {  // conv, stride 1 and 2
    ArrayX<double> img = randn(rng, 64), w = randn(rng, 27, 0.5),
                   b = randn(rng, 1);
    for (int stride : {1, 2}) {
      ArrayX<double> red = randn(rng, stride == 1 ? 64 : 8);
      auto build = [&](Tape<double>& t, const std::vector<ArrayX<double>>& in) {
        int x = t.input(Shape::tensor4(1, 4, 4, 4), in[0]);
        int wid = t.input(Shape::kernel5(1, 1, 3), in[1]);
        int bid = t.input(Shape::vec(1), in[2]);
        return std::pair{weighted_sum(t, t.conv(x, wid, bid, stride), red),
                         std::vector<int>{x, wid, bid}};
      };
      track("conv", grad_check(build, {img, w, b}, opt));
    }
  }
  {  // deconv
    ArrayX<double> img = randn(rng, 16), w = randn(rng, 2 * 64, 0.3),
                   b = randn(rng, 1), red = randn(rng, 64);
    auto build = [&](Tape<double>& t, const std::vector<ArrayX<double>>& in) {
      int x = t.input(Shape::tensor4(2, 2, 2, 2), in[0]);
      int wid = t.input(Shape::kernel5(2, 1, 4), in[1]);
      int bid = t.input(Shape::vec(1), in[2]);
      return std::pair{weighted_sum(t, t.deconv(x, wid, bid), red),
                       std::vector<int>{x, wid, bid}};
    };
    track("deconv", grad_check(build, {img, w, b}, opt));
  }
  {  // leaky_relu, inputs held off the kink at 0
    ArrayX<double> x = rand_range(rng, 64, 0.05, 1.5);
    for (std::int64_t i = 0; i < 64; i += 2) x[i] = -x[i];
    ArrayX<double> red = randn(rng, 64);
    auto build = [&](Tape<double>& t, const std::vector<ArrayX<double>>& in) {
      int id = t.input(Shape::tensor4(1, 4, 4, 4), in[0]);
      return std::pair{weighted_sum(t, t.leaky_relu(id), red),
                       std::vector<int>{id}};
    };
    track("leaky_relu", grad_check(build, {x}, opt));
  }
  {  // add, scale, concat
    ArrayX<double> a = randn(rng, 64), b = randn(rng, 64),
                   red2 = randn(rng, 128);
    ArrayX<double> red = randn(rng, 64);
    auto build = [&](Tape<double>& t, const std::vector<ArrayX<double>>& in) {
      int ia = t.input(Shape::tensor4(1, 4, 4, 4), in[0]);
      int ib = t.input(Shape::tensor4(1, 4, 4, 4), in[1]);
      int sum = weighted_sum(t, t.scale(t.add(ia, ib), 0.7), red);
      int cat = weighted_sum(t, t.concat_channels(ia, ib), red2);
      return std::pair{t.add(sum, cat), std::vector<int>{ia, ib}};
    };
    track("add/scale/concat", grad_check(build, {a, b}, opt));
  }
  {  // dense
    ArrayX<double> x = randn(rng, 24), w = randn(rng, 3 * 24, 0.4),
                   b = randn(rng, 3), red = randn(rng, 3);
    auto build = [&](Tape<double>& t, const std::vector<ArrayX<double>>& in) {
      int id = t.input(Shape::tensor4(3, 2, 2, 2), in[0]);
      int wid = t.input(Shape::mat(3, 24), in[1]);
      int bid = t.input(Shape::vec(3), in[2]);
      return std::pair{weighted_sum(t, t.dense(id, wid, bid), red),
                       std::vector<int>{id, wid, bid}};
    };
    track("dense", grad_check(build, {x, w, b}, opt));
  }
  {  // warp: image and flow inputs; displacements held off integer offsets
    ArrayX<double> img = randn(rng, 64);
    ArrayX<double> flow = rand_range(rng, 192, 0.2, 0.45);
    ArrayX<double> red = randn(rng, 64);
    auto build = [&](Tape<double>& t, const std::vector<ArrayX<double>>& in) {
      int id = t.input(Shape::tensor4(1, 4, 4, 4), in[0]);
      int fl = t.input(Shape::tensor4(3, 4, 4, 4), in[1]);
      return std::pair{weighted_sum(t, t.warp(id, fl), red),
                       std::vector<int>{id, fl}};
    };
    track("warp", grad_check(build, {img, flow}, opt));
  }
  {  // corr loss
    ArrayX<double> a = randn(rng, 64);
    ArrayX<double> b = 0.7 * a + randn(rng, 64, 0.3);
    auto build = [&](Tape<double>& t, const std::vector<ArrayX<double>>& in) {
      int ia = t.input(Shape::tensor4(1, 4, 4, 4), in[0]);
      int ib = t.input(Shape::tensor4(1, 4, 4, 4), in[1]);
      return std::pair{t.corr_loss(ia, ib), std::vector<int>{ia, ib}};
    };
    track("corr_loss", grad_check(build, {a, b}, opt));
  }
  {  // tv2 loss
    ArrayX<double> flow = randn(rng, 192, 0.5);
    auto build = [&](Tape<double>& t, const std::vector<ArrayX<double>>& in) {
      int fl = t.input(Shape::tensor4(3, 4, 4, 4), in[0]);
      return std::pair{t.tv2_loss(fl), std::vector<int>{fl}};
    };
    track("tv2_loss", grad_check(build, {flow}, opt));
  }
  {  // affine flow and the two regularizers, exhaustive over theta
    ArrayX<double> theta = randn(rng, 12, 0.1);
    ArrayX<double> red = randn(rng, 3 * 64);
    auto flow_build = [&](Tape<double>& t,
                          const std::vector<ArrayX<double>>& in) {
      int th = t.input(Shape::vec(12), in[0]);
      return std::pair{weighted_sum(t, t.affine_flow(th, cube(4)), red),
                       std::vector<int>{th}};
    };
    track("affine_flow", grad_check(flow_build, {theta}, opt));
    auto ortho_build = [&](Tape<double>& t,
                           const std::vector<ArrayX<double>>& in) {
      int th = t.input(Shape::vec(12), in[0]);
      return std::pair{t.ortho_loss(th), std::vector<int>{th}};
    };
    track("ortho_loss", grad_check(ortho_build, {theta}, opt));
    auto det_build = [&](Tape<double>& t,
                         const std::vector<ArrayX<double>>& in) {
      int th = t.input(Shape::vec(12), in[0]);
      return std::pair{t.det_loss(th), std::vector<int>{th}};
    };
    track("det_loss", grad_check(det_build, {theta}, opt));
  }

  // End-to-end: affine + 2 deformable cascades at 8^3, output layers biased
  // so no sampled flow sits on an integer warp kink, 60 sampled parameters.
  DeformableNetConfig dcfg{2, 4, 1};
  AffineNetConfig acfg{2, 4, 1};
  AffineNet<double> aff = init_affine<double>(derive_seed(77, 100), acfg);
  std::vector<DeformableNet<double>> casc;
  casc.push_back(init_deformable<double>(derive_seed(77, 200, 0), dcfg));
  casc.push_back(init_deformable<double>(derive_seed(77, 200, 1), dcfg));
  Rng hrng(17);
  for (auto& tns : aff.params.tensors) {
    if (tns.name == "head.w")
      for (std::int64_t i = 0; i < tns.value.size(); ++i)
        tns.value[i] = 0.002 * hrng.normal();
    if (tns.name == "head.b")
      for (std::int64_t i = 9; i < 12; ++i) tns.value[i] = 0.25;
  }
  for (auto& net : casc)
    for (auto& tns : net.params.tensors) {
      if (tns.name == "pred.w")
        for (std::int64_t i = 0; i < tns.value.size(); ++i)
          tns.value[i] = 0.01 * hrng.normal();
      if (tns.name == "pred.b") tns.value.setConstant(0.3);
    }

  Dims3 dims = cube(8);
  ArrayX<double> moving(512), fixed(512);
  std::int64_t vi = 0;
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x, ++vi) {
        moving[vi] = 0.5 + 0.3 * std::sin(0.9 * x + 0.4 * y) *
                               std::cos(0.7 * z - 0.3 * y);
        fixed[vi] = 0.5 + 0.3 * std::sin(0.9 * (x - 0.6) + 0.4 * (y + 0.4)) *
                              std::cos(0.7 * (z + 0.5) - 0.3 * y);
      }

  struct Picked {
    int net;  // -1 affine, 0/1 cascades
    std::size_t tensor;
  };
  auto index_of = [](const NetParams<double>& p, const std::string& name) {
    for (std::size_t k = 0; k < p.tensors.size(); ++k)
      if (p.tensors[k].name == name) return k;
    throw ContractError("missing tensor " + name);
  };
  std::vector<Picked> picked{{-1, index_of(aff.params, "head.w")},
                             {-1, index_of(aff.params, "enc0.w")},
                             {0, index_of(casc[0].params, "pred.w")},
                             {0, index_of(casc[0].params, "enc1.w")},
                             {1, index_of(casc[1].params, "pred.w")},
                             {1, index_of(casc[1].params, "dec0.w")}};
  std::vector<ArrayX<double>> init_vals;
  for (const auto& pk : picked) {
    const auto& p = pk.net < 0 ? aff.params : casc[std::size_t(pk.net)].params;
    init_vals.push_back(p.tensors[pk.tensor].value);
  }

  auto build = [&](Tape<double>& t, const std::vector<ArrayX<double>>& in) {
    AffineNet<double> a = aff;
    std::vector<DeformableNet<double>> c = casc;
    for (std::size_t k = 0; k < picked.size(); ++k) {
      auto& p =
          picked[k].net < 0 ? a.params : c[std::size_t(picked[k].net)].params;
      p.tensors[picked[k].tensor].value = in[k];
    }
    std::vector<int> aids = bind_params(a.params, t);
    std::vector<std::vector<int>> cids;
    for (auto& net : c) cids.push_back(bind_params(net.params, t));

    Shape vs = Shape::tensor4(1, dims.d, dims.h, dims.w);
    int mid = t.input(vs, moving);
    int fid = t.input(vs, fixed);
    int theta = affine_forward(a, t, aids, mid, fid);
    int cur = t.warp(mid, t.affine_flow(theta, dims));
    int total = t.scale(t.ortho_loss(theta), 0.1);
    total = t.add(total, t.scale(t.det_loss(theta), 0.1));
    for (std::size_t k = 0; k < c.size(); ++k) {
      int flow = deformable_forward(c[k], t, cids[k], cur, fid);
      cur = t.warp(cur, flow);
      total = t.add(total, t.scale(t.tv2_loss(flow), 0.5));
    }
    total = t.add(total, t.corr_loss(cur, fid));

    std::vector<int> checked;
    for (std::size_t k = 0; k < picked.size(); ++k) {
      const auto& ids =
          picked[k].net < 0 ? aids : cids[std::size_t(picked[k].net)];
      checked.push_back(ids[picked[k].tensor]);
    }
    return std::pair{total, checked};
  };

  GradCheckOptions e2e_opt;
  e2e_opt.max_coords = 10;  // 6 tensors x 10 coords
  // The composed model is piecewise smooth; the small step keeps each
  // central difference inside one smooth piece.
  e2e_opt.eps = 1e-5;
  double e2e = grad_check(build, init_vals, e2e_opt);

  double s = std::chrono::duration<double>(clk::now() - t0).count();
  bool ok = per_op < 1e-4 && e2e < 1e-3 && s < 120.0;
  return {ok, fmt("per-op %.2e (worst %s), e2e %.2e on 60 params", per_op,
                  worst_op.c_str(), e2e)};
}

// ------------------------------------------------------------ criterion 2

Outcome check_warp_oracles() {
  auto t0 = clk::now();
  Dims3 line{1, 1, 4};
  Volume v = Volume::zeros(line);
  v.voxels << 10, 20, 30, 40;

  auto const_x = [&](float ux) {
    FlowField f = FlowField::zeros(line);
    for (std::int64_t i = 0; i < 4; ++i) f.disp[i] = ux;
    return f;
  };
  double worst = 0;
  {
    Volume out = warp_linear(v, const_x(1.0f));
    const double expect[4] = {20, 30, 40, 40};
    for (int i = 0; i < 4; ++i)
      worst = std::max(worst, std::abs(double(out.voxels[i]) - expect[i]));
  }
  {
    Volume out = warp_linear(v, const_x(0.5f));
    const double expect[4] = {15, 25, 35, 40};
    for (int i = 0; i < 4; ++i)
      worst = std::max(worst, std::abs(double(out.voxels[i]) - expect[i]));
  }

  // Successive vs composed warping on ten smooth synthetic pairs, using the
  // generator's own flow family (small affine then smooth deformation).
  Dims3 dims = cube(32);
  double max_mae = 0;
  for (int i = 0; i < 10; ++i) {
    std::uint64_t seed = derive_seed(2024, 7, std::uint64_t(i));
    SyntheticSample s = generate_pair(seed, dims, 4.0, 0.05);
    Rng rng(derive_seed(seed, 9));
    AffineTransformT<float> aff;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        aff.linear(r, c) = float((r == c ? 1 : 0) + rng.uniform(-0.05, 0.05));
    for (int c = 0; c < 3; ++c)
      aff.translation[c] = float(rng.uniform(-0.4, 0.4));
    FlowField u1 = affine_to_flow(aff, dims);
    FlowField u2 = smooth_random_flow(derive_seed(seed, 11), dims, 8.0, 4.0);

    Volume seq = warp_linear(warp_linear(s.moving, u1), u2);
    Volume once = warp_linear(s.moving, compose(u1, u2));
    max_mae = std::max(
        max_mae, double((seq.voxels - once.voxels).abs().mean()));
  }

  double s = std::chrono::duration<double>(clk::now() - t0).count();
  bool ok = worst <= 1e-6 && max_mae < 5e-3 && s < 60.0;
  return {ok, fmt("oracle err %.2e, composed-warp MAE %.2e over 10 pairs",
                  worst, max_mae)};
}

// ------------------------------------------------------------ criterion 3

Outcome check_metric_oracles() {
  bool ok = true;
  std::string bad;
  auto expect = [&](bool cond, const char* what) {
    if (!cond) {
      ok = false;
      bad += bad.empty() ? what : std::string("; ") + what;
    }
  };

  // Dice: identical / disjoint / half-overlapping 2x2x2 boxes in 4^3.
  auto box_seg = [](int x0) {
    Segmentation s = Segmentation::zeros(cube(4));
    for (int z = 0; z < 2; ++z)
      for (int y = 0; y < 2; ++y)
        for (int x = x0; x < x0 + 2; ++x)
          s.labels[std::size_t((z * 4 + y) * 4 + x)] = 1;
    return s;
  };
  expect(dice(box_seg(0), box_seg(0), 1) == 1.0, "dice identical != 1");
  expect(dice(box_seg(0), box_seg(2), 1) == 0.0, "dice disjoint != 0");
  expect(dice(box_seg(0), box_seg(1), 1) == 0.5, "dice half != 0.5");

  // Landmarks: aligned, matched by a +2x flow, and misaligned by 2 voxels.
  LandmarkSet p0, p2;
  p0.points = {{1, 1, 1}, {2, 3, 1}};
  p2.points = {{3, 1, 1}, {4, 3, 1}};
  FlowField zero = FlowField::zeros(cube(8));
  FlowField plus2 = FlowField::zeros(cube(8));
  for (std::int64_t i = 0; i < cube(8).voxels(); ++i) plus2.disp[i] = 2.0f;
  expect(landmark_distance(zero, p0, p0) == 0.0, "landmark aligned != 0");
  expect(landmark_distance(plus2, p0, p2) == 0.0, "landmark matched != 0");
  expect(std::abs(landmark_distance(zero, p0, p2) - 2.0) < 1e-12,
         "landmark offset != 2");

  // tv2 stencil: u_x = [0, 1] on a (1,1,2) lattice has one forward
  // difference of 1 across 3 channels.
  {
    Tape<double> t;
    ArrayX<double> u = ArrayX<double>::Zero(6);
    u[1] = 1.0;
    int fl = t.input(Shape::tensor4(3, 1, 1, 2), u);
    double v = t.node(t.tv2_loss(fl)).val[0];
    expect(std::abs(v - 1.0 / 3.0) < 1e-12, "tv2 stencil != 1/3");
  }

  // Correlation loss is invariant to positive affine intensity maps.
  {
    Tape<double> t;
    Rng rng(31);
    ArrayX<double> a = randn(rng, 512);
    ArrayX<double> b = 2.0 * a + 3.0;
    int ia = t.input(Shape::tensor4(1, 8, 8, 8), a);
    int ib = t.input(Shape::tensor4(1, 8, 8, 8), b);
    double v = t.node(t.corr_loss(ia, ib)).val[0];
    expect(v < 1e-6, "corr loss(2a+3) >= 1e-6");
  }

  return {ok, ok ? "dice 1/0/0.5, landmark 0/0/2, tv2 1/3, cc(2a+3) ok" : bad};
}

// ------------------------------------------------------------ criterion 4

struct TrendRow {
  double dice = 0, epe = 0, sim = 0;
  std::int64_t failed = 0;
};

Outcome check_cascade_trend(Shared& sh) {
  auto t0 = clk::now();
  if (run_cli(sh.work, "synth --seed 42 --count 20 --dims 32 --max-disp 4"
                       " --out " + sh.testset) != 0)
    return {false, "test manifest synthesis failed"};
  for (const auto& dir : list_sample_dirs(sh.testset))
    sh.manifest.push_back(load_sample(dir));
  if (sh.manifest.size() != 20) return {false, "manifest is not 20 pairs"};

  std::vector<TrendRow> rows;
  for (int n : {1, 2, 3}) {
    TrainConfig cfg = sh.train_cfg(n);
    CascadeModel model = init_model(cfg.seed, cfg.cascades, cfg.affine_cfg(),
                                    cfg.deformable_cfg());
    AdamState st;
    st.init_for(model);
    TrainHooks hooks;
    hooks.on_step = [&](const StepLog& s) {
      if ((s.step + 1) % 500 == 0)
        std::fprintf(stderr, "  [trend] n=%d step %lld/%lld loss %.4f\n", n,
                     static_cast<long long>(s.step + 1),
                     static_cast<long long>(cfg.total_steps), s.loss);
    };
    train(model, st, cfg, hooks);

    CascadeSchedule sched = expand_shared(model, 1, ExpandMode::kPerCascade);
    EvalReport rep = evaluate(model, sched, sh.manifest);
    rows.push_back(
        {rep.mean_dice.mean, rep.epe.mean, rep.similarity.mean, rep.failed()});
    sh.models.push_back(std::move(model));
  }
  sh.trained = true;

  double s = std::chrono::duration<double>(clk::now() - t0).count();
  bool ok = rows[0].failed == 0 && rows[1].failed == 0 && rows[2].failed == 0;
  ok = ok && rows[2].dice > rows[1].dice && rows[1].dice > rows[0].dice;
  ok = ok && rows[2].dice - rows[1].dice >= 0.005 &&
       rows[1].dice - rows[0].dice >= 0.005;
  ok = ok && rows[2].epe < rows[1].epe && rows[1].epe < rows[0].epe;
  ok = ok && s < 5400.0;
  return {ok, fmt("dice %.4f/%.4f/%.4f epe %.4f/%.4f/%.4f for n=1/2/3",
                  rows[0].dice, rows[1].dice, rows[2].dice, rows[0].epe,
                  rows[1].epe, rows[2].epe)};
}

// ------------------------------------------------------------ criterion 5

Outcome check_shared_weight_sweep(const Shared& sh) {
  if (!sh.trained) return {false, "requires the trained n=3 model"};
  const CascadeModel& model = sh.models[2];
  double sim[3], dce[3], fold[3];
  for (int r = 1; r <= 3; ++r) {
    CascadeSchedule sched = expand_shared(model, r, ExpandMode::kPerCascade);
    EvalReport rep = evaluate(model, sched, sh.manifest);
    if (rep.failed() != 0) return {false, fmt("r=%d evaluation failed", r)};
    sim[r - 1] = rep.similarity.mean;
    dce[r - 1] = rep.mean_dice.mean;
    fold[r - 1] = rep.folding.mean;
  }
  bool ok = sim[1] >= sim[0] - 1e-4 && sim[2] >= sim[1] - 1e-4 &&
            dce[1] >= dce[0] - 0.002;
  return {ok, fmt("sim %.6f/%.6f/%.6f dice %.4f/%.4f fold %.5f/%.5f/%.5f",
                  sim[0], sim[1], sim[2], dce[0], dce[1], fold[0], fold[1],
                  fold[2])};
}

// ------------------------------------------------------------ criterion 6

Outcome check_loss_gating() {
  // Toy-size graphs; the audit is structural, not numerical.
  for (int n : {1, 2, 3}) {
    CascadeModel m = init_model(3, n, AffineNetConfig{2, 2, 1},
                                DeformableNetConfig{2, 2, 1});
    Tape<float> tape;
    BoundModel bound = bind_model(m, tape);
    Rng rng(derive_seed(50, std::uint64_t(n)));
    ArrayX<float> mv(512), fx(512);
    for (std::int64_t i = 0; i < 512; ++i) {
      mv[i] = float(rng.uniform(0, 1));
      fx[i] = float(rng.uniform(0, 1));
    }
    Shape vs = Shape::tensor4(1, 8, 8, 8);
    int mid = tape.input(vs, mv);
    int fid = tape.input(vs, fx);
    CascadeSchedule sched = expand_shared(m, 1, ExpandMode::kPerCascade);
    CascadeOutputs out = forward(m, bound, sched, tape, mid, fid, true);
    total_loss(tape, out, fid, LossWeights{});
    if (!similarity_gating_holds(tape, out))
      return {false, fmt("similarity reads an intermediate image at n=%d", n)};

    // The audit must also be able to detect a violation.
    if (n > 1) {
      tape.corr_loss(out.warped.front(), fid);
      if (similarity_gating_holds(tape, out))
        return {false, "audit missed a planted violation"};
    }
  }
  return {true, "no similarity node reads intermediates for n=1/2/3"};
}

// ------------------------------------------------------------ criterion 7

Outcome check_determinism(const Shared& sh) {
  json cfg{{"total_steps", 5},    {"batch_size", 1},
           {"cascades", 2},       {"dim", 32},
           {"levels", 4},         {"base_channels", 2},
           {"seed", 11},          {"data_dir", sh.testset},
           {"checkpoint_every", 3}};
  std::string cfg_path = sh.work + "/det_config.json";
  std::ofstream(cfg_path) << cfg.dump(2) << "\n";

  for (const char* out : {"det_a", "det_b"})
    if (run_cli(sh.work, "train --config " + cfg_path + " --out " + sh.work +
                             "/" + out) != 0)
      return {false, "cmd_train failed"};
  bool train_same =
      slurp(sh.work + "/det_a/checkpoint_final.rck1") ==
          slurp(sh.work + "/det_b/checkpoint_final.rck1") &&
      slurp(sh.work + "/det_a/checkpoint_000003.rck1") ==
          slurp(sh.work + "/det_b/checkpoint_000003.rck1") &&
      !slurp(sh.work + "/det_a/checkpoint_final.rck1").empty();

  std::string ckpt = sh.work + "/det_a/checkpoint_final.rck1";
  for (const char* out : {"ev_a", "ev_b"})
    if (run_cli(sh.work, "eval --checkpoint " + ckpt + " --data " +
                             sh.testset + " --out " + sh.work + "/" + out) !=
        0)
      return {false, "cmd_eval failed"};
  bool eval_same = slurp(sh.work + "/ev_a/report.tsv") ==
                       slurp(sh.work + "/ev_b/report.tsv") &&
                   slurp(sh.work + "/ev_a/summary.txt") ==
                       slurp(sh.work + "/ev_b/summary.txt") &&
                   !slurp(sh.work + "/ev_a/report.tsv").empty();

  bool ok = train_same && eval_same;
  return {ok, fmt("checkpoints %s, reports %s",
                  train_same ? "bit-identical" : "DIFFER",
                  eval_same ? "bit-identical" : "DIFFER")};
}

// ------------------------------------------------------------ criterion 8

Outcome check_schedule_oracle() {
  TrainConfig cfg;
  cfg.total_steps = 100000;
  cfg.base_lr = 1e-4;
  bool ok = lr_schedule(0, cfg) == 1e-4 && lr_schedule(59999, cfg) == 1e-4 &&
            lr_schedule(60000, cfg) == 5e-5 &&
            lr_schedule(79999, cfg) == 5e-5 &&
            lr_schedule(80000, cfg) == 2.5e-5 &&
            lr_schedule(99999, cfg) == 2.5e-5;
  return {ok, "1e-4 / 5e-5 / 2.5e-5 at steps 60000 and 80000 of 100000"};
}

}  // namespace

int main() {
  Shared sh;
  sh.work = (fs::temp_directory_path() /
             ("casreg_acceptance_" + std::to_string(::getpid())))
                .string();
  sh.testset = sh.work + "/testset";
  fs::create_directories(sh.work);

  criterion(1, "gradient checks", [] { return check_gradients(); });
  criterion(2, "warp oracles", [] { return check_warp_oracles(); });
  criterion(3, "metric oracles", [] { return check_metric_oracles(); });
  criterion(4, "cascade-count trend", [&] { return check_cascade_trend(sh); });
  criterion(5, "shared-weight sweep",
            [&] { return check_shared_weight_sweep(sh); });
  criterion(6, "loss gating audit", [] { return check_loss_gating(); });
  criterion(7, "determinism", [&] { return check_determinism(sh); });
  criterion(8, "schedule oracle", [] { return check_schedule_oracle(); });

  fs::remove_all(sh.work);
  if (g_failures) {
    std::printf("%d criteria FAILED\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
