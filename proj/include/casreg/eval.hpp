#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "casreg/cascade.hpp"
#include "casreg/dataset.hpp"

namespace casreg {

/// Dice overlap 2|A∩B| / (|A|+|B|) for one label. Two empty regions agree
/// vacuously and score 1.
inline double dice(const Segmentation& a, const Segmentation& b, int label) {
  require_same_dims(a.dims, b.dims, "dice");
  std::int64_t na = 0, nb = 0, nab = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    bool ia = a.labels[i] == label, ib = b.labels[i] == label;
    na += ia;
    nb += ib;
    nab += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(nab) / double(na + nb);
}

/// Unweighted mean of dice over the union of nonzero labels present in
/// either segmentation; a label missing from one side scores against it.
inline double mean_dice(const Segmentation& a, const Segmentation& b) {
  require_same_dims(a.dims, b.dims, "mean_dice");
  std::set<int> labels;
  for (std::int32_t v : a.labels)
    if (v != 0) labels.insert(int(v));
  for (std::int32_t v : b.labels)
    if (v != 0) labels.insert(int(v));
  if (labels.empty())
    throw DataError("mean_dice: no nonzero labels in either segmentation");
  double sum = 0;
  for (int l : labels) sum += dice(a, b, l);
  return sum / double(labels.size());
}

/// Mean distance between fixed landmarks pushed through the flow and the
/// corresponding moving landmarks.
inline double landmark_distance(const FlowField& flow,
                                const LandmarkSet& fixed_lms,
                                const LandmarkSet& moving_lms) {
  if (fixed_lms.points.size() != moving_lms.points.size())
    throw ContractError("landmark_distance: count mismatch, " +
                        std::to_string(fixed_lms.points.size()) + " vs " +
                        std::to_string(moving_lms.points.size()));
  if (fixed_lms.points.empty())
    throw ContractError("landmark_distance: empty landmark sets");
  double sum = 0;
  for (std::size_t i = 0; i < fixed_lms.points.size(); ++i) {
    Vec3<double> p = transform_point(flow, fixed_lms.points[i]);
    sum += (p - moving_lms.points[i]).norm();
  }
  return sum / double(fixed_lms.points.size());
}

/// Mean Euclidean distance between predicted and reference displacements.
inline double endpoint_error(const FlowField& pred, const FlowField& gt) {
  require_same_dims(pred.dims, gt.dims, "endpoint_error");
  std::int64_t n = pred.dims.voxels();
  double sum = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    double dx = double(pred.disp[i]) - double(gt.disp[i]);
    double dy = double(pred.disp[n + i]) - double(gt.disp[n + i]);
    double dz = double(pred.disp[2 * n + i]) - double(gt.disp[2 * n + i]);
    sum += std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return sum / double(n);
}

struct PairEval {
  std::string name;
  bool ok = false;
  std::string error;
  std::map<int, double> dice_per_label;
  double mean_dice = 0;
  double landmark = 0;
  double similarity = 0;
  double folding = 0;
  bool has_epe = false;
  double epe = 0;
};

/// Mean and population standard deviation across instances.
struct MetricStats {
  double mean = 0;
  double stddev = 0;
  std::int64_t count = 0;
};

inline MetricStats metric_stats(const std::vector<double>& xs) {
  MetricStats s;
  s.count = std::int64_t(xs.size());
  if (xs.empty()) return s;
  double sum = 0;
  for (double x : xs) sum += x;
  s.mean = sum / double(xs.size());
  double sq = 0;
  for (double x : xs) sq += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(sq / double(xs.size()));
  return s;
}

struct EvalReport {
  std::string model_id;
  std::string schedule_id;
  std::vector<PairEval> pairs;
  MetricStats mean_dice;
  MetricStats landmark;
  MetricStats similarity;
  MetricStats folding;
  MetricStats epe;  // across pairs that carry gt_flow

  std::int64_t failed() const {
    std::int64_t n = 0;
    for (const auto& p : pairs) n += !p.ok;
    return n;
  }
};

inline void aggregate_report(EvalReport& rep) {
  std::vector<double> dices, lms, sims, folds, epes;
  for (const auto& p : rep.pairs) {
    if (!p.ok) continue;
    dices.push_back(p.mean_dice);
    lms.push_back(p.landmark);
    sims.push_back(p.similarity);
    folds.push_back(p.folding);
    if (p.has_epe) epes.push_back(p.epe);
  }
  rep.mean_dice = metric_stats(dices);
  rep.landmark = metric_stats(lms);
  rep.similarity = metric_stats(sims);
  rep.folding = metric_stats(folds);
  rep.epe = metric_stats(epes);
}

/// Evaluates one sample that is already in memory.
inline PairEval evaluate_pair(const CascadeModel& model,
                              const CascadeSchedule& schedule,
                              const SyntheticSample& s, bool has_gt,
                              const std::string& name) {
  PairEval pe;
  pe.name = name;
  RegistrationResult res =
      register_pair(model, schedule, s.moving, s.fixed, false);
  Segmentation warped_seg = warp_nearest(s.moving_seg, res.final_flow);
  std::set<int> labels;
  for (std::int32_t v : s.fixed_seg.labels)
    if (v != 0) labels.insert(int(v));
  for (std::int32_t v : warped_seg.labels)
    if (v != 0) labels.insert(int(v));
  if (labels.empty())
    throw DataError(name + ": no nonzero labels in either segmentation");
  double sum = 0;
  for (int l : labels) {
    double d = dice(warped_seg, s.fixed_seg, l);
    pe.dice_per_label[l] = d;
    sum += d;
  }
  pe.mean_dice = sum / double(labels.size());
  pe.landmark = landmark_distance(res.final_flow, s.fixed_lms, s.moving_lms);
  pe.similarity = res.similarity;
  pe.folding = res.folding;
  if (has_gt) {
    pe.has_epe = true;
    pe.epe = endpoint_error(res.final_flow, s.gt_flow);
  }
  pe.ok = true;
  return pe;
}

/// Registers and scores every sample; per-pair failures are recorded in the
/// report rather than aborting the run.
inline EvalReport evaluate(const CascadeModel& model,
                           const CascadeSchedule& schedule,
                           const std::vector<LoadedSample>& samples) {
  EvalReport rep;
  rep.schedule_id = "n=" + std::to_string(model.n()) +
                    " r=" + std::to_string(schedule.r) + " " +
                    to_string(schedule.mode);
  for (const auto& ls : samples) {
    std::string name = std::filesystem::path(ls.dir).filename().string();
    PairEval pe;
    pe.name = name;
    try {
      pe = evaluate_pair(model, schedule, ls.sample, ls.has_gt, name);
    } catch (const std::exception& e) {
      pe.ok = false;
      pe.error = e.what();
    }
    rep.pairs.push_back(std::move(pe));
  }
  aggregate_report(rep);
  return rep;
}

namespace eval_detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::vector<int> report_labels(const EvalReport& rep) {
  std::set<int> labels;
  for (const auto& p : rep.pairs)
    for (const auto& [l, d] : p.dice_per_label) labels.insert(l);
  return {labels.begin(), labels.end()};
}

}  // namespace eval_detail

/// One row per pair; failed pairs carry status "error" and empty metrics.
inline void write_report_tsv(const std::string& path, const EvalReport& rep) {
  auto labels = eval_detail::report_labels(rep);
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "pair\tstatus";
  for (int l : labels) os << "\tdice_" << l;
  os << "\tmean_dice\tlandmark\tsimilarity\tfolding\tepe\terror\n";
  for (const auto& p : rep.pairs) {
    os << p.name << '\t' << (p.ok ? "ok" : "error");
    if (p.ok) {
      for (int l : labels) {
        auto it = p.dice_per_label.find(l);
        os << '\t' << (it == p.dice_per_label.end()
                           ? ""
                           : eval_detail::fmt(it->second));
      }
      os << '\t' << eval_detail::fmt(p.mean_dice) << '\t'
         << eval_detail::fmt(p.landmark) << '\t'
         << eval_detail::fmt(p.similarity) << '\t'
         << eval_detail::fmt(p.folding) << '\t'
         << (p.has_epe ? eval_detail::fmt(p.epe) : "") << '\t';
    } else {
      for (std::size_t i = 0; i < labels.size() + 5; ++i) os << '\t';
      os << '\t' << p.error;
    }
    os << '\n';
  }
  if (!os) throw IoError("failed to write " + path);
}

/// Aggregate table, mean with standard deviation across instances.
inline void write_report_summary(const std::string& path,
                                 const EvalReport& rep) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  auto line = [&](const char* name, const MetricStats& s) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-12s %10.6f (%.6f)  n=%lld\n", name,
                  s.mean, s.stddev, static_cast<long long>(s.count));
    os << buf;
  };
  os << "model:    " << rep.model_id << "\n";
  os << "schedule: " << rep.schedule_id << "\n";
  os << "pairs:    " << rep.pairs.size() << " (" << rep.failed()
     << " failed)\n\n";
  os << "metric             mean (stddev)\n";
  line("mean_dice", rep.mean_dice);
  line("landmark", rep.landmark);
  line("similarity", rep.similarity);
  line("folding", rep.folding);
  if (rep.epe.count > 0) line("epe", rep.epe);
  for (const auto& p : rep.pairs)
    if (!p.ok) os << "\nfailed " << p.name << ": " << p.error << "\n";
  if (!os) throw IoError("failed to write " + path);
}

}  // namespace casreg
