#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "casreg/io.hpp"
#include "casreg/types.hpp"

namespace casreg {

// On-disk sample layout: one directory per sample holding fixed.rcv1,
// moving.rcv1, gt_flow.rcv1, fixed_seg.rcv1, moving_seg.rcv1,
// fixed_lms.txt, moving_lms.txt. gt_flow is optional on load.

inline void save_sample(const std::string& dir, const SyntheticSample& s) {
  std::filesystem::create_directories(dir);
  save_volume(s.fixed, dir + "/fixed.rcv1");
  save_volume(s.moving, dir + "/moving.rcv1");
  save_flow(s.gt_flow, dir + "/gt_flow.rcv1");
  save_segmentation(s.fixed_seg, dir + "/fixed_seg.rcv1");
  save_segmentation(s.moving_seg, dir + "/moving_seg.rcv1");
  save_landmarks(s.fixed_lms, dir + "/fixed_lms.txt");
  save_landmarks(s.moving_lms, dir + "/moving_lms.txt");
}

struct LoadedSample {
  std::string dir;
  SyntheticSample sample;
  bool has_gt = false;
};

inline LoadedSample load_sample(const std::string& dir) {
  LoadedSample out;
  out.dir = dir;
  out.sample.fixed = load_volume(dir + "/fixed.rcv1");
  out.sample.moving = load_volume(dir + "/moving.rcv1");
  out.sample.fixed_seg = load_segmentation(dir + "/fixed_seg.rcv1");
  out.sample.moving_seg = load_segmentation(dir + "/moving_seg.rcv1");
  out.sample.fixed_lms = load_landmarks(dir + "/fixed_lms.txt");
  out.sample.moving_lms = load_landmarks(dir + "/moving_lms.txt");
  if (std::filesystem::exists(dir + "/gt_flow.rcv1")) {
    out.sample.gt_flow = load_flow(dir + "/gt_flow.rcv1");
    out.has_gt = true;
  } else {
    out.sample.gt_flow = FlowField::zeros(out.sample.fixed.dims);
  }
  require_same_dims(out.sample.fixed.dims, out.sample.moving.dims,
                    dir.c_str());
  require_same_dims(out.sample.fixed.dims, out.sample.fixed_seg.dims,
                    dir.c_str());
  if (out.sample.fixed_lms.size() != out.sample.moving_lms.size())
    throw DataError(dir + ": landmark count mismatch");
  return out;
}

/// Sample subdirectories of a dataset directory, sorted by name so the
/// order is stable across runs and filesystems.
inline std::vector<std::string> list_sample_dirs(const std::string& data_dir) {
  if (!std::filesystem::is_directory(data_dir))
    throw IoError("not a directory: " + data_dir);
  std::vector<std::string> dirs;
  for (const auto& e : std::filesystem::directory_iterator(data_dir))
    if (e.is_directory() &&
        std::filesystem::exists(e.path() / "fixed.rcv1"))
      dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw DataError("no samples found in " + data_dir);
  return dirs;
}

}  // namespace casreg
