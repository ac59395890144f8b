#pragma once

#include <utility>
#include <vector>

#include "casreg/rng.hpp"
#include "casreg/tape.hpp"

namespace casreg {

struct GradCheckOptions {
  double eps = 1e-3;
  int max_coords = 200;  // per checked input, sampled deterministically
  std::uint64_t seed = 42;
};

/// Central-difference gradient verification, always in 64-bit.
///
/// `build` receives a fresh tape plus the current input arrays and must
/// return {loss node id, node id per input}; it must be a pure function of
/// the inputs. Returns the maximum relative error
/// |g_analytic - g_numeric| / max(1e-8, |g_analytic| + |g_numeric|) over all
/// checked coordinates.
template <class Builder>
double grad_check(Builder build, std::vector<ArrayX<double>> inputs,
                  GradCheckOptions opt = {}) {
  std::vector<ArrayX<double>> analytic;
  {
    Tape<double> tape;
    auto [loss, ids] = build(tape, inputs);
    tape.backward(loss);
    for (int id : ids) analytic.push_back(tape.node(id).grad);
  }

  auto loss_at = [&]() {
    Tape<double> tape;
    auto [loss, ids] = build(tape, inputs);
    (void)ids;
    return double(tape.node(loss).val[0]);
  };

  Rng rng(derive_seed(opt.seed, 0x67636be6));
  double max_rel = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::int64_t n = inputs[k].size();
    std::vector<std::int64_t> coords;
    if (n <= opt.max_coords) {
      coords.resize(std::size_t(n));
      for (std::int64_t j = 0; j < n; ++j) coords[std::size_t(j)] = j;
    } else {
      std::vector<char> taken(std::size_t(n), 0);
      while (coords.size() < std::size_t(opt.max_coords)) {
        std::int64_t j = rng.uniform_int(int(n));
        if (!taken[std::size_t(j)]) {
          taken[std::size_t(j)] = 1;
          coords.push_back(j);
        }
      }
    }
    for (std::int64_t j : coords) {
      double keep = inputs[k][j];
      inputs[k][j] = keep + opt.eps;
      double up = loss_at();
      inputs[k][j] = keep - opt.eps;
      double down = loss_at();
      inputs[k][j] = keep;
      double numeric = (up - down) / (2 * opt.eps);
      double ana = analytic[k][j];
      double rel =
          std::abs(ana - numeric) / std::max(1e-8, std::abs(ana) + std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace casreg
