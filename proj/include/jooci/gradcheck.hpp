#pragma once

// Central-difference gradient checking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jooci/rng.hpp"
#include "jooci/tensor.hpp"

namespace jooci {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Denominator floor: errors on gradients far below this are measured absolutely.
  double floor = 1e-4;
  // Elements sampled per tensor; 0 checks every element.
  std::size_t samples_per_tensor = 0;
  std::uint64_t seed = 7;
  // Five-point stencil: truncation error O(eps^4) instead of O(eps^2), for
  // losses whose third derivatives are large.
  bool fourth_order = false;
};

inline double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// `loss` builds a scalar from the current values of `inputs`. Analytic
// gradients come from one taped pass; numeric ones perturb each checked
// element by +-eps.
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& loss,
                                  std::vector<std::pair<std::string, Tensor<double>>> inputs,
                                  const GradCheckOptions& opt = {}) {
  for (auto& [name, t] : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    auto l = loss();
    backward(tape, l);
  }
  GradCheckResult res;
  Rng rng(opt.seed);
  for (auto& [name, t] : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.samples_per_tensor && idx.size() > opt.samples_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng.engine());
      idx.resize(opt.samples_per_tensor);
    }
    for (std::size_t i : idx) {
      NoGrad<double> guard;
      const double orig = t[i];
      auto at = [&](double offset) {
        t[i] = orig + offset;
        return loss().item();
      };
      double numeric = (at(opt.eps) - at(-opt.eps)) / (2 * opt.eps);
      if (opt.fourth_order)
        numeric = (4 * numeric - (at(2 * opt.eps) - at(-2 * opt.eps)) / (4 * opt.eps)) / 3;
      t[i] = orig;
      const double err = relative_error(analytic[i], numeric, opt.floor);
      ++res.checked;
      if (err > res.max_rel_error || res.worst_tensor.empty()) {
        if (err >= res.max_rel_error) {
          res.max_rel_error = err;
          res.worst_tensor = name;
          res.worst_index = i;
          res.analytic = analytic[i];
          res.numeric = numeric;
        }
      }
    }
    t.zero_grad();
  }
  return res;
}

}  // namespace jooci
