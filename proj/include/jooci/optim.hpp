#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "jooci/tensor.hpp"

namespace jooci {

// Decoupled weight decay Adam. Moments are kept per parameter with their own
// step count, so parameters that were frozen start from a fresh bias
// correction when they begin to train.
template <class T>
class AdamW {
 public:
  struct Slot {
    std::vector<T> m, v;
    std::uint64_t t = 0;
  };

  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(const std::string& name, Tensor<T>& p, double lr) {
    auto& s = slots_[name];
    if (s.m.empty()) s.m.assign(p.numel(), T(0)), s.v.assign(p.numel(), T(0));
    ++s.t;
    const double c1 = 1 - std::pow(b1_, static_cast<double>(s.t));
    const double c2 = 1 - std::pow(b2_, static_cast<double>(s.t));
    auto w = p.data();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      s.m[i] = static_cast<T>(b1_ * s.m[i] + (1 - b1_) * gi);
      s.v[i] = static_cast<T>(b2_ * s.v[i] + (1 - b2_) * gi * gi);
      const double mh = s.m[i] / c1, vh = s.v[i] / c2;
      w[i] = static_cast<T>(w[i] - lr * (mh / (std::sqrt(vh) + eps_) + wd_ * w[i]));
    }
  }

  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  double b1_, b2_, eps_, wd_;
  std::map<std::string, Slot> slots_;
};

}  // namespace jooci
