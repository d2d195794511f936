#pragma once

#include <cmath>
#include <vector>

#include "movia/autodiff.hpp"

namespace movia {

struct AdamConfig {
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with per-group learning-rate multipliers. Parameter order inside a
// group is fixed at registration, so updates are bitwise reproducible.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void add_group(const std::vector<Var<float>>& params, double lr_mult = 1.0) {
    for (const auto& p : params) {
      check(p && p->requires_grad, "Adam: group contains a non-trainable node");
      slots_.push_back({p, TensorF(p->value.shape()), TensorF(p->value.shape()), lr_mult});
    }
    group_mults_.push_back(lr_mult);
  }

  void zero_grad() {
    for (auto& s : slots_) {
      s.param->ensure_grad();
      s.param->grad.fill(0.f);
    }
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (auto& s : slots_) {
      if (!s.param->grad.same_shape(s.param->value)) continue;  // never touched
      double lr = cfg_.lr * s.lr_mult;
      TensorF& p = s.param->value;
      const TensorF& g = s.param->grad;
      for (int64_t i = 0; i < p.numel(); ++i) {
        double gi = g[i];
        s.m[i] = static_cast<float>(cfg_.beta1 * s.m[i] + (1 - cfg_.beta1) * gi);
        s.v[i] = static_cast<float>(cfg_.beta2 * s.v[i] + (1 - cfg_.beta2) * gi * gi);
        double mhat = s.m[i] / bc1;
        double vhat = s.v[i] / bc2;
        p[i] = static_cast<float>(p[i] - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  const std::vector<double>& group_mults() const { return group_mults_; }
  double base_lr() const { return cfg_.lr; }
  int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    Var<float> param;
    TensorF m, v;
    double lr_mult;
  };
  AdamConfig cfg_;
  std::vector<Slot> slots_;
  std::vector<double> group_mults_;
  int64_t t_ = 0;
};

}  // namespace movia
