#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "movia/rng.hpp"
#include "movia/tensor.hpp"

namespace movia {

// Linear-beta schedule. alpha_bar is kept in double so the running product
// identity holds to machine precision.
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0;
  double beta_end = 0;
  std::vector<double> alphas;      // alphas[t-1] = alpha_t
  std::vector<double> alpha_bars;  // alpha_bars[t-1] = prod_{i<=t} alpha_i

  double alpha(int t) const {
    check(t >= 1 && t <= T, "NoiseSchedule::alpha: t out of [1,T]");
    return alphas[size_t(t - 1)];
  }
  // alpha_bar(0) == 1 by convention (the clean-data endpoint).
  double alpha_bar(int t) const {
    check(t >= 0 && t <= T, "NoiseSchedule::alpha_bar: t out of [0,T]");
    return t == 0 ? 1.0 : alpha_bars[size_t(t - 1)];
  }
};

inline NoiseSchedule build_schedule(int T, double beta_start = 1e-4, double beta_end = 2e-2) {
  check(T >= 1, "build_schedule: T must be >= 1");
  check(beta_start > 0 && beta_start < beta_end && beta_end < 1,
        "build_schedule: need 0 < beta_start < beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.alphas.resize(size_t(T));
  s.alpha_bars.resize(size_t(T));
  double bar = 1.0;
  for (int t = 1; t <= T; ++t) {
    double beta = T == 1 ? beta_start
                         : beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1);
    s.alphas[size_t(t - 1)] = 1.0 - beta;
    bar *= s.alphas[size_t(t - 1)];
    s.alpha_bars[size_t(t - 1)] = bar;
  }
  return s;
}

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
inline TensorF add_noise(const TensorF& x0, int t, const TensorF& eps, const NoiseSchedule& s) {
  check(t >= 1 && t <= s.T, "add_noise: t out of [1,T]");
  check(x0.same_shape(eps), "add_noise: x0/eps shape mismatch");
  double ab = s.alpha_bar(t);
  float a = static_cast<float>(std::sqrt(ab));
  float b = static_cast<float>(std::sqrt(1.0 - ab));
  TensorF out(x0.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

// Mean squared error over all elements; the training objective on predicted
// noise.
inline double eps_loss(const TensorF& eps, const TensorF& eps_hat) {
  return mean_sq_diff(eps, eps_hat);
}

// One ancestral step. At t = 1 the posterior mean is returned and `noise`
// is ignored.
inline TensorF ddpm_step(const TensorF& x_t, const TensorF& eps_hat, int t, const TensorF& noise,
                         const NoiseSchedule& s) {
  check(t >= 1 && t <= s.T, "ddpm_step: t out of [1,T]");
  check(x_t.same_shape(eps_hat), "ddpm_step: shape mismatch");
  double at = s.alpha(t);
  double ab_t = s.alpha_bar(t);
  double ab_prev = s.alpha_bar(t - 1);
  double coef = (1.0 - at) / std::sqrt(1.0 - ab_t);
  double inv_sqrt_a = 1.0 / std::sqrt(at);
  double sigma = t == 1 ? 0.0 : std::sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - at));
  TensorF out(x_t.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    double mu = inv_sqrt_a * (x_t[i] - coef * eps_hat[i]);
    out[i] = static_cast<float>(t == 1 ? mu : mu + sigma * noise[i]);
  }
  return out;
}

// Deterministic (sigma = 0) step from t to t_prev < t.
inline TensorF ddim_step(const TensorF& x_t, const TensorF& eps_hat, int t, int t_prev,
                         const NoiseSchedule& s) {
  check(t >= 1 && t <= s.T, "ddim_step: t out of [1,T]");
  check(t_prev >= 0 && t_prev < t, "ddim_step: need 0 <= t_prev < t");
  check(x_t.same_shape(eps_hat), "ddim_step: shape mismatch");
  double ab_t = s.alpha_bar(t);
  double ab_p = s.alpha_bar(t_prev);
  double inv_sqrt = 1.0 / std::sqrt(ab_t);
  double sq_om = std::sqrt(1.0 - ab_t);
  double a = std::sqrt(ab_p);
  double b = std::sqrt(1.0 - ab_p);
  TensorF out(x_t.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    double x0_hat = inv_sqrt * (x_t[i] - sq_om * eps_hat[i]);
    out[i] = static_cast<float>(a * x0_hat + b * eps_hat[i]);
  }
  return out;
}

// Evenly spaced ascending timesteps 1..T used by the ddim sampler.
inline std::vector<int> ddim_timesteps(int T, int steps) {
  check(steps >= 1 && steps <= T, "ddim_timesteps: need 1 <= steps <= T");
  std::vector<int> ts;
  if (steps == 1) {
    ts.push_back(T);
    return ts;
  }
  for (int i = 0; i < steps; ++i) {
    int t = 1 + static_cast<int>(std::llround(double(i) * double(T - 1) / double(steps - 1)));
    if (ts.empty() || ts.back() != t) ts.push_back(t);
  }
  return ts;
}

enum class SamplerKind { Ddpm, Ddim };

// Denoiser with its condition already bound.
using DenoiserFn = std::function<TensorF(const TensorF& x_t, int t)>;

// Full reverse pass from seeded Gaussian noise. Deterministic given the seed.
inline TensorF sample(const DenoiserFn& model, const std::vector<int64_t>& shape, int steps,
                      uint64_t seed, const NoiseSchedule& sched,
                      SamplerKind sampler = SamplerKind::Ddim) {
  check(steps >= 1 && steps <= sched.T, "sample: steps must lie in [1,T]");
  Rng rng(seed);
  TensorF x = rng.normal_tensor<float>(shape);
  if (sampler == SamplerKind::Ddim) {
    std::vector<int> ts = ddim_timesteps(sched.T, steps);
    for (size_t i = ts.size(); i-- > 0;) {
      int t = ts[i];
      int t_prev = i == 0 ? 0 : ts[i - 1];
      TensorF eps_hat = model(x, t);
      x = ddim_step(x, eps_hat, t, t_prev, sched);
    }
  } else {
    for (int t = sched.T; t >= 1; --t) {
      TensorF eps_hat = model(x, t);
      TensorF noise = t > 1 ? rng.normal_tensor<float>(shape) : TensorF(shape);
      x = ddpm_step(x, eps_hat, t, noise, sched);
    }
  }
  return x;
}

}  // namespace movia
