#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "movia/tensor.hpp"

namespace movia {

// mt19937_64 with hand-rolled distributions. The standard library's
// distribution objects are implementation-defined, which would break
// reproducibility of stored datasets across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed), seed_(seed) {}

  // Derives an independent stream, e.g. one per clip id.
  Rng fork(uint64_t stream) const { return Rng(splitmix(seed_ ^ (0x9E3779B97F4A7C15ull * (stream + 1)))); }

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return gen_(); }

  double uniform() {  // [0, 1)
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(gen_() % span);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0, u2 = 0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  Tensor<T> normal_tensor(std::vector<int64_t> shape) {
    Tensor<T> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(normal());
    return t;
  }

  template <typename T>
  Tensor<T> uniform_tensor(std::vector<int64_t> shape, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
    return t;
  }

 private:
  static uint64_t splitmix(uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
  }

  std::mt19937_64 gen_;
  uint64_t seed_ = 0;
  bool have_spare_ = false;
  double spare_ = 0;
};

}  // namespace movia
