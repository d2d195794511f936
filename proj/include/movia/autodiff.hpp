#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "movia/tensor.hpp"

namespace movia {

// Reverse-mode autodiff over Tensor<T>. Graphs are built dynamically per
// forward pass; parameters are long-lived leaf nodes whose gradients
// accumulate across backward() calls until an optimizer zeroes them.

template <typename T>
struct VarNode;
template <typename T>
using Var = std::shared_ptr<VarNode<T>>;

template <typename T>
struct VarNode {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<Var<T>> parents;
  std::function<void(VarNode<T>&)> backward_fn;

  void ensure_grad() {
    if (!grad.same_shape(value)) grad = Tensor<T>(value.shape());
  }
  void add_grad(const Tensor<T>& g) {
    ensure_grad();
    for (int64_t i = 0; i < grad.numel(); ++i) grad[i] += g[i];
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_mode_flag(); }

// Disables graph construction in scope (sampling, evaluation).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <typename T>
Var<T> make_var(Tensor<T> v, bool requires_grad = false) {
  auto n = std::make_shared<VarNode<T>>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return n;
}

template <typename T>
Var<T> constant(Tensor<T> v) {
  return make_var(std::move(v), false);
}

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(VarNode<T>&)> back) {
  auto n = std::make_shared<VarNode<T>>();
  n->value = std::move(value);
  bool track = grad_enabled();
  if (track) {
    track = false;
    for (const auto& p : parents)
      if (p->requires_grad) track = true;
  }
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(back);
  }
  return n;
}

template <typename T>
void backward(const Var<T>& root) {
  check(root->value.numel() == 1, "backward: root must be a scalar");
  check(root->requires_grad, "backward: root does not require grad");

  // Postorder DFS along parent edges; the graph is a DAG by construction.
  std::vector<VarNode<T>*> order;
  std::vector<std::pair<VarNode<T>*, size_t>> stack;
  std::unordered_set<VarNode<T>*> seen;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& fr = stack.back();
    if (fr.second < fr.first->parents.size()) {
      VarNode<T>* p = fr.first->parents[fr.second++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(fr.first);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad.fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    VarNode<T>* n = *it;
    if (n->backward_fn && n->grad.numel() > 0) n->backward_fn(*n);
  }
}

// Value with the graph cut off.
template <typename T>
Var<T> detach(const Var<T>& x) {
  return constant(Tensor<T>(x->value));
}

/*------------------------------ elementwise -------------------------------*/

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor<T> out = Tensor<T>::uninit(a->value.shape());
  parallel_for(out.numel(), [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) out[i] = a->value[i] + b->value[i];
  }, 65536);
  return make_op<T>(std::move(out), {a, b}, [a, b](VarNode<T>& n) {
    if (a->requires_grad) a->add_grad(n.grad);
    if (b->requires_grad) b->add_grad(n.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](VarNode<T>& n) {
    if (a->requires_grad) a->add_grad(n.grad);
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor<T> out = Tensor<T>::uninit(a->value.shape());
  parallel_for(out.numel(), [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) out[i] = a->value[i] * b->value[i];
  }, 65536);
  return make_op<T>(std::move(out), {a, b}, [a, b](VarNode<T>& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, double s) {
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(a->value[i] * s);
  return make_op<T>(std::move(out), {a}, [a, s](VarNode<T>& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += static_cast<T>(n.grad[i] * s);
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, double s) {
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(a->value[i] + s);
  return make_op<T>(std::move(out), {a}, [a](VarNode<T>& n) { a->add_grad(n.grad); });
}

// Elementwise product with a fixed tensor (masks, frozen conditions).
template <typename T>
Var<T> mul_const(const Var<T>& a, Tensor<T> m) {
  check(a->value.same_shape(m), "mul_const: shape mismatch");
  Tensor<T> out(a->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * m[i];
  auto mm = std::make_shared<Tensor<T>>(std::move(m));
  return make_op<T>(std::move(out), {a}, [a, mm](VarNode<T>& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * (*mm)[i];
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = Tensor<T>::uninit(x->value.shape());
  parallel_for(out.numel(), [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      T v = x->value[i];
      out[i] = v / (T(1) + std::exp(-v));
    }
  }, 16384);
  return make_op<T>(std::move(out), {x}, [x](VarNode<T>& n) {
    x->ensure_grad();
    parallel_for(n.grad.numel(), [&](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) {
        T v = x->value[i];
        T s = T(1) / (T(1) + std::exp(-v));
        x->grad[i] += n.grad[i] * s * (T(1) + v * (T(1) - s));
      }
    }, 16384);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-x->value[i]));
  auto saved = std::make_shared<Tensor<T>>(out);
  return make_op<T>(std::move(out), {x}, [x, saved](VarNode<T>& n) {
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      T s = (*saved)[i];
      x->grad[i] += n.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Var<T> tanh_op(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(x->value[i]);
  auto saved = std::make_shared<Tensor<T>>(out);
  return make_op<T>(std::move(out), {x}, [x, saved](VarNode<T>& n) {
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      T t = (*saved)[i];
      x->grad[i] += n.grad[i] * (T(1) - t * t);
    }
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, double slope = 0.2) {
  Tensor<T> out(x->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = x->value[i] > 0 ? x->value[i] : static_cast<T>(x->value[i] * slope);
  return make_op<T>(std::move(out), {x}, [x, slope](VarNode<T>& n) {
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      x->grad[i] += x->value[i] > 0 ? n.grad[i] : static_cast<T>(n.grad[i] * slope);
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] > 0 ? x->value[i] : T(0);
  return make_op<T>(std::move(out), {x}, [x](VarNode<T>& n) {
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (x->value[i] > 0) x->grad[i] += n.grad[i];
  });
}

/*------------------------------- reductions -------------------------------*/

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  Tensor<T> out({1});
  out[0] = static_cast<T>(x->value.mean());
  int64_t n_elems = x->value.numel();
  return make_op<T>(std::move(out), {x}, [x, n_elems](VarNode<T>& n) {
    x->ensure_grad();
    T g = static_cast<T>(n.grad[0] / static_cast<double>(n_elems));
    for (int64_t i = 0; i < x->grad.numel(); ++i) x->grad[i] += g;
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  Tensor<T> out({1});
  out[0] = static_cast<T>(x->value.sum());
  return make_op<T>(std::move(out), {x}, [x](VarNode<T>& n) {
    x->ensure_grad();
    for (int64_t i = 0; i < x->grad.numel(); ++i) x->grad[i] += n.grad[0];
  });
}

// Mean over all elements of squared difference.
template <typename T>
Var<T> mse_loss(const Var<T>& a, const Var<T>& b) {
  check(a->value.same_shape(b->value), "mse_loss: shape mismatch");
  int64_t n_elems = a->value.numel();
  Tensor<T> out({1});
  double s = 0;
  for (int64_t i = 0; i < n_elems; ++i) {
    double d = static_cast<double>(a->value[i]) - static_cast<double>(b->value[i]);
    s += d * d;
  }
  out[0] = static_cast<T>(s / static_cast<double>(n_elems));
  return make_op<T>(std::move(out), {a, b}, [a, b, n_elems](VarNode<T>& n) {
    double g = 2.0 * n.grad[0] / static_cast<double>(n_elems);
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    for (int64_t i = 0; i < n_elems; ++i) {
      double d = static_cast<double>(a->value[i]) - static_cast<double>(b->value[i]);
      if (a->requires_grad) a->grad[i] += static_cast<T>(g * d);
      if (b->requires_grad) b->grad[i] -= static_cast<T>(g * d);
    }
  });
}

template <typename T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
  check(a->value.same_shape(b->value), "l1_loss: shape mismatch");
  int64_t n_elems = a->value.numel();
  Tensor<T> out({1});
  double s = 0;
  for (int64_t i = 0; i < n_elems; ++i)
    s += std::abs(static_cast<double>(a->value[i]) - static_cast<double>(b->value[i]));
  out[0] = static_cast<T>(s / static_cast<double>(n_elems));
  return make_op<T>(std::move(out), {a, b}, [a, b, n_elems](VarNode<T>& n) {
    double g = n.grad[0] / static_cast<double>(n_elems);
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    for (int64_t i = 0; i < n_elems; ++i) {
      double d = static_cast<double>(a->value[i]) - static_cast<double>(b->value[i]);
      T sg = static_cast<T>(d > 0 ? g : (d < 0 ? -g : 0.0));
      if (a->requires_grad) a->grad[i] += sg;
      if (b->requires_grad) b->grad[i] -= sg;
    }
  });
}

/*----------------------------- shape surgery ------------------------------*/

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int64_t> shape) {
  Tensor<T> out = x->value.reshaped(shape);
  return make_op<T>(std::move(out), {x}, [x](VarNode<T>& n) {
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) x->grad[i] += n.grad[i];
  });
}

// Concatenation along the last (channel) dimension.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  check(!xs.empty(), "concat_channels: empty input list");
  std::vector<int64_t> shape = xs[0]->value.shape();
  int64_t lead = xs[0]->value.numel() / shape.back();
  int64_t ctotal = 0;
  std::vector<int64_t> widths;
  for (const auto& x : xs) {
    const auto& s = x->value.shape();
    check(s.size() == shape.size(), "concat_channels: rank mismatch");
    for (size_t i = 0; i + 1 < s.size(); ++i)
      check(s[i] == shape[i], "concat_channels: leading-dim mismatch");
    widths.push_back(s.back());
    ctotal += s.back();
  }
  shape.back() = ctotal;
  Tensor<T> out(shape);
  for (int64_t r = 0; r < lead; ++r) {
    int64_t off = 0;
    for (size_t k = 0; k < xs.size(); ++k) {
      const T* src = xs[k]->value.data() + r * widths[k];
      std::copy(src, src + widths[k], out.data() + r * ctotal + off);
      off += widths[k];
    }
  }
  return make_op<T>(std::move(out), xs, [xs, widths, lead, ctotal](VarNode<T>& n) {
    for (size_t k = 0; k < xs.size(); ++k)
      if (xs[k]->requires_grad) xs[k]->ensure_grad();
    int64_t off = 0;
    for (size_t k = 0; k < xs.size(); ++k) {
      if (xs[k]->requires_grad) {
        for (int64_t r = 0; r < lead; ++r) {
          const T* g = n.grad.data() + r * ctotal + off;
          T* dst = xs[k]->grad.data() + r * widths[k];
          for (int64_t c = 0; c < widths[k]; ++c) dst[c] += g[c];
        }
      }
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int64_t c0, int64_t c1) {
  std::vector<int64_t> shape = x->value.shape();
  int64_t cin = shape.back();
  check(0 <= c0 && c0 < c1 && c1 <= cin, "slice_channels: bad range");
  int64_t lead = x->value.numel() / cin;
  shape.back() = c1 - c0;
  Tensor<T> out(shape);
  for (int64_t r = 0; r < lead; ++r) {
    const T* src = x->value.data() + r * cin + c0;
    std::copy(src, src + (c1 - c0), out.data() + r * (c1 - c0));
  }
  return make_op<T>(std::move(out), {x}, [x, c0, c1, cin, lead](VarNode<T>& n) {
    x->ensure_grad();
    for (int64_t r = 0; r < lead; ++r) {
      const T* g = n.grad.data() + r * (c1 - c0);
      T* dst = x->grad.data() + r * cin + c0;
      for (int64_t c = 0; c < c1 - c0; ++c) dst[c] += g[c];
    }
  });
}

// Adds a length-C vector to every position of a (..., C) tensor.
template <typename T>
Var<T> add_channel_vector(const Var<T>& x, const Var<T>& v) {
  int64_t c = x->value.shape().back();
  check(v->value.numel() == c, "add_channel_vector: vector length mismatch");
  int64_t lead = x->value.numel() / c;
  Tensor<T> out(x->value.shape());
  for (int64_t r = 0; r < lead; ++r)
    for (int64_t j = 0; j < c; ++j) out[r * c + j] = x->value[r * c + j] + v->value[j];
  return make_op<T>(std::move(out), {x, v}, [x, v, lead, c](VarNode<T>& n) {
    if (x->requires_grad) x->add_grad(n.grad);
    if (v->requires_grad) {
      v->ensure_grad();
      for (int64_t r = 0; r < lead; ++r)
        for (int64_t j = 0; j < c; ++j) v->grad[j] += n.grad[r * c + j];
    }
  });
}

}  // namespace movia
