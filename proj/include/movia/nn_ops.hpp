#pragma once

#include <Eigen/Core>

#include "movia/autodiff.hpp"
#include "movia/common.hpp"

namespace movia {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;
template <typename T>
using StrideMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStrideMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

/*-------------------------------- matmul ----------------------------------*/

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  check(a->value.rank() == 2 && b->value.rank() == 2, "matmul: rank-2 operands required");
  int64_t m = a->value.size(0), k = a->value.size(1), n = b->value.size(1);
  check(b->value.size(0) == k, "matmul: inner dimension mismatch");
  Tensor<T> out({m, n});
  MapM<T>(out.data(), m, n).noalias() =
      CMapM<T>(a->value.data(), m, k) * CMapM<T>(b->value.data(), k, n);
  return make_op<T>(std::move(out), {a, b}, [a, b, m, k, n](VarNode<T>& nd) {
    CMapM<T> g(nd.grad.data(), m, n);
    if (a->requires_grad) {
      a->ensure_grad();
      MapM<T>(a->grad.data(), m, k).noalias() += g * CMapM<T>(b->value.data(), k, n).transpose();
    }
    if (b->requires_grad) {
      b->ensure_grad();
      MapM<T>(b->grad.data(), k, n).noalias() += CMapM<T>(a->value.data(), m, k).transpose() * g;
    }
  });
}

// x: (N, In) rows; w: (In, Out); optional bias (Out).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = nullptr) {
  check(x->value.rank() >= 1 && w->value.rank() == 2, "linear: bad operand ranks");
  int64_t in = w->value.size(0), out_dim = w->value.size(1);
  check(x->value.shape().back() == in, "linear: input width mismatch");
  int64_t rows = x->value.numel() / in;
  std::vector<int64_t> oshape = x->value.shape();
  oshape.back() = out_dim;
  Tensor<T> out(oshape);
  MapM<T> o(out.data(), rows, out_dim);
  o.noalias() = CMapM<T>(x->value.data(), rows, in) * CMapM<T>(w->value.data(), in, out_dim);
  if (b) {
    check(b->value.numel() == out_dim, "linear: bias length mismatch");
    o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->value.data(), out_dim);
  }
  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  return make_op<T>(std::move(out), parents, [x, w, b, rows, in, out_dim](VarNode<T>& nd) {
    CMapM<T> g(nd.grad.data(), rows, out_dim);
    if (x->requires_grad) {
      x->ensure_grad();
      MapM<T>(x->grad.data(), rows, in).noalias() +=
          g * CMapM<T>(w->value.data(), in, out_dim).transpose();
    }
    if (w->requires_grad) {
      w->ensure_grad();
      MapM<T>(w->grad.data(), in, out_dim).noalias() +=
          CMapM<T>(x->value.data(), rows, in).transpose() * g;
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->grad.data(), out_dim) += g.colwise().sum();
    }
  });
}

/*------------------------------ convolutions ------------------------------*/

namespace conv_detail {

// im2col for one frame of an (H, W, Cin) tensor; rows are output pixels,
// columns run (ky, kx, cin). Out-of-bounds taps contribute zeros.
template <typename T>
void im2col(const T* x, int64_t h, int64_t w, int64_t cin, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t ho, int64_t wo, T* cols) {
  int64_t row_w = kh * kw * cin;
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      T* row = cols + (oy * wo + ox) * row_w;
      for (int64_t ky = 0; ky < kh; ++ky) {
        int64_t iy = oy * stride - pad + ky;
        for (int64_t kx = 0; kx < kw; ++kx) {
          int64_t ix = ox * stride - pad + kx;
          T* dst = row + (ky * kw + kx) * cin;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
            std::fill(dst, dst + cin, T(0));
          } else {
            const T* src = x + (iy * w + ix) * cin;
            std::copy(src, src + cin, dst);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int64_t h, int64_t w, int64_t cin, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t ho, int64_t wo, T* dx) {
  int64_t row_w = kh * kw * cin;
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      const T* row = cols + (oy * wo + ox) * row_w;
      for (int64_t ky = 0; ky < kh; ++ky) {
        int64_t iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int64_t kx = 0; kx < kw; ++kx) {
          int64_t ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          const T* src = row + (ky * kw + kx) * cin;
          T* dst = dx + (iy * w + ix) * cin;
          for (int64_t c = 0; c < cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace conv_detail

// Per-frame 2D convolution. x: (F, H, W, Cin), w: (kh, kw, Cin, Cout),
// bias optional (Cout). Zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
              int64_t stride = 1, int64_t pad = -1) {
  check(x->value.rank() == 4 && w->value.rank() == 4, "conv2d: bad ranks");
  int64_t f = x->value.size(0), h = x->value.size(1), wd = x->value.size(2), cin = x->value.size(3);
  int64_t kh = w->value.size(0), kw = w->value.size(1), cout = w->value.size(3);
  check(w->value.size(2) == cin, "conv2d: channel mismatch");
  if (pad < 0) pad = kh / 2;
  int64_t ho = (h + 2 * pad - kh) / stride + 1;
  int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  int64_t row_w = kh * kw * cin;

  // one cols matrix for all frames; GEMM rows are split across workers
  int64_t rows_per_frame = ho * wo;
  int64_t rows = f * rows_per_frame;
  Tensor<T> cols({rows, row_w});
  parallel_for(f, [&](int64_t f0, int64_t f1) {
    for (int64_t fi = f0; fi < f1; ++fi)
      conv_detail::im2col(x->value.data() + fi * h * wd * cin, h, wd, cin, kh, kw, stride, pad,
                          ho, wo, cols.data() + fi * rows_per_frame * row_w);
  });
  Tensor<T> out({f, ho, wo, cout});
  parallel_for(rows, [&](int64_t r0, int64_t r1) {
    MapM<T> o(out.data() + r0 * cout, r1 - r0, cout);
    o.noalias() = CMapM<T>(cols.data() + r0 * row_w, r1 - r0, row_w) *
                  CMapM<T>(w->value.data(), row_w, cout);
    if (b) o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->value.data(), cout);
  }, 512);

  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  return make_op<T>(std::move(out), parents,
                    [x, w, b, f, h, wd, cin, kh, kw, cout, stride, pad, ho, wo, row_w,
                     rows_per_frame, rows](VarNode<T>& nd) {
    if (x->requires_grad) x->ensure_grad();
    if (w->requires_grad) w->ensure_grad();
    if (b && b->requires_grad) b->ensure_grad();
    Tensor<T> cols({rows, row_w});
    if (w->requires_grad || x->requires_grad)
      parallel_for(f, [&](int64_t f0, int64_t f1) {
        for (int64_t fi = f0; fi < f1; ++fi)
          conv_detail::im2col(x->value.data() + fi * h * wd * cin, h, wd, cin, kh, kw, stride,
                              pad, ho, wo, cols.data() + fi * rows_per_frame * row_w);
      });
    CMapM<T> g(nd.grad.data(), rows, cout);
    if (w->requires_grad)
      MapM<T>(w->grad.data(), row_w, cout).noalias() +=
          CMapM<T>(cols.data(), rows, row_w).transpose() * g;
    if (b && b->requires_grad)
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->grad.data(), cout) += g.colwise().sum();
    if (x->requires_grad) {
      Tensor<T> dcols({rows, row_w});
      parallel_for(rows, [&](int64_t r0, int64_t r1) {
        MapM<T>(dcols.data() + r0 * row_w, r1 - r0, row_w).noalias() =
            CMapM<T>(nd.grad.data() + r0 * cout, r1 - r0, cout) *
            CMapM<T>(w->value.data(), row_w, cout).transpose();
      }, 512);
      parallel_for(f, [&](int64_t f0, int64_t f1) {
        for (int64_t fi = f0; fi < f1; ++fi)
          conv_detail::col2im_add(dcols.data() + fi * rows_per_frame * row_w, h, wd, cin, kh, kw,
                                  stride, pad, ho, wo, x->grad.data() + fi * h * wd * cin);
      });
    }
  });
}

// 1D convolution across frames at every pixel. x: (F, H, W, C),
// w: (kt, Cin, Cout). Zero padding in time.
template <typename T>
Var<T> conv1d_temporal(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  check(x->value.rank() == 4 && w->value.rank() == 3, "conv1d_temporal: bad ranks");
  int64_t f = x->value.size(0), h = x->value.size(1), wd = x->value.size(2), cin = x->value.size(3);
  int64_t kt = w->value.size(0), cout = w->value.size(2);
  check(w->value.size(1) == cin, "conv1d_temporal: channel mismatch");
  int64_t pad = kt / 2;
  int64_t hw = h * wd;

  Tensor<T> out({f, h, wd, cout});
  parallel_for(f, [&](int64_t f0, int64_t f1) {
    for (int64_t fo = f0; fo < f1; ++fo) {
      MapM<T> o(out.data() + fo * hw * cout, hw, cout);
      if (b)
        o.rowwise() = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->value.data(), cout);
      else
        o.setZero();
      for (int64_t k = 0; k < kt; ++k) {
        int64_t fi = fo - pad + k;
        if (fi < 0 || fi >= f) continue;
        o.noalias() += CMapM<T>(x->value.data() + fi * hw * cin, hw, cin) *
                       CMapM<T>(w->value.data() + k * cin * cout, cin, cout);
      }
    }
  });

  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  return make_op<T>(std::move(out), parents, [x, w, b, f, hw, cin, kt, cout](VarNode<T>& nd) {
    int64_t pad = kt / 2;
    if (x->requires_grad) x->ensure_grad();
    if (w->requires_grad) w->ensure_grad();
    if (b && b->requires_grad) b->ensure_grad();
    for (int64_t fo = 0; fo < f; ++fo) {
      CMapM<T> g(nd.grad.data() + fo * hw * cout, hw, cout);
      if (b && b->requires_grad)
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->grad.data(), cout) += g.colwise().sum();
      for (int64_t k = 0; k < kt; ++k) {
        int64_t fi = fo - pad + k;
        if (fi < 0 || fi >= f) continue;
        if (w->requires_grad)
          MapM<T>(w->grad.data() + k * cin * cout, cin, cout).noalias() +=
              CMapM<T>(x->value.data() + fi * hw * cin, hw, cin).transpose() * g;
        if (x->requires_grad)
          MapM<T>(x->grad.data() + fi * hw * cin, hw, cin).noalias() +=
              g * CMapM<T>(w->value.data() + k * cin * cout, cin, cout).transpose();
      }
    }
  });
}

// Full 3D convolution (the 3D discriminator path). x: (F, H, W, Cin),
// w: (kt, kh, kw, Cin, Cout); spatial and temporal strides, zero padding.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
              int64_t stride_s = 1, int64_t stride_t = 1) {
  check(x->value.rank() == 4 && w->value.rank() == 5, "conv3d: bad ranks");
  int64_t f = x->value.size(0), h = x->value.size(1), wd = x->value.size(2), cin = x->value.size(3);
  int64_t kt = w->value.size(0), kh = w->value.size(1), kw = w->value.size(2), cout = w->value.size(4);
  check(w->value.size(3) == cin, "conv3d: channel mismatch");
  int64_t pt = kt / 2, ps = kh / 2;
  int64_t fo = (f + 2 * pt - kt) / stride_t + 1;
  int64_t ho = (h + 2 * ps - kh) / stride_s + 1;
  int64_t wo = (wd + 2 * ps - kw) / stride_s + 1;
  int64_t row_w = kt * kh * kw * cin;

  auto fill_cols = [=](const Tensor<T>& src, Tensor<T>& cols) {
    for (int64_t of = 0; of < fo; ++of)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          T* row = cols.data() + ((of * ho + oy) * wo + ox) * row_w;
          for (int64_t ktau = 0; ktau < kt; ++ktau) {
            int64_t ifr = of * stride_t - pt + ktau;
            for (int64_t ky = 0; ky < kh; ++ky) {
              int64_t iy = oy * stride_s - ps + ky;
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t ix = ox * stride_s - ps + kx;
                T* dst = row + ((ktau * kh + ky) * kw + kx) * cin;
                if (ifr < 0 || ifr >= f || iy < 0 || iy >= h || ix < 0 || ix >= wd)
                  std::fill(dst, dst + cin, T(0));
                else {
                  const T* s = src.data() + ((ifr * h + iy) * wd + ix) * cin;
                  std::copy(s, s + cin, dst);
                }
              }
            }
          }
        }
  };

  Tensor<T> cols({fo * ho * wo, row_w});
  fill_cols(x->value, cols);
  Tensor<T> out({fo, ho, wo, cout});
  MapM<T> o(out.data(), fo * ho * wo, cout);
  o.noalias() = CMapM<T>(cols.data(), fo * ho * wo, row_w) * CMapM<T>(w->value.data(), row_w, cout);
  if (b) o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->value.data(), cout);

  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  return make_op<T>(std::move(out), parents,
                    [x, w, b, f, h, wd, cin, kt, kh, kw, cout, stride_s, stride_t, fo, ho, wo,
                     row_w, pt, ps, fill_cols](VarNode<T>& nd) {
    CMapM<T> g(nd.grad.data(), fo * ho * wo, cout);
    if (w->requires_grad || x->requires_grad) {
      Tensor<T> cols({fo * ho * wo, row_w});
      if (w->requires_grad) {
        fill_cols(x->value, cols);
        w->ensure_grad();
        MapM<T>(w->grad.data(), row_w, cout).noalias() +=
            CMapM<T>(cols.data(), fo * ho * wo, row_w).transpose() * g;
      }
      if (x->requires_grad) {
        x->ensure_grad();
        Tensor<T> dcols({fo * ho * wo, row_w});
        MapM<T>(dcols.data(), fo * ho * wo, row_w).noalias() =
            g * CMapM<T>(w->value.data(), row_w, cout).transpose();
        for (int64_t of = 0; of < fo; ++of)
          for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox) {
              const T* row = dcols.data() + ((of * ho + oy) * wo + ox) * row_w;
              for (int64_t ktau = 0; ktau < kt; ++ktau) {
                int64_t ifr = of * stride_t - pt + ktau;
                if (ifr < 0 || ifr >= f) continue;
                for (int64_t ky = 0; ky < kh; ++ky) {
                  int64_t iy = oy * stride_s - ps + ky;
                  if (iy < 0 || iy >= h) continue;
                  for (int64_t kx = 0; kx < kw; ++kx) {
                    int64_t ix = ox * stride_s - ps + kx;
                    if (ix < 0 || ix >= wd) continue;
                    const T* src = row + ((ktau * kh + ky) * kw + kx) * cin;
                    T* dst = x->grad.data() + ((ifr * h + iy) * wd + ix) * cin;
                    for (int64_t c = 0; c < cin; ++c) dst[c] += src[c];
                  }
                }
              }
            }
      }
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->grad.data(), cout) += g.colwise().sum();
    }
  });
}

/*------------------------------ normalization -----------------------------*/

// GroupNorm over (H, W, C/groups) per frame. x: (F, H, W, C); gamma, beta: (C).
template <typename T>
Var<T> group_norm(const Var<T>& x, int64_t groups, const Var<T>& gamma, const Var<T>& beta,
                  double eps = 1e-5) {
  check(x->value.rank() == 4, "group_norm: rank-4 input required");
  int64_t f = x->value.size(0), h = x->value.size(1), w = x->value.size(2), c = x->value.size(3);
  check(c % groups == 0, "group_norm: groups must divide channels");
  check(gamma->value.numel() == c && beta->value.numel() == c, "group_norm: affine size mismatch");
  int64_t cg = c / groups;
  int64_t hw = h * w;
  double m_count = static_cast<double>(hw * cg);

  Tensor<T> out = Tensor<T>::uninit(x->value.shape());
  auto mean_sd = std::make_shared<Tensor<T>>(Tensor<T>({f, groups, 2}));
  parallel_for(f, [&](int64_t fa, int64_t fb) {
  for (int64_t fi = fa; fi < fb; ++fi) {
    for (int64_t gidx = 0; gidx < groups; ++gidx) {
      double mu = 0;
      const T* base = x->value.data() + fi * hw * c;
      for (int64_t p = 0; p < hw; ++p)
        for (int64_t j = 0; j < cg; ++j) mu += base[p * c + gidx * cg + j];
      mu /= m_count;
      double var = 0;
      for (int64_t p = 0; p < hw; ++p)
        for (int64_t j = 0; j < cg; ++j) {
          double d = base[p * c + gidx * cg + j] - mu;
          var += d * d;
        }
      var /= m_count;
      double inv = 1.0 / std::sqrt(var + eps);
      (*mean_sd)(fi, gidx, 0) = static_cast<T>(mu);
      (*mean_sd)(fi, gidx, 1) = static_cast<T>(inv);
      T* ob = out.data() + fi * hw * c;
      for (int64_t p = 0; p < hw; ++p)
        for (int64_t j = 0; j < cg; ++j) {
          int64_t cc = gidx * cg + j;
          ob[p * c + cc] = static_cast<T>(((base[p * c + cc] - mu) * inv) * gamma->value[cc] +
                                          beta->value[cc]);
        }
    }
  }
  });

  return make_op<T>(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, mean_sd, f, groups, cg, c, hw, m_count](VarNode<T>& nd) {
    if (x->requires_grad) x->ensure_grad();
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    Tensor<T> affine_acc({f, c, 2});
    parallel_for(f, [&](int64_t fa, int64_t fb) {
    for (int64_t fi = fa; fi < fb; ++fi) {
      const T* xb = x->value.data() + fi * hw * c;
      const T* gb = nd.grad.data() + fi * hw * c;
      for (int64_t gidx = 0; gidx < groups; ++gidx) {
        double mu = (*mean_sd)(fi, gidx, 0);
        double inv = (*mean_sd)(fi, gidx, 1);
        // accumulate the two per-group reductions
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int64_t p = 0; p < hw; ++p)
          for (int64_t j = 0; j < cg; ++j) {
            int64_t cc = gidx * cg + j;
            double xhat = (xb[p * c + cc] - mu) * inv;
            double dxhat = static_cast<double>(gb[p * c + cc]) * gamma->value[cc];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            affine_acc(fi, cc, 0) += static_cast<T>(gb[p * c + cc] * xhat);
            affine_acc(fi, cc, 1) += gb[p * c + cc];
          }
        if (x->requires_grad) {
          double mean_dxhat = sum_dxhat / m_count;
          double mean_dxhat_xhat = sum_dxhat_xhat / m_count;
          T* dxb = x->grad.data() + fi * hw * c;
          for (int64_t p = 0; p < hw; ++p)
            for (int64_t j = 0; j < cg; ++j) {
              int64_t cc = gidx * cg + j;
              double xhat = (xb[p * c + cc] - mu) * inv;
              double dxhat = static_cast<double>(gb[p * c + cc]) * gamma->value[cc];
              dxb[p * c + cc] +=
                  static_cast<T>(inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
            }
        }
      }
    }
    });
    for (int64_t fi = 0; fi < f; ++fi)
      for (int64_t cc = 0; cc < c; ++cc) {
        if (gamma->requires_grad) gamma->grad[cc] += affine_acc(fi, cc, 0);
        if (beta->requires_grad) beta->grad[cc] += affine_acc(fi, cc, 1);
      }
  });
}

/*-------------------------------- attention -------------------------------*/

// Multi-head scaled dot-product attention over batched token matrices.
// q: (B, Nq, D), k/v: (B or 1, Nk, D). When k/v carry a single batch entry
// they are shared across all B query batches (key-frame tokens).
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int64_t heads) {
  check(q->value.rank() == 3 && k->value.rank() == 3 && v->value.rank() == 3,
        "attention: rank-3 operands required");
  int64_t bq = q->value.size(0), nq = q->value.size(1), d = q->value.size(2);
  int64_t bk = k->value.size(0), nk = k->value.size(1);
  check(k->value.size(2) == d && v->value.size(2) == d && v->value.size(0) == bk &&
            v->value.size(1) == nk,
        "attention: k/v shape mismatch");
  check(bk == bq || bk == 1, "attention: batch mismatch");
  check(d % heads == 0, "attention: heads must divide dim");
  int64_t dh = d / heads;
  double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor<T> out({bq, nq, d});
  // softmax(QK^T * sc) rows, saved for the backward pass
  auto probs = std::make_shared<Tensor<T>>(Tensor<T>({bq, heads, nq, nk}));

  parallel_for(bq, [&](int64_t b0, int64_t b1) {
    RowMat<T> s(nq, nk);
    for (int64_t bi = b0; bi < b1; ++bi) {
      int64_t bkv = (bk == 1) ? 0 : bi;
      for (int64_t hd = 0; hd < heads; ++hd) {
        CStrideMap<T> Q(q->value.data() + bi * nq * d + hd * dh, nq, dh, Eigen::OuterStride<>(d));
        CStrideMap<T> K(k->value.data() + bkv * nk * d + hd * dh, nk, dh, Eigen::OuterStride<>(d));
        CStrideMap<T> V(v->value.data() + bkv * nk * d + hd * dh, nk, dh, Eigen::OuterStride<>(d));
        s.noalias() = Q * K.transpose() * static_cast<T>(sc);
        for (int64_t r = 0; r < nq; ++r) {
          auto row = s.row(r).array();
          row = (row - row.maxCoeff()).exp();
          s.row(r) *= T(1) / row.sum();
        }
        MapM<T>(probs->data() + ((bi * heads + hd) * nq) * nk, nq, nk) = s;
        StrideMap<T> O(out.data() + bi * nq * d + hd * dh, nq, dh, Eigen::OuterStride<>(d));
        O.noalias() = s * V;
      }
    }
  });

  return make_op<T>(std::move(out), {q, k, v},
                    [q, k, v, probs, bq, bk, nq, nk, d, dh, heads, sc](VarNode<T>& nd) {
    if (q->requires_grad) q->ensure_grad();
    if (k->requires_grad) k->ensure_grad();
    if (v->requires_grad) v->ensure_grad();
    bool split_batch = (bk == bq);
    parallel_for(split_batch ? bq : heads, [&](int64_t w0, int64_t w1) {
    RowMat<T> dP(nq, nk), dS(nq, nk);
    for (int64_t bi = split_batch ? w0 : 0; bi < (split_batch ? w1 : bq); ++bi) {
      int64_t bkv = (bk == 1) ? 0 : bi;
      for (int64_t hd = split_batch ? 0 : w0; hd < (split_batch ? heads : w1); ++hd) {
        CMapM<T> P(probs->data() + ((bi * heads + hd) * nq) * nk, nq, nk);
        CStrideMap<T> Q(q->value.data() + bi * nq * d + hd * dh, nq, dh, Eigen::OuterStride<>(d));
        CStrideMap<T> K(k->value.data() + bkv * nk * d + hd * dh, nk, dh, Eigen::OuterStride<>(d));
        CStrideMap<T> V(v->value.data() + bkv * nk * d + hd * dh, nk, dh, Eigen::OuterStride<>(d));
        CStrideMap<T> dO(nd.grad.data() + bi * nq * d + hd * dh, nq, dh, Eigen::OuterStride<>(d));

        if (v->requires_grad) {
          StrideMap<T> dV(v->grad.data() + bkv * nk * d + hd * dh, nk, dh, Eigen::OuterStride<>(d));
          dV.noalias() += P.transpose() * dO;
        }
        dP.noalias() = dO * V.transpose();
        // softmax backward: dS = P .* (dP - rowsum(dP .* P))
        for (int64_t r = 0; r < nq; ++r) {
          T dot = dP.row(r).cwiseProduct(P.row(r)).sum();
          dS.row(r) = P.row(r).cwiseProduct(dP.row(r) - RowMat<T>::Constant(1, nk, dot));
        }
        dS *= static_cast<T>(sc);
        if (q->requires_grad) {
          StrideMap<T> dQ(q->grad.data() + bi * nq * d + hd * dh, nq, dh, Eigen::OuterStride<>(d));
          dQ.noalias() += dS * K;
        }
        if (k->requires_grad) {
          StrideMap<T> dK(k->grad.data() + bkv * nk * d + hd * dh, nk, dh, Eigen::OuterStride<>(d));
          dK.noalias() += dS.transpose() * Q;
        }
      }
    }
    });
  });
}

/*----------------------------- spatial resizing ---------------------------*/

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  check(x->value.rank() == 4, "upsample_nearest2x: rank-4 input required");
  int64_t f = x->value.size(0), h = x->value.size(1), w = x->value.size(2), c = x->value.size(3);
  Tensor<T> out({f, 2 * h, 2 * w, c});
  for (int64_t fi = 0; fi < f; ++fi)
    for (int64_t y = 0; y < 2 * h; ++y)
      for (int64_t xx = 0; xx < 2 * w; ++xx) {
        const T* src = &x->value(fi, y / 2, xx / 2, 0);
        T* dst = &out(fi, y, xx, 0);
        std::copy(src, src + c, dst);
      }
  return make_op<T>(std::move(out), {x}, [x, f, h, w, c](VarNode<T>& nd) {
    x->ensure_grad();
    for (int64_t fi = 0; fi < f; ++fi)
      for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t xx = 0; xx < 2 * w; ++xx) {
          const T* g = &nd.grad(fi, y, xx, 0);
          T* dst = &x->grad(fi, y / 2, xx / 2, 0);
          for (int64_t cc = 0; cc < c; ++cc) dst[cc] += g[cc];
        }
  });
}

template <typename T>
Var<T> avg_pool2d(const Var<T>& x, int64_t s) {
  check(x->value.rank() == 4, "avg_pool2d: rank-4 input required");
  int64_t f = x->value.size(0), h = x->value.size(1), w = x->value.size(2), c = x->value.size(3);
  check(h % s == 0 && w % s == 0, "avg_pool2d: size must divide H and W");
  int64_t ho = h / s, wo = w / s;
  double inv = 1.0 / static_cast<double>(s * s);
  Tensor<T> out({f, ho, wo, c});
  for (int64_t fi = 0; fi < f; ++fi)
    for (int64_t oy = 0; oy < ho; ++oy)
      for (int64_t ox = 0; ox < wo; ++ox)
        for (int64_t cc = 0; cc < c; ++cc) {
          double acc = 0;
          for (int64_t dy = 0; dy < s; ++dy)
            for (int64_t dx = 0; dx < s; ++dx) acc += x->value(fi, oy * s + dy, ox * s + dx, cc);
          out(fi, oy, ox, cc) = static_cast<T>(acc * inv);
        }
  return make_op<T>(std::move(out), {x}, [x, f, ho, wo, c, s, inv](VarNode<T>& nd) {
    x->ensure_grad();
    for (int64_t fi = 0; fi < f; ++fi)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox)
          for (int64_t cc = 0; cc < c; ++cc) {
            T g = static_cast<T>(nd.grad(fi, oy, ox, cc) * inv);
            for (int64_t dy = 0; dy < s; ++dy)
              for (int64_t dx = 0; dx < s; ++dx) x->grad(fi, oy * s + dy, ox * s + dx, cc) += g;
          }
  });
}

/*---------------------------- layout permutation --------------------------*/

// (F, H, W, C) -> (H*W, F, C); tokens per spatial site for temporal attention.
template <typename T>
Var<T> to_temporal_tokens(const Var<T>& x) {
  check(x->value.rank() == 4, "to_temporal_tokens: rank-4 input required");
  int64_t f = x->value.size(0), h = x->value.size(1), w = x->value.size(2), c = x->value.size(3);
  int64_t hw = h * w;
  Tensor<T> out({hw, f, c});
  for (int64_t fi = 0; fi < f; ++fi)
    for (int64_t p = 0; p < hw; ++p) {
      const T* src = x->value.data() + (fi * hw + p) * c;
      std::copy(src, src + c, out.data() + (p * f + fi) * c);
    }
  return make_op<T>(std::move(out), {x}, [x, f, hw, c](VarNode<T>& nd) {
    x->ensure_grad();
    for (int64_t fi = 0; fi < f; ++fi)
      for (int64_t p = 0; p < hw; ++p) {
        const T* g = nd.grad.data() + (p * f + fi) * c;
        T* dst = x->grad.data() + (fi * hw + p) * c;
        for (int64_t cc = 0; cc < c; ++cc) dst[cc] += g[cc];
      }
  });
}

// One frame of an (F, H, W, C) tensor as (H, W, C).
template <typename T>
Var<T> slice_frame(const Var<T>& x, int64_t f) {
  check(x->value.rank() == 4, "slice_frame: rank-4 input required");
  check(f >= 0 && f < x->value.size(0), "slice_frame: frame index out of range");
  int64_t n = x->value.numel() / x->value.size(0);
  Tensor<T> out = Tensor<T>::uninit({x->value.size(1), x->value.size(2), x->value.size(3)});
  std::copy(x->value.data() + f * n, x->value.data() + (f + 1) * n, out.data());
  return make_op<T>(std::move(out), {x}, [x, f, n](VarNode<T>& nd) {
    x->ensure_grad();
    T* dst = x->grad.data() + f * n;
    for (int64_t i = 0; i < n; ++i) dst[i] += nd.grad[i];
  });
}

// Stacks per-frame (H, W, C) tensors into (F, H, W, C).
template <typename T>
Var<T> stack_frames(const std::vector<Var<T>>& frames) {
  check(!frames.empty(), "stack_frames: empty list");
  int64_t n = frames[0]->value.numel();
  std::vector<int64_t> fs = frames[0]->value.shape();
  check(fs.size() == 3, "stack_frames: frames must be rank 3");
  Tensor<T> out = Tensor<T>::uninit({static_cast<int64_t>(frames.size()), fs[0], fs[1], fs[2]});
  for (size_t f = 0; f < frames.size(); ++f) {
    check(frames[f]->value.shape() == fs, "stack_frames: inconsistent frame shapes");
    std::copy(frames[f]->value.data(), frames[f]->value.data() + n, out.data() + int64_t(f) * n);
  }
  return make_op<T>(std::move(out), frames, [frames, n](VarNode<T>& nd) {
    for (size_t f = 0; f < frames.size(); ++f) {
      if (!frames[f]->requires_grad) continue;
      frames[f]->ensure_grad();
      const T* g = nd.grad.data() + int64_t(f) * n;
      T* dst = frames[f]->grad.data();
      for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
    }
  });
}

// Inverse of to_temporal_tokens.
template <typename T>
Var<T> from_temporal_tokens(const Var<T>& x, int64_t h, int64_t w) {
  check(x->value.rank() == 3, "from_temporal_tokens: rank-3 input required");
  int64_t hw = x->value.size(0), f = x->value.size(1), c = x->value.size(2);
  check(hw == h * w, "from_temporal_tokens: spatial size mismatch");
  Tensor<T> out({f, h, w, c});
  for (int64_t fi = 0; fi < f; ++fi)
    for (int64_t p = 0; p < hw; ++p) {
      const T* src = x->value.data() + (p * f + fi) * c;
      std::copy(src, src + c, out.data() + (fi * hw + p) * c);
    }
  return make_op<T>(std::move(out), {x}, [x, f, hw, c](VarNode<T>& nd) {
    x->ensure_grad();
    for (int64_t fi = 0; fi < f; ++fi)
      for (int64_t p = 0; p < hw; ++p) {
        const T* g = nd.grad.data() + (fi * hw + p) * c;
        T* dst = x->grad.data() + (p * f + fi) * c;
        for (int64_t cc = 0; cc < c; ++cc) dst[cc] += g[cc];
      }
  });
}

}  // namespace movia
