#pragma once

#include <Eigen/Core>

#include "movia/autodiff.hpp"
#include "movia/nn_ops.hpp"
#include "movia/tensor.hpp"

namespace movia {

// Backward warping: output(p) = bilinear sample of `source` at p + flow(p).
// Flow channels are (dx, dy) with x the column index. A pixel is valid when
// its sample point lies inside [0, W-1] x [0, H-1]; invalid pixels are
// zero-filled.

template <typename T>
struct WarpResult {
  Tensor<T> warped;    // (H, W, K)
  Tensor<T> validity;  // (H, W, 1), values in {0, 1}
};

namespace warp_detail {

// Bilinear corner setup for a sample point (sx, sy). Returns false when the
// point is out of bounds.
template <typename T>
inline bool corners(double sx, double sy, int64_t h, int64_t w, int64_t& x0, int64_t& y0,
                    int64_t& x1, int64_t& y1, double& fx, double& fy) {
  if (!(sx >= 0.0 && sx <= static_cast<double>(w - 1) && sy >= 0.0 &&
        sy <= static_cast<double>(h - 1)))
    return false;
  x0 = static_cast<int64_t>(std::floor(sx));
  y0 = static_cast<int64_t>(std::floor(sy));
  if (x0 >= w - 1) x0 = w - 1;
  if (y0 >= h - 1) y0 = h - 1;
  fx = sx - static_cast<double>(x0);
  fy = sy - static_cast<double>(y0);
  x1 = std::min<int64_t>(x0 + 1, w - 1);
  y1 = std::min<int64_t>(y0 + 1, h - 1);
  return true;
}

}  // namespace warp_detail

template <typename T>
WarpResult<T> warp(const Tensor<T>& source, const Tensor<T>& flow) {
  check(source.rank() == 3 && flow.rank() == 3 && flow.size(2) == 2,
        "warp: source must be (H,W,K) and flow (H,W,2)");
  check(source.size(0) == flow.size(0) && source.size(1) == flow.size(1),
        "warp: source/flow grid mismatch " + source.shape_str() + " vs " + flow.shape_str());
  check(flow.all_finite(), "warp: flow contains NaN/Inf");
  int64_t h = source.size(0), w = source.size(1), k = source.size(2);
  WarpResult<T> res{Tensor<T>({h, w, k}), Tensor<T>({h, w, 1})};
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double sx = static_cast<double>(x) + flow(y, x, 0);
      double sy = static_cast<double>(y) + flow(y, x, 1);
      int64_t x0, y0, x1, y1;
      double fx, fy;
      if (!warp_detail::corners<T>(sx, sy, h, w, x0, y0, x1, y1, fx, fy)) continue;
      res.validity(y, x, 0) = T(1);
      double w00 = (1 - fx) * (1 - fy), w10 = fx * (1 - fy);
      double w01 = (1 - fx) * fy, w11 = fx * fy;
      for (int64_t c = 0; c < k; ++c) {
        res.warped(y, x, c) = static_cast<T>(w00 * source(y0, x0, c) + w10 * source(y0, x1, c) +
                                             w01 * source(y1, x0, c) + w11 * source(y1, x1, c));
      }
    }
  }
  return res;
}

// Autodiff backward warp on one frame; gradients reach both the source
// feature map and the flow field. Invalid pixels stay zero with zero grad.
template <typename T>
Var<T> warp_op(const Var<T>& source, const Var<T>& flow) {
  const Tensor<T>& sv = source->value;
  const Tensor<T>& fv = flow->value;
  check(sv.rank() == 3 && fv.rank() == 3 && fv.size(2) == 2, "warp_op: bad shapes");
  check(sv.size(0) == fv.size(0) && sv.size(1) == fv.size(1), "warp_op: grid mismatch");
  int64_t h = sv.size(0), w = sv.size(1), k = sv.size(2);
  Tensor<T> out({h, w, k});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double sx = static_cast<double>(x) + fv(y, x, 0);
      double sy = static_cast<double>(y) + fv(y, x, 1);
      int64_t x0, y0, x1, y1;
      double fx, fy;
      if (!warp_detail::corners<T>(sx, sy, h, w, x0, y0, x1, y1, fx, fy)) continue;
      for (int64_t c = 0; c < k; ++c)
        out(y, x, c) = static_cast<T>((1 - fx) * (1 - fy) * sv(y0, x0, c) +
                                      fx * (1 - fy) * sv(y0, x1, c) +
                                      (1 - fx) * fy * sv(y1, x0, c) + fx * fy * sv(y1, x1, c));
    }
  return make_op<T>(std::move(out), {source, flow}, [source, flow, h, w, k](VarNode<T>& nd) {
    const Tensor<T>& sv = source->value;
    const Tensor<T>& fv = flow->value;
    if (source->requires_grad) source->ensure_grad();
    if (flow->requires_grad) flow->ensure_grad();
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double sx = static_cast<double>(x) + fv(y, x, 0);
        double sy = static_cast<double>(y) + fv(y, x, 1);
        int64_t x0, y0, x1, y1;
        double fx, fy;
        if (!warp_detail::corners<T>(sx, sy, h, w, x0, y0, x1, y1, fx, fy)) continue;
        double gdx = 0, gdy = 0;
        for (int64_t c = 0; c < k; ++c) {
          double g = nd.grad(y, x, c);
          if (source->requires_grad) {
            source->grad(y0, x0, c) += static_cast<T>(g * (1 - fx) * (1 - fy));
            source->grad(y0, x1, c) += static_cast<T>(g * fx * (1 - fy));
            source->grad(y1, x0, c) += static_cast<T>(g * (1 - fx) * fy);
            source->grad(y1, x1, c) += static_cast<T>(g * fx * fy);
          }
          if (flow->requires_grad) {
            gdx += g * ((sv(y0, x1, c) - sv(y0, x0, c)) * (1 - fy) +
                        (sv(y1, x1, c) - sv(y1, x0, c)) * fy);
            gdy += g * ((sv(y1, x0, c) - sv(y0, x0, c)) * (1 - fx) +
                        (sv(y1, x1, c) - sv(y0, x1, c)) * fx);
          }
        }
        if (flow->requires_grad) {
          flow->grad(y, x, 0) += static_cast<T>(gdx);
          flow->grad(y, x, 1) += static_cast<T>(gdy);
        }
      }
  });
}

/*--------------------------- deformable sampling --------------------------*/

// Modulated deformable convolution driven by a fixed base flow. For each
// output pixel p and tap k of a kh x kw kernel, the reference feature is
// bilinearly sampled at p + base_flow(p) + kernel_offset_k + offset_k(p),
// scaled by modulation_k(p), then combined through the tap weights.
// Out-of-bounds taps use zero padding with partial bilinear corners, so
// gradients stay well-defined near the border.
//   ref:        (h, w, cin)       sampled feature map
//   base_flow:  (h, w, 2)         fixed, not differentiated
//   offsets:    (h, w, 2*K)       (dx, dy) per tap
//   modulation: (h, w, K)
//   weight:     (K*cin, cout), bias: (cout)
template <typename T>
Var<T> deform_conv(const Var<T>& ref, const Tensor<T>& base_flow, const Var<T>& offsets,
                   const Var<T>& modulation, const Var<T>& weight, const Var<T>& bias,
                   int64_t kh, int64_t kw) {
  int64_t h = ref->value.size(0), w = ref->value.size(1), cin = ref->value.size(2);
  int64_t kk = kh * kw;
  check(base_flow.rank() == 3 && base_flow.size(0) == h && base_flow.size(1) == w &&
            base_flow.size(2) == 2,
        "deform_conv: base_flow shape mismatch");
  check(offsets->value.size(0) == h && offsets->value.size(1) == w &&
            offsets->value.size(2) == 2 * kk,
        "deform_conv: offsets shape mismatch");
  check(modulation->value.size(0) == h && modulation->value.size(1) == w &&
            modulation->value.size(2) == kk,
        "deform_conv: modulation shape mismatch");
  check(weight->value.size(0) == kk * cin, "deform_conv: weight rows mismatch");
  int64_t cout = weight->value.size(1);
  int64_t hw = h * w;

  auto sample_pos = [&](int64_t p, int64_t k, const Tensor<T>& off) -> std::pair<double, double> {
    int64_t y = p / w, x = p % w;
    int64_t ky = k / kw - kh / 2, kx = k % kw - kw / 2;
    double sx = static_cast<double>(x + kx) + base_flow(y, x, 0) + off(y, x, 2 * k);
    double sy = static_cast<double>(y + ky) + base_flow(y, x, 1) + off(y, x, 2 * k + 1);
    return {sx, sy};
  };

  // cols[p, k*cin + c] = modulation_k(p) * sample_k(p)[c]
  auto cols = std::make_shared<Tensor<T>>(Tensor<T>({hw, kk * cin}));
  const Tensor<T>& rv = ref->value;
  for (int64_t p = 0; p < hw; ++p) {
    for (int64_t k = 0; k < kk; ++k) {
      auto [sx, sy] = sample_pos(p, k, offsets->value);
      T a = modulation->value[p * kk + k];
      T* dst = cols->data() + p * kk * cin + k * cin;
      int64_t x0 = static_cast<int64_t>(std::floor(sx));
      int64_t y0 = static_cast<int64_t>(std::floor(sy));
      double fx = sx - x0, fy = sy - y0;
      for (int64_t c = 0; c < cin; ++c) {
        auto tap = [&](int64_t yy, int64_t xx) -> double {
          return (yy < 0 || yy >= h || xx < 0 || xx >= w) ? 0.0 : rv(yy, xx, c);
        };
        double val = (1 - fx) * (1 - fy) * tap(y0, x0) + fx * (1 - fy) * tap(y0, x0 + 1) +
                     (1 - fx) * fy * tap(y0 + 1, x0) + fx * fy * tap(y0 + 1, x0 + 1);
        dst[c] = static_cast<T>(a * val);
      }
    }
  }

  Tensor<T> out({h, w, cout});
  MapM<T> o(out.data(), hw, cout);
  o.noalias() = CMapM<T>(cols->data(), hw, kk * cin) * CMapM<T>(weight->value.data(), kk * cin, cout);
  if (bias) o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->value.data(), cout);

  std::vector<Var<T>> parents{ref, offsets, modulation, weight};
  if (bias) parents.push_back(bias);
  Tensor<T> base_copy = base_flow;
  return make_op<T>(std::move(out), parents,
                    [ref, offsets, modulation, weight, bias, cols, base_copy, h, w, cin, cout, kk,
                     kh, kw, hw](VarNode<T>& nd) {
    CMapM<T> g(nd.grad.data(), hw, cout);
    if (weight->requires_grad) {
      weight->ensure_grad();
      MapM<T>(weight->grad.data(), kk * cin, cout).noalias() +=
          CMapM<T>(cols->data(), hw, kk * cin).transpose() * g;
    }
    if (bias && bias->requires_grad) {
      bias->ensure_grad();
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->grad.data(), cout) += g.colwise().sum();
    }
    if (!ref->requires_grad && !offsets->requires_grad && !modulation->requires_grad) return;

    Tensor<T> dcols({hw, kk * cin});
    MapM<T>(dcols.data(), hw, kk * cin).noalias() =
        g * CMapM<T>(weight->value.data(), kk * cin, cout).transpose();

    if (ref->requires_grad) ref->ensure_grad();
    if (offsets->requires_grad) offsets->ensure_grad();
    if (modulation->requires_grad) modulation->ensure_grad();

    const Tensor<T>& rv = ref->value;
    for (int64_t p = 0; p < hw; ++p) {
      int64_t y = p / w, x = p % w;
      for (int64_t k = 0; k < kk; ++k) {
        int64_t kyo = k / kw - kh / 2, kxo = k % kw - kw / 2;
        double sx = static_cast<double>(x + kxo) + base_copy(y, x, 0) +
                    offsets->value(y, x, 2 * k);
        double sy = static_cast<double>(y + kyo) + base_copy(y, x, 1) +
                    offsets->value(y, x, 2 * k + 1);
        T a = modulation->value[p * kk + k];
        int64_t x0 = static_cast<int64_t>(std::floor(sx));
        int64_t y0 = static_cast<int64_t>(std::floor(sy));
        double fx = sx - x0, fy = sy - y0;
        double da = 0, gdx = 0, gdy = 0;
        for (int64_t c = 0; c < cin; ++c) {
          double dc = dcols(p, k * cin + c);
          auto tap = [&](int64_t yy, int64_t xx) -> double {
            return (yy < 0 || yy >= h || xx < 0 || xx >= w) ? 0.0 : rv(yy, xx, c);
          };
          auto scatter = [&](int64_t yy, int64_t xx, double wgt) {
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) return;
            ref->grad(yy, xx, c) += static_cast<T>(dc * a * wgt);
          };
          double v00 = tap(y0, x0), v10 = tap(y0, x0 + 1);
          double v01 = tap(y0 + 1, x0), v11 = tap(y0 + 1, x0 + 1);
          double val = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10 + (1 - fx) * fy * v01 +
                       fx * fy * v11;
          if (modulation->requires_grad) da += dc * val;
          if (ref->requires_grad) {
            scatter(y0, x0, (1 - fx) * (1 - fy));
            scatter(y0, x0 + 1, fx * (1 - fy));
            scatter(y0 + 1, x0, (1 - fx) * fy);
            scatter(y0 + 1, x0 + 1, fx * fy);
          }
          if (offsets->requires_grad) {
            gdx += dc * a * ((v10 - v00) * (1 - fy) + (v11 - v01) * fy);
            gdy += dc * a * ((v01 - v00) * (1 - fx) + (v11 - v10) * fx);
          }
        }
        if (modulation->requires_grad) modulation->grad(y, x, k) += static_cast<T>(da);
        if (offsets->requires_grad) {
          offsets->grad(y, x, 2 * k) += static_cast<T>(gdx);
          offsets->grad(y, x, 2 * k + 1) += static_cast<T>(gdy);
        }
      }
    }
  });
}

}  // namespace movia
