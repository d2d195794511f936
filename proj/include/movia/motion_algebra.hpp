#pragma once

#include <cmath>
#include <limits>

#include "movia/data_model.hpp"
#include "movia/tensor.hpp"
#include "movia/warp.hpp"

namespace movia {

// Deterministic motion math shared by the generation stages: occlusion
// masking from forward/backward flow consistency, joint normalization of
// depth and flows, recovery of the flow scale from normalized depth, and
// construction of the warped latent video.

struct OcclusionParams {
  double alpha = 0.01;
  double beta = 0.5;  // pixels
  // When set, the threshold uses frame-mean flow magnitudes instead of the
  // per-pixel magnitudes that sit next to the residual.
  bool frame_mean_delta = false;
};

// m(p) = 1 iff || o_i2v(p) + W(o_v2i, o_i2v)(p) || < delta(p), with
// delta = alpha * (||o_i2v(p)|| + ||W(o_v2i, o_i2v)(p)||) + beta.
// Pixels whose inner warp leaves the grid are never trusted.
inline TensorF occlusion_mask(const TensorF& flow_i2v_f, const TensorF& flow_v2i_f,
                              const OcclusionParams& params = {}) {
  check(flow_i2v_f.rank() == 3 && flow_i2v_f.size(2) == 2, "occlusion_mask: flows must be (H,W,2)");
  check(flow_i2v_f.same_shape(flow_v2i_f), "occlusion_mask: flow shape mismatch");
  check(params.alpha >= 0 && params.beta > 0, "occlusion_mask: bad params");
  int64_t h = flow_i2v_f.size(0), w = flow_i2v_f.size(1);

  WarpResult<float> back = warp(flow_v2i_f, flow_i2v_f);

  double mean_fwd = 0, mean_back = 0;
  if (params.frame_mean_delta) {
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        mean_fwd += std::hypot(flow_i2v_f(y, x, 0), flow_i2v_f(y, x, 1));
        mean_back += std::hypot(back.warped(y, x, 0), back.warped(y, x, 1));
      }
    mean_fwd /= static_cast<double>(h * w);
    mean_back /= static_cast<double>(h * w);
  }

  TensorF mask({h, w, 1});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      if (back.validity(y, x, 0) == 0.f) continue;
      double ex = flow_i2v_f(y, x, 0) + back.warped(y, x, 0);
      double ey = flow_i2v_f(y, x, 1) + back.warped(y, x, 1);
      double err = std::hypot(ex, ey);
      double nf = std::hypot(flow_i2v_f(y, x, 0), flow_i2v_f(y, x, 1));
      double nb = std::hypot(back.warped(y, x, 0), back.warped(y, x, 1));
      double delta = params.frame_mean_delta
                         ? params.alpha * (mean_fwd + mean_back) + params.beta
                         : params.alpha * (nf + nb) + params.beta;
      if (err < delta) mask(y, x, 0) = 1.f;
    }
  return mask;
}

inline TensorF occlusion_mask_video(const TensorF& flow_i2v, const TensorF& flow_v2i,
                                    const OcclusionParams& params = {}) {
  check(flow_i2v.rank() == 4 && flow_i2v.same_shape(flow_v2i), "occlusion_mask_video: bad shapes");
  int64_t f = flow_i2v.size(0), h = flow_i2v.size(1), w = flow_i2v.size(2);
  TensorF out({f, h, w, 1});
  for (int64_t fi = 0; fi < f; ++fi) {
    TensorF a({h, w, 2}), b({h, w, 2});
    std::copy(flow_i2v.data() + fi * h * w * 2, flow_i2v.data() + (fi + 1) * h * w * 2, a.data());
    std::copy(flow_v2i.data() + fi * h * w * 2, flow_v2i.data() + (fi + 1) * h * w * 2, b.data());
    TensorF m = occlusion_mask(a, b, params);
    std::copy(m.data(), m.data() + h * w, out.data() + fi * h * w);
  }
  return out;
}

/*------------------------------ normalization -----------------------------*/

struct DepthNorm {
  TensorF depth;  // in [-1, 1]
  float d_min = 0.f;
  float d_max = 0.f;
  bool degenerate = false;
};

inline DepthNorm normalize_depth(const TensorF& depth) {
  check(depth.rank() == 4 && depth.size(3) == 1, "normalize_depth: depth must be (F,H,W,1)");
  check_valid(depth.all_finite(), "normalize_depth: depth contains NaN/Inf");
  DepthNorm out;
  out.d_min = depth.min_value();
  out.d_max = depth.max_value();
  out.depth = TensorF(depth.shape());
  if (out.d_max <= out.d_min) {
    out.degenerate = true;
    return out;  // all zeros
  }
  double span = static_cast<double>(out.d_max) - static_cast<double>(out.d_min);
  for (int64_t i = 0; i < depth.numel(); ++i)
    out.depth[i] = static_cast<float>(2.0 * (depth[i] - out.d_min) / span - 1.0);
  return out;
}

inline TensorF denormalize_depth(const TensorF& depth_norm, float d_min, float d_max) {
  TensorF out(depth_norm.shape());
  double span = static_cast<double>(d_max) - static_cast<double>(d_min);
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<float>((depth_norm[i] + 1.0) * 0.5 * span + d_min);
  return out;
}

struct FlowNorm {
  TensorF flow_i2v;
  TensorF flow_v2i;
  float o_max = 0.f;
};

// o_max is the max per-pixel vector norm over BOTH flow tensors; both are
// divided by it so their largest motion vector has unit length.
inline FlowNorm normalize_flows(const TensorF& flow_i2v, const TensorF& flow_v2i) {
  check(flow_i2v.rank() == 4 && flow_i2v.size(3) == 2, "normalize_flows: flows must be (F,H,W,2)");
  check(flow_i2v.same_shape(flow_v2i), "normalize_flows: shape mismatch");
  FlowNorm out;
  double omax = 0;
  for (const TensorF* t : {&flow_i2v, &flow_v2i})
    for (int64_t i = 0; i + 1 < t->numel(); i += 2)
      omax = std::max(omax, static_cast<double>(std::hypot((*t)[i], (*t)[i + 1])));
  out.flow_i2v = TensorF(flow_i2v.shape());
  out.flow_v2i = TensorF(flow_v2i.shape());
  if (omax < 1e-6) {
    out.o_max = 0.f;
    return out;
  }
  out.o_max = static_cast<float>(omax);
  for (int64_t i = 0; i < flow_i2v.numel(); ++i) {
    out.flow_i2v[i] = static_cast<float>(flow_i2v[i] / omax);
    out.flow_v2i[i] = static_cast<float>(flow_v2i[i] / omax);
  }
  return out;
}

inline TensorF scale_flow(const TensorF& flow, double s) {
  TensorF out(flow.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(flow[i] * s);
  return out;
}

// Normalizes a ground-truth bundle in place (depth to [-1,1], flows by the
// joint o_max) and records the extrema.
inline MotionBundle normalize_bundle(const MotionBundle& b) {
  check(!b.normalized, "normalize_bundle: bundle already normalized");
  MotionBundle out = b;
  DepthNorm dn = normalize_depth(b.depth);
  FlowNorm fn = normalize_flows(b.flow_i2v, b.flow_v2i);
  out.depth = dn.depth;
  out.flow_i2v = fn.flow_i2v;
  out.flow_v2i = fn.flow_v2i;
  out.d_min = dn.d_min;
  out.d_max = dn.d_max;
  out.o_max = fn.o_max;
  out.normalized = true;
  return out;
}

/*------------------------------ o_max recovery ----------------------------*/

struct OMaxOptions {
  double search_hi = 0;      // 0 -> 2 * max(H, W)
  int grid_points = 64;
  double tol = 1e-3;         // pixels
  bool exclude_occluded = false;
  const TensorF* occlusion = nullptr;  // required when exclude_occluded
};

struct OMaxResult {
  float o_max = 0.f;
  double residual = 0.0;
  bool degenerate = false;
};

namespace omax_detail {

// Mean absolute depth-warp residual over valid pixels for one direction.
inline double residual_term(const TensorF& target, const TensorF& source, const TensorF& flow_n,
                            double o, const float* occ) {
  int64_t h = target.size(0), w = target.size(1);
  TensorF f({h, w, 2});
  for (int64_t i = 0; i < f.numel(); ++i) f[i] = static_cast<float>(flow_n[i] * o);
  WarpResult<float> res = warp(source, f);
  double sum = 0;
  int64_t count = 0;
  for (int64_t p = 0; p < h * w; ++p) {
    if (res.validity[p] == 0.f) continue;
    if (occ && occ[p] == 0.f) continue;
    sum += std::abs(static_cast<double>(target[p]) - static_cast<double>(res.warped[p]));
    ++count;
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace omax_detail

// The full objective: sum over frames of both directional warp residuals at
// flow scale o.
inline double o_max_objective(const TensorF& depth_norm, const TensorF& flow_i2v_norm,
                              const TensorF& flow_v2i_norm, double o,
                              const OMaxOptions& opts = {}) {
  int64_t f = depth_norm.size(0), h = depth_norm.size(1), w = depth_norm.size(2);
  int64_t key = (f - 1) / 2;
  TensorF d_key({h, w, 1});
  std::copy(depth_norm.data() + key * h * w, depth_norm.data() + (key + 1) * h * w, d_key.data());

  double total = 0;
  for (int64_t fi = 0; fi < f; ++fi) {
    TensorF d_f({h, w, 1});
    std::copy(depth_norm.data() + fi * h * w, depth_norm.data() + (fi + 1) * h * w, d_f.data());
    TensorF o_i2v({h, w, 2}), o_v2i({h, w, 2});
    std::copy(flow_i2v_norm.data() + fi * h * w * 2, flow_i2v_norm.data() + (fi + 1) * h * w * 2,
              o_i2v.data());
    std::copy(flow_v2i_norm.data() + fi * h * w * 2, flow_v2i_norm.data() + (fi + 1) * h * w * 2,
              o_v2i.data());
    const float* occ = nullptr;
    if (opts.exclude_occluded && opts.occlusion) occ = opts.occlusion->data() + fi * h * w;
    total += omax_detail::residual_term(d_f, d_key, o_i2v, o, occ);
    total += omax_detail::residual_term(d_key, d_f, o_v2i, o, occ);
  }
  return total;
}

// Coarse grid scan followed by golden-section refinement of the depth-warp
// residual. Inputs must be normalized; a flat objective (zero flows,
// constant depth) reports a degenerate result at 0.
inline OMaxResult recover_o_max(const TensorF& depth_norm, const TensorF& flow_i2v_norm,
                                const TensorF& flow_v2i_norm, OMaxOptions opts = {}) {
  check(depth_norm.rank() == 4 && flow_i2v_norm.rank() == 4 && flow_v2i_norm.rank() == 4,
        "recover_o_max: rank-4 inputs required");
  for (const TensorF* t : {&depth_norm, &flow_i2v_norm, &flow_v2i_norm})
    check(t->abs_max() <= 1.f + 1e-6f,
          "recover_o_max: inputs must be normalized to [-1,1], got max " +
              std::to_string(t->abs_max()));
  if (opts.search_hi <= 0)
    opts.search_hi = 2.0 * static_cast<double>(std::max(depth_norm.size(1), depth_norm.size(2)));

  auto eval = [&](double o) {
    return o_max_objective(depth_norm, flow_i2v_norm, flow_v2i_norm, o, opts);
  };

  int n = std::max(4, opts.grid_points);
  std::vector<double> vals(static_cast<size_t>(n));
  double best_o = 0, best_v = std::numeric_limits<double>::infinity();
  double tv = 0;
  for (int i = 0; i < n; ++i) {
    double o = opts.search_hi * static_cast<double>(i) / static_cast<double>(n - 1);
    vals[size_t(i)] = eval(o);
    if (i > 0) tv += std::abs(vals[size_t(i)] - vals[size_t(i) - 1]);
    if (vals[size_t(i)] < best_v) {
      best_v = vals[size_t(i)];
      best_o = o;
    }
  }
  OMaxResult res;
  if (tv < 1e-6) {
    res.degenerate = true;
    res.residual = best_v;
    return res;
  }

  // golden-section around the best grid cell
  double step = opts.search_hi / static_cast<double>(n - 1);
  double lo = std::max(0.0, best_o - step);
  double hi = std::min(opts.search_hi, best_o + step);
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - gr * (hi - lo);
  double d = lo + gr * (hi - lo);
  double fc = eval(c), fd = eval(d);
  while (hi - lo > opts.tol) {
    if (fc < fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - gr * (hi - lo);
      fc = eval(c);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + gr * (hi - lo);
      fd = eval(d);
    }
  }
  double o_hat = (lo + hi) / 2;
  res.o_max = static_cast<float>(o_hat);
  res.residual = eval(o_hat);
  return res;
}

/*--------------------------- latent-space rescaling ------------------------*/

// s x s area average over the spatial dims of an (F, H, W, C) tensor.
inline TensorF area_downsample(const TensorF& t, int64_t s) {
  check(t.rank() == 4, "area_downsample: rank-4 input required");
  int64_t f = t.size(0), h = t.size(1), w = t.size(2), c = t.size(3);
  check(s >= 1 && h % s == 0 && w % s == 0, "area_downsample: s must divide H and W");
  if (s == 1) return t;
  TensorF out({f, h / s, w / s, c});
  double inv = 1.0 / static_cast<double>(s * s);
  for (int64_t fi = 0; fi < f; ++fi)
    for (int64_t oy = 0; oy < h / s; ++oy)
      for (int64_t ox = 0; ox < w / s; ++ox)
        for (int64_t cc = 0; cc < c; ++cc) {
          double acc = 0;
          for (int64_t dy = 0; dy < s; ++dy)
            for (int64_t dx = 0; dx < s; ++dx) acc += t(fi, oy * s + dy, ox * s + dx, cc);
          out(fi, oy, ox, cc) = static_cast<float>(acc * inv);
        }
  return out;
}

// Area-average the flow field to the latent grid, then divide the vectors
// by s so they are expressed in latent pixels.
inline TensorF rescale_flow_to_latent(const TensorF& flow, int64_t s) {
  check(flow.rank() == 4 && flow.size(3) == 2, "rescale_flow_to_latent: flow must be (F,H,W,2)");
  TensorF pooled = area_downsample(flow, s);
  if (s == 1) return pooled;
  for (int64_t i = 0; i < pooled.numel(); ++i)
    pooled[i] = static_cast<float>(pooled[i] / static_cast<double>(s));
  return pooled;
}

/*---------------------------- warped latent video --------------------------*/

struct WarpedLatent {
  TensorF z_tilde;   // (F, h, w, c)
  TensorF m_latent;  // (F, h, w, 1)
};

// Pulls the key-frame latent to every frame through the i2v flow, masked by
// the occlusion mask pooled to the latent grid. Warp-invalid pixels are
// forced out of the mask so z_tilde is zero exactly where m_latent is zero.
inline WarpedLatent warped_latent_video(const TensorF& z_key, const TensorF& flow_i2v,
                                        const TensorF& occlusion, int64_t s) {
  check(z_key.rank() == 3, "warped_latent_video: z_key must be (h,w,c)");
  check(flow_i2v.rank() == 4 && flow_i2v.size(3) == 2, "warped_latent_video: bad flow shape");
  check(occlusion.rank() == 4 && occlusion.size(3) == 1, "warped_latent_video: bad mask shape");
  check(flow_i2v.size(1) == occlusion.size(1) && flow_i2v.size(2) == occlusion.size(2),
        "warped_latent_video: flow/mask grid mismatch");
  check(flow_i2v.size(1) / s == z_key.size(0) && flow_i2v.size(2) / s == z_key.size(1),
        "warped_latent_video: latent grid mismatch");

  int64_t f = flow_i2v.size(0), h = z_key.size(0), w = z_key.size(1), c = z_key.size(2);
  TensorF lat_flow = rescale_flow_to_latent(flow_i2v, s);
  TensorF pooled_mask = area_downsample(occlusion, s);

  WarpedLatent out{TensorF({f, h, w, c}), TensorF({f, h, w, 1})};
  for (int64_t fi = 0; fi < f; ++fi) {
    TensorF fl({h, w, 2});
    std::copy(lat_flow.data() + fi * h * w * 2, lat_flow.data() + (fi + 1) * h * w * 2, fl.data());
    WarpResult<float> res = warp(z_key, fl);
    for (int64_t p = 0; p < h * w; ++p) {
      float m = pooled_mask[fi * h * w + p] >= 0.5f ? 1.f : 0.f;
      if (res.validity[p] == 0.f) m = 0.f;
      out.m_latent[fi * h * w + p] = m;
      for (int64_t cc = 0; cc < c; ++cc)
        out.z_tilde[(fi * h * w + p) * c + cc] = res.warped[p * c + cc] * m;
    }
  }
  return out;
}

}  // namespace movia
