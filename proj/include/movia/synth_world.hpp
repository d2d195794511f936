#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "movia/data_model.hpp"
#include "movia/rng.hpp"

namespace movia {

// Procedural moving-shapes clips. Every quantity a motion estimator would
// normally predict (depth, key-anchored flows, occlusion) is derived in
// closed form from the scene geometry.
//
// Motion model: rigid translation at constant velocity; shape i sits at
// position0 + velocity * (f - key_index) in frame f. Background is static
// with a linear color gradient so that occlusions are observable.

struct ShapeSpec {
  enum class Kind { Rectangle, Disk };
  Kind kind = Kind::Disk;
  double size = 6.0;  // rectangle half-side / disk radius, pixels
  std::array<float, 3> color{1.f, 1.f, 1.f};
  double depth_value = 1.0;  // nearer = smaller, > 0
  std::array<double, 2> position0{16.0, 16.0};  // (x, y) at the key frame
  std::array<double, 2> velocity{0.0, 0.0};     // pixels per frame
};

struct BackgroundSpec {
  std::array<float, 3> color{-0.2f, -0.2f, -0.2f};
  // per-channel linear gradient across the frame; linear images stay exact
  // under bilinear resampling
  std::array<float, 3> grad_x{0.3f, 0.1f, -0.2f};
  std::array<float, 3> grad_y{-0.1f, 0.25f, 0.15f};
  double depth_value = 10.0;
};

struct SceneSpec {
  std::vector<ShapeSpec> shapes;
  BackgroundSpec background;
  int64_t frames = desk::kFrames;
  int64_t height = desk::kHeight;
  int64_t width = desk::kWidth;
  int fps = 3;
  uint64_t seed = 0;

  int64_t key_index() const { return (frames - 1) / 2; }
};

namespace synth_detail {

inline std::array<double, 2> shape_center(const ShapeSpec& s, int64_t f, int64_t key) {
  double dt = static_cast<double>(f - key);
  return {s.position0[0] + s.velocity[0] * dt, s.position0[1] + s.velocity[1] * dt};
}

inline bool covers(const ShapeSpec& s, double cx, double cy, double x, double y) {
  double dx = x - cx, dy = y - cy;
  if (s.kind == ShapeSpec::Kind::Rectangle)
    return std::abs(dx) <= s.size && std::abs(dy) <= s.size;
  return dx * dx + dy * dy <= s.size * s.size;
}

// Signed-ish distances used by the margin-stability predicate.
inline double inside_margin(const ShapeSpec& s, double cx, double cy, double x, double y) {
  double dx = x - cx, dy = y - cy;
  if (s.kind == ShapeSpec::Kind::Rectangle)
    return s.size - std::max(std::abs(dx), std::abs(dy));
  return s.size - std::sqrt(dx * dx + dy * dy);
}

}  // namespace synth_detail

inline void validate_scene(const SceneSpec& spec) {
  check_valid(spec.frames >= 1 && spec.frames % 2 == 1, "scene: frame count must be odd and >= 1");
  check_valid(spec.height > 1 && spec.width > 1, "scene: degenerate grid");
  for (size_t i = 0; i < spec.shapes.size(); ++i) {
    const auto& s = spec.shapes[i];
    check_valid(s.depth_value > 0, "scene: shape depth_value must be positive");
    check_valid(s.depth_value < spec.background.depth_value,
                "scene: background must be the farthest surface");
    check_valid(s.size > 0, "scene: shape size must be positive");
    double speed = std::hypot(s.velocity[0], s.velocity[1]);
    check_valid(speed * static_cast<double>(spec.frames - 1) / 2.0 <=
                    static_cast<double>(spec.height) / 2.0,
                "scene: velocity too large, shape leaves the frame");
    for (size_t j = i + 1; j < spec.shapes.size(); ++j)
      check_valid(spec.shapes[j].depth_value != s.depth_value,
                  "scene: shapes must have distinct depth_value for the painter ordering");
  }
}

// Index of the front-most surface at a continuous point; -1 = background.
inline int surface_at(const SceneSpec& spec, int64_t f, double x, double y) {
  int best = -1;
  double best_depth = spec.background.depth_value;
  for (size_t i = 0; i < spec.shapes.size(); ++i) {
    const auto& s = spec.shapes[i];
    auto c = synth_detail::shape_center(s, f, spec.key_index());
    if (s.depth_value < best_depth && synth_detail::covers(s, c[0], c[1], x, y)) {
      best = static_cast<int>(i);
      best_depth = s.depth_value;
    }
  }
  return best;
}

// True when the surface seen at (x, y) in frame f stays the front surface
// everywhere within an L-inf ball of `margin` pixels: the point is at least
// `margin` inside its own surface and `margin` clear of any nearer shape.
inline bool surface_stable(const SceneSpec& spec, int64_t f, double x, double y, double margin) {
  int sid = surface_at(spec, f, x, y);
  double own_depth = sid < 0 ? spec.background.depth_value : spec.shapes[size_t(sid)].depth_value;
  if (sid >= 0) {
    const auto& s = spec.shapes[size_t(sid)];
    auto c = synth_detail::shape_center(s, f, spec.key_index());
    if (synth_detail::inside_margin(s, c[0], c[1], x, y) < margin) return false;
  }
  for (size_t j = 0; j < spec.shapes.size(); ++j) {
    if (static_cast<int>(j) == sid) continue;
    const auto& s = spec.shapes[j];
    if (s.depth_value >= own_depth) continue;
    auto c = synth_detail::shape_center(s, f, spec.key_index());
    if (synth_detail::inside_margin(s, c[0], c[1], x, y) > -margin) return false;
  }
  return true;
}

inline std::array<float, 3> color_at(const SceneSpec& spec, int64_t f, double x, double y) {
  int sid = surface_at(spec, f, x, y);
  if (sid >= 0) return spec.shapes[size_t(sid)].color;
  std::array<float, 3> c;
  double u = x / static_cast<double>(spec.width) - 0.5;
  double v = y / static_cast<double>(spec.height) - 0.5;
  for (int ch = 0; ch < 3; ++ch)
    c[size_t(ch)] = static_cast<float>(spec.background.color[size_t(ch)] +
                                       spec.background.grad_x[size_t(ch)] * u +
                                       spec.background.grad_y[size_t(ch)] * v);
  return c;
}

inline ClipRecord generate_scene(const SceneSpec& spec) {
  validate_scene(spec);
  const int64_t F = spec.frames, H = spec.height, W = spec.width;
  const int64_t key = spec.key_index();

  ClipRecord rec;
  rec.clip.frames = TensorF({F, H, W, 3});
  rec.clip.fps = spec.fps;
  rec.clip.key_index = key;
  rec.motion.depth = TensorF({F, H, W, 1});
  rec.motion.flow_i2v = TensorF({F, H, W, 2});
  rec.motion.flow_v2i = TensorF({F, H, W, 2});
  rec.motion.occlusion = TensorF({F, H, W, 1});
  rec.scene_seed = spec.seed;
  rec.id = std::to_string(spec.seed);

  // 2x supersampled color; depth/flow/occlusion at pixel centers
  const double sub[2] = {-0.25, 0.25};
  for (int64_t f = 0; f < F; ++f) {
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t x = 0; x < W; ++x) {
        double acc[3] = {0, 0, 0};
        for (double sy : sub)
          for (double sx : sub) {
            auto c = color_at(spec, f, x + sx, y + sy);
            for (int ch = 0; ch < 3; ++ch) acc[ch] += c[size_t(ch)];
          }
        for (int ch = 0; ch < 3; ++ch)
          rec.clip.frames(f, y, x, ch) = static_cast<float>(acc[ch] / 4.0);

        int sid = surface_at(spec, f, x, y);
        rec.motion.depth(f, y, x, 0) = static_cast<float>(
            sid < 0 ? spec.background.depth_value : spec.shapes[size_t(sid)].depth_value);

        double dt = static_cast<double>(f - key);
        // frame-f pixel pulls from the key frame
        double fx = 0, fy = 0;
        if (sid >= 0) {
          fx = -spec.shapes[size_t(sid)].velocity[0] * dt;
          fy = -spec.shapes[size_t(sid)].velocity[1] * dt;
        }
        rec.motion.flow_i2v(f, y, x, 0) = static_cast<float>(fx);
        rec.motion.flow_i2v(f, y, x, 1) = static_cast<float>(fy);

        // key-frame pixel pulls from frame f
        int kid = surface_at(spec, key, x, y);
        if (kid >= 0) {
          rec.motion.flow_v2i(f, y, x, 0) =
              static_cast<float>(spec.shapes[size_t(kid)].velocity[0] * dt);
          rec.motion.flow_v2i(f, y, x, 1) =
              static_cast<float>(spec.shapes[size_t(kid)].velocity[1] * dt);
        }

        // trusted iff the key-frame correspondence is in bounds and shows
        // the same surface
        double qx = x + fx, qy = y + fy;
        bool in_bounds = qx >= 0 && qx <= static_cast<double>(W - 1) && qy >= 0 &&
                         qy <= static_cast<double>(H - 1);
        bool same = in_bounds && surface_at(spec, key, qx, qy) == sid;
        rec.motion.occlusion(f, y, x, 0) = same ? 1.f : 0.f;
      }
    }
  }

  float omax = 0;
  for (const TensorF* t : {&rec.motion.flow_i2v, &rec.motion.flow_v2i})
    for (int64_t i = 0; i + 1 < t->numel(); i += 2)
      omax = std::max(omax, std::hypot((*t)[i], (*t)[i + 1]));
  rec.true_o_max = omax;
  rec.motion.o_max = 0.f;  // unnormalized bundle
  return rec;
}

// Pixels where exact warp consistency is provable: the surface is
// margin-stable around the pixel in frame f and around its key-frame
// correspondence, which must show the same surface. The margin must cover
// the bilinear corner reach (sqrt(2)) plus the anti-aliasing band (0.354),
// hence the 2.0 default.
inline TensorF warp_trust_mask(const SceneSpec& spec, double margin = 2.0) {
  const int64_t F = spec.frames, H = spec.height, W = spec.width;
  const int64_t key = spec.key_index();
  TensorF mask({F, H, W, 1});
  for (int64_t f = 0; f < F; ++f)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        int sid = surface_at(spec, f, x, y);
        if (!surface_stable(spec, f, x, y, margin)) continue;
        double dt = static_cast<double>(f - key);
        double qx = x, qy = y;
        if (sid >= 0) {
          qx -= spec.shapes[size_t(sid)].velocity[0] * dt;
          qy -= spec.shapes[size_t(sid)].velocity[1] * dt;
        }
        if (qx < 0 || qx > static_cast<double>(W - 1) || qy < 0 || qy > static_cast<double>(H - 1))
          continue;
        if (surface_at(spec, key, qx, qy) != sid) continue;
        if (!surface_stable(spec, key, qx, qy, margin)) continue;
        mask(f, y, x, 0) = 1.f;
      }
  return mask;
}

/*------------------------------ random datasets ---------------------------*/

struct DatasetRanges {
  int min_shapes = 1;
  int max_shapes = 3;
  double size_min = 4.0;
  double size_max = 8.0;
  double speed_min = 0.3;
  double speed_max = 2.5;
  int fps_min = 3;
  int fps_max = 30;
  int64_t frames = desk::kFrames;
  int64_t height = desk::kHeight;
  int64_t width = desk::kWidth;
};

inline SceneSpec random_scene(const DatasetRanges& r, Rng rng) {
  SceneSpec spec;
  spec.frames = r.frames;
  spec.height = r.height;
  spec.width = r.width;
  spec.seed = rng.seed();
  spec.fps = static_cast<int>(rng.uniform_int(r.fps_min, r.fps_max));

  for (int ch = 0; ch < 3; ++ch) {
    spec.background.color[size_t(ch)] = static_cast<float>(rng.uniform(-0.4, 0.1));
    spec.background.grad_x[size_t(ch)] = static_cast<float>(rng.uniform(-0.5, 0.5));
    spec.background.grad_y[size_t(ch)] = static_cast<float>(rng.uniform(-0.5, 0.5));
  }

  int n_shapes = static_cast<int>(rng.uniform_int(r.min_shapes, r.max_shapes));
  double max_speed_allowed =
      static_cast<double>(r.height) / static_cast<double>(std::max<int64_t>(1, r.frames - 1));
  for (int i = 0; i < n_shapes; ++i) {
    ShapeSpec s;
    s.kind = rng.uniform() < 0.5 ? ShapeSpec::Kind::Disk : ShapeSpec::Kind::Rectangle;
    s.size = rng.uniform(r.size_min, r.size_max);
    for (int ch = 0; ch < 3; ++ch) s.color[size_t(ch)] = static_cast<float>(rng.uniform(-1.0, 1.0));
    s.depth_value = 1.0 + i + rng.uniform(0.0, 0.8);  // distinct by construction
    s.position0 = {rng.uniform(0.25, 0.75) * r.width, rng.uniform(0.25, 0.75) * r.height};
    double speed = std::min(rng.uniform(r.speed_min, r.speed_max), max_speed_allowed);
    double angle = rng.uniform(0.0, 2.0 * M_PI);
    s.velocity = {speed * std::cos(angle), speed * std::sin(angle)};
    spec.shapes.push_back(s);
  }
  return spec;
}

inline std::vector<ClipRecord> make_dataset(int64_t n, const DatasetRanges& ranges,
                                            uint64_t seed) {
  check(n >= 1, "make_dataset: n must be >= 1");
  std::vector<ClipRecord> out;
  out.reserve(static_cast<size_t>(n));
  Rng base(seed);
  for (int64_t i = 0; i < n; ++i) {
    SceneSpec spec = random_scene(ranges, base.fork(static_cast<uint64_t>(i)));
    ClipRecord rec = generate_scene(spec);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04lld", static_cast<long long>(i));
    rec.id = buf;
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace movia
