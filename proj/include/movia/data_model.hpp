#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "movia/npy.hpp"
#include "movia/tensor.hpp"

namespace movia {

// Desk-scale working size. Frame counts are odd with the key frame centered.
namespace desk {
constexpr int64_t kFrames = 9;
constexpr int64_t kHeight = 32;
constexpr int64_t kWidth = 32;
constexpr int64_t kKeyIndex = 4;
constexpr int64_t kLatentScale = 4;
constexpr int64_t kLatentChannels = 4;
}  // namespace desk

// Pixel-space video, values in [-1, 1], layout (F, H, W, 3).
struct VideoClip {
  TensorF frames;
  int fps = 3;
  int64_t key_index = 0;

  int64_t f() const { return frames.size(0); }
  int64_t h() const { return frames.size(1); }
  int64_t w() const { return frames.size(2); }

  // Frame at key_index, shape (H, W, 3).
  TensorF key_frame() const { return frame(key_index); }

  TensorF frame(int64_t fi) const {
    check(fi >= 0 && fi < f(), "VideoClip::frame: index out of range");
    TensorF out({h(), w(), frames.size(3)});
    const float* src = frames.data() + fi * out.numel();
    std::copy(src, src + out.numel(), out.data());
    return out;
  }
};

// Per-clip motion: depth video, key-frame-anchored flows in both directions,
// occlusion trust mask (1 = correspondence trusted) and the flow
// normalization extrema.
struct MotionBundle {
  TensorF depth;      // (F, H, W, 1)
  TensorF flow_i2v;   // (F, H, W, 2), on each frame's grid, pulls from key
  TensorF flow_v2i;   // (F, H, W, 2), on the key grid, pulls from frame f
  TensorF occlusion;  // (F, H, W, 1), values in {0, 1}
  float o_max = 0.f;
  float d_min = 0.f;
  float d_max = 0.f;
  bool normalized = false;
};

struct LatentVideo {
  TensorF latents;  // (F, h, w, c)
  int64_t scale_factor = desk::kLatentScale;
};

// One training sample: rendered clip plus its analytic ground-truth motion.
struct ClipRecord {
  VideoClip clip;
  MotionBundle motion;  // unnormalized ground truth
  uint64_t scene_seed = 0;
  float true_o_max = 0.f;
  std::string id;
};

/*-------------------------------- validation ------------------------------*/

struct ValidationReport {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
  std::string str() const {
    std::string s;
    for (const auto& v : violations) s += v + "\n";
    return s;
  }
};

// Total: reports every violated invariant, never throws.
inline ValidationReport validate_record(const ClipRecord& r) {
  ValidationReport rep;
  auto flag = [&](const std::string& m) { rep.violations.push_back(m); };

  const TensorF& fr = r.clip.frames;
  if (fr.rank() != 4 || fr.size(3) != 3) {
    flag("clip.frames must be (F,H,W,3), got " + fr.shape_str());
    return rep;
  }
  int64_t f = fr.size(0), h = fr.size(1), w = fr.size(2);
  if (!fr.all_finite()) flag("clip.frames contains NaN/Inf");
  else if (fr.numel() > 0 && (fr.min_value() < -1.f || fr.max_value() > 1.f))
    flag("clip.frames values outside [-1,1]");
  if (f % 2 == 0) flag("frame count must be odd, got " + std::to_string(f));
  if (r.clip.key_index != (f - 1) / 2)
    flag("key_index must be (F-1)/2 = " + std::to_string((f - 1) / 2) + ", got " +
         std::to_string(r.clip.key_index));
  if (r.clip.fps < 3 || r.clip.fps > 30)
    flag("fps must lie in [3,30], got " + std::to_string(r.clip.fps));

  auto check_shape = [&](const TensorF& t, int64_t c, const std::string& name) {
    if (t.rank() != 4 || t.size(0) != f || t.size(1) != h || t.size(2) != w || t.size(3) != c) {
      flag(name + " must be (" + std::to_string(f) + "," + std::to_string(h) + "," +
           std::to_string(w) + "," + std::to_string(c) + "), got " + t.shape_str());
      return false;
    }
    if (!t.all_finite()) {
      flag(name + " contains NaN/Inf");
      return false;
    }
    return true;
  };

  bool depth_ok = check_shape(r.motion.depth, 1, "motion.depth");
  bool i2v_ok = check_shape(r.motion.flow_i2v, 2, "motion.flow_i2v");
  bool v2i_ok = check_shape(r.motion.flow_v2i, 2, "motion.flow_v2i");
  bool occ_ok = check_shape(r.motion.occlusion, 1, "motion.occlusion");

  int64_t key = r.clip.key_index;
  if (i2v_ok && key >= 0 && key < f) {
    for (int64_t p = 0; p < h * w * 2; ++p)
      if (r.motion.flow_i2v[key * h * w * 2 + p] != 0.f) {
        flag("flow_i2v must be identically zero at the key frame");
        break;
      }
  }
  if (v2i_ok && key >= 0 && key < f) {
    for (int64_t p = 0; p < h * w * 2; ++p)
      if (r.motion.flow_v2i[key * h * w * 2 + p] != 0.f) {
        flag("flow_v2i must be identically zero at the key frame");
        break;
      }
  }
  if (occ_ok) {
    for (int64_t i = 0; i < r.motion.occlusion.numel(); ++i) {
      float v = r.motion.occlusion[i];
      if (v != 0.f && v != 1.f) {
        flag("occlusion values must be binary");
        break;
      }
    }
  }
  if (r.motion.normalized) {
    if (depth_ok && r.motion.depth.abs_max() > 1.f + 1e-6f)
      flag("normalized depth outside [-1,1]");
    float fmax = 0.f;
    if (i2v_ok && v2i_ok) {
      for (const TensorF* t : {&r.motion.flow_i2v, &r.motion.flow_v2i})
        for (int64_t i = 0; i + 1 < t->numel(); i += 2)
          fmax = std::max(fmax, std::sqrt((*t)[i] * (*t)[i] + (*t)[i + 1] * (*t)[i + 1]));
      if (r.motion.o_max > 0 && std::abs(fmax - 1.f) > 1e-4f)
        flag("normalized flows must attain unit max norm, got " + std::to_string(fmax));
    }
  } else if (r.motion.o_max < 0) {
    flag("o_max must be nonnegative");
  }
  return rep;
}

/*------------------------------ clip directory ----------------------------*/

// Layout: clip_<id>/{video,depth,flow_i2v,flow_v2i,occlusion}.npy + meta.json

inline void save_clip(const std::filesystem::path& dir, const ClipRecord& r) {
  std::filesystem::create_directories(dir);
  save_tensor(dir / "video.npy", r.clip.frames);
  save_tensor(dir / "depth.npy", r.motion.depth);
  save_tensor(dir / "flow_i2v.npy", r.motion.flow_i2v);
  save_tensor(dir / "flow_v2i.npy", r.motion.flow_v2i);
  TensorU8 occ({r.motion.occlusion.size(0), r.motion.occlusion.size(1),
                r.motion.occlusion.size(2), r.motion.occlusion.size(3)});
  for (int64_t i = 0; i < occ.numel(); ++i)
    occ[i] = r.motion.occlusion[i] > 0.5f ? 1 : 0;
  save_tensor(dir / "occlusion.npy", occ);

  nlohmann::json meta;
  meta["id"] = r.id;
  meta["fps"] = r.clip.fps;
  meta["key_index"] = r.clip.key_index;
  meta["scene_seed"] = r.scene_seed;
  meta["true_o_max"] = r.true_o_max;
  std::ofstream out(dir / "meta.json");
  if (!out) throw IoError("save_clip: cannot write meta.json in " + dir.string());
  out << meta.dump(2) << "\n";
}

inline ClipRecord load_clip(const std::filesystem::path& dir) {
  ClipRecord r;
  r.clip.frames = load_tensor(dir / "video.npy");
  r.motion.depth = load_tensor(dir / "depth.npy");
  r.motion.flow_i2v = load_tensor(dir / "flow_i2v.npy");
  r.motion.flow_v2i = load_tensor(dir / "flow_v2i.npy");
  r.motion.occlusion = load_tensor(dir / "occlusion.npy");
  std::ifstream in(dir / "meta.json");
  if (!in) throw IoError("load_clip: missing meta.json in " + dir.string());
  nlohmann::json meta = nlohmann::json::parse(in);
  r.id = meta.value("id", dir.filename().string());
  r.clip.fps = meta.value("fps", 3);
  r.clip.key_index = meta.value("key_index", (r.clip.frames.size(0) - 1) / 2);
  r.scene_seed = meta.value("scene_seed", uint64_t(0));
  r.true_o_max = meta.value("true_o_max", 0.f);
  return r;
}

// Lists clip_* subdirectories in deterministic (sorted) order.
inline std::vector<std::filesystem::path> list_clip_dirs(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> dirs;
  if (!std::filesystem::exists(root)) throw IoError("list_clip_dirs: no such directory: " + root.string());
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory() && e.path().filename().string().rfind("clip_", 0) == 0)
      dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

}  // namespace movia
