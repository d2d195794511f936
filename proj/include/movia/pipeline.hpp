#pragma once

#include <filesystem>
#include <memory>

#include "movia/codec.hpp"
#include "movia/imageio.hpp"
#include "movia/motion_stage.hpp"
#include "movia/video_stage.hpp"

namespace movia {

/*--------------------------------- metrics ---------------------------------*/

// 10 log10(4 / MSE) for the [-1,1] range, capped at 99 dB.
inline double metric_psnr(const VideoClip& a, const VideoClip& b) {
  check(a.frames.same_shape(b.frames), "metric_psnr: shape mismatch");
  double mse = mean_sq_diff(a.frames, b.frames);
  if (mse <= 0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(4.0 / mse));
}

// Mean masked L1 between the flow-warped key frame and each frame, over
// non-occluded in-bounds pixels. Pixels sitting on a strong edge of the
// target frame are excluded: sub-pixel motion makes anti-aliased silhouettes
// irreproducible by bilinear warping, which would swamp the consistency
// signal being measured.
inline double metric_warp_consistency(const VideoClip& clip, const TensorF& gt_flow_i2v,
                                      const TensorF& gt_occlusion, double edge_threshold = 0.25) {
  int64_t f = clip.f(), h = clip.h(), w = clip.w();
  check(gt_flow_i2v.size(0) == f && gt_flow_i2v.size(1) == h && gt_flow_i2v.size(2) == w,
        "metric_warp_consistency: flow shape mismatch");
  TensorF key = clip.key_frame();
  double total = 0;
  int64_t frames_counted = 0;
  for (int64_t fi = 0; fi < f; ++fi) {
    TensorF flow = Tensor<float>::uninit({h, w, 2});
    std::copy(gt_flow_i2v.data() + fi * h * w * 2, gt_flow_i2v.data() + (fi + 1) * h * w * 2,
              flow.data());
    WarpResult<float> res = warp(key, flow);
    double sum = 0;
    int64_t cnt = 0;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        int64_t p = y * w + x;
        if (gt_occlusion[fi * h * w + p] == 0.f || res.validity[p] == 0.f) continue;
        double range = 0;
        for (int64_t dy = -1; dy <= 1; ++dy)
          for (int64_t dx = -1; dx <= 1; ++dx) {
            int64_t yy = std::clamp<int64_t>(y + dy, 0, h - 1);
            int64_t xx = std::clamp<int64_t>(x + dx, 0, w - 1);
            for (int64_t c = 0; c < 3; ++c)
              range = std::max(range, std::abs(double(clip.frames(fi, yy, xx, c)) -
                                               double(clip.frames(fi, y, x, c))));
          }
        if (range > edge_threshold) continue;
        for (int64_t c = 0; c < 3; ++c)
          sum +=
              std::abs(double(res.warped[p * 3 + c]) - double(clip.frames[(fi * h * w + p) * 3 + c]));
        cnt += 3;
      }
    if (cnt > 0) {
      total += sum / double(cnt);
      ++frames_counted;
    }
  }
  return frames_counted > 0 ? total / double(frames_counted) : 0.0;
}

// percep3d loss value between two clips (evaluation only).
inline double metric_percep3d(const VideoClip& a, const VideoClip& b) {
  NoGradGuard ng;
  return percep3d_loss(constant(TensorF(a.frames)), constant(TensorF(b.frames)))->value[0];
}

/*-------------------------------- pipeline ---------------------------------*/

struct PipelineConfig {
  std::filesystem::path motion_ckpt;
  std::filesystem::path video_ckpt;
  std::filesystem::path codec_ckpt;
  int steps = 50;
  uint64_t seed = 0;
  int fps = 3;
  int64_t frames = desk::kFrames;
  std::filesystem::path out_dir;
};

struct PipelineResult {
  VideoClip video;
  MotionBundle motion;
  LatentVideo latents;
  bool degenerate_motion = false;
  bool missing_flow_warning = false;
};

// Stages 2 -> 3 -> 4 wired end to end for image-to-video generation.
class Pipeline {
 public:
  explicit Pipeline(const PipelineConfig& cfg) : cfg_(cfg) {
    motion_ = MotionStage::load(cfg.motion_ckpt);
    video_ = VideoStage::load(cfg.video_ckpt);
    codec_ = std::make_unique<Codec>(Codec::load(cfg.codec_ckpt));
  }

  const MotionStage& motion_stage() const { return *motion_; }
  const VideoStage& video_stage() const { return *video_; }
  const Codec& codec() const { return *codec_; }

  // Full generation from a key frame. Every stage output is returned (and
  // persisted by the CLI) for inspection.
  PipelineResult run_image_to_video(const TensorF& key_frame, int fps, uint64_t seed) const {
    check(key_frame.rank() == 3 && key_frame.size(2) == 3,
          "run_image_to_video: key frame must be (H,W,3)");
    check_valid(key_frame.all_finite() && key_frame.abs_max() <= 1.f + 1e-6f,
                "run_image_to_video: key frame must lie in [-1,1]");
    Rng seeds(seed);
    uint64_t motion_seed = seeds.fork(1).seed();
    uint64_t video_seed = seeds.fork(2).seed();

    MotionSample ms = motion_->sample_motion(key_frame, fps, cfg_.frames, motion_seed, cfg_.steps);
    return decode_from_motion(ms.bundle, key_frame, fps, video_seed, ms.degenerate_o_max);
  }

  // Controlled evaluation: ground-truth motion, generated appearance.
  PipelineResult run_with_gt_motion(const ClipRecord& rec, uint64_t seed) const {
    ValidationReport rep = validate_record(rec);
    check_valid(rep.ok(), "run_with_gt_motion: invalid record:\n" + rep.str());
    MotionBundle gt = rec.motion;
    DepthNorm dn = normalize_depth(gt.depth);
    gt.depth = dn.depth;
    uint64_t video_seed = Rng(seed).fork(2).seed();
    return decode_from_motion(gt, rec.clip.key_frame(), rec.clip.fps, video_seed, false);
  }

  PipelineResult decode_from_motion(const MotionBundle& bundle, const TensorF& key_frame, int fps,
                                    uint64_t video_seed, bool degenerate) const {
    PipelineResult out;
    out.motion = bundle;
    out.degenerate_motion = degenerate;

    // key-frame latent in scaled units
    VideoClip key_clip;
    key_clip.frames = key_frame.reshaped({1, key_frame.size(0), key_frame.size(1), 3});
    key_clip.fps = fps;
    key_clip.key_index = 0;
    LatentVideo zk = codec_->encode_frames(key_clip);
    TensorF z_key = Tensor<float>::uninit({zk.latents.size(1), zk.latents.size(2), zk.latents.size(3)});
    float ls = video_->latent_scale();
    for (int64_t i = 0; i < z_key.numel(); ++i) z_key[i] = zk.latents[i] * ls;

    ConditionSet cond = build_condition(bundle, z_key, key_frame, fps, zk.scale_factor, false);
    out.latents = video_->sample_video_latent(cond, cfg_.frames, video_seed, cfg_.steps);
    out.video = codec_->decode_video(out.latents, &bundle.flow_i2v, fps, &out.missing_flow_warning);
    return out;
  }

  // Writes every intermediate artifact under dir.
  void persist(const PipelineResult& res, const std::filesystem::path& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "motion");
    save_tensor(dir / "motion" / "depth.npy", res.motion.depth);
    save_tensor(dir / "motion" / "flow_i2v.npy", res.motion.flow_i2v);
    save_tensor(dir / "motion" / "flow_v2i.npy", res.motion.flow_v2i);
    save_tensor(dir / "motion" / "occlusion.npy", res.motion.occlusion);
    nlohmann::json meta;
    meta["o_max"] = res.motion.o_max;
    meta["degenerate_motion"] = res.degenerate_motion;
    meta["missing_flow_warning"] = res.missing_flow_warning;
    meta["fps"] = res.video.fps;
    std::ofstream(dir / "motion" / "meta.json") << meta.dump(2) << "\n";
    save_tensor(dir / "latents.npy", res.latents.latents);
    save_tensor(dir / "video.npy", res.video.frames);
    fs::create_directories(dir / "frames");
    for (int64_t f = 0; f < res.video.f(); ++f) {
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%03lld.png", static_cast<long long>(f));
      write_png(dir / "frames" / name, res.video.frame(f));
    }
    write_gif(dir / "video.gif", res.video.frames, res.video.fps);
  }

 private:
  PipelineConfig cfg_;
  std::unique_ptr<MotionStage> motion_;
  std::unique_ptr<VideoStage> video_;
  std::unique_ptr<Codec> codec_;
};

/*-------------------------------- ablations --------------------------------*/

struct AblationRow {
  std::string name;
  double psnr = 0;
  double warp_error = 0;
  double percep3d = 0;
};

struct AblationReport {
  std::vector<AblationRow> conditioning;  // full / no-mask / no-warped-video
  std::vector<AblationRow> decoding;      // flow / 3d / 2d
  bool conditioning_order_holds = false;  // warp error: full < no-mask < no-warped
  bool decoding_percep3d_order_holds = false;
  bool decoding_warp_order_holds = false;

  nlohmann::json to_json() const {
    auto rows = [](const std::vector<AblationRow>& v) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& r : v)
        arr.push_back({{"name", r.name},
                       {"psnr", r.psnr},
                       {"warp_consistency_error", r.warp_error},
                       {"percep3d", r.percep3d}});
      return arr;
    };
    return {{"conditioning_arms", rows(conditioning)},
            {"decoder_arms", rows(decoding)},
            {"conditioning_order_holds", conditioning_order_holds},
            {"decoding_percep3d_order_holds", decoding_percep3d_order_holds},
            {"decoding_warp_order_holds", decoding_warp_order_holds}};
  }
};

// Conditioning arms: sample latent videos with GT motion under each trained
// arm, decode with the shared flow codec, and score against the GT clips.
inline std::vector<AblationRow> ablate_conditioning(
    const std::vector<ClipRecord>& records, const std::vector<std::filesystem::path>& arm_ckpts,
    const Codec& codec, int64_t frames, int steps, uint64_t seed) {
  std::vector<AblationRow> rows;
  for (const auto& path : arm_ckpts) {
    std::unique_ptr<VideoStage> stage = VideoStage::load(path);
    AblationRow row;
    row.name = arm_name(stage->config().arm);
    for (const auto& rec : records) {
      MotionBundle gt = rec.motion;
      DepthNorm dn = normalize_depth(gt.depth);
      gt.depth = dn.depth;

      VideoClip key_clip;
      TensorF key = rec.clip.key_frame();
      key_clip.frames = key.reshaped({1, key.size(0), key.size(1), 3});
      key_clip.fps = rec.clip.fps;
      key_clip.key_index = 0;
      LatentVideo zk = codec.encode_frames(key_clip);
      TensorF z_key =
          Tensor<float>::uninit({zk.latents.size(1), zk.latents.size(2), zk.latents.size(3)});
      for (int64_t i = 0; i < z_key.numel(); ++i) z_key[i] = zk.latents[i] * stage->latent_scale();

      ConditionSet cond = build_condition(gt, z_key, key, rec.clip.fps, zk.scale_factor, false);
      LatentVideo z = stage->sample_video_latent(cond, frames, Rng(seed).fork(rec.scene_seed + 2).seed(), steps);
      VideoClip decoded = codec.decode_video(z, &rec.motion.flow_i2v, rec.clip.fps);
      decoded.key_index = rec.clip.key_index;
      row.psnr += metric_psnr(decoded, rec.clip);
      row.warp_error += metric_warp_consistency(decoded, rec.motion.flow_i2v, rec.motion.occlusion);
      row.percep3d += metric_percep3d(decoded, rec.clip);
    }
    double n = double(records.size());
    row.psnr /= n;
    row.warp_error /= n;
    row.percep3d /= n;
    rows.push_back(row);
  }
  return rows;
}

// Decoder arms: encode held-out clips with each arm's (shared) encoder and
// decode with that arm.
inline std::vector<AblationRow> ablate_decoding(const std::vector<ClipRecord>& held_out,
                                                const std::vector<std::filesystem::path>& codec_ckpts) {
  std::vector<AblationRow> rows;
  for (const auto& path : codec_ckpts) {
    Codec codec = Codec::load(path);
    AblationRow row;
    const DecoderConfig& dc = codec.decoder_config();
    row.name = dc.fgda ? "flow-augmented" : (dc.temporal ? "3d" : "2d");
    for (const auto& rec : held_out) {
      LatentVideo z = codec.encode_frames(rec.clip);
      VideoClip decoded = codec.decode_video(z, dc.fgda ? &rec.motion.flow_i2v : nullptr,
                                             rec.clip.fps);
      decoded.key_index = rec.clip.key_index;
      row.psnr += metric_psnr(decoded, rec.clip);
      row.warp_error += metric_warp_consistency(decoded, rec.motion.flow_i2v, rec.motion.occlusion);
      row.percep3d += metric_percep3d(decoded, rec.clip);
    }
    double n = double(held_out.size());
    row.psnr /= n;
    row.warp_error /= n;
    row.percep3d /= n;
    rows.push_back(row);
  }
  return rows;
}

inline AblationReport run_ablations(const std::vector<ClipRecord>& train_records,
                                    const std::vector<ClipRecord>& held_out,
                                    const std::vector<std::filesystem::path>& conditioning_ckpts,
                                    const std::vector<std::filesystem::path>& codec_ckpts,
                                    const std::filesystem::path& flow_codec_ckpt, int64_t frames,
                                    int steps, uint64_t seed) {
  AblationReport rep;
  Codec codec = Codec::load(flow_codec_ckpt);
  rep.conditioning =
      ablate_conditioning(train_records, conditioning_ckpts, codec, frames, steps, seed);
  rep.decoding = ablate_decoding(held_out, codec_ckpts);

  auto find = [](const std::vector<AblationRow>& rows, const std::string& name) {
    for (const auto& r : rows)
      if (r.name == name) return r;
    throw ContractError("run_ablations: missing arm " + name);
  };
  if (rep.conditioning.size() == 3) {
    double full = find(rep.conditioning, "full").warp_error;
    double nomask = find(rep.conditioning, "no-mask").warp_error;
    double nowarp = find(rep.conditioning, "no-warped-video").warp_error;
    rep.conditioning_order_holds = full < nomask && nomask < nowarp;
  }
  if (rep.decoding.size() == 3) {
    const AblationRow& fl = find(rep.decoding, "flow-augmented");
    const AblationRow& d3 = find(rep.decoding, "3d");
    const AblationRow& d2 = find(rep.decoding, "2d");
    rep.decoding_percep3d_order_holds = fl.percep3d < d3.percep3d && d3.percep3d < d2.percep3d;
    rep.decoding_warp_order_holds = fl.warp_error < d3.warp_error && d3.warp_error < d2.warp_error;
  }
  return rep;
}

}  // namespace movia
