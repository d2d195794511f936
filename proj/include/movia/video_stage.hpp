#pragma once

#include <filesystem>

#include "movia/codec.hpp"
#include "movia/data_model.hpp"
#include "movia/diffusion.hpp"
#include "movia/motion_algebra.hpp"
#include "movia/nets.hpp"
#include "movia/optim.hpp"

namespace movia {

// Latent video diffusion conditioned on key-frame tokens, fps, depth, the
// warped latent video and the occlusion mask.

// Conditioning arms: the full model, the mask channel removed, or the
// warped latent removed entirely.
enum class ConditioningArm { Full, NoMask, NoWarped };

inline const char* arm_name(ConditioningArm a) {
  switch (a) {
    case ConditioningArm::Full: return "full";
    case ConditioningArm::NoMask: return "no-mask";
    default: return "no-warped-video";
  }
}

inline ConditioningArm arm_from_name(const std::string& s) {
  if (s == "full") return ConditioningArm::Full;
  if (s == "no-mask") return ConditioningArm::NoMask;
  if (s == "no-warped-video" || s == "no-warped") return ConditioningArm::NoWarped;
  throw ContractError("unknown conditioning arm '" + s + "'");
}

struct ConditionSet {
  TensorF key_frame;     // (H, W, 3); token embedding is computed by the stage
  int fps = 3;
  TensorF depth_latent;  // (F, h, w, 1)
  TensorF z_tilde;       // (F, h, w, c), in scaled latent units
  TensorF mask_latent;   // (F, h, w, 1)
  bool z_tilde_dropped = false;
};

// Assembles the latent-grid conditions from a motion bundle carrying
// pixel-unit flows and normalized depth. When drop_z_tilde is set the
// warped latent is zeroed; the mask is kept.
inline ConditionSet build_condition(const MotionBundle& bundle, const TensorF& z_key_scaled,
                                    const TensorF& key_frame, int fps, int64_t s,
                                    bool drop_z_tilde) {
  check(!bundle.normalized, "build_condition: bundle must carry pixel-unit flows");
  check(bundle.depth.abs_max() <= 1.f + 1e-6f,
        "build_condition: depth must be normalized to [-1,1]");
  ConditionSet c;
  c.key_frame = key_frame;
  c.fps = fps;
  c.depth_latent = area_downsample(bundle.depth, s);
  WarpedLatent wl = warped_latent_video(z_key_scaled, bundle.flow_i2v, bundle.occlusion, s);
  c.z_tilde = std::move(wl.z_tilde);
  c.mask_latent = std::move(wl.m_latent);
  if (drop_z_tilde) {
    c.z_tilde.fill(0.f);
    c.z_tilde_dropped = true;
  }
  return c;
}

struct VideoStageConfig {
  UNetConfig unet;
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  double lr = 2e-3;
  double spatial_lr_mult = 0.1;  // spatial layers at one tenth of the global rate
  double drop_prob = 0.5;
  int sample_steps = 50;
  ConditioningArm arm = ConditioningArm::Full;

  VideoStageConfig() {
    unet.in_channels = desk::kLatentChannels * 2 + 2;  // z + depth + z_tilde + mask
    unet.out_channels = desk::kLatentChannels;
    unet.base_width = 32;
    unet.depth = 2;
    unet.attn_resolutions = {4};
    unet.embed_dim = 64;
    unet.num_heads = 2;
    unet.input_size = desk::kHeight / desk::kLatentScale;
  }

  nlohmann::json to_json() const {
    return {{"unet", unet.to_json()},
            {"T", T},
            {"beta_start", beta_start},
            {"beta_end", beta_end},
            {"lr", lr},
            {"spatial_lr_mult", spatial_lr_mult},
            {"drop_prob", drop_prob},
            {"sample_steps", sample_steps},
            {"arm", arm_name(arm)},
            {"key_image_size", desk::kHeight}};
  }
  static VideoStageConfig from_json(const nlohmann::json& j) {
    VideoStageConfig c;
    c.unet = UNetConfig::from_json(j.at("unet"));
    c.T = j.at("T");
    c.beta_start = j.at("beta_start");
    c.beta_end = j.at("beta_end");
    c.lr = j.at("lr");
    c.spatial_lr_mult = j.at("spatial_lr_mult");
    c.drop_prob = j.at("drop_prob");
    c.sample_steps = j.at("sample_steps");
    c.arm = arm_from_name(j.at("arm"));
    return c;
  }
};

class VideoStage {
 public:
  VideoStage(const VideoStageConfig& cfg, uint64_t init_seed, float latent_scale = 1.f)
      : cfg_(cfg), latent_scale_(latent_scale) {
    Rng rng(init_seed);
    unet_ = std::make_unique<UNet3D>(store_, "unet", rng, cfg.unet);
    key_enc_ = KeyFrameEncoder::make(store_, "key_enc", rng, desk::kHeight, cfg.unet.key_grid,
                                     cfg.unet.embed_dim, cfg.unet.norm_groups);
    sched_ = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  }

  const VideoStageConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  float latent_scale() const { return latent_scale_; }
  void set_latent_scale(float s) { latent_scale_ = s; }
  ParamStore& store() { return store_; }

  // Spatial parameters at spatial_lr_mult (one tenth by default), temporal
  // and new layers (including the key-frame encoder) at the global rate.
  Adam make_optimizer() const {
    Adam opt({.lr = cfg_.lr});
    opt.add_group(unet_->spatial_params(), cfg_.spatial_lr_mult);
    opt.add_group(unet_->temporal_params(), 1.0);
    std::vector<VarF> enc_params;
    size_t unet_count = unet_->spatial_params().size() + unet_->temporal_params().size();
    for (size_t i = unet_count; i < store_.items().size(); ++i)
      enc_params.push_back(store_.items()[i].second);
    opt.add_group(enc_params, 1.0);
    return opt;
  }

  struct Example {
    TensorF z_scaled;  // (F, h, w, c), encoder output times latent_scale
    ConditionSet cond;  // built with drop_z_tilde = false
  };

  Example make_example(const ClipRecord& rec, const Codec& codec) const {
    Example e;
    LatentVideo z = codec.encode_frames(rec.clip);
    e.z_scaled = TensorF(z.latents.shape());
    for (int64_t i = 0; i < z.latents.numel(); ++i)
      e.z_scaled[i] = z.latents[i] * latent_scale_;
    TensorF z_key = Tensor<float>::uninit(
        {z.latents.size(1), z.latents.size(2), z.latents.size(3)});
    int64_t n = z_key.numel();
    std::copy(e.z_scaled.data() + rec.clip.key_index * n,
              e.z_scaled.data() + (rec.clip.key_index + 1) * n, z_key.data());
    MotionBundle gt = rec.motion;
    DepthNorm dn = normalize_depth(gt.depth);
    gt.depth = dn.depth;
    e.cond = build_condition(gt, z_key, rec.clip.key_frame(), rec.clip.fps,
                             rec.clip.h() / z.latents.size(1), false);
    return e;
  }

  // UNet input: concat(x_t, depth, z_tilde, mask) with the arm's channels
  // zeroed.
  TensorF assemble_input(const TensorF& x_t, const ConditionSet& cond, bool drop_z_tilde) const {
    int64_t f = x_t.size(0), h = x_t.size(1), w = x_t.size(2);
    int64_t cz = x_t.size(3);
    TensorF in = Tensor<float>::uninit({f, h, w, cz + 1 + cz + 1});
    bool no_warp = drop_z_tilde || cfg_.arm == ConditioningArm::NoWarped;
    bool no_mask = cfg_.arm == ConditioningArm::NoMask;
    for (int64_t p = 0; p < f * h * w; ++p) {
      float* dst = in.data() + p * (2 * cz + 2);
      const float* zs = x_t.data() + p * cz;
      std::copy(zs, zs + cz, dst);
      dst[cz] = cond.depth_latent[p];
      for (int64_t c = 0; c < cz; ++c)
        dst[cz + 1 + c] = no_warp ? 0.f : cond.z_tilde[p * cz + c];
      dst[2 * cz + 1] = no_mask ? 0.f : cond.mask_latent[p];
    }
    return in;
  }

  double train_step(const std::vector<const Example*>& batch, Adam& opt, Rng& rng) {
    check(!batch.empty(), "train_step: empty batch");
    opt.zero_grad();
    double total = 0;
    for (const Example* ex : batch) {
      int t = static_cast<int>(rng.uniform_int(1, cfg_.T));
      TensorF eps = rng.normal_tensor<float>(ex->z_scaled.shape());
      bool drop = rng.uniform() < cfg_.drop_prob;
      TensorF x_t = add_noise(ex->z_scaled, t, eps, sched_);
      TensorF input = assemble_input(x_t, ex->cond, drop);
      VarF tokens = key_enc_(ex->cond.key_frame);
      VarF eps_hat = unet_->forward(constant(std::move(input)), t, ex->cond.fps, tokens);
      VarF loss = scale(mse_loss(eps_hat, constant(std::move(eps))), 1.0 / double(batch.size()));
      backward(loss);
      total += loss->value[0];
    }
    opt.step();
    return total;
  }

  // Reverse diffusion in latent space; returns unscaled latents ready for
  // the decoder. The warped latent is always provided at inference.
  LatentVideo sample_video_latent(const ConditionSet& cond, int64_t frames, uint64_t seed,
                                  int steps = 0) const {
    check(!cond.z_tilde_dropped, "sample_video_latent: condition must carry the warped latent");
    NoGradGuard ng;
    if (steps <= 0) steps = cfg_.sample_steps;
    VarF tokens = key_enc_(cond.key_frame);
    int64_t hw = cfg_.unet.input_size;
    int64_t cz = cfg_.unet.out_channels;
    DenoiserFn fn = [&](const TensorF& x_t, int t) {
      TensorF input = assemble_input(x_t, cond, false);
      return unet_->forward(constant(std::move(input)), t, cond.fps, tokens)->value;
    };
    TensorF z_scaled = sample(fn, {frames, hw, hw, cz}, steps, seed, sched_);
    LatentVideo out;
    out.latents = TensorF(z_scaled.shape());
    float inv = latent_scale_ > 0 ? 1.f / latent_scale_ : 1.f;
    for (int64_t i = 0; i < z_scaled.numel(); ++i) out.latents[i] = z_scaled[i] * inv;
    out.scale_factor = desk::kLatentScale;
    return out;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json meta;
    meta["config"] = cfg_.to_json();
    meta["latent_scale"] = latent_scale_;
    save_checkpoint(path, "video", meta, store_);
  }

  static std::unique_ptr<VideoStage> load(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.kind != "video")
      throw CheckpointError("expected a video checkpoint, got '" + ck.kind + "'");
    auto stage = std::make_unique<VideoStage>(VideoStageConfig::from_json(ck.meta.at("config")), 0,
                                              ck.meta.value("latent_scale", 1.f));
    load_into_store(ck, stage->store_);
    return stage;
  }

 private:
  VideoStageConfig cfg_;
  ParamStore store_;
  std::unique_ptr<UNet3D> unet_;
  KeyFrameEncoder key_enc_;
  NoiseSchedule sched_;
  float latent_scale_ = 1.f;
};

}  // namespace movia
