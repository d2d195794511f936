#pragma once

#include <filesystem>

#include "movia/data_model.hpp"
#include "movia/diffusion.hpp"
#include "movia/motion_algebra.hpp"
#include "movia/nets.hpp"
#include "movia/optim.hpp"

namespace movia {

// Joint diffusion over (depth, i2v flow, v2i flow) conditioned on the
// key-frame tokens and fps.

// Channel order of the packed motion tensor.
enum MotionChannel { kDepth = 0, kI2vDx = 1, kI2vDy = 2, kV2iDx = 3, kV2iDy = 4 };
constexpr int64_t kMotionChannels = 5;

// (F, H, W, 5) from a normalized bundle.
inline TensorF pack_motion(const MotionBundle& b) {
  check(b.normalized, "pack_motion: bundle must be normalized");
  int64_t f = b.depth.size(0), h = b.depth.size(1), w = b.depth.size(2);
  TensorF out = Tensor<float>::uninit({f, h, w, kMotionChannels});
  for (int64_t i = 0; i < f * h * w; ++i) {
    out[i * 5 + kDepth] = b.depth[i];
    out[i * 5 + kI2vDx] = b.flow_i2v[i * 2];
    out[i * 5 + kI2vDy] = b.flow_i2v[i * 2 + 1];
    out[i * 5 + kV2iDx] = b.flow_v2i[i * 2];
    out[i * 5 + kV2iDy] = b.flow_v2i[i * 2 + 1];
  }
  return out;
}

// Inverse of pack_motion; occlusion and extrema are left for the caller.
inline MotionBundle unpack_motion(const TensorF& packed) {
  check(packed.rank() == 4 && packed.size(3) == kMotionChannels, "unpack_motion: bad shape");
  int64_t f = packed.size(0), h = packed.size(1), w = packed.size(2);
  MotionBundle b;
  b.depth = Tensor<float>::uninit({f, h, w, 1});
  b.flow_i2v = Tensor<float>::uninit({f, h, w, 2});
  b.flow_v2i = Tensor<float>::uninit({f, h, w, 2});
  b.occlusion = TensorF({f, h, w, 1}, 1.f);
  for (int64_t i = 0; i < f * h * w; ++i) {
    b.depth[i] = packed[i * 5 + kDepth];
    b.flow_i2v[i * 2] = packed[i * 5 + kI2vDx];
    b.flow_i2v[i * 2 + 1] = packed[i * 5 + kI2vDy];
    b.flow_v2i[i * 2] = packed[i * 5 + kV2iDx];
    b.flow_v2i[i * 2 + 1] = packed[i * 5 + kV2iDy];
  }
  b.normalized = true;
  return b;
}

struct MotionStageConfig {
  UNetConfig unet;
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  double lr = 2e-3;
  double spatial_lr_mult = 1.0;  // trained from scratch, no pretrained prior to preserve
  int sample_steps = 50;

  MotionStageConfig() {
    unet.in_channels = kMotionChannels;
    unet.out_channels = kMotionChannels;
    unet.base_width = 16;
    unet.depth = 2;
    unet.attn_resolutions = {16};
    unet.embed_dim = 32;
    unet.num_heads = 2;
    unet.input_size = desk::kHeight;
  }

  nlohmann::json to_json() const {
    return {{"unet", unet.to_json()}, {"T", T},
            {"beta_start", beta_start}, {"beta_end", beta_end},
            {"lr", lr},                 {"spatial_lr_mult", spatial_lr_mult},
            {"sample_steps", sample_steps}};
  }
  static MotionStageConfig from_json(const nlohmann::json& j) {
    MotionStageConfig c;
    c.unet = UNetConfig::from_json(j.at("unet"));
    c.T = j.at("T");
    c.beta_start = j.at("beta_start");
    c.beta_end = j.at("beta_end");
    c.lr = j.at("lr");
    c.spatial_lr_mult = j.at("spatial_lr_mult");
    c.sample_steps = j.at("sample_steps");
    return c;
  }
};

struct MotionSample {
  MotionBundle bundle;  // pixel-unit flows, normalized depth, computed mask
  TensorF packed_normalized;
  bool degenerate_o_max = false;
  double o_max_residual = 0;
};

class MotionStage {
 public:
  MotionStage(const MotionStageConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    Rng rng(init_seed);
    unet_ = std::make_unique<UNet3D>(store_, "unet", rng, cfg.unet);
    key_enc_ = KeyFrameEncoder::make(store_, "key_enc", rng, cfg.unet.input_size, cfg.unet.key_grid,
                                     cfg.unet.embed_dim, cfg.unet.norm_groups);
    sched_ = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  }

  const MotionStageConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  ParamStore& store() { return store_; }
  const UNet3D& unet() const { return *unet_; }
  const KeyFrameEncoder& key_encoder() const { return key_enc_; }

  Adam make_optimizer() const {
    Adam opt({.lr = cfg_.lr});
    opt.add_group(unet_->spatial_params(), cfg_.spatial_lr_mult);
    opt.add_group(unet_->temporal_params(), 1.0);
    // the key-frame encoder is a new (untrained) pathway
    std::vector<VarF> enc_params;
    size_t unet_count = unet_->spatial_params().size() + unet_->temporal_params().size();
    for (size_t i = unet_count; i < store_.items().size(); ++i)
      enc_params.push_back(store_.items()[i].second);
    opt.add_group(enc_params, 1.0);
    return opt;
  }

  struct Example {
    TensorF packed;     // normalized (F,H,W,5)
    TensorF key_frame;  // (H,W,3)
    int fps = 3;
  };

  static Example make_example(const ClipRecord& rec) {
    Example e;
    e.packed = pack_motion(normalize_bundle(rec.motion));
    e.key_frame = rec.clip.key_frame();
    e.fps = rec.clip.fps;
    return e;
  }

  // One optimizer step over the batch; gradients flow to the denoiser and
  // the key-frame encoder. Deterministic given the rng state.
  double train_step(const std::vector<const Example*>& batch, Adam& opt, Rng& rng) {
    check(!batch.empty(), "train_step: empty batch");
    opt.zero_grad();
    double total = 0;
    for (const Example* ex : batch) {
      int t = static_cast<int>(rng.uniform_int(1, cfg_.T));
      TensorF eps = rng.normal_tensor<float>(ex->packed.shape());
      TensorF x_t = add_noise(ex->packed, t, eps, sched_);
      VarF tokens = key_enc_(ex->key_frame);
      VarF eps_hat = unet_->forward(constant(std::move(x_t)), t, ex->fps, tokens);
      VarF loss = scale(mse_loss(eps_hat, constant(std::move(eps))), 1.0 / double(batch.size()));
      backward(loss);
      total += loss->value[0];
    }
    opt.step();
    return total;
  }

  // Reverse diffusion, clamp, key-frame flow zeroing, o_max recovery and
  // occlusion estimation; flows come back in pixel units.
  MotionSample sample_motion(const TensorF& key_frame, int fps, int64_t frames, uint64_t seed,
                             int steps = 0) const {
    NoGradGuard ng;
    if (steps <= 0) steps = cfg_.sample_steps;
    VarF tokens = key_enc_(key_frame);
    DenoiserFn fn = [&](const TensorF& x_t, int t) {
      return unet_->forward(constant(TensorF(x_t)), t, fps, tokens)->value;
    };
    int64_t hw = cfg_.unet.input_size;
    TensorF packed = sample(fn, {frames, hw, hw, kMotionChannels}, steps, seed, sched_);
    for (int64_t i = 0; i < packed.numel(); ++i)
      packed[i] = std::clamp(packed[i], -1.f, 1.f);
    int64_t key = (frames - 1) / 2;
    for (int64_t p = 0; p < hw * hw; ++p) {
      float* px = packed.data() + (key * hw * hw + p) * kMotionChannels;
      px[kI2vDx] = px[kI2vDy] = px[kV2iDx] = px[kV2iDy] = 0.f;
    }

    MotionSample out;
    out.packed_normalized = packed;
    MotionBundle b = unpack_motion(packed);
    OMaxResult rec = recover_o_max(b.depth, b.flow_i2v, b.flow_v2i);
    out.degenerate_o_max = rec.degenerate;
    out.o_max_residual = rec.residual;
    if (rec.degenerate) {
      b.flow_i2v.fill(0.f);
      b.flow_v2i.fill(0.f);
      b.occlusion.fill(1.f);
      b.o_max = 0.f;
    } else {
      b.flow_i2v = scale_flow(b.flow_i2v, rec.o_max);
      b.flow_v2i = scale_flow(b.flow_v2i, rec.o_max);
      b.occlusion = occlusion_mask_video(b.flow_i2v, b.flow_v2i);
      b.o_max = rec.o_max;
    }
    b.normalized = false;  // pixel-unit flows; depth stays in [-1,1]
    out.bundle = std::move(b);
    return out;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json meta;
    meta["config"] = cfg_.to_json();
    save_checkpoint(path, "motion", meta, store_);
  }

  static std::unique_ptr<MotionStage> load(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.kind != "motion")
      throw CheckpointError("expected a motion checkpoint, got '" + ck.kind + "'");
    auto stage = std::make_unique<MotionStage>(MotionStageConfig::from_json(ck.meta.at("config")), 0);
    load_into_store(ck, stage->store_);
    return stage;
  }

 private:
  MotionStageConfig cfg_;
  ParamStore store_;
  std::unique_ptr<UNet3D> unet_;
  KeyFrameEncoder key_enc_;
  NoiseSchedule sched_;
};

// Normalized-space depth/flow error between a sampled motion tensor and the
// ground truth of the same clip.
inline double motion_packed_mae(const TensorF& sampled_packed, const ClipRecord& rec) {
  TensorF gt = pack_motion(normalize_bundle(rec.motion));
  return mean_abs_diff(sampled_packed, gt);
}

}  // namespace movia
