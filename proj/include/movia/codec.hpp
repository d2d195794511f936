#pragma once

#include <array>
#include <filesystem>
#include <optional>

#include "movia/data_model.hpp"
#include "movia/motion_algebra.hpp"
#include "movia/nets.hpp"
#include "movia/optim.hpp"
#include "movia/warp.hpp"

namespace movia {

/*------------------------------ shared blocks ------------------------------*/

struct PlainResBlock {
  GroupNormLayer n1, n2;
  Conv2dLayer c1, c2;
  std::optional<Conv2dLayer> skip;

  static PlainResBlock make(ParamStore& ps, const std::string& name, Rng& rng, int64_t cin,
                            int64_t cout, int64_t groups, bool zero_last = true) {
    PlainResBlock b;
    b.n1 = GroupNormLayer::make(ps, name + ".n1", cin, groups);
    b.c1 = Conv2dLayer::make(ps, name + ".c1", rng, 3, 3, cin, cout);
    b.n2 = GroupNormLayer::make(ps, name + ".n2", cout, groups);
    b.c2 = Conv2dLayer::make(ps, name + ".c2", rng, 3, 3, cout, cout, 1, zero_last);
    if (cin != cout) b.skip = Conv2dLayer::make(ps, name + ".skip", rng, 1, 1, cin, cout);
    return b;
  }

  VarF operator()(const VarF& x) const {
    VarF h = c2(silu(n2(c1(silu(n1(x))))));
    return add(h, skip ? (*skip)(x) : x);
  }
};

/*--------------------------------- encoder ---------------------------------*/

struct EncoderConfig {
  int64_t width = 32;
  int64_t latent_channels = desk::kLatentChannels;
  int64_t norm_groups = 8;

  nlohmann::json to_json() const {
    return {{"width", width}, {"latent_channels", latent_channels}, {"norm_groups", norm_groups}};
  }
  static EncoderConfig from_json(const nlohmann::json& j) {
    return {j.at("width"), j.at("latent_channels"), j.at("norm_groups")};
  }
};

// Per-frame 2D encoder, total downscale 4, no temporal mixing.
struct FrameEncoder {
  Conv2dLayer c_in, d1, d2, c_out;
  GroupNormLayer n1, n2, n3;

  static FrameEncoder make(ParamStore& ps, const std::string& name, Rng& rng,
                           const EncoderConfig& cfg) {
    FrameEncoder e;
    int64_t w = cfg.width;
    e.c_in = Conv2dLayer::make(ps, name + ".c_in", rng, 3, 3, 3, w);
    e.n1 = GroupNormLayer::make(ps, name + ".n1", w, cfg.norm_groups);
    e.d1 = Conv2dLayer::make(ps, name + ".d1", rng, 3, 3, w, 2 * w, 2);
    e.n2 = GroupNormLayer::make(ps, name + ".n2", 2 * w, cfg.norm_groups);
    e.d2 = Conv2dLayer::make(ps, name + ".d2", rng, 3, 3, 2 * w, 2 * w, 2);
    e.n3 = GroupNormLayer::make(ps, name + ".n3", 2 * w, cfg.norm_groups);
    e.c_out = Conv2dLayer::make(ps, name + ".c_out", rng, 3, 3, 2 * w, cfg.latent_channels);
    return e;
  }

  VarF operator()(const VarF& x) const {
    VarF h = c_in(x);
    h = d1(silu(n1(h)));
    h = d2(silu(n2(h)));
    return c_out(silu(n3(h)));
  }
};

/*--------------------------------- decoder ---------------------------------*/

struct DecoderConfig {
  int64_t latent_channels = desk::kLatentChannels;
  std::array<int64_t, 3> widths = {64, 48, 32};  // stage channels at 8, 16, 32
  int64_t norm_groups = 8;
  int64_t tower_width = 16;
  bool temporal = false;  // 1D temporal convolutions after spatial convolutions
  bool fgda = false;      // flow-guided deformable alignment + refinement

  nlohmann::json to_json() const {
    return {{"latent_channels", latent_channels},
            {"widths", widths},
            {"norm_groups", norm_groups},
            {"tower_width", tower_width},
            {"temporal", temporal},
            {"fgda", fgda}};
  }
  static DecoderConfig from_json(const nlohmann::json& j) {
    DecoderConfig c;
    c.latent_channels = j.at("latent_channels");
    auto w = j.at("widths");
    c.widths = {w.at(0), w.at(1), w.at(2)};
    c.norm_groups = j.at("norm_groups");
    c.tower_width = j.at("tower_width");
    c.temporal = j.at("temporal");
    c.fgda = j.at("fgda");
    return c;
  }
};

// Flow-guided deformable alignment of the key-frame feature onto every
// frame, followed by residual refinement. Offsets and modulations come from
// a small conv tower over (flow, warped key feature, frame feature); its
// closing layer starts at zero so alignment begins as a plain convolution
// of the key feature and refinement begins as the identity.
struct FgdaBlock {
  static constexpr int64_t kTaps = 9;  // 3x3 deformable kernel
  Conv2dLayer t1, t2;
  VarF dc_w, dc_b;
  PlainResBlock r1, r2;
  Conv2dLayer r_out;

  static FgdaBlock make(ParamStore& ps, const std::string& name, Rng& rng, int64_t channels,
                        int64_t tower_width, int64_t groups) {
    FgdaBlock b;
    b.t1 = Conv2dLayer::make(ps, name + ".t1", rng, 3, 3, 2 + 2 * channels, tower_width);
    b.t2 = Conv2dLayer::make(ps, name + ".t2", rng, 3, 3, tower_width, 3 * kTaps, 1,
                             /*zero_init=*/true);
    b.dc_w = ps.create(name + ".dc.w",
                       init::he_normal(rng, {kTaps * channels, channels}, kTaps * channels));
    b.dc_b = ps.create(name + ".dc.b", TensorF({channels}));
    b.r1 = PlainResBlock::make(ps, name + ".r1", rng, 2 * channels, channels, groups);
    b.r2 = PlainResBlock::make(ps, name + ".r2", rng, channels, channels, groups);
    b.r_out = Conv2dLayer::make(ps, name + ".r_out", rng, 1, 1, channels, channels, 1,
                                /*zero_init=*/true);
    return b;
  }

  // h: (F, sz, sz, C); latent_flows: (F, sz, sz, 2) in latent pixels.
  VarF operator()(const VarF& h, const TensorF& latent_flows, int64_t key_index) const {
    int64_t f = h->value.size(0), sz = h->value.size(1), c = h->value.size(3);
    VarF key_feat = slice_frame(h, key_index);
    std::vector<VarF> aligned;
    aligned.reserve(size_t(f));
    for (int64_t fi = 0; fi < f; ++fi) {
      TensorF flow_f = Tensor<float>::uninit({sz, sz, 2});
      std::copy(latent_flows.data() + fi * sz * sz * 2, latent_flows.data() + (fi + 1) * sz * sz * 2,
                flow_f.data());
      VarF flow_c = constant(TensorF(flow_f));
      VarF warped = warp_op(key_feat, flow_c);
      VarF frame = slice_frame(h, fi);
      VarF tin = reshape(concat_channels<float>({flow_c, warped, frame}), {1, sz, sz, 2 + 2 * c});
      VarF tower = reshape(t2(silu(t1(tin))), {sz, sz, 3 * kTaps});
      VarF offsets = slice_channels(tower, 0, 2 * kTaps);
      VarF modulation = scale(sigmoid(slice_channels(tower, 2 * kTaps, 3 * kTaps)), 2.0);
      aligned.push_back(deform_conv(key_feat, flow_f, offsets, modulation, dc_w, dc_b, 3, 3));
    }
    VarF zhat = stack_frames(aligned);
    VarF refined = r_out(r2(r1(concat_channels<float>({zhat, h}))));
    return add(h, refined);
  }
};

// 2D decoder upgradeable to 3D (temporal convolutions) and to the
// flow-augmented form (FGDA + refinement per stage). Stages run at 8, 16
// and 32 pixels; per-stage flows are the pixel flows rescaled by 4, 2, 1.
struct Decoder {
  DecoderConfig cfg;
  Conv2dLayer c_in;
  std::array<PlainResBlock, 3> res;
  std::array<std::optional<TemporalConvBlock>, 3> tconv;
  std::array<std::optional<FgdaBlock>, 3> fgda;
  std::array<std::optional<Conv2dLayer>, 2> up;
  GroupNormLayer head_n;
  Conv2dLayer head_c;

  static Decoder make(ParamStore& ps, const std::string& name, Rng& rng,
                      const DecoderConfig& cfg) {
    Decoder d;
    d.cfg = cfg;
    d.c_in = Conv2dLayer::make(ps, name + ".c_in", rng, 3, 3, cfg.latent_channels, cfg.widths[0]);
    for (int s = 0; s < 3; ++s) {
      std::string st = name + ".s" + std::to_string(s);
      d.res[size_t(s)] = PlainResBlock::make(ps, st + ".res", rng, cfg.widths[size_t(s)],
                                             cfg.widths[size_t(s)], cfg.norm_groups);
      if (cfg.temporal)
        d.tconv[size_t(s)] = TemporalConvBlock::make(ps, st + ".tconv", rng, cfg.widths[size_t(s)],
                                                     3, cfg.norm_groups);
      if (cfg.fgda)
        d.fgda[size_t(s)] = FgdaBlock::make(ps, st + ".fgda", rng, cfg.widths[size_t(s)],
                                            cfg.tower_width, cfg.norm_groups);
      if (s < 2)
        d.up[size_t(s)] = Conv2dLayer::make(ps, st + ".up", rng, 3, 3, cfg.widths[size_t(s)],
                                            cfg.widths[size_t(s) + 1]);
    }
    d.head_n = GroupNormLayer::make(ps, name + ".head.n", cfg.widths[2], cfg.norm_groups);
    d.head_c = Conv2dLayer::make(ps, name + ".head.c", rng, 3, 3, cfg.widths[2], 3);
    return d;
  }

  // z: (F, 8, 8, c); flows_pixel: (F, 32, 32, 2) or nullptr.
  VarF operator()(const VarF& z, const TensorF* flows_pixel, int64_t key_index) const {
    VarF h = c_in(z);
    int64_t scale = 4;
    for (int s = 0; s < 3; ++s) {
      h = res[size_t(s)](h);
      if (cfg.temporal && tconv[size_t(s)]) h = (*tconv[size_t(s)])(h);
      if (cfg.fgda && fgda[size_t(s)] && flows_pixel) {
        TensorF lat_flows = rescale_flow_to_latent(*flows_pixel, scale);
        h = (*fgda[size_t(s)])(h, lat_flows, key_index);
      }
      if (s < 2) {
        h = (*up[size_t(s)])(upsample_nearest2x(h));
        scale /= 2;
      }
    }
    return tanh_op(head_c(silu(head_n(h))));
  }
};

/*------------------------------ discriminators -----------------------------*/

struct PatchDisc2d {
  Conv2dLayer c1, c2, c3;

  static PatchDisc2d make(ParamStore& ps, const std::string& name, Rng& rng) {
    PatchDisc2d d;
    d.c1 = Conv2dLayer::make(ps, name + ".c1", rng, 4, 4, 3, 32, 2);
    d.c2 = Conv2dLayer::make(ps, name + ".c2", rng, 4, 4, 32, 64, 2);
    d.c3 = Conv2dLayer::make(ps, name + ".c3", rng, 3, 3, 64, 1);
    return d;
  }
  VarF operator()(const VarF& x) const { return c3(leaky_relu(c2(leaky_relu(c1(x))))); }
};

struct PatchDisc3d {
  Conv3dLayer c1, c2, c3;

  static PatchDisc3d make(ParamStore& ps, const std::string& name, Rng& rng) {
    PatchDisc3d d;
    d.c1 = Conv3dLayer::make(ps, name + ".c1", rng, 3, 4, 4, 3, 32, 2, 1);
    d.c2 = Conv3dLayer::make(ps, name + ".c2", rng, 3, 4, 4, 32, 64, 2, 2);
    d.c3 = Conv3dLayer::make(ps, name + ".c3", rng, 3, 3, 3, 64, 1, 1, 1);
    return d;
  }
  VarF operator()(const VarF& x) const { return c3(leaky_relu(c2(leaky_relu(c1(x))))); }
};

/*----------------------------- perceptual losses ---------------------------*/

namespace percep_detail {

// Depthwise 3x3 with a fixed kernel, realized as constant dense weights.
inline VarF fixed_filter(const VarF& x, const std::array<float, 9>& k) {
  int64_t c = x->value.size(3);
  TensorF w({3, 3, c, c});
  for (int64_t t = 0; t < 9; ++t)
    for (int64_t cc = 0; cc < c; ++cc) w[(t * c + cc) * c + cc] = k[size_t(t)];
  return conv2d(x, constant(std::move(w)), VarF());
}

inline VarF sobel_x(const VarF& x) {
  return fixed_filter(x, {-1, 0, 1, -2, 0, 2, -1, 0, 1});
}
inline VarF sobel_y(const VarF& x) {
  return fixed_filter(x, {-1, -2, -1, 0, 0, 0, 1, 2, 1});
}
inline VarF laplacian(const VarF& x) {
  return fixed_filter(x, {0, 1, 0, 1, -4, 1, 0, 1, 0});
}

// x[f] - x[f-1] via a fixed temporal kernel.
inline VarF temporal_diff(const VarF& x) {
  int64_t c = x->value.size(3);
  TensorF w({3, c, c});
  for (int64_t cc = 0; cc < c; ++cc) {
    w[(0 * c + cc) * c + cc] = -1.f;
    w[(1 * c + cc) * c + cc] = 1.f;
  }
  return conv1d_temporal(x, constant(std::move(w)), VarF());
}

inline VarF feature_l1(const VarF& a, const VarF& b) {
  VarF loss = l1_loss(sobel_x(a), sobel_x(b));
  loss = add(loss, l1_loss(sobel_y(a), sobel_y(b)));
  loss = add(loss, l1_loss(laplacian(a), laplacian(b)));
  return loss;
}

}  // namespace percep_detail

// Multi-scale image-gradient features, averaged per frame. A stand-in with
// the same per-frame structure as a pretrained 2D perceptual network.
inline VarF percep2d_loss(const VarF& x_hat, const VarF& x) {
  using namespace percep_detail;
  VarF a = x_hat, b = x;
  VarF loss = feature_l1(a, b);
  for (int s = 0; s < 2; ++s) {
    a = avg_pool2d(a, 2);
    b = avg_pool2d(b, 2);
    loss = add(loss, feature_l1(a, b));
  }
  return scale(loss, 1.0 / 3.0);
}

// The 2D features plus temporal-difference features, so frame order matters.
inline VarF percep3d_loss(const VarF& x_hat, const VarF& x) {
  using namespace percep_detail;
  VarF da = temporal_diff(x_hat);
  VarF db = temporal_diff(x);
  VarF loss = add(l1_loss(da, db), feature_l1(da, db));
  VarF pa = avg_pool2d(da, 2), pb = avg_pool2d(db, 2);
  loss = add(loss, add(l1_loss(pa, pb), feature_l1(pa, pb)));
  return scale(loss, 0.5);
}

/*------------------------------ loss assembly ------------------------------*/

struct CodecLossConfig {
  double lambda1 = 1.0;  // 2D perceptual
  double lambda2 = 1.0;  // 3D perceptual
  double lambda3 = 0.1;  // 2D GAN
  double lambda4 = 0.1;  // 3D GAN
  int64_t gan_warmup_steps = 2000;

  nlohmann::json to_json() const {
    return {{"lambda1", lambda1}, {"lambda2", lambda2}, {"lambda3", lambda3},
            {"lambda4", lambda4}, {"gan_warmup_steps", gan_warmup_steps}};
  }
  static CodecLossConfig from_json(const nlohmann::json& j) {
    return {j.at("lambda1"), j.at("lambda2"), j.at("lambda3"), j.at("lambda4"),
            j.at("gan_warmup_steps")};
  }
};

struct CodecLossParts {
  double l1 = 0, percep2d = 0, percep3d = 0, gan2d = 0, gan3d = 0, total = 0;
};

// Generator-side loss. Discriminators may be null (plain reconstruction
// training); GAN terms are zero before gan_warmup_steps.
inline VarF codec_loss(const VarF& x_hat, const TensorF& x, const PatchDisc2d* disc2d,
                       const PatchDisc3d* disc3d, const CodecLossConfig& cfg, int64_t step,
                       CodecLossParts* parts = nullptr) {
  VarF xc = constant(TensorF(x));
  VarF total = l1_loss(x_hat, xc);
  CodecLossParts p;
  p.l1 = total->value[0];
  if (cfg.lambda1 > 0) {
    VarF t = percep2d_loss(x_hat, xc);
    p.percep2d = t->value[0];
    total = add(total, scale(t, cfg.lambda1));
  }
  if (cfg.lambda2 > 0) {
    VarF t = percep3d_loss(x_hat, xc);
    p.percep3d = t->value[0];
    total = add(total, scale(t, cfg.lambda2));
  }
  bool gan_on = step >= cfg.gan_warmup_steps;
  if (gan_on && cfg.lambda3 > 0 && disc2d) {
    VarF t = scale(mean_all((*disc2d)(x_hat)), -1.0);
    p.gan2d = t->value[0];
    total = add(total, scale(t, cfg.lambda3));
  }
  if (gan_on && cfg.lambda4 > 0 && disc3d) {
    VarF t = scale(mean_all((*disc3d)(x_hat)), -1.0);
    p.gan3d = t->value[0];
    total = add(total, scale(t, cfg.lambda4));
  }
  p.total = total->value[0];
  if (parts) *parts = p;
  return total;
}

// Hinge loss for one discriminator update; the fake clip is detached.
template <typename D>
VarF disc_hinge_loss(const D& disc, const TensorF& real, const TensorF& fake) {
  VarF lr = mean_all(relu(add_scalar(scale(disc(constant(TensorF(real))), -1.0), 1.0)));
  VarF lf = mean_all(relu(add_scalar(disc(constant(TensorF(fake))), 1.0)));
  return add(lr, lf);
}

/*------------------------------- codec bundle ------------------------------*/

struct CodecTrainConfig {
  EncoderConfig enc;
  DecoderConfig dec;  // arm flags ignored here; arms are derived
  CodecLossConfig loss;
  int64_t steps_2d = 1600;   // joint encoder + 2D decoder
  int64_t steps_arm = 700;   // per upgraded decoder arm, encoder frozen
  int64_t batch_clips = 1;
  double lr = 2e-3;
  uint64_t seed = 77;
  int64_t log_every = 200;
  // divergence guard
  double guard_factor = 2.0;
  int64_t guard_patience = 500;
};

// Encoder plus one decoder arm, with enough metadata to rebuild both.
class Codec {
 public:
  Codec(const EncoderConfig& ec, const DecoderConfig& dc, uint64_t init_seed) : enc_cfg_(ec), dec_cfg_(dc) {
    Rng rng(init_seed);
    encoder_ = FrameEncoder::make(enc_store_, "enc", rng, ec);
    decoder_ = Decoder::make(dec_store_, "dec", rng, dc);
  }

  const EncoderConfig& encoder_config() const { return enc_cfg_; }
  const DecoderConfig& decoder_config() const { return dec_cfg_; }
  ParamStore& encoder_store() { return enc_store_; }
  ParamStore& decoder_store() { return dec_store_; }
  const FrameEncoder& encoder() const { return encoder_; }
  const Decoder& decoder() const { return decoder_; }
  float latent_scale() const { return latent_scale_; }
  void set_latent_scale(float s) { latent_scale_ = s; }

  // Frame-by-frame deterministic encoding (no grad).
  LatentVideo encode_frames(const VideoClip& clip) const {
    check(clip.h() % desk::kLatentScale == 0 && clip.w() % desk::kLatentScale == 0,
          "encode_frames: H and W must be divisible by the latent scale");
    NoGradGuard ng;
    VarF z = encoder_(constant(TensorF(clip.frames)));
    LatentVideo out;
    out.latents = z->value;
    out.scale_factor = clip.h() / z->value.size(1);
    return out;
  }

  VideoClip decode_video(const LatentVideo& z, const TensorF* flows_pixel, int fps,
                         bool* missing_flow_warning = nullptr) const {
    NoGradGuard ng;
    bool warn = dec_cfg_.fgda && flows_pixel == nullptr;
    if (missing_flow_warning) *missing_flow_warning = warn;
    int64_t key = (z.latents.size(0) - 1) / 2;
    VarF x = decoder_(constant(TensorF(z.latents)), flows_pixel, key);
    VideoClip clip;
    clip.frames = x->value;
    clip.fps = fps;
    clip.key_index = key;
    return clip;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json meta;
    meta["enc"] = enc_cfg_.to_json();
    meta["dec"] = dec_cfg_.to_json();
    meta["latent_scale"] = latent_scale_;
    ParamStore merged;
    for (const auto& [n, v] : enc_store_.items()) merged.create("E." + n, TensorF(v->value));
    for (const auto& [n, v] : dec_store_.items()) merged.create("D." + n, TensorF(v->value));
    save_checkpoint(path, "codec", meta, merged);
  }

  static Codec load(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.kind != "codec")
      throw CheckpointError("expected a codec checkpoint, got '" + ck.kind + "'");
    Codec c(EncoderConfig::from_json(ck.meta.at("enc")), DecoderConfig::from_json(ck.meta.at("dec")),
            0);
    c.latent_scale_ = ck.meta.value("latent_scale", 1.f);
    for (auto& [name, v] : c.enc_store_.items()) {
      auto it = ck.tensors.find("E." + name);
      if (it == ck.tensors.end() || !(it->second.shape() == v->value.shape()))
        throw CheckpointError("codec checkpoint missing/mismatched " + name);
      v->value = it->second;
    }
    for (auto& [name, v] : c.dec_store_.items()) {
      auto it = ck.tensors.find("D." + name);
      if (it == ck.tensors.end() || !(it->second.shape() == v->value.shape()))
        throw CheckpointError("codec checkpoint missing/mismatched " + name);
      v->value = it->second;
    }
    return c;
  }

 private:
  EncoderConfig enc_cfg_;
  DecoderConfig dec_cfg_;
  ParamStore enc_store_, dec_store_;
  FrameEncoder encoder_;
  Decoder decoder_;
  float latent_scale_ = 1.f;
};

// Copies values of parameters whose names and shapes match; returns how many
// were copied (used to seed the 3D/flow decoders from the trained 2D one).
inline int64_t copy_matching_params(const ParamStore& src, ParamStore& dst) {
  std::unordered_map<std::string, VarF> lookup;
  for (const auto& [n, v] : src.items()) lookup.emplace(n, v);
  int64_t copied = 0;
  for (auto& [n, v] : dst.items()) {
    auto it = lookup.find(n);
    if (it != lookup.end() && it->second->value.shape() == v->value.shape()) {
      v->value = it->second->value;
      ++copied;
    }
  }
  return copied;
}

/*-------------------------------- training ---------------------------------*/

struct CodecTrainReport {
  double l1_first = 0;
  double l1_last = 0;
  float latent_scale = 1.f;
  std::filesystem::path path_2d, path_3d, path_flow;
};

namespace codec_detail {

struct DivergenceGuard {
  double reference = -1;
  double factor;
  int64_t patience;
  int64_t bad = 0;

  DivergenceGuard(double f, int64_t p) : factor(f), patience(p) {}

  void observe(double l1) {
    if (reference < 0) reference = l1;
    bad = (l1 > factor * reference) ? bad + 1 : 0;
    check_valid(bad < patience,
                "codec training diverged: L1 above " + std::to_string(factor) +
                    "x its initial value for " + std::to_string(patience) + " steps");
  }
};

}  // namespace codec_detail

// Trains the per-frame autoencoder first (the 2D arm, encoder + decoder
// jointly), then freezes the encoder and upgrades the decoder twice with
// equal budgets: temporal convolutions only (3D arm) and temporal plus
// flow-guided alignment (flow arm). Writes codec_2d / codec_3d / codec_flow
// checkpoints into out_dir.
inline CodecTrainReport train_codec(const std::vector<ClipRecord>& records,
                                    const CodecTrainConfig& cfg,
                                    const std::filesystem::path& out_dir,
                                    std::ostream* log = nullptr) {
  check(!records.empty(), "train_codec: empty dataset");
  std::filesystem::create_directories(out_dir);
  CodecTrainReport report;
  Rng rng(cfg.seed);

  DecoderConfig d2 = cfg.dec;
  d2.temporal = false;
  d2.fgda = false;
  Codec codec2d(cfg.enc, d2, cfg.seed);

  ParamStore disc_store;
  Rng drng(cfg.seed + 1);
  PatchDisc2d disc2d = PatchDisc2d::make(disc_store, "d2", drng);

  CodecLossConfig loss2d = cfg.loss;
  loss2d.lambda2 = 0;  // per-frame phase: no temporal terms
  loss2d.lambda4 = 0;

  Adam g_opt({.lr = cfg.lr});
  g_opt.add_group(codec2d.encoder_store().all(), 1.0);
  g_opt.add_group(codec2d.decoder_store().all(), 1.0);
  Adam d_opt({.lr = cfg.lr});
  d_opt.add_group(disc_store.all(), 1.0);

  codec_detail::DivergenceGuard guard(cfg.guard_factor, cfg.guard_patience);
  for (int64_t step = 0; step < cfg.steps_2d; ++step) {
    const ClipRecord& rec = records[size_t(rng.uniform_int(0, int64_t(records.size()) - 1))];
    g_opt.zero_grad();
    VarF z = codec2d.encoder()(constant(TensorF(rec.clip.frames)));
    VarF x_hat = codec2d.decoder()(z, nullptr, rec.clip.key_index);
    CodecLossParts parts;
    VarF loss = codec_loss(x_hat, rec.clip.frames, &disc2d, nullptr, loss2d, step, &parts);
    backward(loss);
    g_opt.step();
    guard.observe(parts.l1);
    if (step == 0) report.l1_first = parts.l1;
    report.l1_last = parts.l1;
    if (step >= cfg.loss.gan_warmup_steps && cfg.loss.lambda3 > 0) {
      d_opt.zero_grad();
      VarF dl = disc_hinge_loss(disc2d, rec.clip.frames, x_hat->value);
      backward(dl);
      d_opt.step();
    }
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps_2d))
      (*log) << "codec-2d step " << step << " l1 " << parts.l1 << " p2d " << parts.percep2d
             << "\n";
  }

  // latent scale from the trained encoder, shared by every arm
  {
    double sum = 0, sum2 = 0;
    int64_t n = 0;
    for (const auto& rec : records) {
      LatentVideo z = codec2d.encode_frames(rec.clip);
      for (int64_t i = 0; i < z.latents.numel(); ++i) {
        sum += z.latents[i];
        sum2 += double(z.latents[i]) * double(z.latents[i]);
        ++n;
      }
    }
    double var = sum2 / double(n) - (sum / double(n)) * (sum / double(n));
    float scale = var > 1e-12 ? float(1.0 / std::sqrt(var)) : 1.f;
    codec2d.set_latent_scale(scale);
    report.latent_scale = scale;
  }

  report.path_2d = out_dir / "codec_2d.ckpt";
  codec2d.save(report.path_2d);

  // frozen-encoder latents, computed once
  std::vector<TensorF> latents;
  latents.reserve(records.size());
  for (const auto& rec : records) latents.push_back(codec2d.encode_frames(rec.clip).latents);

  auto train_arm = [&](bool with_fgda, const std::filesystem::path& path) {
    DecoderConfig dc = cfg.dec;
    dc.temporal = true;
    dc.fgda = with_fgda;
    Codec arm(cfg.enc, dc, cfg.seed + (with_fgda ? 3 : 2));
    copy_matching_params(codec2d.encoder_store(), arm.encoder_store());
    int64_t copied = copy_matching_params(codec2d.decoder_store(), arm.decoder_store());
    check(copied == int64_t(codec2d.decoder_store().items().size()),
          "train_codec: arm failed to inherit the 2D decoder weights");
    arm.set_latent_scale(codec2d.latent_scale());

    ParamStore arm_disc_store;
    Rng adrng(cfg.seed + (with_fgda ? 13 : 12));
    PatchDisc2d ad2 = PatchDisc2d::make(arm_disc_store, "d2", adrng);
    PatchDisc3d ad3 = PatchDisc3d::make(arm_disc_store, "d3", adrng);

    Adam opt({.lr = cfg.lr});
    opt.add_group(arm.decoder_store().all(), 1.0);
    Adam dopt({.lr = cfg.lr});
    dopt.add_group(arm_disc_store.all(), 1.0);

    Rng arng(cfg.seed + (with_fgda ? 23 : 22));
    codec_detail::DivergenceGuard arm_guard(cfg.guard_factor, cfg.guard_patience);
    for (int64_t step = 0; step < cfg.steps_arm; ++step) {
      size_t idx = size_t(arng.uniform_int(0, int64_t(records.size()) - 1));
      const ClipRecord& rec = records[idx];
      opt.zero_grad();
      VarF z = constant(TensorF(latents[idx]));
      const TensorF* flows = with_fgda ? &rec.motion.flow_i2v : nullptr;
      VarF x_hat = arm.decoder()(z, flows, rec.clip.key_index);
      CodecLossParts parts;
      VarF loss = codec_loss(x_hat, rec.clip.frames, &ad2, &ad3, cfg.loss, step, &parts);
      backward(loss);
      opt.step();
      arm_guard.observe(parts.l1);
      if (step >= cfg.loss.gan_warmup_steps && (cfg.loss.lambda3 > 0 || cfg.loss.lambda4 > 0)) {
        dopt.zero_grad();
        VarF dl = add(disc_hinge_loss(ad2, rec.clip.frames, x_hat->value),
                      disc_hinge_loss(ad3, rec.clip.frames, x_hat->value));
        backward(dl);
        dopt.step();
      }
      if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps_arm))
        (*log) << (with_fgda ? "codec-flow" : "codec-3d") << " step " << step << " l1 "
               << parts.l1 << " p3d " << parts.percep3d << "\n";
    }
    arm.save(path);
  };

  report.path_3d = out_dir / "codec_3d.ckpt";
  report.path_flow = out_dir / "codec_flow.ckpt";
  train_arm(false, report.path_3d);
  train_arm(true, report.path_flow);
  return report;
}

}  // namespace movia
