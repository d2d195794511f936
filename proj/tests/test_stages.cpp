#include <catch2/catch_amalgamated.hpp>

#include "movia/motion_stage.hpp"
#include "movia/synth_world.hpp"
#include "movia/video_stage.hpp"

using namespace movia;

namespace {
ClipRecord moving_record(uint64_t seed = 3) {
  SceneSpec spec;
  spec.seed = seed;
  spec.fps = 10;
  spec.shapes.push_back({ShapeSpec::Kind::Disk, 6, {0.9f, 0.2f, -0.3f}, 1.0, {14, 16}, {1.5, 0.4}});
  return generate_scene(spec);
}
}  // namespace

TEST_CASE("pack/unpack motion round trip and channel order") {
  ClipRecord rec = moving_record();
  MotionBundle norm = normalize_bundle(rec.motion);
  TensorF packed = pack_motion(norm);
  REQUIRE(packed.shape() == std::vector<int64_t>{9, 32, 32, 5});

  // channel 0 is exactly the depth
  for (int64_t i = 0; i < 9 * 32 * 32; ++i) REQUIRE(packed[i * 5] == norm.depth[i]);

  MotionBundle back = unpack_motion(packed);
  REQUIRE(max_abs_diff(back.depth, norm.depth) == 0.0);
  REQUIRE(max_abs_diff(back.flow_i2v, norm.flow_i2v) == 0.0);
  REQUIRE(max_abs_diff(back.flow_v2i, norm.flow_v2i) == 0.0);

  // zero bundle packs to zeros
  MotionBundle zero;
  zero.depth = TensorF({2, 4, 4, 1});
  zero.flow_i2v = TensorF({2, 4, 4, 2});
  zero.flow_v2i = TensorF({2, 4, 4, 2});
  zero.occlusion = TensorF({2, 4, 4, 1}, 1.f);
  zero.normalized = true;
  REQUIRE(pack_motion(zero).abs_max() == 0.f);

  // unnormalized input is a contract violation
  REQUIRE_THROWS_AS(pack_motion(rec.motion), ContractError);
}

TEST_CASE("motion train step: finite positive loss, deterministic given rng") {
  MotionStageConfig cfg;
  cfg.T = 100;
  MotionStage stage(cfg, 1);
  ClipRecord rec = moving_record();
  MotionStage::Example ex = MotionStage::make_example(rec);
  std::vector<const MotionStage::Example*> batch{&ex};

  Adam opt_a = stage.make_optimizer();
  Rng rng_a(5);
  double la = stage.train_step(batch, opt_a, rng_a);
  REQUIRE(std::isfinite(la));
  REQUIRE(la > 0);

  MotionStage stage_b(cfg, 1);
  Adam opt_b = stage_b.make_optimizer();
  Rng rng_b(5);
  double lb = stage_b.train_step(batch, opt_b, rng_b);
  REQUIRE(la == lb);
}

TEST_CASE("motion sampling contract: shapes, key-frame zero flow, mask") {
  MotionStageConfig cfg;
  cfg.T = 50;
  cfg.sample_steps = 5;
  MotionStage stage(cfg, 2);
  ClipRecord rec = moving_record();

  MotionSample s = stage.sample_motion(rec.clip.key_frame(), rec.clip.fps, 9, 7);
  REQUIRE(s.bundle.depth.shape() == std::vector<int64_t>{9, 32, 32, 1});
  REQUIRE(s.bundle.flow_i2v.shape() == std::vector<int64_t>{9, 32, 32, 2});
  REQUIRE(s.bundle.flow_v2i.shape() == std::vector<int64_t>{9, 32, 32, 2});
  REQUIRE(s.bundle.o_max >= 0.f);
  REQUIRE(!s.bundle.normalized);
  REQUIRE(s.packed_normalized.abs_max() <= 1.f);

  const int64_t hw2 = 32 * 32 * 2;
  for (int64_t p = 0; p < hw2; ++p) {
    REQUIRE(s.bundle.flow_i2v[4 * hw2 + p] == 0.f);
    REQUIRE(s.bundle.flow_v2i[4 * hw2 + p] == 0.f);
  }
  for (int64_t i = 0; i < s.bundle.occlusion.numel(); ++i) {
    float v = s.bundle.occlusion[i];
    REQUIRE((v == 0.f || v == 1.f));
  }

  // determinism
  MotionSample s2 = stage.sample_motion(rec.clip.key_frame(), rec.clip.fps, 9, 7);
  REQUIRE(max_abs_diff(s.bundle.flow_i2v, s2.bundle.flow_i2v) == 0.0);
}

TEST_CASE("motion checkpoint round trip preserves sampling") {
  MotionStageConfig cfg;
  cfg.T = 50;
  cfg.sample_steps = 4;
  MotionStage stage(cfg, 3);
  ClipRecord rec = moving_record();
  namespace fs = std::filesystem;
  fs::path p = fs::temp_directory_path() / "movia_motion_test.ckpt";
  stage.save(p);
  auto back = MotionStage::load(p);
  MotionSample a = stage.sample_motion(rec.clip.key_frame(), rec.clip.fps, 9, 11);
  MotionSample b = back->sample_motion(rec.clip.key_frame(), rec.clip.fps, 9, 11);
  REQUIRE(max_abs_diff(a.packed_normalized, b.packed_normalized) == 0.0);
}

TEST_CASE("build_condition: dropout, identity warp, channel arithmetic") {
  ClipRecord rec = moving_record(8);
  Rng d(4);
  TensorF z_key = d.normal_tensor<float>({8, 8, 4});

  MotionBundle gt = rec.motion;
  gt.depth = normalize_depth(gt.depth).depth;

  ConditionSet kept = build_condition(gt, z_key, rec.clip.key_frame(), rec.clip.fps, 4, false);
  REQUIRE(!kept.z_tilde_dropped);
  REQUIRE(kept.depth_latent.shape() == std::vector<int64_t>{9, 8, 8, 1});
  REQUIRE(kept.z_tilde.shape() == std::vector<int64_t>{9, 8, 8, 4});
  REQUIRE(kept.mask_latent.shape() == std::vector<int64_t>{9, 8, 8, 1});

  ConditionSet dropped = build_condition(gt, z_key, rec.clip.key_frame(), rec.clip.fps, 4, true);
  REQUIRE(dropped.z_tilde_dropped);
  REQUIRE(dropped.z_tilde.abs_max() == 0.f);
  REQUIRE(max_abs_diff(dropped.mask_latent, kept.mask_latent) == 0.0);
  REQUIRE(max_abs_diff(dropped.depth_latent, kept.depth_latent) == 0.0);

  // zero flows + full mask reproduce z_key at every frame
  MotionBundle still = gt;
  still.flow_i2v.fill(0.f);
  still.flow_v2i.fill(0.f);
  still.occlusion.fill(1.f);
  ConditionSet s = build_condition(still, z_key, rec.clip.key_frame(), rec.clip.fps, 4, false);
  for (int64_t f = 0; f < 9; ++f)
    for (int64_t i = 0; i < 8 * 8 * 4; ++i) REQUIRE(s.z_tilde[f * 8 * 8 * 4 + i] == z_key[i]);

  // concatenated UNet input carries c + 1 + c + 1 channels
  VideoStageConfig vc;
  REQUIRE(vc.unet.in_channels == 4 + 1 + 4 + 1);
  VideoStage stage(vc, 5);
  TensorF x_t = d.normal_tensor<float>({9, 8, 8, 4});
  TensorF input = stage.assemble_input(x_t, kept, false);
  REQUIRE(input.shape() == std::vector<int64_t>{9, 8, 8, 10});
  for (int64_t p = 0; p < 9 * 8 * 8; ++p) {
    for (int64_t c = 0; c < 4; ++c) REQUIRE(input[p * 10 + c] == x_t[p * 4 + c]);
    REQUIRE(input[p * 10 + 4] == kept.depth_latent[p]);
    REQUIRE(input[p * 10 + 9] == kept.mask_latent[p]);
  }
}

TEST_CASE("o_max recovered from packed normalized motion matches normalize_flows") {
  for (uint64_t seed : {1u, 2u, 3u}) {
    SceneSpec spec;
    spec.seed = seed;
    Rng rng(seed);
    spec.shapes.push_back({ShapeSpec::Kind::Disk, 6.5, {0.9f, 0.1f, -0.6f}, 1.0,
                           {12.0 + double(seed), 16.0}, {1.0 + 0.4 * double(seed), 0.3}});
    ClipRecord rec = generate_scene(spec);
    MotionBundle norm = normalize_bundle(rec.motion);
    TensorF packed = pack_motion(norm);
    MotionBundle back = unpack_motion(packed);
    OMaxResult got = recover_o_max(back.depth, back.flow_i2v, back.flow_v2i);
    REQUIRE(!got.degenerate);
    REQUIRE(std::abs(got.o_max - norm.o_max) <= 0.02f * norm.o_max);
  }
}

TEST_CASE("condition dropout rate is calibrated") {
  Rng rng(99);
  int64_t dropped = 0;
  const int64_t n = 10000;
  for (int64_t i = 0; i < n; ++i)
    if (rng.uniform() < 0.5) ++dropped;
  double rate = double(dropped) / double(n);
  REQUIRE(rate >= 0.48);
  REQUIRE(rate <= 0.52);
}

TEST_CASE("conditioning arms zero the right channels") {
  ClipRecord rec = moving_record(12);
  Rng d(6);
  TensorF z_key = d.normal_tensor<float>({8, 8, 4});
  MotionBundle gt = rec.motion;
  gt.depth = normalize_depth(gt.depth).depth;
  ConditionSet cond = build_condition(gt, z_key, rec.clip.key_frame(), rec.clip.fps, 4, false);
  TensorF x_t = d.normal_tensor<float>({9, 8, 8, 4});

  VideoStageConfig nm;
  nm.arm = ConditioningArm::NoMask;
  VideoStage no_mask(nm, 7);
  TensorF in_nm = no_mask.assemble_input(x_t, cond, false);
  for (int64_t p = 0; p < 9 * 8 * 8; ++p) REQUIRE(in_nm[p * 10 + 9] == 0.f);

  VideoStageConfig nw;
  nw.arm = ConditioningArm::NoWarped;
  VideoStage no_warp(nw, 8);
  TensorF in_nw = no_warp.assemble_input(x_t, cond, false);
  for (int64_t p = 0; p < 9 * 8 * 8; ++p)
    for (int64_t c = 5; c < 9; ++c) REQUIRE(in_nw[p * 10 + c] == 0.f);
  // mask survives on the no-warped arm
  bool mask_nonzero = false;
  for (int64_t p = 0; p < 9 * 8 * 8; ++p)
    if (in_nw[p * 10 + 9] != 0.f) mask_nonzero = true;
  REQUIRE(mask_nonzero);
}

TEST_CASE("video stage optimizer exposes the 0.1 spatial ratio exactly") {
  VideoStageConfig cfg;
  VideoStage stage(cfg, 9);
  Adam opt = stage.make_optimizer();
  REQUIRE(opt.group_mults().size() == 3);
  REQUIRE(opt.group_mults()[0] == 0.1);
  REQUIRE(opt.group_mults()[1] == 1.0);
  REQUIRE(opt.group_mults()[2] == 1.0);
}

TEST_CASE("video train step determinism and sampling contract") {
  VideoStageConfig cfg;
  cfg.T = 50;
  cfg.sample_steps = 4;
  ClipRecord rec = moving_record(15);

  EncoderConfig ec;
  DecoderConfig dc;
  Codec codec(ec, dc, 10);
  codec.set_latent_scale(2.0f);

  VideoStage a(cfg, 11, codec.latent_scale());
  VideoStage b(cfg, 11, codec.latent_scale());
  VideoStage::Example ea = a.make_example(rec, codec);
  std::vector<const VideoStage::Example*> batch{&ea};
  Adam oa = a.make_optimizer(), ob = b.make_optimizer();
  Rng ra(21), rb(21);
  double la = a.train_step(batch, oa, ra);
  double lb = b.train_step(batch, ob, rb);
  REQUIRE(la == lb);
  REQUIRE(std::isfinite(la));

  LatentVideo z1 = a.sample_video_latent(ea.cond, 9, 31);
  REQUIRE(z1.latents.shape() == std::vector<int64_t>{9, 8, 8, 4});
  LatentVideo z2 = a.sample_video_latent(ea.cond, 9, 31);
  REQUIRE(max_abs_diff(z1.latents, z2.latents) == 0.0);
  LatentVideo z3 = a.sample_video_latent(ea.cond, 9, 32);
  REQUIRE(max_abs_diff(z1.latents, z3.latents) > 0.0);
}
