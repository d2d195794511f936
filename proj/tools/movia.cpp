#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "movia/config.hpp"
#include "movia/imageio.hpp"
#include "movia/pipeline.hpp"
#include "movia/synth_world.hpp"
#include "movia/training.hpp"

using namespace movia;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitCheckpoint = 3;

TensorF load_key_frame(const fs::path& path) {
  TensorF img;
  if (path.extension() == ".png")
    img = read_png(path);
  else
    img = load_tensor(path);
  check_valid(img.rank() == 3 && img.size(2) == 3,
              "key frame must be (H,W,3), got " + img.shape_str());
  check_valid(img.all_finite() && img.abs_max() <= 1.f + 1e-6f,
              "key frame values must lie in [-1,1]");
  return img;
}

uint64_t resolve_seed(uint64_t cli_seed) {
  if (const char* env = std::getenv("MOVIA_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ValidationError("MOVIA_SEED is not an unsigned integer");
    }
  }
  return cli_seed;
}

std::vector<ClipRecord> load_dataset(const fs::path& dir) {
  std::vector<ClipRecord> records;
  for (const auto& d : list_clip_dirs(dir)) {
    ClipRecord rec = load_clip(d);
    ValidationReport rep = validate_record(rec);
    check_valid(rep.ok(), "invalid record in " + d.string() + ":\n" + rep.str());
    records.push_back(std::move(rec));
  }
  check_valid(!records.empty(), "no clip_* directories under " + dir.string());
  return records;
}

void save_motion_bundle(const fs::path& dir, const MotionSample& s, int fps) {
  fs::create_directories(dir);
  save_tensor(dir / "depth.npy", s.bundle.depth);
  save_tensor(dir / "flow_i2v.npy", s.bundle.flow_i2v);
  save_tensor(dir / "flow_v2i.npy", s.bundle.flow_v2i);
  save_tensor(dir / "occlusion.npy", s.bundle.occlusion);
  nlohmann::json meta;
  meta["o_max"] = s.bundle.o_max;
  meta["degenerate_o_max"] = s.degenerate_o_max;
  meta["o_max_residual"] = s.o_max_residual;
  meta["fps"] = fps;
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
}

MotionBundle load_motion_bundle(const fs::path& dir, int* fps) {
  MotionBundle b;
  b.depth = load_tensor(dir / "depth.npy");
  b.flow_i2v = load_tensor(dir / "flow_i2v.npy");
  b.flow_v2i = load_tensor(dir / "flow_v2i.npy");
  b.occlusion = load_tensor(dir / "occlusion.npy");
  b.normalized = false;
  std::ifstream in(dir / "meta.json");
  if (in) {
    nlohmann::json meta = nlohmann::json::parse(in, nullptr, false);
    if (!meta.is_discarded()) {
      b.o_max = meta.value("o_max", 0.f);
      if (fps) *fps = meta.value("fps", *fps);
    }
  }
  check_valid(b.depth.rank() == 4 && b.flow_i2v.rank() == 4 && b.flow_v2i.rank() == 4 &&
                  b.occlusion.rank() == 4,
              "motion bundle tensors must be rank 4");
  check_valid(b.depth.abs_max() <= 1.f + 1e-6f, "motion bundle depth must be normalized");
  return b;
}

int run(int argc, char** argv) {
  CLI::App app{"movia: motion-aware video generation on a synthetic moving-shapes world"};
  app.require_subcommand(1);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "generate a synthetic clip dataset");
  int64_t n = 8, frames = desk::kFrames, size = desk::kHeight;
  uint64_t seed = 0;
  int fps_min = 3, fps_max = 30;
  std::string out_dir = "data";
  synth->add_option("--n", n, "number of clips");
  synth->add_option("--out-dir", out_dir, "output directory");
  synth->add_option("--seed", seed, "dataset seed");
  synth->add_option("--fps-min", fps_min);
  synth->add_option("--fps-max", fps_max);
  synth->add_option("--frames", frames);
  synth->add_option("--size", size, "frame height/width");
  synth->callback([&] {
    DatasetRanges r;
    r.fps_min = fps_min;
    r.fps_max = fps_max;
    r.frames = frames;
    r.height = r.width = size;
    auto records = make_dataset(n, r, resolve_seed(seed));
    for (const auto& rec : records) save_clip(fs::path(out_dir) / ("clip_" + rec.id), rec);
    std::cout << "wrote " << records.size() << " clips to " << out_dir << "\n";
  });

  // ---- init-config ----
  auto* initc = app.add_subcommand("init-config", "write a config file with full defaults");
  std::string cfg_out = "movia.cfg";
  initc->add_option("--out", cfg_out, "config path");
  initc->callback([&] {
    RunConfig().write(cfg_out);
    std::cout << "wrote " << cfg_out << "\n";
  });

  // shared config option pattern
  std::string config_path;
  auto load_cfg = [&]() {
    RunConfig cfg;
    if (!config_path.empty()) cfg = RunConfig::from_file(config_path);
    return cfg;
  };

  // ---- train-codec ----
  auto* tcodec = app.add_subcommand("train-codec", "train the latent codec and its decoder arms");
  std::string data_dir = "data", codec_out = "out";
  tcodec->add_option("--data", data_dir, "clip dataset directory");
  tcodec->add_option("--config", config_path, "config file");
  tcodec->add_option("--out", codec_out, "output directory for codec checkpoints");
  tcodec->callback([&] {
    RunConfig cfg = load_cfg();
    auto records = load_dataset(data_dir);
    CodecTrainConfig tc;
    tc.steps_2d = cfg.integer("codec_steps_2d");
    tc.steps_arm = cfg.integer("codec_steps_arm");
    tc.lr = cfg.real("codec_lr");
    tc.loss.lambda1 = cfg.real("lambda1");
    tc.loss.lambda2 = cfg.real("lambda2");
    tc.loss.lambda3 = cfg.real("lambda3");
    tc.loss.lambda4 = cfg.real("lambda4");
    tc.loss.gan_warmup_steps = cfg.integer("gan_warmup_steps");
    tc.seed = cfg.effective_seed();
    CodecTrainReport rep = train_codec(records, tc, codec_out, &std::cout);
    std::cout << "codec arms written: " << rep.path_2d << " " << rep.path_3d << " "
              << rep.path_flow << "\nlatent scale " << rep.latent_scale << "\n";
  });

  // ---- train-motion ----
  auto* tmotion = app.add_subcommand("train-motion", "train the depth/flow diffusion stage");
  std::string motion_out = "out/motion.ckpt";
  tmotion->add_option("--data", data_dir, "clip dataset directory");
  tmotion->add_option("--config", config_path, "config file");
  tmotion->add_option("--out-ckpt", motion_out, "checkpoint path");
  tmotion->callback([&] {
    RunConfig cfg = load_cfg();
    auto records = load_dataset(data_dir);
    MotionStageConfig mc;
    mc.lr = cfg.real("motion_lr");
    mc.sample_steps = int(cfg.integer("sample_steps"));
    uint64_t s = cfg.effective_seed();
    MotionStage stage(mc, s + 101);
    TrainSummary sum = train_motion_stage(stage, records, cfg.integer("motion_steps"),
                                          cfg.integer("batch"), s, &std::cout);
    fs::create_directories(fs::path(motion_out).parent_path());
    stage.save(motion_out);
    std::cout << "motion checkpoint " << motion_out << " loss " << sum.loss_avg_head << " -> "
              << sum.loss_avg_tail << "\n";
  });

  // ---- train-video ----
  auto* tvideo = app.add_subcommand("train-video", "train the latent video diffusion stage");
  std::string video_out = "out/video.ckpt", codec_ckpt = "out/codec_flow.ckpt", arm = "full";
  tvideo->add_option("--data", data_dir, "clip dataset directory");
  tvideo->add_option("--codec-ckpt", codec_ckpt, "trained codec checkpoint (frozen encoder)");
  tvideo->add_option("--config", config_path, "config file");
  tvideo->add_option("--out-ckpt", video_out, "checkpoint path");
  tvideo->add_option("--arm", arm, "conditioning arm: full | no-mask | no-warped-video");
  tvideo->callback([&] {
    RunConfig cfg = load_cfg();
    auto records = load_dataset(data_dir);
    Codec codec = Codec::load(codec_ckpt);
    VideoStageConfig vc;
    vc.lr = cfg.real("video_lr");
    vc.spatial_lr_mult = cfg.real("video_spatial_lr_mult");
    vc.drop_prob = cfg.real("drop_prob");
    vc.sample_steps = int(cfg.integer("sample_steps"));
    vc.arm = arm_from_name(arm);
    uint64_t s = cfg.effective_seed();
    VideoStage stage(vc, s + 202, codec.latent_scale());
    TrainSummary sum = train_video_stage(stage, records, codec, cfg.integer("video_steps"),
                                         cfg.integer("batch"), s, &std::cout);
    fs::create_directories(fs::path(video_out).parent_path());
    stage.save(video_out);
    std::cout << "video checkpoint " << video_out << " loss " << sum.loss_avg_head << " -> "
              << sum.loss_avg_tail << "\n";
  });

  // ---- sample-motion ----
  auto* smotion = app.add_subcommand("sample-motion", "sample depth and flows from a key frame");
  std::string key_path, ckpt_path = "out/motion.ckpt", sm_out = "out/motion_sample";
  int fps = 3, steps = 0;
  smotion->add_option("--key-frame", key_path, "key frame (.npy or .png)")->required();
  smotion->add_option("--fps", fps, "frames per second condition");
  smotion->add_option("--ckpt", ckpt_path, "motion checkpoint");
  smotion->add_option("--seed", seed, "sampling seed");
  smotion->add_option("--steps", steps, "ddim steps (0 = checkpoint default)");
  smotion->add_option("--frames", frames, "frame count");
  smotion->add_option("--out-dir", sm_out, "output directory");
  smotion->callback([&] {
    auto stage = MotionStage::load(ckpt_path);
    TensorF key = load_key_frame(key_path);
    MotionSample s = stage->sample_motion(key, fps, frames, resolve_seed(seed), steps);
    save_motion_bundle(sm_out, s, fps);
    std::cout << "motion sample in " << sm_out << " o_max " << s.bundle.o_max
              << (s.degenerate_o_max ? " (degenerate: zero-motion bundle)" : "") << "\n";
  });

  // ---- sample-video ----
  auto* svideo = app.add_subcommand("sample-video", "sample a video from a motion bundle");
  std::string motion_dir, video_ckpt = "out/video.ckpt", sv_out = "out/video_sample";
  svideo->add_option("--motion", motion_dir, "motion bundle directory")->required();
  svideo->add_option("--key-frame", key_path, "key frame (.npy or .png)")->required();
  svideo->add_option("--ckpt", video_ckpt, "video checkpoint");
  svideo->add_option("--codec-ckpt", codec_ckpt, "codec checkpoint");
  svideo->add_option("--seed", seed, "sampling seed");
  svideo->add_option("--steps", steps, "ddim steps (0 = checkpoint default)");
  svideo->add_option("--fps", fps, "fps condition (overridden by bundle meta)");
  svideo->add_option("--out-dir", sv_out, "output directory");
  svideo->callback([&] {
    auto stage = VideoStage::load(video_ckpt);
    Codec codec = Codec::load(codec_ckpt);
    TensorF key = load_key_frame(key_path);
    int bundle_fps = fps;
    MotionBundle bundle = load_motion_bundle(motion_dir, &bundle_fps);

    VideoClip key_clip;
    key_clip.frames = key.reshaped({1, key.size(0), key.size(1), 3});
    key_clip.fps = bundle_fps;
    key_clip.key_index = 0;
    LatentVideo zk = codec.encode_frames(key_clip);
    TensorF z_key = Tensor<float>::uninit({zk.latents.size(1), zk.latents.size(2), zk.latents.size(3)});
    for (int64_t i = 0; i < z_key.numel(); ++i) z_key[i] = zk.latents[i] * stage->latent_scale();

    ConditionSet cond = build_condition(bundle, z_key, key, bundle_fps, zk.scale_factor, false);
    int64_t f = bundle.depth.size(0);
    LatentVideo z = stage->sample_video_latent(cond, f, resolve_seed(seed), steps);
    bool warn = false;
    VideoClip out = codec.decode_video(z, &bundle.flow_i2v, bundle_fps, &warn);
    fs::create_directories(sv_out);
    save_tensor(fs::path(sv_out) / "latents.npy", z.latents);
    save_tensor(fs::path(sv_out) / "video.npy", out.frames);
    write_gif(fs::path(sv_out) / "video.gif", out.frames, bundle_fps);
    std::cout << "video sample in " << sv_out << "\n";
  });

  // ---- generate ----
  auto* gen = app.add_subcommand("generate", "full image-to-video pipeline");
  std::string gmotion = "out/motion.ckpt", gvideo = "out/video.ckpt", gcodec = "out/codec_flow.ckpt",
              gout = "out/generated";
  gen->add_option("--key-frame", key_path, "key frame (.npy or .png)")->required();
  gen->add_option("--fps", fps, "fps condition");
  gen->add_option("--motion-ckpt", gmotion);
  gen->add_option("--video-ckpt", gvideo);
  gen->add_option("--codec-ckpt", gcodec);
  gen->add_option("--config", config_path, "config file (checkpoint paths + sampler)");
  gen->add_option("--seed", seed, "pipeline seed");
  gen->add_option("--steps", steps, "ddim steps (0 = checkpoint default)");
  gen->add_option("--frames", frames, "frame count");
  gen->add_option("--out-dir", gout, "output directory");
  gen->callback([&] {
    PipelineConfig pc;
    if (!config_path.empty()) {
      RunConfig cfg = RunConfig::from_file(config_path);
      pc.motion_ckpt = cfg.str("motion_ckpt");
      pc.video_ckpt = cfg.str("video_ckpt");
      pc.codec_ckpt = cfg.str("codec_ckpt");
      pc.steps = int(cfg.integer("sample_steps"));
      pc.fps = int(cfg.integer("fps"));
      pc.frames = cfg.integer("frames");
      pc.seed = cfg.effective_seed();
    } else {
      pc.motion_ckpt = gmotion;
      pc.video_ckpt = gvideo;
      pc.codec_ckpt = gcodec;
      pc.steps = steps;  // 0 = checkpoint default
      pc.fps = fps;
      pc.frames = frames;
      pc.seed = resolve_seed(seed);
    }
    pc.out_dir = gout;
    Pipeline pipe(pc);
    TensorF key = load_key_frame(key_path);
    PipelineResult res = pipe.run_image_to_video(key, pc.fps, pc.seed);
    pipe.persist(res, gout);
    std::cout << "generated " << res.video.f() << "x" << res.video.h() << "x" << res.video.w()
              << "x3 video in " << gout;
    if (res.degenerate_motion) std::cout << " (warning: degenerate o_max, zero-motion bundle)";
    std::cout << "\n";
  });

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "metrics over a clip dataset");
  std::string eval_out = "out/eval_report.json";
  bool gt_only = false;
  ev->add_option("--data", data_dir, "clip dataset directory");
  ev->add_option("--motion-ckpt", gmotion);
  ev->add_option("--video-ckpt", gvideo);
  ev->add_option("--codec-ckpt", gcodec);
  ev->add_option("--seed", seed);
  ev->add_option("--steps", steps, "ddim steps (0 = checkpoint default)");
  ev->add_option("--out", eval_out, "report path");
  ev->add_flag("--gt-motion-only", gt_only, "skip the sampled-motion pass");
  ev->callback([&] {
    auto records = load_dataset(data_dir);
    PipelineConfig pc;
    pc.motion_ckpt = gmotion;
    pc.video_ckpt = gvideo;
    pc.codec_ckpt = gcodec;
    pc.steps = steps;  // 0 = checkpoint default
    pc.frames = records.front().clip.frames.size(0);
    pc.seed = resolve_seed(seed);
    Pipeline pipe(pc);

    nlohmann::json rep;
    double gt_psnr = 0, gt_warp = 0, s_psnr = 0, s_warp = 0, motion_mae = 0;
    for (const auto& rec : records) {
      uint64_t s = Rng(pc.seed).fork(rec.scene_seed).seed();
      PipelineResult gt = pipe.run_with_gt_motion(rec, s);
      gt_psnr += metric_psnr(gt.video, rec.clip);
      gt_warp += metric_warp_consistency(gt.video, rec.motion.flow_i2v, rec.motion.occlusion);
      if (!gt_only) {
        PipelineResult sm = pipe.run_image_to_video(rec.clip.key_frame(), rec.clip.fps, s);
        s_psnr += metric_psnr(sm.video, rec.clip);
        s_warp += metric_warp_consistency(sm.video, rec.motion.flow_i2v, rec.motion.occlusion);
        motion_mae += motion_packed_mae(
            pipe.motion_stage()
                .sample_motion(rec.clip.key_frame(), rec.clip.fps, pc.frames,
                               Rng(s).fork(1).seed(), pc.steps)
                .packed_normalized,
            rec);
      }
    }
    double n = double(records.size());
    rep["clips"] = records.size();
    rep["gt_motion"] = {{"psnr", gt_psnr / n}, {"warp_consistency_error", gt_warp / n}};
    if (!gt_only) {
      rep["sampled_motion"] = {{"psnr", s_psnr / n},
                               {"warp_consistency_error", s_warp / n},
                               {"motion_mae", motion_mae / n}};
    }
    fs::create_directories(fs::path(eval_out).parent_path());
    std::ofstream(eval_out) << rep.dump(2) << "\n";
    std::cout << rep.dump(2) << "\n";
  });

  // ---- ablate ----
  auto* ab = app.add_subcommand("ablate", "conditioning and decoder ablation table");
  std::string held_dir, arm_full, arm_nomask, arm_nowarp, c2d, c3d, cflow,
      ab_out = "out/ablation_report.json";
  ab->add_option("--data", data_dir, "training clip dataset");
  ab->add_option("--held-data", held_dir, "held-out clip dataset")->required();
  ab->add_option("--arm-full", arm_full)->required();
  ab->add_option("--arm-no-mask", arm_nomask)->required();
  ab->add_option("--arm-no-warped", arm_nowarp)->required();
  ab->add_option("--codec-2d", c2d)->required();
  ab->add_option("--codec-3d", c3d)->required();
  ab->add_option("--codec-flow", cflow)->required();
  ab->add_option("--seed", seed);
  ab->add_option("--steps", steps, "ddim steps");
  ab->add_option("--out", ab_out, "report path");
  ab->callback([&] {
    auto train_records = load_dataset(data_dir);
    auto held = load_dataset(held_dir);
    AblationReport rep = run_ablations(train_records, held, {arm_full, arm_nomask, arm_nowarp},
                                       {cflow, c3d, c2d}, cflow,
                                       train_records.front().clip.frames.size(0),
                                       steps > 0 ? steps : 50, resolve_seed(seed));
    fs::create_directories(fs::path(ab_out).parent_path());
    std::ofstream(ab_out) << rep.to_json().dump(2) << "\n";
    std::cout << rep.to_json().dump(2) << "\n";
  });

  // ---- motion --check ----
  auto* mcheck = app.add_subcommand("motion", "recompute masks/normalization for a clip");
  std::string clip_in;
  bool do_check = false;
  mcheck->add_option("--in", clip_in, "clip directory")->required();
  mcheck->add_flag("--check", do_check, "print invariant diagnostics");
  mcheck->callback([&] {
    ClipRecord rec = load_clip(clip_in);
    ValidationReport rep = validate_record(rec);
    check_valid(rep.ok(), "invalid record:\n" + rep.str());
    MotionBundle norm = normalize_bundle(rec.motion);
    std::cout << "clip " << rec.id << ": o_max " << norm.o_max << " d_range [" << norm.d_min
              << ", " << norm.d_max << "]\n";
    if (do_check) {
      TensorF m = occlusion_mask_video(rec.motion.flow_i2v, rec.motion.flow_v2i);
      int64_t agree = 0;
      for (int64_t i = 0; i < m.numel(); ++i)
        if (m[i] == rec.motion.occlusion[i]) ++agree;
      std::cout << "eq.11 mask agreement with stored occlusion: "
                << double(agree) / double(m.numel()) << "\n";
      OMaxResult rec_o = recover_o_max(norm.depth, norm.flow_i2v, norm.flow_v2i);
      std::cout << "recovered o_max " << rec_o.o_max << " (stored true " << rec.true_o_max
                << ", residual " << rec_o.residual << (rec_o.degenerate ? ", degenerate" : "")
                << ")\n";
      TensorF back = denormalize_depth(norm.depth, norm.d_min, norm.d_max);
      std::cout << "depth round-trip max err " << max_abs_diff(back, rec.motion.depth) << "\n";
    }
  });

  CLI11_PARSE(app, argc, argv);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
