#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "movia/pipeline.hpp"
#include "movia/synth_world.hpp"

using namespace movia;
namespace fs = std::filesystem;

#ifndef MOVIA_CLI_PATH
#define MOVIA_CLI_PATH "movia"
#endif

namespace {

int run_cli(const std::string& args, const std::string& env_prefix = "") {
  std::string cmd =
      env_prefix + (env_prefix.empty() ? "" : " ") + std::string(MOVIA_CLI_PATH) + " " + args +
      " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), {});
  std::string sb((std::istreambuf_iterator<char>(fb)), {});
  return !sa.empty() && sa == sb;
}

fs::path work_dir() {
  fs::path p = fs::temp_directory_path() / "movia_pipeline_test";
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("metric_psnr endpoints and symmetry") {
  Rng rng(1);
  VideoClip a, b;
  a.frames = rng.uniform_tensor<float>({3, 4, 4, 3}, -1, 1);
  a.key_index = 1;
  b = a;
  REQUIRE(metric_psnr(a, b) == 99.0);

  // values differing by 2 everywhere: MSE is 4, PSNR is 0
  VideoClip lo, hi;
  lo.frames = TensorF({2, 2, 2, 3}, -1.f);
  hi.frames = TensorF({2, 2, 2, 3}, 1.f);
  REQUIRE(metric_psnr(lo, hi) == Catch::Approx(0.0).margin(1e-9));

  b.frames[5] += 0.25f;
  REQUIRE(metric_psnr(a, b) == Catch::Approx(metric_psnr(b, a)));
  VideoClip wrong;
  wrong.frames = TensorF({1, 4, 4, 3});
  REQUIRE_THROWS_AS(metric_psnr(a, wrong), ContractError);
}

TEST_CASE("metric_warp_consistency on ground truth, shuffles and statics") {
  SceneSpec spec;
  spec.fps = 5;
  spec.shapes.push_back({ShapeSpec::Kind::Disk, 6, {0.9f, 0.0f, -0.5f}, 1.0, {14, 16}, {1.5, 0.5}});
  ClipRecord rec = generate_scene(spec);

  double gt_err = metric_warp_consistency(rec.clip, rec.motion.flow_i2v, rec.motion.occlusion);
  REQUIRE(gt_err <= 1e-3);

  VideoClip shuffled = rec.clip;
  const int64_t fsz = 32 * 32 * 3;
  int perm[9] = {8, 6, 7, 5, 4, 3, 1, 2, 0};
  for (int64_t f = 0; f < 9; ++f)
    std::copy(rec.clip.frames.data() + perm[f] * fsz, rec.clip.frames.data() + (perm[f] + 1) * fsz,
              shuffled.frames.data() + f * fsz);
  REQUIRE(metric_warp_consistency(shuffled, rec.motion.flow_i2v, rec.motion.occlusion) > gt_err);

  SceneSpec still;
  still.shapes.push_back({ShapeSpec::Kind::Disk, 6, {0.9f, 0.0f, -0.5f}, 1.0, {16, 16}, {0, 0}});
  ClipRecord srec = generate_scene(still);
  REQUIRE(metric_warp_consistency(srec.clip, srec.motion.flow_i2v, srec.motion.occlusion) == 0.0);
}

TEST_CASE("cli synth is deterministic and motion --check passes") {
  fs::path base = work_dir();
  fs::remove_all(base / "da");
  fs::remove_all(base / "db");
  REQUIRE(run_cli("synth --n 2 --seed 11 --out-dir " + (base / "da").string()) == 0);
  REQUIRE(run_cli("synth --n 2 --seed 11 --out-dir " + (base / "db").string()) == 0);
  REQUIRE(same_bytes(base / "da" / "clip_0000" / "video.npy", base / "db" / "clip_0000" / "video.npy"));
  REQUIRE(same_bytes(base / "da" / "clip_0001" / "flow_i2v.npy",
                     base / "db" / "clip_0001" / "flow_i2v.npy"));
  REQUIRE(run_cli("motion --in " + (base / "da" / "clip_0000").string() + " --check") == 0);
}

TEST_CASE("cli exit codes: validation failure is 2, checkpoint failure is 3") {
  fs::path base = work_dir();
  // unknown config key -> validation failure
  fs::path bad_cfg = base / "bad.cfg";
  std::ofstream(bad_cfg) << "definitely_not_a_key = 1\n";
  REQUIRE(run_cli("train-motion --data " + (base / "da").string() + " --config " +
                  bad_cfg.string()) == 2);

  // corrupt checkpoint -> checkpoint incompatibility
  fs::path bad_ckpt = base / "bad.ckpt";
  std::ofstream(bad_ckpt, std::ios::binary) << "NOTACKPTxxxxxxxxxxxxxxxxxxxxxxxxxxxx";
  fs::path key = base / "key.npy";
  save_tensor(key, TensorF({32, 32, 3}, 0.25f));
  REQUIRE(run_cli("sample-motion --key-frame " + key.string() + " --ckpt " + bad_ckpt.string() +
                  " --out-dir " + (base / "sm").string()) == 3);

  // invalid record -> validation failure
  fs::path broken = base / "broken";
  fs::remove_all(broken);
  REQUIRE(run_cli("synth --n 1 --seed 3 --out-dir " + broken.string()) == 0);
  {
    std::ifstream in(broken / "clip_0000" / "meta.json");
    nlohmann::json meta = nlohmann::json::parse(in);
    in.close();
    meta["fps"] = 99;
    std::ofstream(broken / "clip_0000" / "meta.json") << meta.dump(2);
  }
  REQUIRE(run_cli("train-motion --data " + broken.string()) == 2);
}

TEST_CASE("cli sampling commands are bit-identical across runs") {
  fs::path base = work_dir();
  fs::path key = base / "key.npy";
  SceneSpec spec;
  spec.fps = 4;
  spec.shapes.push_back({ShapeSpec::Kind::Disk, 6, {0.9f, 0.0f, -0.5f}, 1.0, {15, 15}, {1.0, 0.5}});
  ClipRecord rec = generate_scene(spec);
  save_tensor(key, rec.clip.key_frame());

  // untrained but valid checkpoints keep this fast
  MotionStageConfig mc;
  mc.T = 40;
  mc.sample_steps = 4;
  MotionStage ms(mc, 5);
  ms.save(base / "motion.ckpt");

  EncoderConfig ec;
  DecoderConfig dc;
  dc.temporal = true;
  dc.fgda = true;
  Codec codec(ec, dc, 6);
  codec.set_latent_scale(1.f);
  codec.save(base / "codec.ckpt");

  VideoStageConfig vc;
  vc.T = 40;
  vc.sample_steps = 4;
  VideoStage vs(vc, 7, 1.f);
  vs.save(base / "video.ckpt");

  std::string sm = "sample-motion --key-frame " + key.string() + " --ckpt " +
                   (base / "motion.ckpt").string() + " --seed 21 --fps 4 --out-dir ";
  REQUIRE(run_cli(sm + (base / "m1").string()) == 0);
  REQUIRE(run_cli(sm + (base / "m2").string()) == 0);
  for (const char* f : {"depth.npy", "flow_i2v.npy", "flow_v2i.npy", "occlusion.npy"})
    REQUIRE(same_bytes(base / "m1" / f, base / "m2" / f));

  std::string sv = "sample-video --motion " + (base / "m1").string() + " --key-frame " +
                   key.string() + " --ckpt " + (base / "video.ckpt").string() + " --codec-ckpt " +
                   (base / "codec.ckpt").string() + " --seed 33 --out-dir ";
  REQUIRE(run_cli(sv + (base / "v1").string()) == 0);
  REQUIRE(run_cli(sv + (base / "v2").string()) == 0);
  REQUIRE(same_bytes(base / "v1" / "video.npy", base / "v2" / "video.npy"));
  REQUIRE(same_bytes(base / "v1" / "latents.npy", base / "v2" / "latents.npy"));

  std::string gen = "generate --key-frame " + key.string() + " --motion-ckpt " +
                    (base / "motion.ckpt").string() + " --video-ckpt " +
                    (base / "video.ckpt").string() + " --codec-ckpt " +
                    (base / "codec.ckpt").string() + " --fps 4";
  REQUIRE(run_cli(gen + " --seed 44 --out-dir " + (base / "g1").string()) == 0);
  REQUIRE(run_cli(gen + " --seed 44 --out-dir " + (base / "g2").string()) == 0);
  REQUIRE(same_bytes(base / "g1" / "video.npy", base / "g2" / "video.npy"));
  REQUIRE(same_bytes(base / "g1" / "latents.npy", base / "g2" / "latents.npy"));
  REQUIRE(same_bytes(base / "g1" / "motion" / "flow_i2v.npy",
                     base / "g2" / "motion" / "flow_i2v.npy"));
  REQUIRE(fs::exists(base / "g1" / "video.gif"));
  REQUIRE(fs::exists(base / "g1" / "frames" / "frame_000.png"));

  // MOVIA_SEED overrides the flag seed
  REQUIRE(run_cli(gen + " --seed 999 --out-dir " + (base / "g3").string(), "env MOVIA_SEED=44") ==
          0);
  REQUIRE(same_bytes(base / "g1" / "video.npy", base / "g3" / "video.npy"));
}

TEST_CASE("png round trip through export and import") {
  Rng rng(3);
  TensorF img = rng.uniform_tensor<float>({16, 16, 3}, -1, 1);
  fs::path p = work_dir() / "img.png";
  write_png(p, img);
  TensorF back = read_png(p);
  REQUIRE(back.shape() == img.shape());
  // 8-bit quantization bounds the error by half a step
  REQUIRE(max_abs_diff(back, img) <= 1.01 / 127.5);
}
