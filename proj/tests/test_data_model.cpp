#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "movia/data_model.hpp"
#include "movia/synth_world.hpp"

using namespace movia;
namespace fs = std::filesystem;

namespace {
ClipRecord example_record() {
  SceneSpec spec;
  spec.fps = 12;
  spec.shapes.push_back({ShapeSpec::Kind::Disk, 5, {0.8f, -0.1f, 0.3f}, 1.0, {14, 16}, {1.0, 0.5}});
  return generate_scene(spec);
}
}  // namespace

TEST_CASE("validate_record accepts a generated record") {
  ClipRecord rec = example_record();
  ValidationReport rep = validate_record(rec);
  INFO(rep.str());
  REQUIRE(rep.ok());
}

TEST_CASE("validate_record cites the fps bound") {
  ClipRecord rec = example_record();
  rec.clip.fps = 0;
  ValidationReport rep = validate_record(rec);
  REQUIRE(!rep.ok());
  REQUIRE(rep.str().find("fps") != std::string::npos);
}

TEST_CASE("validate_record cites the key-frame-zero-flow invariant") {
  ClipRecord rec = example_record();
  rec.motion.flow_i2v(rec.clip.key_index, 5, 5, 0) = 0.25f;
  ValidationReport rep = validate_record(rec);
  REQUIRE(!rep.ok());
  REQUIRE(rep.str().find("key frame") != std::string::npos);
}

TEST_CASE("validate_record is total on garbage") {
  ClipRecord rec;
  rec.clip.frames = TensorF({2, 4, 4, 3});  // even frame count
  rec.clip.fps = 99;
  ValidationReport rep = validate_record(rec);
  REQUIRE(!rep.ok());

  ClipRecord nan_rec = example_record();
  nan_rec.clip.frames[0] = std::numeric_limits<float>::quiet_NaN();
  rep = validate_record(nan_rec);
  REQUIRE(!rep.ok());
}

TEST_CASE("validate_record checks normalized bundles") {
  ClipRecord rec = example_record();
  rec.motion.normalized = true;  // claim normalized while flows are pixel units
  ValidationReport rep = validate_record(rec);
  REQUIRE(!rep.ok());
}

TEST_CASE("clip directory round trip") {
  ClipRecord rec = example_record();
  rec.id = "0007";
  rec.true_o_max = 4.5f;
  fs::path dir = fs::temp_directory_path() / "movia_clip_test" / "clip_0007";
  save_clip(dir, rec);
  REQUIRE(fs::exists(dir / "video.npy"));
  REQUIRE(fs::exists(dir / "meta.json"));

  ClipRecord back = load_clip(dir);
  REQUIRE(back.id == "0007");
  REQUIRE(back.clip.fps == rec.clip.fps);
  REQUIRE(back.clip.key_index == rec.clip.key_index);
  REQUIRE(back.true_o_max == 4.5f);
  REQUIRE(max_abs_diff(back.clip.frames, rec.clip.frames) == 0.0);
  REQUIRE(max_abs_diff(back.motion.depth, rec.motion.depth) == 0.0);
  REQUIRE(max_abs_diff(back.motion.flow_i2v, rec.motion.flow_i2v) == 0.0);
  REQUIRE(max_abs_diff(back.motion.occlusion, rec.motion.occlusion) == 0.0);
  REQUIRE(validate_record(back).ok());

  auto dirs = list_clip_dirs(dir.parent_path());
  REQUIRE(dirs.size() == 1);
}
