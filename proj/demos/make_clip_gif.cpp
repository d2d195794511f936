// Generates one random synthetic clip and writes it out as an animated GIF
// plus the key frame as PNG. Usage: make_clip_gif [seed] [out.gif]

#include <cstdio>
#include <cstdlib>

#include "movia/imageio.hpp"
#include "movia/synth_world.hpp"

using namespace movia;

int main(int argc, char** argv) {
  uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 7;
  const char* out = argc > 2 ? argv[2] : "clip.gif";

  DatasetRanges ranges;
  SceneSpec spec = random_scene(ranges, Rng(seed));
  ClipRecord rec = generate_scene(spec);

  write_gif(out, rec.clip.frames, rec.clip.fps);
  write_png("key_frame.png", rec.clip.key_frame());
  std::printf("wrote %s (%lld frames at %d fps) and key_frame.png\n", out,
              static_cast<long long>(rec.clip.f()), rec.clip.fps);
  return 0;
}
