#pragma once

#include <iostream>

#include "movia/codec.hpp"
#include "movia/motion_stage.hpp"
#include "movia/video_stage.hpp"

namespace movia {

struct TrainSummary {
  double loss_first = 0;
  double loss_last = 0;
  double loss_avg_head = 0;  // mean over the first window
  double loss_avg_tail = 0;  // mean over the last window
};

namespace training_detail {

inline void track(TrainSummary& s, int64_t step, int64_t steps, double loss,
                  std::vector<double>& head, std::vector<double>& tail) {
  if (step == 0) s.loss_first = loss;
  s.loss_last = loss;
  int64_t window = std::max<int64_t>(1, steps / 10);
  if (step < window) head.push_back(loss);
  if (step >= steps - window) tail.push_back(loss);
}

inline void finish(TrainSummary& s, const std::vector<double>& head,
                   const std::vector<double>& tail) {
  auto mean = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    return v.empty() ? 0.0 : m / double(v.size());
  };
  s.loss_avg_head = mean(head);
  s.loss_avg_tail = mean(tail);
}

}  // namespace training_detail

inline TrainSummary train_motion_stage(MotionStage& stage, const std::vector<ClipRecord>& records,
                                       int64_t steps, int64_t batch, uint64_t seed,
                                       std::ostream* log = nullptr, int64_t log_every = 200) {
  check(!records.empty(), "train_motion_stage: empty dataset");
  std::vector<MotionStage::Example> examples;
  examples.reserve(records.size());
  for (const auto& rec : records) {
    ValidationReport rep = validate_record(rec);
    check_valid(rep.ok(), "train_motion_stage: invalid record " + rec.id + ":\n" + rep.str());
    examples.push_back(MotionStage::make_example(rec));
  }
  Adam opt = stage.make_optimizer();
  Rng rng(seed);
  TrainSummary summary;
  std::vector<double> head, tail;
  for (int64_t step = 0; step < steps; ++step) {
    std::vector<const MotionStage::Example*> pick;
    for (int64_t b = 0; b < batch; ++b)
      pick.push_back(&examples[size_t(rng.uniform_int(0, int64_t(examples.size()) - 1))]);
    double loss = stage.train_step(pick, opt, rng);
    training_detail::track(summary, step, steps, loss, head, tail);
    if (log && (step % log_every == 0 || step + 1 == steps))
      (*log) << "motion step " << step << " loss " << loss << "\n";
  }
  training_detail::finish(summary, head, tail);
  return summary;
}

inline TrainSummary train_video_stage(VideoStage& stage, const std::vector<ClipRecord>& records,
                                      const Codec& codec, int64_t steps, int64_t batch,
                                      uint64_t seed, std::ostream* log = nullptr,
                                      int64_t log_every = 200) {
  check(!records.empty(), "train_video_stage: empty dataset");
  stage.set_latent_scale(codec.latent_scale());
  std::vector<VideoStage::Example> examples;
  examples.reserve(records.size());
  for (const auto& rec : records) {
    ValidationReport rep = validate_record(rec);
    check_valid(rep.ok(), "train_video_stage: invalid record " + rec.id + ":\n" + rep.str());
    examples.push_back(stage.make_example(rec, codec));
  }
  Adam opt = stage.make_optimizer();
  Rng rng(seed);
  TrainSummary summary;
  std::vector<double> head, tail;
  for (int64_t step = 0; step < steps; ++step) {
    std::vector<const VideoStage::Example*> pick;
    for (int64_t b = 0; b < batch; ++b)
      pick.push_back(&examples[size_t(rng.uniform_int(0, int64_t(examples.size()) - 1))]);
    double loss = stage.train_step(pick, opt, rng);
    training_detail::track(summary, step, steps, loss, head, tail);
    if (log && (step % log_every == 0 || step + 1 == steps))
      (*log) << "video[" << arm_name(stage.config().arm) << "] step " << step << " loss " << loss
             << "\n";
  }
  training_detail::finish(summary, head, tail);
  return summary;
}

// Mean normalized depth/flow error of sampled motion against ground truth,
// sampling each clip with its own key frame and fps.
inline double eval_motion_mae(const MotionStage& stage, const std::vector<ClipRecord>& records,
                              uint64_t seed, int steps = 0) {
  double total = 0;
  for (const auto& rec : records) {
    MotionSample s = stage.sample_motion(rec.clip.key_frame(), rec.clip.fps,
                                         rec.clip.frames.size(0), Rng(seed).fork(rec.scene_seed + 1).seed(),
                                         steps);
    total += motion_packed_mae(s.packed_normalized, rec);
  }
  return total / double(records.size());
}

}  // namespace movia
