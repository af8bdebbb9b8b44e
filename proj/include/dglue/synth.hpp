#pragma once

#include <cstdint>
#include <set>
#include <vector>

#include "dglue/labels.hpp"

namespace dglue {

// A camera driving down a walled street (y axis points down, ground at
// y = camera_height) with small box-shaped instances, some parked and some
// jumping min_motion..max_motion metres in a random horizontal direction
// between consecutive frames.
struct SynthConfig {
  int num_frames = 12;
  int width = 640;
  int height = 480;
  double focal = 500.0;
  double frame_interval = 0.1;  // seconds
  double camera_step = 1.0;     // metres forward per frame
  double camera_wobble = 0.3;   // metres, lateral and vertical
  double max_yaw_deg = 5.0;
  double street_half_width = 8.0;
  double camera_height = 1.5;
  double wall_height = 6.0;
  int num_static_points = 3000;
  int num_static_instances = 2;
  int num_moving_instances = 4;
  int points_per_instance = 80;
  double min_motion = 6.0;  // metres per frame step
  double max_motion = 8.0;
  int keypoints_per_frame = 100;
  double moving_fraction = 0.2;  // of keypoints_per_frame, on moving instances
  int num_distractors = 5;       // random keypoints with random descriptors
  int descriptor_dim = 64;
  double descriptor_noise = 0.2;  // norm of the per-observation perturbation
  double keypoint_jitter = 0.5;   // pixel std

  void validate() const;
  // Exact keypoints and descriptors.
  SynthConfig noiseless() const;
};

struct SynthGroundTruth {
  // Per state and keypoint: world point id (-1 for distractors) and
  // instance id (-1 for the static background).
  std::vector<std::vector<int>> point_ids;
  std::vector<std::vector<int>> instance_ids;
  std::set<int> moving_instances;
  std::set<int> static_instances;

  // Keypoint pairs that observe the same world point.
  std::vector<IndexPair> correspondences(int state_a, int state_b) const;
  std::vector<bool> on_moving(int state) const;
};

struct SynthScene {
  PoseGraphSession session;
  SynthGroundTruth truth;
};

// Deterministic in (seed, cfg). Throws InvalidConfig.
SynthScene synth_scene(std::uint64_t seed, const SynthConfig& cfg = {});

}  // namespace dglue
