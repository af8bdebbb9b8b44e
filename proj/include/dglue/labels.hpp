#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <vector>

#include "dglue/geometry.hpp"
#include "dglue/trainer.hpp"

namespace dglue {

// Dense per-pixel z-depth in metres; 0 marks pixels without depth. Pixel
// (x, y) covers [x - 0.5, x + 0.5) so keypoints look up their nearest pixel.
struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // row-major

  float at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::optional<double> lookup(const Vec2& px) const;
};

// Instance id per pixel, stored as id + 1 with 0 for background.
struct InstanceMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> data;

  int at(int x, int y) const { return int(data[static_cast<std::size_t>(y) * width + x]) - 1; }
  // Instance under the nearest pixel, or -1.
  int lookup(const Vec2& px) const;
  std::set<int> instances() const;
};

struct SessionState {
  double timestamp = 0.0;
  RigidTransform pose;  // camera to world
  ImageFrame frame;
  std::shared_ptr<const DepthMap> depth;
  std::shared_ptr<const InstanceMask> mask;
};

struct LandmarkObservation {
  int state = 0;
  int keypoint = 0;
  Vec2 pixel = Vec2::Zero();
};

struct PoseGraphSession {
  std::vector<SessionState> states;
  std::map<int, std::vector<LandmarkObservation>> landmarks;

  // Throws InvalidConfig on non-rigid poses, non-increasing timestamps or
  // observations that point outside the states.
  void validate() const;
  // Landmark id per keypoint of `state`, -1 where none.
  std::vector<int> landmark_ids(int state) const;
};

struct ImageQuery {
  int state_a = 0;
  int state_b = 0;
  Camera camera_a, camera_b;
  double timestamp_a = 0.0;
  double timestamp_b = 0.0;
  RigidTransform T_b_a;
  std::shared_ptr<const DepthMap> depth_a, depth_b;
  std::shared_ptr<const InstanceMask> mask_a, mask_b;
  std::vector<int> landmarks_a, landmarks_b;  // per keypoint, -1 if none
  int shared_landmarks = 0;

  double time_delta() const { return timestamp_b - timestamp_a; }
};

ImageQuery make_query(const PoseGraphSession& session, int state_a, int state_b);

// Pairs (i, j), i < j, with j % stride == 0 and at least `min_shared`
// common landmarks, ordered by (i, j).
std::vector<ImageQuery> extract_queries(const PoseGraphSession& session, int min_shared = 10,
                                        int stride = 1);

enum class LabelSource { LandmarkProjection, DepthProjection, DynamicMask };

struct MatchLabelSet {
  int state_a = -1;
  int state_b = -1;
  std::vector<IndexPair> matches;
  std::vector<LabelSource> match_sources;
  std::vector<int> unmatched_a, unmatched_b;
  std::vector<LabelSource> unmatched_a_sources, unmatched_b_sources;
  std::vector<int> moving_instances;

  LabelBatch batch() const { return {matches, unmatched_a, unmatched_b}; }
};

struct LabelConfig {
  double match_radius = 3.0;       // px, projection coincides with a keypoint
  double unmatched_radius = 50.0;  // px, nothing this close -> non-matchable
};

// Projects keypoints both ways with depth and relative pose and keeps only
// the classifications on which both directions agree. Throws MissingDepth
// when a keypoint has no depth.
MatchLabelSet label_pair(const ImageQuery& query, const ImageFrame& a, const ImageFrame& b,
                         const LabelConfig& cfg = {});

struct MovingConfig {
  double chamfer_threshold = 5.0;  // metres
  int max_points = 512;            // per instance and frame, strided subsample
};

// World-frame clouds per instance: instance id -> one cloud per observing state.
using InstanceClouds = std::map<int, std::vector<std::vector<Vec3>>>;

InstanceClouds instance_clouds(const PoseGraphSession& session, const MovingConfig& cfg = {});

// Moving iff the largest pairwise chamfer distance exceeds the threshold.
// Throws EmptyInstanceObservation for instances with fewer than two clouds
// or an empty cloud.
std::set<int> classify_moving(const InstanceClouds& clouds, const MovingConfig& cfg = {});
// Uses every instance seen in at least two states.
std::set<int> classify_moving(const PoseGraphSession& session, const MovingConfig& cfg = {});

// With a non-zero time delta, every keypoint on a moving instance leaves the
// matches and joins its image's non-matchable set.
MatchLabelSet apply_dynamic_mask(const MatchLabelSet& labels, const std::set<int>& moving,
                                 const ImageFrame& a, const ImageFrame& b,
                                 const InstanceMask& mask_a, const InstanceMask& mask_b,
                                 double time_delta);

// label_pair followed by apply_dynamic_mask for every query.
std::vector<MatchLabelSet> generate_labels(const PoseGraphSession& session,
                                           std::span<const ImageQuery> queries,
                                           const std::set<int>& moving,
                                           const LabelConfig& cfg = {}, int threads = 1);

}  // namespace dglue
