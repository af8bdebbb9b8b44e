#pragma once

#include <span>
#include <string>
#include <vector>

#include "dglue/geometry.hpp"

namespace dglue {

struct PrecisionScore {
  double precision = 0.0;
  double matching_score = 0.0;
  int correct = 0;
  int found = 0;
};

// A match is correct iff its symmetric epipolar distance under the
// ground-truth essential matrix, in normalized coordinates, is below
// `threshold`. Matches whose epipolar lines degenerate count as incorrect.
PrecisionScore precision_and_ms(std::span<const IndexPair> matches, const ImageFrame& a,
                                const ImageFrame& b, const RigidTransform& T_b_a,
                                double threshold = 5e-4);
// Same with an explicit essential matrix (x_b^T E x_a = 0, normalized coords).
PrecisionScore precision_and_ms(std::span<const IndexPair> matches, const ImageFrame& a,
                                const ImageFrame& b, const Mat3& essential,
                                double threshold = 5e-4);

// max(rotation error, translation-direction error) in degrees; 180 when
// fewer than 5 matches are given or the pose cannot be recovered.
double pose_error(std::span<const IndexPair> matches, const ImageFrame& a, const ImageFrame& b,
                  const RigidTransform& T_b_a, const RansacConfig& ransac = {});
// The same error between two poses.
double pose_error_deg(const RigidTransform& estimate, const RigidTransform& truth);

// Area under the cumulative recall curve of `errors` up to `threshold`
// (degrees), trapezoidal, normalized to [0, 1]. Throws EmptyErrorList.
double auc(std::span<const double> errors, double threshold);

struct DynamicMetrics {
  double m_mov = 0.0;
  double k_mov = 0.0;
  int moving_matches = 0;   // matches with at least one moving endpoint
  int matched_moving = 0;   // moving keypoints that take part in a match
};

// M_mov = moving_matches / |matches|; K_mov = matched moving keypoints over
// all keypoints of both images. With `literal_k_mov` the numerator of K_mov
// counts every moving keypoint, matched or not.
DynamicMetrics dynamic_metrics(std::span<const IndexPair> matches,
                               const std::vector<bool>& moving_a,
                               const std::vector<bool>& moving_b, bool literal_k_mov = false);

// Mutual nearest neighbours on descriptors.
std::vector<WeightedMatch> mutual_nn_baseline(const ImageFrame& a, const ImageFrame& b);

struct EvalConfig {
  double epipolar_threshold = 5e-4;
  bool literal_k_mov = false;
  RansacConfig ransac;
  int threads = 1;
};

struct EvalPair {
  int state_a = 0;
  int state_b = 0;
  const ImageFrame* a = nullptr;
  const ImageFrame* b = nullptr;
  RigidTransform T_b_a;
  std::vector<bool> moving_a, moving_b;
  std::vector<IndexPair> matches;
};

struct PairRecord {
  int state_a = 0;
  int state_b = 0;
  int num_a = 0;
  int num_b = 0;
  int found = 0;
  int correct = 0;
  double precision = 0.0;
  double matching_score = 0.0;
  double pose_error_deg = 180.0;
  int moving_matches = 0;
  int matched_moving = 0;
  int moving_keypoints = 0;
  double m_mov = 0.0;
  double k_mov = 0.0;
};

// P and MS are means over pairs. M_mov and K_mov pool counts over all
// pairs, so pairs without matches do not dilute them.
struct EvalReport {
  double auc5 = 0.0, auc10 = 0.0, auc20 = 0.0;
  double precision = 0.0;
  double matching_score = 0.0;
  double m_mov = 0.0;
  double k_mov = 0.0;
  bool literal_k_mov = false;
  std::vector<PairRecord> pairs;

  std::string to_json() const;
  // One header line and one value line, Table-1 column order.
  std::string to_table() const;
};

PairRecord evaluate_pair(const EvalPair& pair, const EvalConfig& cfg = {});
// Throws EmptyErrorList for an empty pair list. Records keep input order.
EvalReport evaluate(std::span<const EvalPair> pairs, const EvalConfig& cfg = {});

}  // namespace dglue
