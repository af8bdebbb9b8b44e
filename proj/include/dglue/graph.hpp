#pragma once

#include <Eigen/Core>
#include <vector>

#include "dglue/geometry.hpp"

namespace dglue {

inline constexpr int kEdgeFeatureDim = 5;

// Component layout of a cross-edge feature vector.
enum EdgeFeature : int {
  kLogEpipolar = 0,
  kMeanLogEpipolar = 1,
  kMinLogEpipolar = 2,
  kWeightSum = 3,
  kTimeDelta = 4,
};

struct GraphConfig {
  int k_self = 10;
  int k_cross = 10;
  double epsilon_log = 1e-12;

  void validate() const;
};

// Directed edge: node `src` aggregates from node `dst`.
struct Edge {
  int src = 0;
  int dst = 0;
  bool operator==(const Edge&) const = default;
};

using EdgeFeatures = Eigen::Matrix<double, kEdgeFeatureDim, Eigen::Dynamic>;

// Sparse two-image graph. Nodes [0, num_a) belong to image A, nodes
// [num_a, num_a + num_b) to image B. Edge lists are grouped by source node;
// `self_offsets` / `cross_offsets` index into them CSR-style.
struct PairGraph {
  int num_a = 0;
  int num_b = 0;
  // descriptor_dim x (num_a + num_b), one column per node.
  Eigen::MatrixXd descriptors;
  std::vector<Edge> self_edges;
  std::vector<Edge> cross_edges;
  // One column per cross edge, same order as `cross_edges`.
  EdgeFeatures cross_edge_features;
  FundamentalMatrix bootstrap_F;
  bool bootstrap_ok = false;
  std::vector<WeightedMatch> bootstrap_matches;

  std::vector<int> self_offsets;
  std::vector<int> cross_offsets;

  int num_nodes() const { return num_a + num_b; }
  int descriptor_dim() const { return static_cast<int>(descriptors.rows()); }
  bool in_a(int node) const { return node < num_a; }

  // Validates edge grouping and index ranges and fills the CSR offsets.
  // Throws ShapeMismatch on inconsistent input.
  void index_edges();
};

// descriptors_a^T * descriptors_b, one row per A keypoint.
Eigen::MatrixXd descriptor_similarity(const ImageFrame& a, const ImageFrame& b);

// Mutual nearest neighbours under descriptor inner product; weight is the
// inner product clamped to [0, 1]. Ties go to the lower index.
std::vector<WeightedMatch> lightweight_match(const ImageFrame& a, const ImageFrame& b);
std::vector<WeightedMatch> mutual_nearest_neighbors(const Eigen::MatrixXd& similarity);

// Canonical fallback used when the bootstrap estimate fails: [e]x, e = (1,0,0).
FundamentalMatrix fallback_fundamental();

PairGraph build_graph(const ImageFrame& a, const ImageFrame& b, const GraphConfig& cfg = {});

}  // namespace dglue
