#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "dglue/error.hpp"
#include "dglue/graph.hpp"
#include "helpers.hpp"

using namespace dglue;

namespace {

ImageFrame basis_frame(int n, int dim, double ts = 0.0) {
  ImageFrame f;
  f.camera = testing_util::test_camera();
  f.timestamp = ts;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd d = Eigen::VectorXd::Zero(dim);
    d(i) = 1.0;
    f.keypoints.push_back({Vec2(10.0 + 37.0 * i, 20.0 + 23.0 * i), d, i});
  }
  return f;
}

// O(n^2) mutual nearest neighbour by explicit loops.
std::set<std::pair<int, int>> brute_mutual_nn(const ImageFrame& a, const ImageFrame& b) {
  std::set<std::pair<int, int>> out;
  auto best_in_b = [&](int i) {
    int best = 0;
    double v = -1e300;
    for (int j = 0; j < b.size(); ++j) {
      const double s = a.keypoints[i].descriptor.dot(b.keypoints[j].descriptor);
      if (s > v) v = s, best = j;
    }
    return best;
  };
  auto best_in_a = [&](int j) {
    int best = 0;
    double v = -1e300;
    for (int i = 0; i < a.size(); ++i) {
      const double s = a.keypoints[i].descriptor.dot(b.keypoints[j].descriptor);
      if (s > v) v = s, best = i;
    }
    return best;
  };
  for (int i = 0; i < a.size(); ++i) {
    const int j = best_in_b(i);
    if (best_in_a(j) == i) out.insert({i, j});
  }
  return out;
}

// k smallest keys with lower index first on ties, optionally skipping one index.
std::vector<int> brute_knn(const std::vector<double>& keys, int k, int skip) {
  std::vector<int> idx;
  for (int i = 0; i < static_cast<int>(keys.size()); ++i) {
    if (i != skip) idx.push_back(i);
  }
  std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) { return keys[x] < keys[y]; });
  idx.resize(std::min<size_t>(idx.size(), k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<int> targets(const std::vector<Edge>& edges, int src) {
  std::vector<int> out;
  for (const auto& e : edges) {
    if (e.src == src) out.push_back(e.dst);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(LightweightMatch, IdenticalBasisDescriptors) {
  const ImageFrame a = basis_frame(5, 8), b = basis_frame(5, 8);
  const auto m = lightweight_match(a, b);
  ASSERT_EQ(m.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(m[i].a, i);
    EXPECT_EQ(m[i].b, i);
    EXPECT_EQ(m[i].weight, 1.0);
  }
}

TEST(LightweightMatch, NonMutualPairIsDropped) {
  // A0 prefers B3, but B3 prefers A7.
  std::mt19937_64 rng(1);
  ImageFrame a = testing_util::random_frame(rng, 8, 16);
  ImageFrame b = testing_util::random_frame(rng, 5, 16);
  Eigen::VectorXd target = testing_util::random_unit(rng, 16);
  b.keypoints[3].descriptor = target;
  a.keypoints[7].descriptor = target;
  a.keypoints[0].descriptor = (target + 0.3 * testing_util::random_unit(rng, 16)).normalized();
  for (const auto& m : lightweight_match(a, b)) EXPECT_NE(m.a, 0);
}

TEST(LightweightMatch, AgreesWithBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const ImageFrame a = testing_util::random_frame(rng, 50, 32);
    const ImageFrame b = testing_util::random_frame(rng, 50, 32);
    std::set<std::pair<int, int>> got;
    for (const auto& m : lightweight_match(a, b)) {
      got.insert({m.a, m.b});
      const double s = a.keypoints[m.a].descriptor.dot(b.keypoints[m.b].descriptor);
      EXPECT_NEAR(m.weight, std::clamp(s, 0.0, 1.0), 1e-14);
    }
    EXPECT_EQ(got, brute_mutual_nn(a, b));
  }
}

TEST(LightweightMatch, TiesGoToLowerIndex) {
  ImageFrame a = basis_frame(1, 4), b = basis_frame(3, 4);
  for (auto& kp : b.keypoints) kp.descriptor = a.keypoints[0].descriptor;
  const auto m = lightweight_match(a, b);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].b, 0);
}

TEST(BuildGraph, TwentyThousandCrossEdgesForThousandKeypoints) {
  std::mt19937_64 rng(2);
  const ImageFrame a = testing_util::random_frame(rng, 1000, 16);
  const ImageFrame b = testing_util::random_frame(rng, 1000, 16);
  const PairGraph g = build_graph(a, b);
  EXPECT_EQ(g.cross_edges.size(), 20000u);
  EXPECT_EQ(g.self_edges.size(), 20000u);
}

TEST(BuildGraph, EdgeCountIsLinear) {
  std::mt19937_64 rng(3);
  for (int n : {100, 500, 1000, 2000}) {
    const ImageFrame a = testing_util::random_frame(rng, n, 8);
    const ImageFrame b = testing_util::random_frame(rng, n, 8);
    const PairGraph g = build_graph(a, b);
    EXPECT_EQ(g.self_edges.size() + g.cross_edges.size(), static_cast<size_t>(20 * 2 * n));
  }
}

TEST(BuildGraph, EdgesMatchNearestNeighbourOracle) {
  std::mt19937_64 rng(4);
  const ImageFrame a = testing_util::random_frame(rng, 40, 16);
  const ImageFrame b = testing_util::random_frame(rng, 30, 16, 0.5);
  GraphConfig cfg;
  cfg.k_self = 6;
  cfg.k_cross = 4;
  const PairGraph g = build_graph(a, b, cfg);
  const int n = a.size();
  for (int node = 0; node < g.num_nodes(); ++node) {
    const ImageFrame& own = node < n ? a : b;
    const ImageFrame& other = node < n ? b : a;
    const int local = node < n ? node : node - n;
    const int own_off = node < n ? 0 : n;
    const int other_off = node < n ? n : 0;
    std::vector<double> dist;
    for (const auto& kp : own.keypoints) dist.push_back((kp.position - own.keypoints[local].position).norm());
    std::vector<int> expect_self = brute_knn(dist, cfg.k_self, local);
    for (int& v : expect_self) v += own_off;
    EXPECT_EQ(targets(g.self_edges, node), expect_self);
    std::vector<double> sim;
    for (const auto& kp : other.keypoints) sim.push_back(-kp.descriptor.dot(own.keypoints[local].descriptor));
    std::vector<int> expect_cross = brute_knn(sim, cfg.k_cross, -1);
    for (int& v : expect_cross) v += other_off;
    EXPECT_EQ(targets(g.cross_edges, node), expect_cross);
  }
}

TEST(BuildGraph, StructuralInvariants) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    std::uniform_int_distribution<int> size(2, 30);
    const ImageFrame a = testing_util::random_frame(rng, size(rng), 8, 0.0);
    const ImageFrame b = testing_util::random_frame(rng, size(rng), 8, 0.2);
    const PairGraph g = build_graph(a, b);
    for (int node = 0; node < g.num_nodes(); ++node) {
      const int own = g.in_a(node) ? g.num_a : g.num_b;
      const int other = g.in_a(node) ? g.num_b : g.num_a;
      const auto s = targets(g.self_edges, node);
      const auto c = targets(g.cross_edges, node);
      EXPECT_EQ(static_cast<int>(s.size()), std::min(10, own - 1));
      EXPECT_EQ(static_cast<int>(c.size()), std::min(10, other));
      for (int d : s) {
        EXPECT_NE(d, node);
        EXPECT_EQ(g.in_a(d), g.in_a(node));
      }
      for (int d : c) EXPECT_NE(g.in_a(d), g.in_a(node));
    }
    EXPECT_TRUE(g.cross_edge_features.allFinite());
    for (Eigen::Index e = 0; e < g.cross_edge_features.cols(); ++e) {
      for (int k = kMeanLogEpipolar; k <= kTimeDelta; ++k) {
        if (k == kTimeDelta) continue;
        EXPECT_EQ(g.cross_edge_features(k, e), g.cross_edge_features(k, 0));
      }
      EXPECT_LE(g.cross_edge_features(kMinLogEpipolar, e), g.cross_edge_features(kMeanLogEpipolar, e));
      const bool from_a = g.in_a(g.cross_edges[e].src);
      EXPECT_EQ(g.cross_edge_features(kTimeDelta, e), from_a ? 0.2 : -0.2);
    }
  }
}

TEST(BuildGraph, IdenticalFramesHaveZeroTimeDelta) {
  std::mt19937_64 rng(6);
  const ImageFrame a = testing_util::random_frame(rng, 50, 16, 3.25);
  const PairGraph g = build_graph(a, a);
  EXPECT_TRUE((g.cross_edge_features.row(kTimeDelta).array() == 0.0).all());
}

TEST(BuildGraph, EpipolarFeatureSeparatesTrueCorrespondences) {
  std::mt19937_64 rng(7);
  const auto rig = testing_util::make_rig(rng, 60);
  ImageFrame a, b;
  a.camera = rig.cam_a;
  b.camera = rig.cam_b;
  b.timestamp = 0.1;
  for (int i = 0; i < 60; ++i) {
    const Eigen::VectorXd d = testing_util::random_unit(rng, 32);
    a.keypoints.push_back({rig.px_a[i], d, i});
    b.keypoints.push_back({rig.px_b[i], d, i});
  }
  const PairGraph g = build_graph(a, b);
  ASSERT_TRUE(g.bootstrap_ok);
  EXPECT_EQ(g.bootstrap_matches.size(), 60u);
  EXPECT_NEAR(g.cross_edge_features(kWeightSum, 0), 60.0, 1e-9);
  const Mat3 E = skew(rig.T_b_a.t) * rig.T_b_a.R;
  const double log_eps = std::log(1e-12);
  for (size_t e = 0; e < g.cross_edges.size(); ++e) {
    const Edge& edge = g.cross_edges[e];
    const int ia = edge.src < 60 ? edge.src : edge.dst;
    const int jb = (edge.src < 60 ? edge.dst : edge.src) - 60;
    const double feat = g.cross_edge_features(kLogEpipolar, e);
    if (ia == jb) {
      EXPECT_NEAR(feat, log_eps, 1e-2);
    } else {
      const double d = symmetric_epipolar_distance(E, rig.cam_a.normalize(rig.px_a[ia]),
                                                   rig.cam_b.normalize(rig.px_b[jb]));
      if (d > 1e-9) {
        EXPECT_GT(feat, log_eps + 1.0);
        EXPECT_NEAR(feat, std::log(d + 1e-12), 1e-4);
      }
    }
  }
}

TEST(BuildGraph, BootstrapFailureUsesFallback) {
  // Fewer than eight mutual matches.
  const ImageFrame a = basis_frame(5, 8), b = basis_frame(5, 8);
  const PairGraph g = build_graph(a, b);
  EXPECT_FALSE(g.bootstrap_ok);
  EXPECT_EQ(g.bootstrap_F.matrix(), fallback_fundamental().matrix());
  EXPECT_TRUE((g.cross_edge_features.row(kWeightSum).array() == 0.0).all());
  const Mat3 expect = canonicalize_fundamental(skew(Vec3(1, 0, 0)));
  EXPECT_EQ(fallback_fundamental().matrix(), expect);
}

TEST(BuildGraph, Deterministic) {
  std::mt19937_64 rng(8);
  const auto [a, b] = testing_util::correlated_frames(rng, 200, 32);
  const PairGraph g1 = build_graph(a, b), g2 = build_graph(a, b);
  EXPECT_EQ(g1.self_edges, g2.self_edges);
  EXPECT_EQ(g1.cross_edges, g2.cross_edges);
  EXPECT_EQ(g1.cross_edge_features, g2.cross_edge_features);
  EXPECT_EQ(g1.bootstrap_F.matrix(), g2.bootstrap_F.matrix());
}

TEST(BuildGraph, TooFewKeypoints) {
  std::mt19937_64 rng(9);
  const ImageFrame a = testing_util::random_frame(rng, 1, 8);
  const ImageFrame b = testing_util::random_frame(rng, 5, 8);
  try {
    build_graph(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TooFewKeypoints);
  }
}

TEST(BuildGraph, SmallOtherImageGivesFullCrossConnectivity) {
  std::mt19937_64 rng(10);
  const ImageFrame a = testing_util::random_frame(rng, 20, 8);
  const ImageFrame b = testing_util::random_frame(rng, 3, 8);
  const PairGraph g = build_graph(a, b);
  EXPECT_EQ(g.cross_edges.size(), static_cast<size_t>(20 * 3 + 3 * 10));
  EXPECT_EQ(g.self_edges.size(), static_cast<size_t>(20 * 10 + 3 * 2));
}

TEST(GraphConfig, RejectsZeroNeighbours) {
  GraphConfig cfg;
  cfg.k_cross = 0;
  EXPECT_THROW(cfg.validate(), Error);
}
