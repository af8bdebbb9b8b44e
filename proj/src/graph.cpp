#include "dglue/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "dglue/error.hpp"

namespace dglue {

namespace {

Eigen::MatrixXd stack_descriptors(const ImageFrame& f) {
  const int d = f.descriptor_dim();
  Eigen::MatrixXd out(d, f.size());
  for (int i = 0; i < f.size(); ++i) {
    if (f.keypoints[i].descriptor.size() != d) {
      throw Error(ErrorKind::ShapeMismatch, "descriptor dimensions differ within a frame");
    }
    out.col(i) = f.keypoints[i].descriptor;
  }
  return out;
}

// Indices of the k smallest keys, ordered by (key, index).
void k_smallest(std::span<const double> keys, int k, int skip, std::vector<int>& out) {
  out.clear();
  for (int j = 0; j < static_cast<int>(keys.size()); ++j) {
    if (j != skip) out.push_back(j);
  }
  const int kk = std::min<int>(k, static_cast<int>(out.size()));
  auto less = [&](int x, int y) { return keys[x] < keys[y] || (keys[x] == keys[y] && x < y); };
  std::partial_sort(out.begin(), out.begin() + kk, out.end(), less);
  out.resize(kk);
}

void add_self_edges(const ImageFrame& f, int offset, int k, std::vector<Edge>& edges) {
  const int n = f.size();
  std::vector<double> dist(n);
  std::vector<int> nn;
  for (int i = 0; i < n; ++i) {
    const Vec2& p = f.keypoints[i].position;
    for (int j = 0; j < n; ++j) dist[j] = (f.keypoints[j].position - p).squaredNorm();
    k_smallest(dist, k, i, nn);
    for (int j : nn) edges.push_back({offset + i, offset + j});
  }
}

}  // namespace

void GraphConfig::validate() const {
  if (k_self < 1 || k_cross < 1) {
    throw Error(ErrorKind::InvalidConfig, "k_self and k_cross must be >= 1");
  }
  if (!(epsilon_log > 0.0)) {
    throw Error(ErrorKind::InvalidConfig, "epsilon_log must be positive");
  }
}

void PairGraph::index_edges() {
  const int n = num_nodes();
  if (descriptors.cols() != n) {
    throw Error(ErrorKind::ShapeMismatch, "descriptor count does not match node count");
  }
  if (cross_edge_features.cols() != static_cast<Eigen::Index>(cross_edges.size())) {
    throw Error(ErrorKind::ShapeMismatch, "one feature column per cross edge required");
  }
  auto build = [n](const std::vector<Edge>& edges, std::vector<int>& offsets) {
    offsets.assign(n + 1, 0);
    int prev = -1;
    for (const auto& e : edges) {
      if (e.src < 0 || e.src >= n || e.dst < 0 || e.dst >= n) {
        throw Error(ErrorKind::ShapeMismatch, "edge endpoint out of range");
      }
      if (e.src < prev) {
        throw Error(ErrorKind::ShapeMismatch, "edges must be grouped by source node");
      }
      prev = e.src;
      ++offsets[e.src + 1];
    }
    std::partial_sum(offsets.begin(), offsets.end(), offsets.begin());
  };
  for (const auto& e : self_edges) {
    if (e.src == e.dst) throw Error(ErrorKind::ShapeMismatch, "self-loop in self edges");
    if ((e.src < num_a) != (e.dst < num_a)) {
      throw Error(ErrorKind::ShapeMismatch, "self edge crosses images");
    }
  }
  for (const auto& e : cross_edges) {
    if ((e.src < num_a) == (e.dst < num_a)) {
      throw Error(ErrorKind::ShapeMismatch, "cross edge stays within one image");
    }
  }
  build(self_edges, self_offsets);
  build(cross_edges, cross_offsets);
}

Eigen::MatrixXd descriptor_similarity(const ImageFrame& a, const ImageFrame& b) {
  if (a.size() > 0 && b.size() > 0 && a.descriptor_dim() != b.descriptor_dim()) {
    throw Error(ErrorKind::ShapeMismatch, "frames use different descriptor dimensions");
  }
  return stack_descriptors(a).transpose() * stack_descriptors(b);
}

std::vector<WeightedMatch> mutual_nearest_neighbors(const Eigen::MatrixXd& sim) {
  const Eigen::Index n = sim.rows();
  const Eigen::Index m = sim.cols();
  std::vector<Eigen::Index> best_b(n, -1), best_a(m, -1);
  // Strict > keeps the lowest index on ties.
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j) {
      if (sim(i, j) > best) {
        best = sim(i, j);
        best_b[i] = j;
      }
    }
  }
  for (Eigen::Index j = 0; j < m; ++j) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (sim(i, j) > best) {
        best = sim(i, j);
        best_a[j] = i;
      }
    }
  }
  std::vector<WeightedMatch> out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index j = best_b[i];
    if (j >= 0 && best_a[j] == i) {
      out.push_back({static_cast<int>(i), static_cast<int>(j), std::clamp(sim(i, j), 0.0, 1.0)});
    }
  }
  return out;
}

std::vector<WeightedMatch> lightweight_match(const ImageFrame& a, const ImageFrame& b) {
  return mutual_nearest_neighbors(descriptor_similarity(a, b));
}

FundamentalMatrix fallback_fundamental() {
  return FundamentalMatrix::canonical(skew(Vec3::UnitX()));
}

PairGraph build_graph(const ImageFrame& a, const ImageFrame& b, const GraphConfig& cfg) {
  cfg.validate();
  if (a.size() < 2 || b.size() < 2) {
    throw Error(ErrorKind::TooFewKeypoints,
                "build_graph needs >= 2 keypoints per frame, got " + std::to_string(a.size()) +
                    " and " + std::to_string(b.size()));
  }
  const int n = a.size();
  const int m = b.size();

  PairGraph g;
  g.num_a = n;
  g.num_b = m;
  g.descriptors.resize(a.descriptor_dim(), n + m);
  const Eigen::MatrixXd sim = descriptor_similarity(a, b);
  for (int i = 0; i < n; ++i) g.descriptors.col(i) = a.keypoints[i].descriptor;
  for (int j = 0; j < m; ++j) g.descriptors.col(n + j) = b.keypoints[j].descriptor;

  // Self edges, grouped by source (A nodes first).
  g.self_edges.reserve(static_cast<size_t>(n + m) * cfg.k_self);
  add_self_edges(a, 0, cfg.k_self, g.self_edges);
  add_self_edges(b, n, cfg.k_self, g.self_edges);

  // Cross edges to the most similar descriptors of the other image.
  g.cross_edges.reserve(static_cast<size_t>(n + m) * cfg.k_cross);
  std::vector<int> nn;
  std::vector<double> keys;
  keys.resize(m);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) keys[j] = -sim(i, j);
    k_smallest(keys, cfg.k_cross, -1, nn);
    for (int j : nn) g.cross_edges.push_back({i, n + j});
  }
  keys.resize(n);
  for (int j = 0; j < m; ++j) {
    for (int i = 0; i < n; ++i) keys[i] = -sim(i, j);
    k_smallest(keys, cfg.k_cross, -1, nn);
    for (int i : nn) g.cross_edges.push_back({n + j, i});
  }

  // Bootstrap geometry in normalized camera coordinates.
  std::vector<Vec2> xa(n), xb(m);
  for (int i = 0; i < n; ++i) xa[i] = a.camera.normalize(a.keypoints[i].position);
  for (int j = 0; j < m; ++j) xb[j] = b.camera.normalize(b.keypoints[j].position);

  g.bootstrap_matches = mutual_nearest_neighbors(sim);
  double weight_sum = 0.0;
  try {
    g.bootstrap_F = weighted_eight_point(g.bootstrap_matches, xa, xb);
    g.bootstrap_ok = true;
    for (const auto& wm : g.bootstrap_matches) weight_sum += wm.weight;
  } catch (const Error&) {
    g.bootstrap_F = fallback_fundamental();
    g.bootstrap_ok = false;
    weight_sum = 0.0;
  }

  const Mat3& F = g.bootstrap_F.matrix();
  const size_t ne = g.cross_edges.size();
  g.cross_edge_features.resize(kEdgeFeatureDim, static_cast<Eigen::Index>(ne));
  double log_sum = 0.0;
  double log_min = std::numeric_limits<double>::infinity();
  for (size_t e = 0; e < ne; ++e) {
    const Edge& edge = g.cross_edges[e];
    const int ia = edge.src < n ? edge.src : edge.dst;
    const int jb = (edge.src < n ? edge.dst : edge.src) - n;
    double d = 0.0;
    try {
      d = symmetric_epipolar_distance(F, xa[ia], xb[jb]);
    } catch (const Error&) {
      // Point sits on the epipole: every epipolar line passes through it.
      d = 0.0;
    }
    const double ld = std::log(d + cfg.epsilon_log);
    g.cross_edge_features(kLogEpipolar, e) = ld;
    log_sum += ld;
    log_min = std::min(log_min, ld);
  }
  const double log_mean = log_sum / static_cast<double>(ne);
  for (size_t e = 0; e < ne; ++e) {
    const bool from_a = g.cross_edges[e].src < n;
    g.cross_edge_features(kMeanLogEpipolar, e) = log_mean;
    g.cross_edge_features(kMinLogEpipolar, e) = log_min;
    g.cross_edge_features(kWeightSum, e) = weight_sum;
    g.cross_edge_features(kTimeDelta, e) =
        from_a ? b.timestamp - a.timestamp : a.timestamp - b.timestamp;
  }

  g.index_edges();
  return g;
}

}  // namespace dglue
