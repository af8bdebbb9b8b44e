#include "dglue/geometry.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "dglue/error.hpp"

namespace dglue {

namespace {

constexpr double kLineEps = 1e-24;
constexpr double kRankTol = 1e-10;

struct Normalization {
  Mat3 T = Mat3::Identity();
};

// Hartley normalization from weighted statistics: centroid at the origin,
// weighted mean distance sqrt(2).
Normalization hartley(std::span<const Vec2> pts, std::span<const double> w) {
  double wsum = 0.0;
  Vec2 c = Vec2::Zero();
  for (size_t i = 0; i < pts.size(); ++i) {
    c += w[i] * pts[i];
    wsum += w[i];
  }
  c /= wsum;
  double mean_dist = 0.0;
  for (size_t i = 0; i < pts.size(); ++i) mean_dist += w[i] * (pts[i] - c).norm();
  mean_dist /= wsum;
  if (!(mean_dist > 0.0) || !std::isfinite(mean_dist)) {
    throw Error(ErrorKind::DegenerateConfiguration,
                "eight-point: all points coincide after weighting");
  }
  const double s = std::sqrt(2.0) / mean_dist;
  Normalization n;
  n.T << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return n;
}

Vec3 homog(const Vec2& p) { return {p.x(), p.y(), 1.0}; }

// Unweighted estimate used by RANSAC; thin wrapper over the weighted path.
Mat3 eight_point_unweighted(std::span<const Vec2> a, std::span<const Vec2> b) {
  std::vector<WeightedMatch> m(a.size());
  for (size_t i = 0; i < a.size(); ++i) m[i] = {static_cast<int>(i), static_cast<int>(i), 1.0};
  return weighted_eight_point(m, a, b).matrix();
}

// Closest essential matrix (singular values 1, 1, 0).
Mat3 project_to_essential(const Mat3& F) {
  Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * Vec3(1, 1, 0).asDiagonal() * svd.matrixV().transpose();
}

// Linear triangulation with P_a = [I|0], P_b = [R|t]; returns the point in
// frame A.
Vec3 triangulate(const Vec2& xa, const Vec2& xb, const Mat3& R, const Vec3& t) {
  Eigen::Matrix<double, 4, 4> A;
  Eigen::Matrix<double, 3, 4> Pa = Eigen::Matrix<double, 3, 4>::Zero();
  Pa.leftCols<3>() = Mat3::Identity();
  Eigen::Matrix<double, 3, 4> Pb;
  Pb.leftCols<3>() = R;
  Pb.col(3) = t;
  A.row(0) = xa.x() * Pa.row(2) - Pa.row(0);
  A.row(1) = xa.y() * Pa.row(2) - Pa.row(1);
  A.row(2) = xb.x() * Pb.row(2) - Pb.row(0);
  A.row(3) = xb.y() * Pb.row(2) - Pb.row(1);
  Eigen::JacobiSVD<Eigen::Matrix4d> svd(A, Eigen::ComputeFullV);
  Eigen::Vector4d X = svd.matrixV().col(3);
  return X.head<3>() / X(3);
}

}  // namespace

Vec2 Camera::normalize(const Vec2& px) const {
  const Vec3 x = K.triangularView<Eigen::Upper>().solve(homog(px));
  return x.head<2>() / x.z();
}

Vec2 Camera::denormalize(const Vec2& xy) const {
  const Vec3 x = K * homog(xy);
  return x.head<2>() / x.z();
}

Vec2 Camera::project(const Vec3& p_cam) const {
  const Vec3 x = K * p_cam;
  return x.head<2>() / x.z();
}

Vec3 Camera::backproject(const Vec2& px, double depth) const {
  return homog(normalize(px)) * depth;
}

bool Camera::contains(const Vec2& px) const {
  return px.x() >= 0.0 && px.y() >= 0.0 && px.x() < width && px.y() < height;
}

void Camera::validate() const {
  if (!K.allFinite() || K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0 ||
      !(K(0, 0) > 0.0) || !(K(1, 1) > 0.0) || K(2, 2) == 0.0) {
    throw Error(ErrorKind::InvalidConfig,
                "intrinsics must be upper triangular with positive focal lengths");
  }
  if (width <= 0 || height <= 0) {
    throw Error(ErrorKind::InvalidConfig, "image size must be positive");
  }
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.R = R.transpose();
  inv.t = -(inv.R * t);
  return inv;
}

RigidTransform RigidTransform::operator*(const RigidTransform& other) const {
  RigidTransform out;
  out.R = R * other.R;
  out.t = R * other.t + t;
  return out;
}

bool RigidTransform::is_rigid(double tol) const {
  if (!R.allFinite() || !t.allFinite()) return false;
  const double orth = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
  return orth <= tol && std::abs(R.determinant() - 1.0) <= tol;
}

Mat3 skew(const Vec3& v) {
  Mat3 S;
  S << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return S;
}

Mat3 rotation_from_axis_angle(const Vec3& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

double rotation_angle(const Mat3& R) {
  const double c = std::clamp((R.trace() - 1.0) / 2.0, -1.0, 1.0);
  // acos is ill-conditioned near 0; use the skew part there.
  const Vec3 w(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  return std::atan2(0.5 * w.norm(), c);
}

double direction_angle(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

Mat3 canonicalize_fundamental(const Mat3& F) {
  const double n = F.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw Error(ErrorKind::DegenerateConfiguration, "fundamental matrix has zero norm");
  }
  Mat3 out = F / n;
  int best_r = 0, best_c = 0;
  double best = -1.0;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      if (std::abs(out(r, c)) > best) {
        best = std::abs(out(r, c));
        best_r = r;
        best_c = c;
      }
    }
  }
  if (out(best_r, best_c) < 0.0) out = -out;
  return out;
}

FundamentalMatrix FundamentalMatrix::from_matrix(const Mat3& F) {
  Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 s = svd.singularValues();
  s(2) = 0.0;
  const Mat3 rank2 = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  return FundamentalMatrix(canonicalize_fundamental(rank2));
}

FundamentalMatrix FundamentalMatrix::canonical(const Mat3& F) {
  return FundamentalMatrix(canonicalize_fundamental(F));
}

FundamentalMatrix FundamentalMatrix::essential_from_pose(const RigidTransform& T_b_a) {
  return FundamentalMatrix(canonicalize_fundamental(skew(T_b_a.t) * T_b_a.R));
}

FundamentalMatrix weighted_eight_point(std::span<const WeightedMatch> matches,
                                       std::span<const Vec2> points_a,
                                       std::span<const Vec2> points_b) {
  if (matches.size() < 8) {
    throw Error(ErrorKind::InsufficientMatches,
                "eight-point needs at least 8 matches, got " + std::to_string(matches.size()));
  }
  double total = 0.0;
  std::vector<Vec2> pa, pb;
  std::vector<double> w;
  for (const auto& m : matches) {
    if (m.a < 0 || m.b < 0 || m.a >= static_cast<int>(points_a.size()) ||
        m.b >= static_cast<int>(points_b.size())) {
      throw Error(ErrorKind::IndexOutOfRange, "eight-point: match index out of range");
    }
    if (!(m.weight >= 0.0) || !std::isfinite(m.weight)) {
      throw Error(ErrorKind::DegenerateConfiguration, "eight-point: invalid match weight");
    }
    total += m.weight;
    if (m.weight == 0.0) continue;
    if (!points_a[m.a].allFinite() || !points_b[m.b].allFinite()) {
      throw Error(ErrorKind::DegenerateConfiguration, "eight-point: non-finite keypoint");
    }
    pa.push_back(points_a[m.a]);
    pb.push_back(points_b[m.b]);
    w.push_back(m.weight);
  }
  if (!(total > 0.0)) {
    throw Error(ErrorKind::InsufficientMatches, "eight-point: total match weight is zero");
  }
  if (pa.size() < 8) {
    throw Error(ErrorKind::DegenerateConfiguration,
                "eight-point: fewer than 8 matches carry positive weight");
  }

  const Normalization na = hartley(pa, w);
  const Normalization nb = hartley(pb, w);

  Eigen::Matrix<double, Eigen::Dynamic, 9> A(pa.size(), 9);
  for (size_t i = 0; i < pa.size(); ++i) {
    const Vec3 a = na.T * homog(pa[i]);
    const Vec3 b = nb.T * homog(pb[i]);
    const double sw = std::sqrt(w[i]);
    A.row(i) << b.x() * a.x(), b.x() * a.y(), b.x(), b.y() * a.x(), b.y() * a.y(), b.y(),
        a.x(), a.y(), 1.0;
    A.row(i) *= sw;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::VectorXd& sv = svd.singularValues();
  if (!(sv(7) > kRankTol * sv(0))) {
    throw Error(ErrorKind::DegenerateConfiguration,
                "eight-point: design matrix has rank < 8");
  }
  const Eigen::Matrix<double, 9, 1> f = svd.matrixV().col(8);
  Mat3 Fn;
  Fn << f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8);

  Eigen::JacobiSVD<Mat3> fsvd(Fn, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 s = fsvd.singularValues();
  s(2) = 0.0;
  const Mat3 rank2 = fsvd.matrixU() * s.asDiagonal() * fsvd.matrixV().transpose();

  return FundamentalMatrix::canonical(nb.T.transpose() * rank2 * na.T);
}

double symmetric_epipolar_distance(const Mat3& F, const Vec2& x_a, const Vec2& x_b) {
  const Vec3 a = homog(x_a);
  const Vec3 b = homog(x_b);
  const Vec3 line_b = F * a;
  const Vec3 line_a = F.transpose() * b;
  const double nb = line_b.x() * line_b.x() + line_b.y() * line_b.y();
  const double na = line_a.x() * line_a.x() + line_a.y() * line_a.y();
  if (nb < kLineEps || na < kLineEps) {
    throw Error(ErrorKind::DegenerateEpipolarLine, "epipolar line is degenerate");
  }
  const double r = b.dot(line_b);
  return r * r / nb + r * r / na;
}

std::optional<Vec2> project_point(const Vec2& px, double depth, const Camera& src,
                                  const Camera& dst, const RigidTransform& T_dst_src) {
  if (!T_dst_src.is_rigid(1e-9)) {
    throw Error(ErrorKind::NonRigidPose, "project_point: pose is not a rigid transform");
  }
  // Exact pass-through; the back-project/project round trip is not bit-exact.
  if (depth > 0.0 && src.K == dst.K && T_dst_src.R == Mat3::Identity() && T_dst_src.t.isZero(0.0)) {
    if (!dst.contains(px)) return std::nullopt;
    return px;
  }
  const Vec3 p_dst = T_dst_src.apply(src.backproject(px, depth));
  if (!(p_dst.z() > 0.0)) return std::nullopt;
  const Vec2 out = dst.project(p_dst);
  if (!dst.contains(out)) return std::nullopt;
  return out;
}

double chamfer_distance(std::span<const Vec3> cloud_a, std::span<const Vec3> cloud_b) {
  if (cloud_a.empty() || cloud_b.empty()) {
    throw Error(ErrorKind::EmptyPointCloud, "chamfer distance of an empty point cloud");
  }
  auto directed = [](std::span<const Vec3> from, std::span<const Vec3> to) {
    double sum = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, (p - q).squaredNorm());
      sum += std::sqrt(best);
    }
    return sum / static_cast<double>(from.size());
  };
  return 0.5 * (directed(cloud_a, cloud_b) + directed(cloud_b, cloud_a));
}

RelativePose recover_relative_pose(std::span<const IndexPair> matches,
                                   std::span<const Vec2> pixels_a,
                                   std::span<const Vec2> pixels_b, const Camera& cam_a,
                                   const Camera& cam_b, const RansacConfig& cfg) {
  if (matches.size() < 5) {
    throw Error(ErrorKind::InsufficientMatches,
                "relative pose needs at least 5 matches, got " + std::to_string(matches.size()));
  }
  const size_t n = matches.size();
  std::vector<Vec2> xa(n), xb(n);
  for (size_t i = 0; i < n; ++i) {
    const auto& m = matches[i];
    if (m.a < 0 || m.b < 0 || m.a >= static_cast<int>(pixels_a.size()) ||
        m.b >= static_cast<int>(pixels_b.size())) {
      throw Error(ErrorKind::IndexOutOfRange, "relative pose: match index out of range");
    }
    xa[i] = cam_a.normalize(pixels_a[m.a]);
    xb[i] = cam_b.normalize(pixels_b[m.b]);
  }

  // Inlier count, with the truncated (MSAC) cost sum min(d, threshold).
  auto count_inliers = [&](const Mat3& F, std::vector<bool>* mask, double* cost = nullptr) {
    int count = 0;
    if (mask) mask->assign(n, false);
    if (cost) *cost = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double d;
      try {
        d = symmetric_epipolar_distance(F, xa[i], xb[i]);
      } catch (const Error&) {
        if (cost) *cost += cfg.inlier_threshold;
        continue;
      }
      if (cost) *cost += std::min(d, cfg.inlier_threshold);
      if (d < cfg.inlier_threshold) {
        ++count;
        if (mask) (*mask)[i] = true;
      }
    }
    return count;
  };

  constexpr int kSample = 8;
  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order(n);
  std::vector<Vec2> sa(kSample), sb(kSample);
  int best_count = -1;
  double best_cost = std::numeric_limits<double>::infinity();
  Mat3 best_F = Mat3::Zero();

  if (n >= static_cast<size_t>(kSample)) {
    for (int it = 0; it < cfg.iterations; ++it) {
      std::iota(order.begin(), order.end(), 0);
      for (int k = 0; k < kSample; ++k) {
        std::uniform_int_distribution<size_t> pick(k, n - 1);
        std::swap(order[k], order[pick(rng)]);
        sa[k] = xa[order[k]];
        sb[k] = xb[order[k]];
      }
      Mat3 F;
      try {
        F = eight_point_unweighted(sa, sb);
      } catch (const Error&) {
        continue;
      }
      double cost;
      const int count = count_inliers(F, nullptr, &cost);
      if (cost < best_cost) {
        best_cost = cost;
        best_count = count;
        best_F = F;
      }
    }
  }
  if (best_count < kSample) {
    throw Error(ErrorKind::NoConsensus, "relative pose: no consensus set of 8 or more");
  }

  std::vector<bool> mask;
  count_inliers(best_F, &mask);
  Mat3 F = best_F;

  // Inner sampling on the consensus set: half-size subsets scored by the
  // median residual over the whole set (least median of squares).
  {
    std::vector<int> idx;
    for (size_t i = 0; i < n; ++i) {
      if (mask[i]) idx.push_back(static_cast<int>(i));
    }
    auto median_residual = [&](const Mat3& G) {
      std::vector<double> d;
      d.reserve(idx.size());
      for (int i : idx) {
        try {
          d.push_back(symmetric_epipolar_distance(G, xa[i], xb[i]));
        } catch (const Error&) {
          d.push_back(std::numeric_limits<double>::infinity());
        }
      }
      std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
      return d[d.size() / 2];
    };
    const size_t m = idx.size();
    if (m > 2 * kSample) {
      const size_t half = m / 2;
      double best_med = median_residual(F);
      std::vector<Vec2> ha(half), hb(half);
      for (int trial = 0; trial < 50; ++trial) {
        for (size_t k = 0; k < half; ++k) {
          std::uniform_int_distribution<size_t> pick(k, m - 1);
          std::swap(idx[k], idx[pick(rng)]);
          ha[k] = xa[idx[k]];
          hb[k] = xb[idx[k]];
        }
        try {
          const Mat3 G = eight_point_unweighted(ha, hb);
          const double med = median_residual(G);
          if (med < best_med) {
            best_med = med;
            F = G;
          }
        } catch (const Error&) {
        }
      }
    }
  }

  // Reweighted refinement on the inliers, starting from the best minimal
  // hypothesis: each algebraic residual is scaled to its geometric distance
  // and damped by a Cauchy weight whose scale follows the median residual,
  // so a lucky outlier just inside the threshold keeps a negligible weight.
  {
    std::vector<WeightedMatch> wm;
    std::vector<double> dist;
    for (int iter = 0; iter < 30; ++iter) {
      wm.clear();
      dist.clear();
      for (size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const Vec3 ha(xa[i].x(), xa[i].y(), 1.0), hb(xb[i].x(), xb[i].y(), 1.0);
        const Vec3 l1 = F * ha, l2 = F.transpose() * hb;
        const double n1 = l1.head<2>().squaredNorm(), n2 = l2.head<2>().squaredNorm();
        if (n1 < 1e-24 || n2 < 1e-24) continue;
        const double r = hb.dot(F * ha);
        const double c = 1.0 / n1 + 1.0 / n2;
        const double d = r * r * c;
        if (iter > 0 && d >= cfg.inlier_threshold) continue;
        wm.push_back({static_cast<int>(i), static_cast<int>(i), c});
        dist.push_back(d);
      }
      if (wm.size() < static_cast<size_t>(kSample)) break;
      std::vector<double> sorted = dist;
      std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
      const double scale = std::max(2.0 * sorted[sorted.size() / 2],
                                    std::numeric_limits<double>::min());
      double wmax = 0.0;
      for (size_t k = 0; k < wm.size(); ++k) {
        wm[k].weight /= 1.0 + dist[k] / scale;
        wmax = std::max(wmax, wm[k].weight);
      }
      if (!(wmax > 0.0)) break;
      // Keep weights bounded for the normal equations.
      for (auto& m : wm) m.weight /= wmax;
      try {
        const Mat3 next = weighted_eight_point(wm, xa, xb).matrix();
        const double change = std::min((next - F).norm(), (next + F).norm()) / F.norm();
        F = next;
        if (change < 1e-14) break;
      } catch (const Error&) {
        break;
      }
    }
    count_inliers(F, &mask);
  }

  const Mat3 E = project_to_essential(F);
  Eigen::JacobiSVD<Mat3> svd(E, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 U = svd.matrixU();
  Mat3 V = svd.matrixV();
  if (U.determinant() < 0) U.col(2) = -U.col(2);
  if (V.determinant() < 0) V.col(2) = -V.col(2);
  Mat3 W;
  W << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Mat3 R1 = U * W * V.transpose();
  const Mat3 R2 = U * W.transpose() * V.transpose();
  const Vec3 t0 = U.col(2);
  const std::array<std::pair<Mat3, Vec3>, 4> candidates{
      {{R1, t0}, {R1, -t0}, {R2, t0}, {R2, -t0}}};

  int best_front = -1;
  RelativePose out;
  for (const auto& [R, t] : candidates) {
    int front = 0;
    for (size_t i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      const Vec3 Xa = triangulate(xa[i], xb[i], R, t);
      const Vec3 Xb = R * Xa + t;
      if (Xa.z() > 0 && Xb.z() > 0) ++front;
    }
    if (front > best_front) {
      best_front = front;
      out.R = R;
      out.t = t.normalized();
    }
  }
  out.inliers = std::move(mask);
  out.num_inliers = static_cast<int>(std::count(out.inliers.begin(), out.inliers.end(), true));
  return out;
}

}  // namespace dglue
