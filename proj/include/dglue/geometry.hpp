#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <compare>
#include <optional>
#include <span>
#include <vector>

namespace dglue {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Pinhole camera with an upper-triangular intrinsic matrix and an image
// extent in pixels. Pixel (u, v) is inside the image iff 0 <= u < width and
// 0 <= v < height.
struct Camera {
  Mat3 K = Mat3::Identity();
  int width = 0;
  int height = 0;

  // Pixel -> normalized camera coordinates (K^-1 applied).
  Vec2 normalize(const Vec2& px) const;
  // Normalized camera coordinates -> pixel.
  Vec2 denormalize(const Vec2& xy) const;
  // Camera-frame 3D point -> pixel. Caller checks depth.
  Vec2 project(const Vec3& p_cam) const;
  // Pixel plus z-depth -> camera-frame 3D point.
  Vec3 backproject(const Vec2& px, double depth) const;
  bool contains(const Vec2& px) const;
  // Throws InvalidConfig unless K is upper triangular with positive focals.
  void validate() const;
};

struct Keypoint {
  Vec2 position = Vec2::Zero();
  Eigen::VectorXd descriptor;
  int index = 0;
};

struct ImageFrame {
  std::vector<Keypoint> keypoints;
  Camera camera;
  double timestamp = 0.0;

  int size() const { return static_cast<int>(keypoints.size()); }
  int descriptor_dim() const {
    return keypoints.empty() ? 0 : static_cast<int>(keypoints.front().descriptor.size());
  }
};

// x_dst = R * x_src + t.
struct RigidTransform {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& x) const { return R * x + t; }
  RigidTransform inverse() const;
  // (this * other)(x) = this(other(x))
  RigidTransform operator*(const RigidTransform& other) const;
  bool is_rigid(double tol = 1e-9) const;
};

Mat3 skew(const Vec3& v);
Mat3 rotation_from_axis_angle(const Vec3& axis_angle);
// Geodesic angle of a rotation matrix, radians.
double rotation_angle(const Mat3& R);
// Angle between two directions, radians.
double direction_angle(const Vec3& a, const Vec3& b);

struct IndexPair {
  int a = 0;
  int b = 0;
  auto operator<=>(const IndexPair&) const = default;
};

struct WeightedMatch {
  int a = 0;
  int b = 0;
  double weight = 0.0;
  bool operator==(const WeightedMatch&) const = default;
};

// Rank-2, unit Frobenius norm, largest-magnitude entry positive.
// Convention: x_b^T F x_a = 0 for homogeneous points x_a in image A and x_b
// in image B.
class FundamentalMatrix {
 public:
  FundamentalMatrix() = default;

  // Enforces rank 2 (zeroing the smallest singular value) and canonical
  // sign/scale.
  static FundamentalMatrix from_matrix(const Mat3& F);
  // Only canonicalizes; F is stored as given up to scale and sign.
  static FundamentalMatrix canonical(const Mat3& F);
  // Essential matrix [t]x R of the pose x_b = R x_a + t, canonicalized.
  static FundamentalMatrix essential_from_pose(const RigidTransform& T_b_a);

  const Mat3& matrix() const { return F_; }

 private:
  explicit FundamentalMatrix(const Mat3& F) : F_(F) {}
  Mat3 F_ = Mat3::Zero();
};

// Frobenius norm 1 and largest-magnitude entry (first in row-major order on
// ties) positive.
Mat3 canonicalize_fundamental(const Mat3& F);

// Weighted DLT with Hartley normalization. Weights enter as sqrt(w) row
// scaling; zero-weight matches are dropped before normalization.
FundamentalMatrix weighted_eight_point(std::span<const WeightedMatch> matches,
                                       std::span<const Vec2> points_a,
                                       std::span<const Vec2> points_b);

// d(x_b, F x_a)^2 + d(x_a, F^T x_b)^2. Throws DegenerateEpipolarLine when
// either line has a^2 + b^2 < 1e-24.
double symmetric_epipolar_distance(const Mat3& F, const Vec2& x_a, const Vec2& x_b);

// Back-projects `px` from the source camera using z-depth, transforms into
// the destination frame and projects. nullopt when the point lands behind
// the destination camera or outside its image.
std::optional<Vec2> project_point(const Vec2& px, double depth, const Camera& src,
                                  const Camera& dst, const RigidTransform& T_dst_src);

// 0.5 * (mean_a min_b |a - b| + mean_b min_a |a - b|).
double chamfer_distance(std::span<const Vec3> cloud_a, std::span<const Vec3> cloud_b);

struct RansacConfig {
  int iterations = 1000;
  // On the symmetric epipolar distance in normalized coordinates.
  double inlier_threshold = 1e-5;
  std::uint64_t seed = 0;
};

struct RelativePose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::UnitX();  // unit norm
  std::vector<bool> inliers;
  int num_inliers = 0;
};

// RANSAC over 8-point hypotheses in normalized coordinates, refit on the
// consensus set, and cheirality-consistent decomposition. Pure rotation
// (or any configuration whose samples are all rank deficient) yields
// NoConsensus.
RelativePose recover_relative_pose(std::span<const IndexPair> matches,
                                   std::span<const Vec2> pixels_a,
                                   std::span<const Vec2> pixels_b, const Camera& cam_a,
                                   const Camera& cam_b, const RansacConfig& cfg = {});

}  // namespace dglue
