#include "dglue/synth.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include "dglue/error.hpp"

namespace dglue {

void SynthConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::InvalidConfig, msg); };
  if (num_frames < 2) fail("num_frames must be >= 2");
  if (width < 16 || height < 16) fail("image must be at least 16x16");
  if (!(focal > 0.0)) fail("focal must be positive");
  if (!(frame_interval > 0.0)) fail("frame_interval must be positive");
  if (!(street_half_width > 2.0)) fail("street_half_width must exceed 2 m");
  if (!(camera_height > 0.0) || !(wall_height > 0.0)) fail("heights must be positive");
  if (num_static_points < 0 || num_static_instances < 0 || num_moving_instances < 0 ||
      points_per_instance < 0 || num_distractors < 0) {
    fail("counts must be non-negative");
  }
  if (!(min_motion >= 0.0) || !(max_motion >= min_motion)) fail("need 0 <= min_motion <= max_motion");
  if (keypoints_per_frame < 2) fail("keypoints_per_frame must be >= 2");
  if (!(moving_fraction >= 0.0 && moving_fraction <= 1.0)) fail("moving_fraction must be in [0, 1]");
  if (num_distractors >= keypoints_per_frame) fail("too many distractors");
  if (descriptor_dim < 2) fail("descriptor_dim must be >= 2");
  if (!(descriptor_noise >= 0.0) || !(keypoint_jitter >= 0.0)) fail("noise must be >= 0");
  if (!(camera_wobble >= 0.0) || !(max_yaw_deg >= 0.0)) fail("camera motion must be >= 0");
}

SynthConfig SynthConfig::noiseless() const {
  SynthConfig c = *this;
  c.descriptor_noise = 0.0;
  c.keypoint_jitter = 0.0;
  c.num_distractors = 0;
  return c;
}

std::vector<IndexPair> SynthGroundTruth::correspondences(int state_a, int state_b) const {
  const auto& pa = point_ids.at(state_a);
  const auto& pb = point_ids.at(state_b);
  std::map<int, int> where_b;
  for (int j = 0; j < static_cast<int>(pb.size()); ++j) {
    if (pb[j] >= 0) where_b[pb[j]] = j;
  }
  std::vector<IndexPair> out;
  for (int i = 0; i < static_cast<int>(pa.size()); ++i) {
    if (pa[i] < 0) continue;
    auto it = where_b.find(pa[i]);
    if (it != where_b.end()) out.push_back({i, it->second});
  }
  return out;
}

std::vector<bool> SynthGroundTruth::on_moving(int state) const {
  const auto& ids = instance_ids.at(state);
  std::vector<bool> out(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) out[k] = moving_instances.count(ids[k]) > 0;
  return out;
}

namespace {

struct Box {
  Vec3 half;  // half extents
  std::vector<Vec3> centers;  // per frame
  bool moving = false;
};

struct WorldPoint {
  Vec3 local;    // world position, or offset from the box center
  int instance;  // -1 for the background
  double priority;
};

struct Hit {
  double depth = 0.0;
  int instance = -1;
};

// Slab test; returns the entry distance along the ray, if any.
std::optional<double> intersect_box(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-15) {
      if (o[k] < lo[k] || o[k] > hi[k]) return std::nullopt;
      continue;
    }
    double a = (lo[k] - o[k]) / d[k];
    double b = (hi[k] - o[k]) / d[k];
    if (a > b) std::swap(a, b);
    t0 = std::max(t0, a);
    t1 = std::min(t1, b);
    if (t0 > t1) return std::nullopt;
  }
  return t0 > 0.0 ? std::optional<double>(t0) : std::nullopt;
}

class Renderer {
 public:
  Renderer(const SynthConfig& cfg, double z_min, double z_max)
      : cfg_(cfg), z_min_(z_min), z_max_(z_max) {}

  Hit cast(const Vec3& o, const Vec3& d, const std::vector<Box>& boxes, int frame) const {
    Hit best;
    double t_best = std::numeric_limits<double>::infinity();
    auto consider = [&](double t, int inst) {
      if (t > 1e-6 && t < t_best) {
        t_best = t;
        best.instance = inst;
      }
    };
    const double ground = cfg_.camera_height;
    const double top = ground - cfg_.wall_height;
    if (d.y() > 0.0) {
      const double t = (ground - o.y()) / d.y();
      const Vec3 p = o + t * d;
      if (std::abs(p.x()) <= cfg_.street_half_width && p.z() >= z_min_ && p.z() <= z_max_) {
        consider(t, -1);
      }
    }
    for (double side : {-1.0, 1.0}) {
      const double wx = side * cfg_.street_half_width;
      if (d.x() * side <= 0.0) continue;
      const double t = (wx - o.x()) / d.x();
      const Vec3 p = o + t * d;
      if (p.y() >= top && p.y() <= ground && p.z() >= z_min_ && p.z() <= z_max_) consider(t, -1);
    }
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      const Vec3& c = boxes[b].centers[frame];
      if (auto t = intersect_box(o, d, c - boxes[b].half, c + boxes[b].half)) {
        consider(*t, static_cast<int>(b));
      }
    }
    if (std::isfinite(t_best)) best.depth = t_best;
    return best;
  }

 private:
  const SynthConfig& cfg_;
  double z_min_, z_max_;
};

// Detectors do not fire across occlusion boundaries: the whole patch around
// the keypoint must lie inside the image and on one instance.
constexpr int kPatchRadius = 4;

bool uniform_patch(const InstanceMask& mask, const Vec2& px, int instance) {
  const int cx = static_cast<int>(std::lround(px.x()));
  const int cy = static_cast<int>(std::lround(px.y()));
  if (cx < kPatchRadius || cy < kPatchRadius || cx + kPatchRadius >= mask.width ||
      cy + kPatchRadius >= mask.height) {
    return false;
  }
  for (int y = cy - kPatchRadius; y <= cy + kPatchRadius; ++y) {
    for (int x = cx - kPatchRadius; x <= cx + kPatchRadius; ++x) {
      if (mask.at(x, y) != instance) return false;
    }
  }
  return true;
}

void random_unit(std::mt19937_64& rng, int dim, Eigen::VectorXd& out) {
  std::normal_distribution<double> n(0.0, 1.0);
  out.resize(dim);
  for (int k = 0; k < dim; ++k) out(k) = n(rng);
  out.normalize();
}

}  // namespace

SynthScene synth_scene(std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double hw = cfg.street_half_width;
  const double ground = cfg.camera_height;

  Camera cam;
  cam.K << cfg.focal, 0.0, (cfg.width - 1) / 2.0, 0.0, cfg.focal, (cfg.height - 1) / 2.0, 0.0,
      0.0, 1.0;
  cam.width = cfg.width;
  cam.height = cfg.height;

  // Camera trajectory.
  std::vector<RigidTransform> poses(cfg.num_frames);
  const double max_yaw = cfg.max_yaw_deg * std::numbers::pi / 180.0;
  for (int k = 0; k < cfg.num_frames; ++k) {
    RigidTransform& T = poses[k];
    T.R = rotation_from_axis_angle(Vec3(0.0, uniform(-max_yaw, max_yaw), 0.0)) *
          rotation_from_axis_angle(Vec3(uniform(-0.3, 0.3) * max_yaw, 0.0, 0.0));
    T.t = Vec3(uniform(-cfg.camera_wobble, cfg.camera_wobble),
               uniform(-cfg.camera_wobble, cfg.camera_wobble) / 3.0, k * cfg.camera_step);
    if (k == 0) T = RigidTransform::identity();
  }
  const double z_min = -5.0;
  const double z_max = (cfg.num_frames - 1) * cfg.camera_step + 30.0;

  // Instances: small upright boxes standing on the ground.
  std::vector<Box> boxes;
  const int num_boxes = cfg.num_static_instances + cfg.num_moving_instances;
  for (int b = 0; b < num_boxes; ++b) {
    Box box;
    box.moving = b >= cfg.num_static_instances;
    box.half = Vec3(uniform(0.2, 0.4), uniform(0.75, 0.95), uniform(0.2, 0.4));
    Vec3 c(uniform(-hw + 2.0, hw - 2.0), ground - box.half.y(), poses[0].t.z() + uniform(12.0, 30.0));
    box.centers.push_back(c);
    for (int k = 1; k < cfg.num_frames; ++k) {
      if (!box.moving) {
        box.centers.push_back(c);
        continue;
      }
      const double cam_z = poses[k].t.z();
      Vec3 next = c;
      for (int attempt = 0; attempt < 64; ++attempt) {
        const double theta = uniform(0.0, 2.0 * std::numbers::pi);
        const double step = uniform(cfg.min_motion, cfg.max_motion);
        next = c + step * Vec3(std::cos(theta), 0.0, std::sin(theta));
        if (std::abs(next.x()) <= hw - 1.5 && next.z() >= cam_z + 8.0 && next.z() <= cam_z + 35.0) {
          break;
        }
      }
      c = next;
      box.centers.push_back(c);
    }
    boxes.push_back(std::move(box));
  }

  // World points: facade texture plus points on the box surfaces. The road
  // stays untextured; at grazing angles one depth pixel spans most of a metre
  // of asphalt, too coarse for projective labels.
  std::vector<WorldPoint> points;
  for (int p = 0; p < cfg.num_static_points; ++p) {
    const double side = unit(rng) < 0.5 ? -1.0 : 1.0;
    const Vec3 x(side * hw, uniform(ground - cfg.wall_height, ground), uniform(z_min, z_max));
    points.push_back({x, -1, unit(rng)});
  }
  for (int b = 0; b < num_boxes; ++b) {
    const Vec3& h = boxes[b].half;
    // Faces: +-x, +-z sides and the top.
    const double ax = 4.0 * h.y() * h.z(), az = 4.0 * h.x() * h.y(), at = 4.0 * h.x() * h.z();
    for (int p = 0; p < cfg.points_per_instance; ++p) {
      const double r = uniform(0.0, 2.0 * ax + 2.0 * az + at);
      Vec3 o(uniform(-h.x(), h.x()), uniform(-h.y(), h.y()), uniform(-h.z(), h.z()));
      if (r < 2.0 * ax) {
        o.x() = r < ax ? -h.x() : h.x();
      } else if (r < 2.0 * ax + 2.0 * az) {
        o.z() = r < 2.0 * ax + az ? -h.z() : h.z();
      } else {
        o.y() = -h.y();
      }
      points.push_back({o, b, unit(rng)});
    }
  }
  std::vector<Eigen::VectorXd> base(points.size());
  for (auto& d : base) random_unit(rng, cfg.descriptor_dim, d);

  SynthScene scene;
  PoseGraphSession& session = scene.session;
  SynthGroundTruth& truth = scene.truth;
  for (int b = 0; b < num_boxes; ++b) {
    (boxes[b].moving ? truth.moving_instances : truth.static_instances).insert(b);
  }

  const Renderer renderer(cfg, z_min, z_max);
  std::vector<std::shared_ptr<DepthMap>> depths(cfg.num_frames);
  std::vector<std::shared_ptr<InstanceMask>> masks(cfg.num_frames);
  // Visible points per frame, split by whether they sit on a moving instance.
  std::vector<std::vector<std::pair<int, Vec2>>> visible_static(cfg.num_frames),
      visible_moving(cfg.num_frames);
  for (int k = 0; k < cfg.num_frames; ++k) {
    const RigidTransform& T_wc = poses[k];
    const RigidTransform T_cw = T_wc.inverse();
    auto depth = std::make_shared<DepthMap>();
    auto mask = std::make_shared<InstanceMask>();
    depth->width = mask->width = cfg.width;
    depth->height = mask->height = cfg.height;
    depth->data.assign(static_cast<std::size_t>(cfg.width) * cfg.height, 0.0f);
    mask->data.assign(depth->data.size(), 0);
    for (int v = 0; v < cfg.height; ++v) {
      for (int u = 0; u < cfg.width; ++u) {
        const Vec3 dir = T_wc.R * cam.backproject(Vec2(u, v), 1.0);
        const Hit hit = renderer.cast(T_wc.t, dir, boxes, k);
        const std::size_t idx = static_cast<std::size_t>(v) * cfg.width + u;
        depth->data[idx] = static_cast<float>(hit.depth);
        mask->data[idx] = static_cast<std::uint16_t>(hit.instance + 1);
      }
    }
    for (int p = 0; p < static_cast<int>(points.size()); ++p) {
      const WorldPoint& wp = points[p];
      const Vec3 xw = wp.instance < 0 ? wp.local : wp.local + boxes[wp.instance].centers[k];
      const Vec3 xc = T_cw.apply(xw);
      if (xc.z() < 0.5) continue;
      const Vec2 px = cam.project(xc);
      if (!depth->lookup(px) || !uniform_patch(*mask, px, wp.instance)) continue;
      const Hit hit = renderer.cast(T_wc.t, T_wc.R * (xc / xc.z()), boxes, k);
      if (hit.instance != wp.instance || std::abs(hit.depth - xc.z()) > 1e-6 * xc.z()) continue;
      const bool moving = wp.instance >= 0 && boxes[wp.instance].moving;
      (moving ? visible_moving : visible_static)[k].emplace_back(p, px);
    }
    depths[k] = std::move(depth);
    masks[k] = std::move(mask);
  }

  // A repeatable detector: one priority threshold per point class, chosen so
  // the average keypoint count per frame meets the target.
  const int target_moving =
      static_cast<int>(std::lround(cfg.moving_fraction * cfg.keypoints_per_frame));
  const int target_static = cfg.keypoints_per_frame - target_moving - cfg.num_distractors;
  auto threshold = [&](const auto& visible, int target) {
    std::vector<double> pr;
    for (const auto& frame : visible) {
      for (const auto& [p, px] : frame) pr.push_back(points[p].priority);
    }
    const std::size_t want = static_cast<std::size_t>(std::max(target, 0)) * cfg.num_frames;
    if (want == 0) return 2.0;
    if (pr.size() <= want) return -1.0;
    std::nth_element(pr.begin(), pr.begin() + (want - 1), pr.end(), std::greater<>());
    return pr[want - 1];
  };
  const double thr_static = threshold(visible_static, target_static);
  const double thr_moving = threshold(visible_moving, target_moving);
  std::normal_distribution<double> gauss(0.0, 1.0);

  for (int k = 0; k < cfg.num_frames; ++k) {
    const auto& depth = depths[k];
    const auto& mask = masks[k];
    struct Det {
      Vec2 px;
      Eigen::VectorXd desc;
      int point;
      int instance;
    };
    std::vector<Det> dets;
    for (bool moving : {false, true}) {
      const double thr = moving ? thr_moving : thr_static;
      for (const auto& [p, px] : (moving ? visible_moving : visible_static)[k]) {
        if (points[p].priority < thr) continue;
        Det det{px, base[p], p, points[p].instance};
        if (cfg.keypoint_jitter > 0.0) {
          const Vec2 jittered = px + cfg.keypoint_jitter * Vec2(gauss(rng), gauss(rng));
          if (depth->lookup(jittered)) det.px = jittered;
        }
        if (cfg.descriptor_noise > 0.0) {
          Eigen::VectorXd noise(cfg.descriptor_dim);
          for (int c = 0; c < cfg.descriptor_dim; ++c) noise(c) = gauss(rng);
          det.desc += cfg.descriptor_noise / std::sqrt(double(cfg.descriptor_dim)) * noise;
          det.desc.normalize();
        }
        dets.push_back(std::move(det));
      }
    }
    for (int r = 0; r < cfg.num_distractors; ++r) {
      Vec2 px;
      for (int attempt = 0; attempt < 1000; ++attempt) {
        px = Vec2(uniform(0.0, cfg.width - 1.0), uniform(0.0, cfg.height - 1.0));
        if (depth->lookup(px)) break;
      }
      if (!depth->lookup(px)) continue;
      Eigen::VectorXd desc;
      random_unit(rng, cfg.descriptor_dim, desc);
      dets.push_back({px, desc, -1, mask->lookup(px)});
    }
    std::shuffle(dets.begin(), dets.end(), rng);

    SessionState state;
    state.timestamp = k * cfg.frame_interval;
    state.pose = poses[k];
    state.frame.camera = cam;
    state.frame.timestamp = state.timestamp;
    std::vector<int> pids, iids;
    for (int i = 0; i < static_cast<int>(dets.size()); ++i) {
      state.frame.keypoints.push_back({dets[i].px, dets[i].desc, i});
      pids.push_back(dets[i].point);
      iids.push_back(dets[i].instance);
      const bool landmark = dets[i].point >= 0 &&
                            (dets[i].instance < 0 || !boxes[dets[i].instance].moving);
      if (landmark) session.landmarks[dets[i].point].push_back({k, i, dets[i].px});
    }
    state.depth = depth;
    state.mask = mask;
    session.states.push_back(std::move(state));
    truth.point_ids.push_back(std::move(pids));
    truth.instance_ids.push_back(std::move(iids));
  }
  return scene;
}

}  // namespace dglue
