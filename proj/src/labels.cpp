#include "dglue/labels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dglue/error.hpp"
#include "parallel.hpp"

namespace dglue {

namespace {

std::optional<std::pair<int, int>> nearest_pixel(const Vec2& px, int width, int height) {
  if (!(px.x() >= -0.5 && px.y() >= -0.5 && px.x() < width - 0.5 && px.y() < height - 0.5)) {
    return std::nullopt;
  }
  const int x = std::clamp(static_cast<int>(std::lround(px.x())), 0, width - 1);
  const int y = std::clamp(static_cast<int>(std::lround(px.y())), 0, height - 1);
  return std::pair{x, y};
}

}  // namespace

std::optional<double> DepthMap::lookup(const Vec2& px) const {
  const auto p = nearest_pixel(px, width, height);
  if (!p) return std::nullopt;
  const double d = at(p->first, p->second);
  if (!(d > 0.0) || !std::isfinite(d)) return std::nullopt;
  return d;
}

int InstanceMask::lookup(const Vec2& px) const {
  const auto p = nearest_pixel(px, width, height);
  return p ? at(p->first, p->second) : -1;
}

std::set<int> InstanceMask::instances() const {
  std::set<int> out;
  for (auto v : data) {
    if (v > 0) out.insert(int(v) - 1);
  }
  return out;
}

void PoseGraphSession::validate() const {
  for (std::size_t s = 0; s < states.size(); ++s) {
    if (!states[s].pose.is_rigid(1e-6)) {
      throw Error(ErrorKind::InvalidConfig, "state " + std::to_string(s) + " pose is not rigid");
    }
    if (s > 0 && !(states[s].timestamp > states[s - 1].timestamp)) {
      throw Error(ErrorKind::InvalidConfig, "timestamps must be strictly increasing");
    }
  }
  for (const auto& [id, obs] : landmarks) {
    for (const auto& o : obs) {
      if (o.state < 0 || o.state >= static_cast<int>(states.size()) || o.keypoint < 0 ||
          o.keypoint >= states[o.state].frame.size()) {
        throw Error(ErrorKind::InvalidConfig,
                    "landmark " + std::to_string(id) + " has an observation out of range");
      }
    }
  }
}

std::vector<int> PoseGraphSession::landmark_ids(int state) const {
  std::vector<int> out(states.at(state).frame.size(), -1);
  for (const auto& [id, obs] : landmarks) {
    for (const auto& o : obs) {
      if (o.state == state) out[o.keypoint] = id;
    }
  }
  return out;
}

ImageQuery make_query(const PoseGraphSession& session, int state_a, int state_b) {
  const SessionState& a = session.states.at(state_a);
  const SessionState& b = session.states.at(state_b);
  ImageQuery q;
  q.state_a = state_a;
  q.state_b = state_b;
  q.camera_a = a.frame.camera;
  q.camera_b = b.frame.camera;
  q.timestamp_a = a.timestamp;
  q.timestamp_b = b.timestamp;
  q.T_b_a = b.pose.inverse() * a.pose;
  q.depth_a = a.depth;
  q.depth_b = b.depth;
  q.mask_a = a.mask;
  q.mask_b = b.mask;
  q.landmarks_a = session.landmark_ids(state_a);
  q.landmarks_b = session.landmark_ids(state_b);
  std::set<int> seen_a(q.landmarks_a.begin(), q.landmarks_a.end());
  std::set<int> seen_b(q.landmarks_b.begin(), q.landmarks_b.end());
  seen_a.erase(-1);
  for (int id : seen_a) q.shared_landmarks += static_cast<int>(seen_b.count(id));
  return q;
}

std::vector<ImageQuery> extract_queries(const PoseGraphSession& session, int min_shared,
                                        int stride) {
  if (stride < 1) throw Error(ErrorKind::InvalidConfig, "stride must be >= 1");
  const int n = static_cast<int>(session.states.size());
  std::vector<std::set<int>> seen(n);
  for (const auto& [id, obs] : session.landmarks) {
    for (const auto& o : obs) seen[o.state].insert(id);
  }
  std::vector<ImageQuery> out;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (j % stride != 0) continue;
      int shared = 0;
      for (int id : seen[i]) shared += static_cast<int>(seen[j].count(id));
      if (shared >= min_shared) out.push_back(make_query(session, i, j));
    }
  }
  return out;
}

namespace {

enum class Verdict { Unlabeled, Match, NonMatchable };

struct Projection {
  Verdict verdict = Verdict::Unlabeled;
  int partner = -1;
  std::optional<Vec2> landing;
};

// Classifies every keypoint of `src` by where its depth projection lands in `dst`.
std::vector<Projection> project_all(const ImageFrame& src, const ImageFrame& dst,
                                    const DepthMap& depth, const Camera& cam_src,
                                    const Camera& cam_dst, const RigidTransform& T_dst_src,
                                    const LabelConfig& cfg) {
  std::vector<Projection> out(src.size());
  for (int i = 0; i < src.size(); ++i) {
    const Vec2& px = src.keypoints[i].position;
    const auto d = depth.lookup(px);
    if (!d) {
      throw Error(ErrorKind::MissingDepth, "no depth at keypoint " + std::to_string(i) + " (" +
                                               std::to_string(px.x()) + ", " +
                                               std::to_string(px.y()) + ")");
    }
    Projection& p = out[i];
    p.landing = project_point(px, *d, cam_src, cam_dst, T_dst_src);
    if (!p.landing) {
      p.verdict = Verdict::NonMatchable;
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < dst.size(); ++j) {
      const double dist = (dst.keypoints[j].position - *p.landing).norm();
      if (dist < best) {
        best = dist;
        p.partner = j;
      }
    }
    if (best <= cfg.match_radius) {
      p.verdict = Verdict::Match;
    } else if (best > cfg.unmatched_radius) {
      p.verdict = Verdict::NonMatchable;
      p.partner = -1;
    } else {
      p.partner = -1;
    }
  }
  return out;
}

// True if some reverse projection lands within `radius` of `px`.
bool reached_by(const Vec2& px, const std::vector<Projection>& reverse, double radius) {
  for (const auto& r : reverse) {
    if (r.landing && (*r.landing - px).norm() <= radius) return true;
  }
  return false;
}

}  // namespace

MatchLabelSet label_pair(const ImageQuery& query, const ImageFrame& a, const ImageFrame& b,
                         const LabelConfig& cfg) {
  if (!query.depth_a || !query.depth_b) {
    throw Error(ErrorKind::MissingDepth, "query has no depth maps");
  }
  const auto fwd =
      project_all(a, b, *query.depth_a, query.camera_a, query.camera_b, query.T_b_a, cfg);
  const auto bwd = project_all(b, a, *query.depth_b, query.camera_b, query.camera_a,
                               query.T_b_a.inverse(), cfg);

  MatchLabelSet out;
  out.state_a = query.state_a;
  out.state_b = query.state_b;
  auto landmark = [](const std::vector<int>& ids, int k) {
    return k < static_cast<int>(ids.size()) ? ids[k] : -1;
  };
  for (int i = 0; i < a.size(); ++i) {
    const Projection& f = fwd[i];
    if (f.verdict == Verdict::Match) {
      const Projection& r = bwd[f.partner];
      if (r.verdict == Verdict::Match && r.partner == i) {
        out.matches.push_back({i, f.partner});
        const int la = landmark(query.landmarks_a, i);
        out.match_sources.push_back(la >= 0 && la == landmark(query.landmarks_b, f.partner)
                                        ? LabelSource::LandmarkProjection
                                        : LabelSource::DepthProjection);
      }
    } else if (f.verdict == Verdict::NonMatchable &&
               !reached_by(a.keypoints[i].position, bwd, cfg.unmatched_radius)) {
      out.unmatched_a.push_back(i);
      out.unmatched_a_sources.push_back(LabelSource::DepthProjection);
    }
  }
  for (int j = 0; j < b.size(); ++j) {
    if (bwd[j].verdict == Verdict::NonMatchable &&
        !reached_by(b.keypoints[j].position, fwd, cfg.unmatched_radius)) {
      out.unmatched_b.push_back(j);
      out.unmatched_b_sources.push_back(LabelSource::DepthProjection);
    }
  }
  return out;
}

InstanceClouds instance_clouds(const PoseGraphSession& session, const MovingConfig& cfg) {
  InstanceClouds out;
  for (const auto& s : session.states) {
    if (!s.mask || !s.depth) continue;
    const InstanceMask& mask = *s.mask;
    std::map<int, std::vector<Vec3>> per_instance;
    for (int y = 0; y < mask.height; ++y) {
      for (int x = 0; x < mask.width; ++x) {
        const int id = mask.at(x, y);
        if (id < 0) continue;
        const double d = s.depth->at(x, y);
        if (!(d > 0.0)) continue;
        per_instance[id].push_back(
            s.pose.apply(s.frame.camera.backproject(Vec2(x, y), d)));
      }
    }
    for (auto& [id, cloud] : per_instance) {
      if (static_cast<int>(cloud.size()) > cfg.max_points) {
        std::vector<Vec3> sub;
        sub.reserve(cfg.max_points);
        const double step = static_cast<double>(cloud.size()) / cfg.max_points;
        for (int k = 0; k < cfg.max_points; ++k) {
          sub.push_back(cloud[static_cast<std::size_t>(k * step)]);
        }
        cloud = std::move(sub);
      }
      out[id].push_back(std::move(cloud));
    }
  }
  return out;
}

std::set<int> classify_moving(const InstanceClouds& clouds, const MovingConfig& cfg) {
  std::set<int> moving;
  for (const auto& [id, frames] : clouds) {
    if (frames.size() < 2) {
      throw Error(ErrorKind::EmptyInstanceObservation,
                  "instance " + std::to_string(id) + " is observed in fewer than two frames");
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < frames.size(); ++i) {
      if (frames[i].empty()) {
        throw Error(ErrorKind::EmptyInstanceObservation,
                    "instance " + std::to_string(id) + " has an empty observation");
      }
      for (std::size_t j = i + 1; j < frames.size() && worst <= cfg.chamfer_threshold; ++j) {
        worst = std::max(worst, chamfer_distance(frames[i], frames[j]));
      }
      if (worst > cfg.chamfer_threshold) break;
    }
    if (worst > cfg.chamfer_threshold) moving.insert(id);
  }
  return moving;
}

std::set<int> classify_moving(const PoseGraphSession& session, const MovingConfig& cfg) {
  InstanceClouds clouds = instance_clouds(session, cfg);
  std::erase_if(clouds, [](const auto& kv) { return kv.second.size() < 2; });
  return classify_moving(clouds, cfg);
}

MatchLabelSet apply_dynamic_mask(const MatchLabelSet& labels, const std::set<int>& moving,
                                 const ImageFrame& a, const ImageFrame& b,
                                 const InstanceMask& mask_a, const InstanceMask& mask_b,
                                 double time_delta) {
  MatchLabelSet out = labels;
  out.moving_instances.assign(moving.begin(), moving.end());
  if (time_delta == 0.0 || moving.empty()) return out;

  auto on_moving = [&moving](const ImageFrame& f, const InstanceMask& m) {
    std::vector<bool> flag(f.size());
    for (int i = 0; i < f.size(); ++i) flag[i] = moving.count(m.lookup(f.keypoints[i].position)) > 0;
    return flag;
  };
  const auto moving_a = on_moving(a, mask_a);
  const auto moving_b = on_moving(b, mask_b);

  out.matches.clear();
  out.match_sources.clear();
  for (std::size_t k = 0; k < labels.matches.size(); ++k) {
    const auto& m = labels.matches[k];
    if (moving_a[m.a] || moving_b[m.b]) continue;
    out.matches.push_back(m);
    out.match_sources.push_back(labels.match_sources[k]);
  }
  auto extend = [](std::vector<int>& ids, std::vector<LabelSource>& src,
                   const std::vector<bool>& flag) {
    std::map<int, LabelSource> merged;
    for (std::size_t k = 0; k < ids.size(); ++k) merged[ids[k]] = src[k];
    for (std::size_t i = 0; i < flag.size(); ++i) {
      if (flag[i]) merged[static_cast<int>(i)] = LabelSource::DynamicMask;
    }
    ids.clear();
    src.clear();
    for (const auto& [i, s] : merged) {
      ids.push_back(i);
      src.push_back(s);
    }
  };
  extend(out.unmatched_a, out.unmatched_a_sources, moving_a);
  extend(out.unmatched_b, out.unmatched_b_sources, moving_b);
  return out;
}

std::vector<MatchLabelSet> generate_labels(const PoseGraphSession& session,
                                           std::span<const ImageQuery> queries,
                                           const std::set<int>& moving, const LabelConfig& cfg,
                                           int threads) {
  std::vector<MatchLabelSet> out(queries.size());
  detail::parallel_for(queries.size(), threads, [&](std::size_t k) {
    const ImageQuery& q = queries[k];
    const ImageFrame& a = session.states.at(q.state_a).frame;
    const ImageFrame& b = session.states.at(q.state_b).frame;
    const MatchLabelSet raw = label_pair(q, a, b, cfg);
    if (q.mask_a && q.mask_b) {
      out[k] = apply_dynamic_mask(raw, moving, a, b, *q.mask_a, *q.mask_b, q.time_delta());
    } else {
      out[k] = raw;
      out[k].moving_instances.assign(moving.begin(), moving.end());
    }
  });
  return out;
}

}  // namespace dglue
