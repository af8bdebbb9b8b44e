#include "dglue/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "dglue/error.hpp"
#include "dglue/graph.hpp"
#include "parallel.hpp"

namespace dglue {

namespace {

constexpr double kDegPerRad = 180.0 / std::numbers::pi;

}  // namespace

PrecisionScore precision_and_ms(std::span<const IndexPair> matches, const ImageFrame& a,
                                const ImageFrame& b, const Mat3& essential, double threshold) {
  PrecisionScore out;
  out.found = static_cast<int>(matches.size());
  for (const auto& m : matches) {
    const Vec2 xa = a.camera.normalize(a.keypoints.at(m.a).position);
    const Vec2 xb = b.camera.normalize(b.keypoints.at(m.b).position);
    try {
      if (symmetric_epipolar_distance(essential, xa, xb) < threshold) ++out.correct;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateEpipolarLine) throw;
    }
  }
  if (out.found > 0) out.precision = double(out.correct) / out.found;
  if (a.size() > 0) out.matching_score = double(out.correct) / a.size();
  return out;
}

PrecisionScore precision_and_ms(std::span<const IndexPair> matches, const ImageFrame& a,
                                const ImageFrame& b, const RigidTransform& T_b_a,
                                double threshold) {
  return precision_and_ms(matches, a, b, skew(T_b_a.t) * T_b_a.R, threshold);
}

double pose_error_deg(const RigidTransform& estimate, const RigidTransform& truth) {
  const double rot = rotation_angle(estimate.R * truth.R.transpose()) * kDegPerRad;
  const double trans = direction_angle(estimate.t, truth.t) * kDegPerRad;
  return std::max(rot, trans);
}

double pose_error(std::span<const IndexPair> matches, const ImageFrame& a, const ImageFrame& b,
                  const RigidTransform& T_b_a, const RansacConfig& ransac) {
  if (matches.size() < 5) return 180.0;
  std::vector<Vec2> pa(a.keypoints.size()), pb(b.keypoints.size());
  for (std::size_t i = 0; i < pa.size(); ++i) pa[i] = a.keypoints[i].position;
  for (std::size_t j = 0; j < pb.size(); ++j) pb[j] = b.keypoints[j].position;
  try {
    const RelativePose est = recover_relative_pose(matches, pa, pb, a.camera, b.camera, ransac);
    RigidTransform T;
    T.R = est.R;
    T.t = est.t;
    const double err = pose_error_deg(T, T_b_a);
    return std::isfinite(err) ? std::min(err, 180.0) : 180.0;
  } catch (const Error&) {
    return 180.0;
  }
}

double auc(std::span<const double> errors, double threshold) {
  if (errors.empty()) throw Error(ErrorKind::EmptyErrorList, "auc of an empty error list");
  if (!(threshold > 0.0)) throw Error(ErrorKind::InvalidConfig, "auc threshold must be > 0");
  std::vector<double> e(errors.begin(), errors.end());
  std::sort(e.begin(), e.end());
  const double n = static_cast<double>(e.size());
  // Recall curve through (0, 0) and (e_k, (k + 1) / n), closed at the threshold.
  double area = 0.0, prev_x = 0.0, prev_y = 0.0;
  for (std::size_t k = 0; k < e.size() && e[k] < threshold; ++k) {
    const double y = (k + 1) / n;
    area += 0.5 * (prev_y + y) * (e[k] - prev_x);
    prev_x = e[k];
    prev_y = y;
  }
  area += prev_y * (threshold - prev_x);
  return area / threshold;
}

DynamicMetrics dynamic_metrics(std::span<const IndexPair> matches,
                               const std::vector<bool>& moving_a,
                               const std::vector<bool>& moving_b, bool literal_k_mov) {
  DynamicMetrics out;
  for (const auto& m : matches) {
    const bool ma = moving_a.at(m.a), mb = moving_b.at(m.b);
    if (ma || mb) ++out.moving_matches;
    out.matched_moving += int(ma) + int(mb);
  }
  if (!matches.empty()) out.m_mov = double(out.moving_matches) / matches.size();
  const std::size_t total = moving_a.size() + moving_b.size();
  const auto numerator =
      literal_k_mov ? std::count(moving_a.begin(), moving_a.end(), true) +
                          std::count(moving_b.begin(), moving_b.end(), true)
                    : out.matched_moving;
  if (total > 0) out.k_mov = double(numerator) / total;
  return out;
}

std::vector<WeightedMatch> mutual_nn_baseline(const ImageFrame& a, const ImageFrame& b) {
  return lightweight_match(a, b);
}

PairRecord evaluate_pair(const EvalPair& pair, const EvalConfig& cfg) {
  if (!pair.a || !pair.b) throw Error(ErrorKind::InvalidConfig, "evaluation pair without frames");
  const ImageFrame& a = *pair.a;
  const ImageFrame& b = *pair.b;
  if (pair.moving_a.size() != a.keypoints.size() || pair.moving_b.size() != b.keypoints.size()) {
    throw Error(ErrorKind::ShapeMismatch, "moving flags do not match the keypoint counts");
  }
  PairRecord r;
  r.state_a = pair.state_a;
  r.state_b = pair.state_b;
  r.num_a = a.size();
  r.num_b = b.size();
  const PrecisionScore ps =
      precision_and_ms(pair.matches, a, b, pair.T_b_a, cfg.epipolar_threshold);
  r.found = ps.found;
  r.correct = ps.correct;
  r.precision = ps.precision;
  r.matching_score = ps.matching_score;
  r.pose_error_deg = pose_error(pair.matches, a, b, pair.T_b_a, cfg.ransac);
  const DynamicMetrics dm =
      dynamic_metrics(pair.matches, pair.moving_a, pair.moving_b, cfg.literal_k_mov);
  r.moving_matches = dm.moving_matches;
  r.matched_moving = dm.matched_moving;
  r.moving_keypoints = static_cast<int>(std::count(pair.moving_a.begin(), pair.moving_a.end(), true) +
                                        std::count(pair.moving_b.begin(), pair.moving_b.end(), true));
  r.m_mov = dm.m_mov;
  r.k_mov = dm.k_mov;
  return r;
}

EvalReport evaluate(std::span<const EvalPair> pairs, const EvalConfig& cfg) {
  if (pairs.empty()) throw Error(ErrorKind::EmptyErrorList, "nothing to evaluate");
  EvalReport rep;
  rep.literal_k_mov = cfg.literal_k_mov;
  rep.pairs.resize(pairs.size());
  detail::parallel_for(pairs.size(), cfg.threads,
                       [&](std::size_t i) { rep.pairs[i] = evaluate_pair(pairs[i], cfg); });

  std::vector<double> errs;
  long found = 0, moving_matches = 0, numer = 0, keypoints = 0;
  for (const auto& r : rep.pairs) {
    errs.push_back(r.pose_error_deg);
    rep.precision += r.precision;
    rep.matching_score += r.matching_score;
    found += r.found;
    moving_matches += r.moving_matches;
    numer += cfg.literal_k_mov ? r.moving_keypoints : r.matched_moving;
    keypoints += r.num_a + r.num_b;
  }
  const double n = static_cast<double>(rep.pairs.size());
  rep.precision /= n;
  rep.matching_score /= n;
  rep.m_mov = found > 0 ? double(moving_matches) / found : 0.0;
  rep.k_mov = keypoints > 0 ? double(numer) / keypoints : 0.0;
  rep.auc5 = auc(errs, 5.0);
  rep.auc10 = auc(errs, 10.0);
  rep.auc20 = auc(errs, 20.0);
  return rep;
}

std::string EvalReport::to_json() const {
  using nlohmann::ordered_json;
  ordered_json j;
  j["schema_version"] = 1;
  j["auc5"] = auc5;
  j["auc10"] = auc10;
  j["auc20"] = auc20;
  j["precision"] = precision;
  j["matching_score"] = matching_score;
  j["m_mov"] = m_mov;
  j["k_mov"] = k_mov;
  j["k_mov_reading"] = literal_k_mov ? "literal" : "matched";
  ordered_json arr = ordered_json::array();
  for (const auto& r : pairs) {
    arr.push_back({{"state_a", r.state_a},
                   {"state_b", r.state_b},
                   {"num_a", r.num_a},
                   {"num_b", r.num_b},
                   {"found", r.found},
                   {"correct", r.correct},
                   {"precision", r.precision},
                   {"matching_score", r.matching_score},
                   {"pose_error_deg", r.pose_error_deg},
                   {"moving_matches", r.moving_matches},
                   {"matched_moving", r.matched_moving},
                   {"moving_keypoints", r.moving_keypoints},
                   {"m_mov", r.m_mov},
                   {"k_mov", r.k_mov}});
  }
  j["pairs"] = std::move(arr);
  return j.dump(2) + "\n";
}

std::string EvalReport::to_table() const {
  char buf[256];
  std::ostringstream os;
  std::snprintf(buf, sizeof buf, "%8s %8s %8s %8s %8s %8s %8s\n", "AUC@5", "AUC@10", "AUC@20",
                "P", "MS", "M_mov", "K_mov");
  os << buf;
  std::snprintf(buf, sizeof buf, "%8.2f %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f\n", 100 * auc5,
                100 * auc10, 100 * auc20, 100 * precision, 100 * matching_score, 100 * m_mov,
                100 * k_mov);
  os << buf;
  return os.str();
}

}  // namespace dglue
