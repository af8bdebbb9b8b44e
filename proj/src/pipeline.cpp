#include "dglue/pipeline.hpp"

#include "dglue/error.hpp"
#include "parallel.hpp"

namespace dglue {

std::vector<bool> moving_keypoints(const SessionState& state, const std::set<int>& moving) {
  std::vector<bool> out(state.frame.keypoints.size(), false);
  if (!state.mask || moving.empty()) return out;
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = moving.count(state.mask->lookup(state.frame.keypoints[k].position)) > 0;
  }
  return out;
}

std::vector<TrainingSample> training_samples(const PoseGraphSession& session,
                                             const std::vector<MatchLabelSet>& labels,
                                             const GraphConfig& cfg, int threads) {
  std::vector<const MatchLabelSet*> kept;
  for (const auto& l : labels) {
    if (!l.batch().empty()) kept.push_back(&l);
  }
  std::vector<TrainingSample> out(kept.size());
  detail::parallel_for(kept.size(), threads, [&](std::size_t k) {
    const MatchLabelSet& l = *kept[k];
    const ImageFrame& a = session.states.at(l.state_a).frame;
    const ImageFrame& b = session.states.at(l.state_b).frame;
    out[k].graph = build_graph(a, b, cfg);
    out[k].labels = l.batch();
    out[k].labels.validate(a.size(), b.size());
  });
  return out;
}

Matcher model_matcher(const ModelParams& params, const GraphConfig& graph_cfg, double tau) {
  ModelConfig cfg = params.config;
  cfg.assign_threshold = tau;
  return [params, graph_cfg, cfg](const ImageFrame& a, const ImageFrame& b) {
    const MatchResult r = forward(build_graph(a, b, graph_cfg), params, cfg);
    std::vector<IndexPair> out;
    for (const auto& m : r.matches) out.push_back({m.a, m.b});
    return out;
  };
}

Matcher mutual_nn_matcher() {
  return [](const ImageFrame& a, const ImageFrame& b) {
    std::vector<IndexPair> out;
    for (const auto& m : mutual_nn_baseline(a, b)) out.push_back({m.a, m.b});
    return out;
  };
}

std::vector<EvalPair> eval_pairs(const PoseGraphSession& session,
                                 std::span<const ImageQuery> queries,
                                 const std::set<int>& moving, const Matcher& matcher,
                                 int threads) {
  std::vector<std::vector<bool>> flags;
  for (const auto& s : session.states) flags.push_back(moving_keypoints(s, moving));
  std::vector<EvalPair> out(queries.size());
  detail::parallel_for(queries.size(), threads, [&](std::size_t k) {
    const ImageQuery& q = queries[k];
    EvalPair& p = out[k];
    p.state_a = q.state_a;
    p.state_b = q.state_b;
    p.a = &session.states.at(q.state_a).frame;
    p.b = &session.states.at(q.state_b).frame;
    p.T_b_a = q.T_b_a;
    p.moving_a = flags[q.state_a];
    p.moving_b = flags[q.state_b];
    p.matches = matcher(*p.a, *p.b);
  });
  return out;
}

}  // namespace dglue
