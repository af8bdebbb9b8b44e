#pragma once

#include <functional>
#include <set>
#include <vector>

#include "dglue/eval.hpp"
#include "dglue/labels.hpp"
#include "dglue/model.hpp"
#include "dglue/synth.hpp"
#include "dglue/trainer.hpp"

namespace dglue {

// Per keypoint: does it sit on one of the `moving` instances (mask lookup).
std::vector<bool> moving_keypoints(const SessionState& state, const std::set<int>& moving);

// One graph per label set; sets without any label are skipped.
std::vector<TrainingSample> training_samples(const PoseGraphSession& session,
                                             const std::vector<MatchLabelSet>& labels,
                                             const GraphConfig& cfg = {}, int threads = 1);

using Matcher = std::function<std::vector<IndexPair>(const ImageFrame&, const ImageFrame&)>;

Matcher model_matcher(const ModelParams& params, const GraphConfig& graph_cfg = {},
                      double tau = 0.1);
Matcher mutual_nn_matcher();

// Evaluation pairs for `queries`, with moving flags from `moving` and
// matches from `matcher`. Frames are referenced, not copied.
std::vector<EvalPair> eval_pairs(const PoseGraphSession& session,
                                 std::span<const ImageQuery> queries,
                                 const std::set<int>& moving, const Matcher& matcher,
                                 int threads = 1);

}  // namespace dglue
