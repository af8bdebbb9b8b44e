#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dglue/graph.hpp"
#include "dglue/model.hpp"

namespace dglue {

// Supervision for one image pair. Keypoints in none of the three lists are
// unlabeled and contribute nothing to the loss.
struct LabelBatch {
  std::vector<IndexPair> matches;
  std::vector<int> unmatched_a;
  std::vector<int> unmatched_b;

  bool empty() const { return matches.empty() && unmatched_a.empty() && unmatched_b.empty(); }
  // Throws IndexOutOfRange for bad indices and InvalidConfig when a matched
  // keypoint is also listed as non-matchable.
  void validate(int num_a, int num_b) const;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int max_steps = 1000;
  std::uint64_t seed = 0;
  // Worker threads for the per-pair forward/backward within a batch.
  int threads = 1;

  void validate() const;
};

// L = -(L_M + L_N^A + L_N^B) with
//   L_M   = mean of log P_ij over the matches,
//   L_N^X = sum of log(1 - sigma_i) over unmatched_X / (2 |unmatched_X|).
double loss(const MatchResult& result, const LabelBatch& labels);

struct LossGradient {
  double loss = 0.0;
  ModelParams grad;  // same layout as the parameters
};

// Reverse-mode gradient of the loss through the full network. Graph edge
// features and descriptors are constants. Throws NonFiniteLoss or
// NonFiniteGradient.
LossGradient loss_and_gradient(const PairGraph& graph, const ModelParams& params,
                               const ModelConfig& cfg, const LabelBatch& labels);
inline ModelParams backward(const PairGraph& graph, const ModelParams& params,
                            const ModelConfig& cfg, const LabelBatch& labels) {
  return loss_and_gradient(graph, params, cfg, labels).grad;
}

class AdamOptimizer {
 public:
  AdamOptimizer(const ModelParams& params, const TrainConfig& cfg);
  void step(ModelParams& params, const ModelParams& grad);
  int steps_taken() const { return t_; }

 private:
  TrainConfig cfg_;
  Eigen::VectorXd m_, v_;
  int t_ = 0;
};

struct TrainingSample {
  PairGraph graph;
  LabelBatch labels;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_curve;  // mean batch loss per step
};

// Called after every optimizer step with the 1-based step index, that step's
// loss and the updated parameters.
using StepCallback = std::function<void(int step, double loss, const ModelParams& params)>;

// Mini-batch Adam. Batches are drawn from a seeded permutation that is
// reshuffled each epoch; batch gradients are averaged. A non-finite loss or
// gradient throws NonFiniteLoss / NonFiniteGradient; if `last_good_path` is
// set, the parameters from before that step are written there first.
TrainResult train(std::span<const TrainingSample> data, ModelParams init, const TrainConfig& cfg,
                  const StepCallback& on_step = {}, const std::string& last_good_path = {});

void write_loss_csv(const std::string& path, std::span<const double> curve);

}  // namespace dglue
