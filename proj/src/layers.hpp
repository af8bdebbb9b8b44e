#pragma once

// Layer kernels shared by inference and training. Every forward can record
// what its backward needs; passing a null tape skips the bookkeeping.

#include <Eigen/Core>
#include <span>
#include <vector>

#include "dglue/graph.hpp"
#include "dglue/model.hpp"

namespace dglue::detail {

struct EdgeView {
  std::span<const Edge> edges;
  std::span<const int> offsets;
  const EdgeFeatures* features = nullptr;  // null for self edges
};

inline EdgeView self_view(const PairGraph& g) { return {g.self_edges, g.self_offsets, nullptr}; }
inline EdgeView cross_view(const PairGraph& g) {
  return {g.cross_edges, g.cross_offsets, &g.cross_edge_features};
}

struct AttentionTape {
  Eigen::MatrixXd query, key, value;  // D x nodes
  Eigen::MatrixXd edge_key, edge_value;  // D x edges
  Eigen::MatrixXd alpha;  // heads x edges
};

Eigen::MatrixXd attention_forward(const Eigen::MatrixXd& x, const EdgeView& view,
                                  const BranchParams& p, int num_heads, AttentionTape* tape);
// Accumulates into grad and dx.
void attention_backward(const Eigen::MatrixXd& x, const EdgeView& view, const BranchParams& p,
                        int num_heads, const AttentionTape& tape, const Eigen::MatrixXd& d_out,
                        BranchParams& grad, Eigen::MatrixXd& dx);

struct MlpTape {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> hidden;  // post-ReLU activations
};

Eigen::MatrixXd mlp_forward(const Eigen::MatrixXd& input, const BranchParams& p, MlpTape* tape);
void mlp_backward(const BranchParams& p, const MlpTape& tape, const Eigen::MatrixXd& d_out,
                  BranchParams& grad, Eigen::MatrixXd& d_input);

struct PairNormTape {
  Eigen::MatrixXd centered;
  double norm = 0.0;
  bool degenerate = false;
};

Eigen::MatrixXd pairnorm_forward(const Eigen::MatrixXd& y, double scale, PairNormTape* tape);
void pairnorm_backward(const PairNormTape& tape, double scale, const Eigen::MatrixXd& d_out,
                       double& d_scale, Eigen::MatrixXd& d_y);

struct BranchTape {
  Eigen::MatrixXd input;
  AttentionTape attention;
  MlpTape mlp;
  PairNormTape norm;
};

// x <- pairnorm(x + MLP([x ; aggregate(x)]))
Eigen::MatrixXd branch_forward(const Eigen::MatrixXd& x, const EdgeView& view,
                               const BranchParams& p, int num_heads, BranchTape* tape);
void branch_backward(const EdgeView& view, const BranchParams& p, int num_heads,
                     const BranchTape& tape, const Eigen::MatrixXd& d_out, BranchParams& grad,
                     Eigen::MatrixXd& dx);

struct HeadTape {
  Eigen::MatrixXd embeddings;
  Eigen::MatrixXd proj_a, proj_b;  // D x num_a, D x num_b
  Eigen::MatrixXd col_softmax, row_softmax;  // num_a x num_b
  Eigen::VectorXd sigma;
};

// Fills P, log_P, sigma and its logs; no extraction.
void head_forward(const Eigen::MatrixXd& x, int num_a, const HeadParams& head, MatchResult& out,
                  HeadTape* tape);
// d_log_p: num_a x num_b; d_log_sigma and d_log_one_minus: num_nodes.
void head_backward(const HeadParams& head, int num_a, const HeadTape& tape,
                   const Eigen::MatrixXd& d_log_p, const Eigen::VectorXd& d_log_sigma,
                   const Eigen::VectorXd& d_log_one_minus, HeadParams& grad, Eigen::MatrixXd& dx);

struct ForwardTape {
  Eigen::MatrixXd initial;  // embeddings before round 0
  std::vector<BranchTape> branches;  // 2 per round: self, cross
  HeadTape head;
};

MatchResult forward_impl(const PairGraph& graph, const ModelParams& params,
                         const ModelConfig& cfg, ForwardTape* tape);

void check_shapes(const PairGraph& graph, const ModelParams& params, const ModelConfig& cfg);

double softplus(double x);

}  // namespace dglue::detail
