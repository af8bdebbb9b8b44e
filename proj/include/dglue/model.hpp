#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "dglue/graph.hpp"

namespace dglue {

struct ModelConfig {
  int descriptor_dim = 256;
  int embed_dim = 256;
  int num_rounds = 6;
  int num_heads = 4;
  std::vector<int> mlp_dims{512, 512, 256};
  double assign_threshold = 0.1;
  double pairnorm_scale = 1.0;

  // Reduced model with MLP dims (2D, 2D, D).
  static ModelConfig compact(int descriptor_dim, int embed_dim, int num_rounds, int num_heads);

  int head_dim() const { return embed_dim / num_heads; }
  void validate() const;
  bool same_shape(const ModelConfig& other) const;
  bool operator==(const ModelConfig&) const = default;
};

// Parameters of one attentional-aggregation layer plus its MLP and PairNorm.
// Self branch:  m_i = skip n_i + sum_j a_ij value n_j,
//               a_ij = softmax_j((query n_i)^T (key n_j) / sqrt(D_h)).
// Cross branch additionally adds edge_value e_ij to the values and
// edge_key e_ij to the keys. Edge maps are empty for the self branch.
struct BranchParams {
  Eigen::MatrixXd skip, value, query, key;
  Eigen::MatrixXd edge_value, edge_key;
  std::vector<Eigen::MatrixXd> mlp_weights;
  std::vector<Eigen::VectorXd> mlp_biases;
  double norm_scale = 1.0;

  bool has_edge_maps() const { return edge_key.size() > 0; }
};

struct RoundParams {
  BranchParams self;
  BranchParams cross;
};

// S_ij = (proj_a n_i + bias_a)^T (proj_b n_j + bias_b),
// sigma_o = sigmoid(match_w n_o + match_b).
struct HeadParams {
  Eigen::MatrixXd proj_a;
  Eigen::VectorXd bias_a;
  Eigen::MatrixXd proj_b;
  Eigen::VectorXd bias_b;
  Eigen::RowVectorXd match_w;
  double match_b = 0.0;
};

struct ModelParams {
  ModelConfig config;
  // Present only when descriptor_dim != embed_dim.
  Eigen::MatrixXd input_proj;
  Eigen::VectorXd input_bias;
  std::vector<RoundParams> rounds;
  HeadParams head;

  static ModelParams zeros(const ModelConfig& cfg);
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias;
  // PairNorm scales start at cfg.pairnorm_scale.
  static ModelParams random(const ModelConfig& cfg, std::uint64_t seed);

  // Calls fn(name, data, rows, cols) for every parameter block in the fixed
  // declaration order used by the weights file. Scalars are 1x1 blocks.
  template <class Fn>
  void visit(Fn&& fn) {
    visit_impl(*this, fn);
  }
  template <class Fn>
  void visit(Fn&& fn) const {
    visit_impl(*this, fn);
  }

  std::size_t num_scalars() const;
  bool all_finite() const;
  // Flattened copy in visit order, and the inverse.
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& flat);

 private:
  template <class Self, class Fn>
  static void visit_impl(Self& self, Fn& fn);
};

struct ScoredMatch {
  int a = 0;
  int b = 0;
  double score = 0.0;
  bool operator==(const ScoredMatch&) const = default;
};

struct MatchResult {
  // num_a x num_b partial assignment and its log.
  Eigen::MatrixXd P;
  Eigen::MatrixXd log_P;
  // Matchability for all num_a + num_b nodes, with log(sigma) and
  // log(1 - sigma) computed without cancellation.
  Eigen::VectorXd sigma;
  Eigen::VectorXd log_sigma;
  Eigen::VectorXd log_one_minus_sigma;
  std::vector<ScoredMatch> matches;
  // embed_dim x (num_a + num_b) final node embeddings.
  Eigen::MatrixXd embeddings;
  // Number of PairNorm layers that saw identical embeddings.
  int degenerate_norms = 0;
};

struct PairNormResult {
  Eigen::MatrixXd embeddings;
  bool degenerate = false;
};

// Messages of the self branch over graph.self_edges.
Eigen::MatrixXd self_aggregate(const Eigen::MatrixXd& embeddings, const PairGraph& graph,
                               const BranchParams& params, int num_heads);
// Messages of the cross branch over graph.cross_edges with edge features.
Eigen::MatrixXd cross_aggregate(const Eigen::MatrixXd& embeddings, const PairGraph& graph,
                                const BranchParams& params, int num_heads);

// Centers over all nodes and rescales so the mean squared column norm is
// scale^2. Identical columns give zeros and `degenerate = true`.
PairNormResult pairnorm(const Eigen::MatrixXd& embeddings, double scale);

// Mutual row/column argmax with P_ij > tau. Ties go to the lower index.
std::vector<ScoredMatch> extract_matches(const Eigen::MatrixXd& P, double tau);

// Full network. Throws ShapeMismatch if params, cfg and graph disagree.
// cfg.assign_threshold controls extraction.
MatchResult forward(const PairGraph& graph, const ModelParams& params, const ModelConfig& cfg);
inline MatchResult forward(const PairGraph& graph, const ModelParams& params) {
  return forward(graph, params, params.config);
}

// Assignment head on final embeddings (exposed for tests).
MatchResult assignment_head(const Eigen::MatrixXd& embeddings, int num_a, const HeadParams& head,
                            double tau);

// Weights file ("DGW1"): little-endian; magic, u32 version, config header,
// then every parameter block in visit order as (u32 rows, u32 cols,
// rows*cols f64 column-major).
void save_weights(const ModelParams& params, const std::string& path);
ModelParams load_weights(const std::string& path);
std::string serialize_weights(const ModelParams& params);
ModelParams deserialize_weights(const std::string& bytes);

// ---------------------------------------------------------------------------

template <class Self, class Fn>
void ModelParams::visit_impl(Self& self, Fn& fn) {
  auto mat = [&fn](const std::string& name, auto& m) { fn(name, m.data(), m.rows(), m.cols()); };
  auto scalar = [&fn](const std::string& name, auto& v) { fn(name, &v, Eigen::Index{1}, Eigen::Index{1}); };
  if (self.input_proj.size() > 0) {
    mat("input.proj", self.input_proj);
    mat("input.bias", self.input_bias);
  }
  for (std::size_t r = 0; r < self.rounds.size(); ++r) {
    auto& round = self.rounds[r];
    for (int branch = 0; branch < 2; ++branch) {
      auto& p = branch == 0 ? round.self : round.cross;
      const std::string prefix =
          "round" + std::to_string(r) + (branch == 0 ? ".self." : ".cross.");
      mat(prefix + "skip", p.skip);
      mat(prefix + "value", p.value);
      mat(prefix + "query", p.query);
      mat(prefix + "key", p.key);
      if (branch == 1) {
        mat(prefix + "edge_value", p.edge_value);
        mat(prefix + "edge_key", p.edge_key);
      }
      for (std::size_t l = 0; l < p.mlp_weights.size(); ++l) {
        mat(prefix + "mlp" + std::to_string(l) + ".weight", p.mlp_weights[l]);
        mat(prefix + "mlp" + std::to_string(l) + ".bias", p.mlp_biases[l]);
      }
      scalar(prefix + "norm_scale", p.norm_scale);
    }
  }
  mat("head.proj_a", self.head.proj_a);
  mat("head.bias_a", self.head.bias_a);
  mat("head.proj_b", self.head.proj_b);
  mat("head.bias_b", self.head.bias_b);
  mat("head.match_w", self.head.match_w);
  scalar("head.match_b", self.head.match_b);
}

}  // namespace dglue
