#include "dglue/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <unordered_set>

#include "dglue/error.hpp"
#include "layers.hpp"
#include "parallel.hpp"

namespace dglue {

void LabelBatch::validate(int num_a, int num_b) const {
  auto check = [](int idx, int n, const char* what) {
    if (idx < 0 || idx >= n) {
      throw Error(ErrorKind::IndexOutOfRange, std::string(what) + " index " +
                                                  std::to_string(idx) + " outside [0, " +
                                                  std::to_string(n) + ")");
    }
  };
  std::unordered_set<int> na, nb;
  for (int i : unmatched_a) {
    check(i, num_a, "non-matchable A");
    na.insert(i);
  }
  for (int j : unmatched_b) {
    check(j, num_b, "non-matchable B");
    nb.insert(j);
  }
  for (const auto& m : matches) {
    check(m.a, num_a, "match A");
    check(m.b, num_b, "match B");
    if (na.count(m.a) || nb.count(m.b)) {
      throw Error(ErrorKind::InvalidConfig, "keypoint is both matched and non-matchable");
    }
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorKind::InvalidConfig, "learning rate must be finite and >= 0");
  }
  if (batch_size < 1) throw Error(ErrorKind::InvalidConfig, "batch size must be >= 1");
  if (max_steps < 0) throw Error(ErrorKind::InvalidConfig, "max_steps must be >= 0");
  if (threads < 1) throw Error(ErrorKind::InvalidConfig, "threads must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0)) {
    throw Error(ErrorKind::InvalidConfig, "invalid Adam hyperparameters");
  }
}

namespace {

struct LossWeights {
  double match = 0.0;
  double unmatched_a = 0.0;
  double unmatched_b = 0.0;
};

LossWeights term_weights(const LabelBatch& labels) {
  LossWeights w;
  if (!labels.matches.empty()) w.match = 1.0 / static_cast<double>(labels.matches.size());
  if (!labels.unmatched_a.empty()) {
    w.unmatched_a = 1.0 / (2.0 * static_cast<double>(labels.unmatched_a.size()));
  }
  if (!labels.unmatched_b.empty()) {
    w.unmatched_b = 1.0 / (2.0 * static_cast<double>(labels.unmatched_b.size()));
  }
  return w;
}

}  // namespace

double loss(const MatchResult& result, const LabelBatch& labels) {
  const int num_a = static_cast<int>(result.log_P.rows());
  const int num_b = static_cast<int>(result.log_P.cols());
  labels.validate(num_a, num_b);
  if (labels.empty()) throw Error(ErrorKind::InvalidConfig, "pair has no labels");
  const LossWeights w = term_weights(labels);
  double lm = 0.0, la = 0.0, lb = 0.0;
  for (const auto& m : labels.matches) lm += result.log_P(m.a, m.b);
  for (int i : labels.unmatched_a) la += result.log_one_minus_sigma(i);
  for (int j : labels.unmatched_b) lb += result.log_one_minus_sigma(num_a + j);
  return -(w.match * lm + w.unmatched_a * la + w.unmatched_b * lb);
}

LossGradient loss_and_gradient(const PairGraph& graph, const ModelParams& params,
                               const ModelConfig& cfg, const LabelBatch& labels) {
  detail::ForwardTape tape;
  const MatchResult res = detail::forward_impl(graph, params, cfg, &tape);
  LossGradient out;
  out.loss = loss(res, labels);
  if (!std::isfinite(out.loss)) throw Error(ErrorKind::NonFiniteLoss, "loss is NaN or Inf");

  const int num_a = graph.num_a;
  const int nodes = graph.num_nodes();
  const LossWeights w = term_weights(labels);
  Eigen::MatrixXd d_log_p = Eigen::MatrixXd::Zero(graph.num_a, graph.num_b);
  Eigen::VectorXd d_log_sigma = Eigen::VectorXd::Zero(nodes);
  Eigen::VectorXd d_log_one_minus = Eigen::VectorXd::Zero(nodes);
  for (const auto& m : labels.matches) d_log_p(m.a, m.b) -= w.match;
  for (int i : labels.unmatched_a) d_log_one_minus(i) -= w.unmatched_a;
  for (int j : labels.unmatched_b) d_log_one_minus(num_a + j) -= w.unmatched_b;

  out.grad = ModelParams::zeros(cfg);
  Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(cfg.embed_dim, nodes);
  detail::head_backward(params.head, num_a, tape.head, d_log_p, d_log_sigma, d_log_one_minus,
                        out.grad.head, dx);

  const detail::EdgeView self_edges = detail::self_view(graph);
  const detail::EdgeView cross_edges = detail::cross_view(graph);
  Eigen::MatrixXd d_in;
  for (std::size_t r = params.rounds.size(); r-- > 0;) {
    detail::branch_backward(cross_edges, params.rounds[r].cross, cfg.num_heads,
                            tape.branches[2 * r + 1], dx, out.grad.rounds[r].cross, d_in);
    detail::branch_backward(self_edges, params.rounds[r].self, cfg.num_heads,
                            tape.branches[2 * r], d_in, out.grad.rounds[r].self, dx);
  }
  if (params.input_proj.size() > 0) {
    out.grad.input_proj.noalias() += dx * graph.descriptors.transpose();
    out.grad.input_bias += dx.rowwise().sum();
  }
  if (!out.grad.all_finite()) {
    throw Error(ErrorKind::NonFiniteGradient, "gradient contains NaN or Inf");
  }
  return out;
}

AdamOptimizer::AdamOptimizer(const ModelParams& params, const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto n = static_cast<Eigen::Index>(params.num_scalars());
  m_ = Eigen::VectorXd::Zero(n);
  v_ = Eigen::VectorXd::Zero(n);
}

void AdamOptimizer::step(ModelParams& params, const ModelParams& grad) {
  const Eigen::VectorXd g = grad.flatten();
  if (g.size() != m_.size()) throw Error(ErrorKind::ShapeMismatch, "gradient layout differs");
  ++t_;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * g;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
  Eigen::VectorXd p = params.flatten();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double m_hat = m_(i) / c1;
    const double v_hat = v_(i) / c2;
    p(i) -= cfg_.learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
  }
  params.unflatten(p);
}

TrainResult train(std::span<const TrainingSample> data, ModelParams init, const TrainConfig& cfg,
                  const StepCallback& on_step, const std::string& last_good_path) {
  cfg.validate();
  if (data.empty()) throw Error(ErrorKind::InvalidConfig, "training set is empty");
  const ModelConfig mcfg = init.config;

  TrainResult result;
  result.params = std::move(init);
  AdamOptimizer adam(result.params, cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  const std::size_t batch = std::min<std::size_t>(cfg.batch_size, data.size());

  std::vector<std::size_t> picked(batch);
  std::vector<double> losses(batch);
  std::vector<Eigen::VectorXd> grads(batch);
  for (int step = 1; step <= cfg.max_steps; ++step) {
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      picked[b] = order[cursor++];
    }
    try {
      detail::parallel_for(batch, cfg.threads, [&](std::size_t b) {
        const TrainingSample& s = data[picked[b]];
        LossGradient lg = loss_and_gradient(s.graph, result.params, mcfg, s.labels);
        losses[b] = lg.loss;
        grads[b] = lg.grad.flatten();
      });
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFiniteLoss && e.kind() != ErrorKind::NonFiniteGradient) throw;
      if (!last_good_path.empty()) save_weights(result.params, last_good_path);
      throw Error(e.kind(), std::string(e.what()) + " at step " + std::to_string(step));
    }
    // Fixed-order reduction keeps the result independent of thread count.
    double batch_loss = 0.0;
    Eigen::VectorXd g = Eigen::VectorXd::Zero(grads[0].size());
    for (std::size_t b = 0; b < batch; ++b) {
      batch_loss += losses[b];
      g += grads[b];
    }
    batch_loss /= static_cast<double>(batch);
    g /= static_cast<double>(batch);
    if (!std::isfinite(batch_loss)) {
      if (!last_good_path.empty()) save_weights(result.params, last_good_path);
      throw Error(ErrorKind::NonFiniteLoss,
                  "non-finite loss at step " + std::to_string(step));
    }
    ModelParams grad = ModelParams::zeros(mcfg);
    grad.unflatten(g);
    adam.step(result.params, grad);
    result.loss_curve.push_back(batch_loss);
    if (on_step) on_step(step, batch_loss, result.params);
  }
  return result;
}

void write_loss_csv(const std::string& path, std::span<const double> curve) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  f << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < curve.size(); ++i) f << (i + 1) << ',' << curve[i] << '\n';
  if (!f) throw Error(ErrorKind::IoError, "failed writing " + path);
}

}  // namespace dglue
