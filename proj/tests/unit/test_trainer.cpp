#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dglue/error.hpp"
#include "dglue/trainer.hpp"
#include "helpers.hpp"
#include "oracle/reference_model.hpp"

using namespace dglue;

namespace {

PairGraph toy_graph(std::mt19937_64& rng, int n, int dim, int k = 4) {
  auto [a, b] = testing_util::correlated_frames(rng, n, dim);
  GraphConfig cfg;
  cfg.k_self = k;
  cfg.k_cross = k;
  return build_graph(a, b, cfg);
}

// correlated_frames pairs B's keypoint i with A's keypoint (7i + 3) % n.
LabelBatch toy_labels(int n) {
  LabelBatch l;
  for (int i = 0; i < n / 2; ++i) l.matches.push_back({(i * 7 + 3) % n, i});
  for (int i = n / 2; i < n; ++i) l.unmatched_b.push_back(i);
  std::vector<bool> used(n, false);
  for (const auto& m : l.matches) used[m.a] = true;
  for (int i = 0; i < n; ++i) {
    if (!used[i] && i % 2 == 0) l.unmatched_a.push_back(i);
  }
  return l;
}

MatchResult result_from(const Eigen::MatrixXd& log_p, const Eigen::VectorXd& log_one_minus) {
  MatchResult r;
  r.log_P = log_p;
  r.P = log_p.array().exp();
  r.log_one_minus_sigma = log_one_minus;
  r.log_sigma = (1.0 - log_one_minus.array().exp()).log();
  r.sigma = r.log_sigma.array().exp();
  return r;
}

}  // namespace

TEST(Loss, PerfectPredictionIsZero) {
  const Eigen::MatrixXd log_p = Eigen::MatrixXd::Constant(3, 3, std::log(0.2));
  Eigen::MatrixXd lp = log_p;
  lp(0, 1) = 0.0;
  lp(2, 0) = 0.0;
  Eigen::VectorXd lom = Eigen::VectorXd::Constant(6, -1.0);
  lom(1) = 0.0;
  lom(5) = 0.0;
  LabelBatch l{{{0, 1}, {2, 0}}, {1}, {2}};
  EXPECT_EQ(loss(result_from(lp, lom), l), 0.0);
}

TEST(Loss, SingleMatchClosedForm) {
  Eigen::MatrixXd lp = Eigen::MatrixXd::Constant(2, 2, -3.0);
  lp(1, 0) = std::log(0.5);
  LabelBatch l{{{1, 0}}, {}, {}};
  EXPECT_NEAR(loss(result_from(lp, Eigen::VectorXd::Constant(4, -0.1)), l), 0.693147180559945, 1e-12);
}

TEST(Loss, MatchesScalarOracleAndIsNonNegative) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-8.0, 0.0);
  for (int trial = 0; trial < 500; ++trial) {
    const int na = 4 + trial % 5, nb = 3 + trial % 4;
    Eigen::MatrixXd lp(na, nb);
    for (Eigen::Index k = 0; k < lp.size(); ++k) lp.data()[k] = u(rng);
    Eigen::VectorXd lom(na + nb);
    for (int k = 0; k < na + nb; ++k) lom(k) = u(rng);
    LabelBatch l;
    l.matches = {{0, 0}, {1, 2}};
    if (trial % 3) l.unmatched_a = {2, 3};
    if (trial % 2) l.unmatched_b = {1};
    double lm = 0.0, la = 0.0, lb = 0.0;
    for (const auto& m : l.matches) lm += lp(m.a, m.b);
    lm /= l.matches.size();
    for (int i : l.unmatched_a) la += lom(i);
    if (!l.unmatched_a.empty()) la /= 2.0 * l.unmatched_a.size();
    for (int j : l.unmatched_b) lb += lom(na + j);
    if (!l.unmatched_b.empty()) lb /= 2.0 * l.unmatched_b.size();
    const double expect = -(lm + la + lb);
    const double got = loss(result_from(lp, lom), l);
    EXPECT_NEAR(got, expect, 1e-12 * std::abs(expect));
    EXPECT_GE(got, 0.0);
  }
}

TEST(Loss, UnlabeledKeypointsDoNotContribute) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-5.0, 0.0);
  Eigen::MatrixXd lp(4, 4);
  for (Eigen::Index k = 0; k < lp.size(); ++k) lp.data()[k] = u(rng);
  Eigen::VectorXd lom(8);
  for (int k = 0; k < 8; ++k) lom(k) = u(rng);
  LabelBatch l{{{0, 0}}, {1}, {2}};
  const double base = loss(result_from(lp, lom), l);
  // Keypoint A3 and B3 are unlabeled.
  lp.row(3).setConstant(-40.0);
  lp.col(3).setConstant(-40.0);
  lom(3) = lom(7) = -40.0;
  EXPECT_EQ(loss(result_from(lp, lom), l), base);
}

TEST(Loss, LabelValidation) {
  const MatchResult r = result_from(Eigen::MatrixXd::Constant(3, 3, -1.0), Eigen::VectorXd::Constant(6, -1.0));
  auto kind_of = [&](const LabelBatch& l) {
    try {
      loss(r, l);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::IoError;
  };
  EXPECT_EQ(kind_of(LabelBatch{{{3, 0}}, {}, {}}), ErrorKind::IndexOutOfRange);
  EXPECT_EQ(kind_of(LabelBatch{{{0, 0}}, {-1}, {}}), ErrorKind::IndexOutOfRange);
  EXPECT_EQ(kind_of(LabelBatch{{}, {}, {5}}), ErrorKind::IndexOutOfRange);
  EXPECT_EQ(kind_of(LabelBatch{{{0, 0}}, {0}, {}}), ErrorKind::InvalidConfig);
}

TEST(Gradient, MatchesLongDoubleFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    std::mt19937_64 rng(seed);
    const PairGraph g = toy_graph(rng, 6, 8, 3);
    const ModelConfig cfg = ModelConfig::compact(8, 8, 1, 1);
    const ModelParams p = ModelParams::random(cfg, seed + 5);
    const LabelBatch labels = toy_labels(6);
    const LossGradient lg = loss_and_gradient(g, p, cfg, labels);
    const Eigen::VectorXd grad = lg.grad.flatten();
    const auto base = oracle::to_blocks<long double>(p);
    EXPECT_NEAR(lg.loss, static_cast<double>(oracle::loss(oracle::forward<long double>(g, cfg, base), labels, 6)), 1e-12);
    const long double h = 1e-5L;
    int checked = 0;
    for (Eigen::Index k = 0; k < grad.size(); ++k) {
      auto plus = base, minus = base;
      oracle::nudge(plus, static_cast<std::size_t>(k), h);
      oracle::nudge(minus, static_cast<std::size_t>(k), -h);
      const long double fd = (oracle::loss(oracle::forward<long double>(g, cfg, plus), labels, 6) -
                              oracle::loss(oracle::forward<long double>(g, cfg, minus), labels, 6)) /
                             (2 * h);
      if (std::abs(grad(k)) <= 1e-8) continue;
      ++checked;
      const double rel = std::abs(grad(k) - static_cast<double>(fd)) / std::abs(grad(k));
      EXPECT_LT(rel, 1e-4) << "parameter " << k;
    }
    EXPECT_GT(checked, grad.size() / 2);
  }
}

TEST(Gradient, MatchabilityBiasPushesDownWhenAllNonMatchable) {
  std::mt19937_64 rng(3);
  const PairGraph g = toy_graph(rng, 6, 8, 3);
  const ModelConfig cfg = ModelConfig::compact(8, 8, 1, 2);
  const ModelParams p = ModelParams::random(cfg, 1);
  LabelBatch l;
  for (int i = 0; i < 6; ++i) {
    l.unmatched_a.push_back(i);
    l.unmatched_b.push_back(i);
  }
  EXPECT_GT(backward(g, p, cfg, l).head.match_b, 0.0);
  // Each node's own contribution, via a single-node label set.
  for (int i = 0; i < 6; ++i) {
    LabelBatch one;
    one.unmatched_a = {i};
    EXPECT_GT(backward(g, p, cfg, one).head.match_b, 0.0);
  }
}

TEST(Adam, ZeroLearningRateLeavesParamsUnchanged) {
  const ModelConfig cfg = ModelConfig::compact(8, 8, 1, 2);
  ModelParams p = ModelParams::random(cfg, 4);
  const Eigen::VectorXd before = p.flatten();
  TrainConfig tc;
  tc.learning_rate = 0.0;
  AdamOptimizer adam(p, tc);
  ModelParams grad = ModelParams::random(cfg, 5);
  adam.step(p, grad);
  EXPECT_EQ(p.flatten(), before);
  EXPECT_EQ(adam.steps_taken(), 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  const ModelConfig cfg = ModelConfig::compact(8, 8, 1, 2);
  ModelParams p = ModelParams::random(cfg, 4);
  const Eigen::VectorXd before = p.flatten();
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  AdamOptimizer adam(p, tc);
  const ModelParams grad = ModelParams::random(cfg, 5);
  adam.step(p, grad);
  const Eigen::VectorXd g = grad.flatten();
  const Eigen::VectorXd delta = p.flatten() - before;
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    // Bias-corrected first step: -lr * g / (|g| + eps).
    EXPECT_NEAR(delta(k), -1e-3 * g(k) / (std::abs(g(k)) + 1e-8), 1e-15);
  }
}

TEST(Train, OverfitsSinglePair) {
  std::mt19937_64 rng(6);
  std::vector<TrainingSample> data(1);
  data[0].graph = toy_graph(rng, 12, 16, 4);
  data[0].labels = toy_labels(12);
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.max_steps = 200;
  const TrainResult r = train(data, ModelParams::random(ModelConfig::compact(16, 16, 2, 2), 1), tc);
  ASSERT_EQ(r.loss_curve.size(), 200u);
  EXPECT_LT(r.loss_curve.back(), 0.5 * r.loss_curve.front());
}

TEST(Train, SameSeedSameCurveAcrossThreadCounts) {
  std::mt19937_64 rng(7);
  std::vector<TrainingSample> data(5);
  for (auto& s : data) {
    s.graph = toy_graph(rng, 8, 8, 3);
    s.labels = toy_labels(8);
  }
  const ModelParams init = ModelParams::random(ModelConfig::compact(8, 8, 1, 2), 2);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.max_steps = 12;
  tc.learning_rate = 1e-3;
  tc.seed = 9;
  const TrainResult a = train(data, init, tc);
  const TrainResult b = train(data, init, tc);
  tc.threads = 3;
  const TrainResult c = train(data, init, tc);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  EXPECT_EQ(a.loss_curve, c.loss_curve);
  EXPECT_EQ(a.params.flatten(), c.params.flatten());
}

TEST(Train, NonFiniteLossWritesLastGoodCheckpoint) {
  std::mt19937_64 rng(8);
  std::vector<TrainingSample> data(1);
  data[0].graph = toy_graph(rng, 8, 8, 3);
  data[0].labels = toy_labels(8);
  ModelParams init = ModelParams::random(ModelConfig::compact(8, 8, 1, 2), 2);
  init.head.match_b = std::numeric_limits<double>::quiet_NaN();
  const auto path = std::filesystem::temp_directory_path() / "dglue_last_good.dgw";
  std::filesystem::remove(path);
  TrainConfig tc;
  tc.max_steps = 3;
  try {
    train(data, init, tc, {}, path.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_TRUE(e.kind() == ErrorKind::NonFiniteLoss || e.kind() == ErrorKind::NonFiniteGradient);
    EXPECT_TRUE(is_numerical(e.kind()));
  }
  ASSERT_TRUE(std::filesystem::exists(path));
  EXPECT_TRUE(std::isnan(load_weights(path.string()).head.match_b));
  std::filesystem::remove(path);
}

TEST(Train, EmptyDatasetRejected) {
  EXPECT_THROW(train({}, ModelParams::random(ModelConfig::compact(8, 8, 1, 2), 1), TrainConfig{}), Error);
}

TEST(Train, LossCsvFormat) {
  const auto path = std::filesystem::temp_directory_path() / "dglue_loss.csv";
  const std::vector<double> curve{1.5, 0.25};
  write_loss_csv(path.string(), curve);
  std::ifstream f(path);
  std::string all((std::istreambuf_iterator<char>(f)), {});
  EXPECT_EQ(all, "step,loss\n1,1.5\n2,0.25\n");
  std::filesystem::remove(path);
}
