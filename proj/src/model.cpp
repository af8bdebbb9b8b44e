#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>

#include "dglue/error.hpp"
#include "dglue/model.hpp"
#include "layers.hpp"

namespace dglue {

ModelConfig ModelConfig::compact(int descriptor_dim, int embed_dim, int num_rounds,
                                 int num_heads) {
  ModelConfig c;
  c.descriptor_dim = descriptor_dim;
  c.embed_dim = embed_dim;
  c.num_rounds = num_rounds;
  c.num_heads = num_heads;
  c.mlp_dims = {2 * embed_dim, 2 * embed_dim, embed_dim};
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::InvalidConfig, msg); };
  if (descriptor_dim < 1) fail("descriptor_dim must be >= 1");
  if (embed_dim < 1) fail("embed_dim must be >= 1");
  if (num_rounds < 0) fail("num_rounds must be >= 0");
  if (num_heads < 1 || embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (mlp_dims.empty()) fail("mlp needs at least one layer");
  for (int d : mlp_dims) {
    if (d < 1) fail("mlp dims must be positive");
  }
  if (mlp_dims.back() != embed_dim) fail("last mlp dim must equal embed_dim");
  if (!std::isfinite(assign_threshold)) fail("assign_threshold must be finite");
  if (!std::isfinite(pairnorm_scale)) fail("pairnorm_scale must be finite");
}

bool ModelConfig::same_shape(const ModelConfig& o) const {
  return descriptor_dim == o.descriptor_dim && embed_dim == o.embed_dim &&
         num_rounds == o.num_rounds && num_heads == o.num_heads && mlp_dims == o.mlp_dims;
}

namespace {

BranchParams zero_branch(const ModelConfig& cfg, bool cross) {
  const int d = cfg.embed_dim;
  BranchParams p;
  p.skip = Eigen::MatrixXd::Zero(d, d);
  p.value = Eigen::MatrixXd::Zero(d, d);
  p.query = Eigen::MatrixXd::Zero(d, d);
  p.key = Eigen::MatrixXd::Zero(d, d);
  if (cross) {
    p.edge_value = Eigen::MatrixXd::Zero(d, kEdgeFeatureDim);
    p.edge_key = Eigen::MatrixXd::Zero(d, kEdgeFeatureDim);
  }
  int in = 2 * d;
  for (int out : cfg.mlp_dims) {
    p.mlp_weights.push_back(Eigen::MatrixXd::Zero(out, in));
    p.mlp_biases.push_back(Eigen::VectorXd::Zero(out));
    in = out;
  }
  p.norm_scale = 0.0;
  return p;
}

}  // namespace

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.embed_dim;
  ModelParams p;
  p.config = cfg;
  if (cfg.descriptor_dim != d) {
    p.input_proj = Eigen::MatrixXd::Zero(d, cfg.descriptor_dim);
    p.input_bias = Eigen::VectorXd::Zero(d);
  }
  p.rounds.resize(cfg.num_rounds);
  for (auto& r : p.rounds) {
    r.self = zero_branch(cfg, false);
    r.cross = zero_branch(cfg, true);
  }
  p.head.proj_a = Eigen::MatrixXd::Zero(d, d);
  p.head.bias_a = Eigen::VectorXd::Zero(d);
  p.head.proj_b = Eigen::MatrixXd::Zero(d, d);
  p.head.bias_b = Eigen::VectorXd::Zero(d);
  p.head.match_w = Eigen::RowVectorXd::Zero(d);
  p.head.match_b = 0.0;
  return p;
}

ModelParams ModelParams::random(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = zeros(cfg);
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Eigen::Ref<Eigen::MatrixXd> m, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = u(rng);
  };
  const int d = cfg.embed_dim;
  if (p.input_proj.size() > 0) {
    fill(p.input_proj, cfg.descriptor_dim);
    fill(p.input_bias, cfg.descriptor_dim);
  }
  for (auto& r : p.rounds) {
    for (BranchParams* b : {&r.self, &r.cross}) {
      fill(b->skip, d);
      fill(b->value, d);
      fill(b->query, d);
      fill(b->key, d);
      if (b->has_edge_maps()) {
        fill(b->edge_value, kEdgeFeatureDim);
        fill(b->edge_key, kEdgeFeatureDim);
      }
      for (std::size_t l = 0; l < b->mlp_weights.size(); ++l) {
        const int fan_in = static_cast<int>(b->mlp_weights[l].cols());
        fill(b->mlp_weights[l], fan_in);
        fill(b->mlp_biases[l], fan_in);
      }
      b->norm_scale = cfg.pairnorm_scale;
    }
  }
  fill(p.head.proj_a, d);
  fill(p.head.bias_a, d);
  fill(p.head.proj_b, d);
  fill(p.head.bias_b, d);
  fill(p.head.match_w, d);
  Eigen::Matrix<double, 1, 1> mb;
  fill(mb, d);
  p.head.match_b = mb(0, 0);
  return p;
}

std::size_t ModelParams::num_scalars() const {
  std::size_t n = 0;
  visit([&n](const std::string&, const double*, Eigen::Index r, Eigen::Index c) {
    n += static_cast<std::size_t>(r * c);
  });
  return n;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  visit([&ok](const std::string&, const double* data, Eigen::Index r, Eigen::Index c) {
    for (Eigen::Index i = 0; i < r * c; ++i) ok = ok && std::isfinite(data[i]);
  });
  return ok;
}

Eigen::VectorXd ModelParams::flatten() const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(num_scalars()));
  Eigen::Index pos = 0;
  visit([&](const std::string&, const double* data, Eigen::Index r, Eigen::Index c) {
    std::copy(data, data + r * c, out.data() + pos);
    pos += r * c;
  });
  return out;
}

void ModelParams::unflatten(const Eigen::VectorXd& flat) {
  if (flat.size() != static_cast<Eigen::Index>(num_scalars())) {
    throw Error(ErrorKind::ShapeMismatch, "flat parameter vector has the wrong length");
  }
  Eigen::Index pos = 0;
  visit([&](const std::string&, double* data, Eigen::Index r, Eigen::Index c) {
    std::copy(flat.data() + pos, flat.data() + pos + r * c, data);
    pos += r * c;
  });
}

std::vector<ScoredMatch> extract_matches(const Eigen::MatrixXd& P, double tau) {
  const Eigen::Index n = P.rows();
  const Eigen::Index m = P.cols();
  std::vector<Eigen::Index> row_best(n, -1), col_best(m, -1);
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j) {
      if (P(i, j) > best) {
        best = P(i, j);
        row_best[i] = j;
      }
    }
  }
  for (Eigen::Index j = 0; j < m; ++j) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (P(i, j) > best) {
        best = P(i, j);
        col_best[j] = i;
      }
    }
  }
  std::vector<ScoredMatch> out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index j = row_best[i];
    if (j >= 0 && col_best[j] == i && P(i, j) > tau) {
      out.push_back({static_cast<int>(i), static_cast<int>(j), P(i, j)});
    }
  }
  return out;
}

namespace detail {

void check_shapes(const PairGraph& graph, const ModelParams& params, const ModelConfig& cfg) {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::ShapeMismatch, msg); };
  cfg.validate();
  if (!params.config.same_shape(cfg)) fail("model parameters do not match the model config");
  if (graph.descriptor_dim() != cfg.descriptor_dim) {
    fail("graph descriptors have dim " + std::to_string(graph.descriptor_dim()) +
         ", model expects " + std::to_string(cfg.descriptor_dim));
  }
  if (graph.num_a < 1 || graph.num_b < 1) fail("graph needs nodes in both images");
  const std::size_t n = static_cast<std::size_t>(graph.num_nodes());
  if (graph.self_offsets.size() != n + 1 || graph.cross_offsets.size() != n + 1) {
    fail("graph edges are not indexed");
  }
  const int d = cfg.embed_dim;
  if (static_cast<int>(params.rounds.size()) != cfg.num_rounds) fail("round count mismatch");
  if ((cfg.descriptor_dim != d) &&
      (params.input_proj.rows() != d || params.input_proj.cols() != cfg.descriptor_dim ||
       params.input_bias.size() != d)) {
    fail("input projection has the wrong shape");
  }
  for (const auto& r : params.rounds) {
    for (const BranchParams* b : {&r.self, &r.cross}) {
      for (const Eigen::MatrixXd* w : {&b->skip, &b->value, &b->query, &b->key}) {
        if (w->rows() != d || w->cols() != d) fail("attention matrix has the wrong shape");
      }
      if (b->mlp_weights.size() != cfg.mlp_dims.size()) fail("mlp depth mismatch");
    }
    if (r.cross.edge_key.rows() != d || r.cross.edge_key.cols() != kEdgeFeatureDim ||
        r.cross.edge_value.rows() != d || r.cross.edge_value.cols() != kEdgeFeatureDim) {
      fail("edge feature maps have the wrong shape");
    }
  }
  if (params.head.proj_a.rows() != d || params.head.proj_b.rows() != d ||
      params.head.match_w.size() != d) {
    fail("assignment head has the wrong shape");
  }
}

void head_forward(const Eigen::MatrixXd& x, int num_a, const HeadParams& head, MatchResult& out,
                  HeadTape* tape) {
  const Eigen::Index nodes = x.cols();
  const Eigen::Index num_b = nodes - num_a;
  Eigen::MatrixXd pa = head.proj_a * x.leftCols(num_a);
  pa.colwise() += head.bias_a;
  Eigen::MatrixXd pb = head.proj_b * x.rightCols(num_b);
  pb.colwise() += head.bias_b;
  const Eigen::MatrixXd S = pa.transpose() * pb;

  // Column softmax over A (rows) and row softmax over B (columns).
  const Eigen::RowVectorXd col_max = S.colwise().maxCoeff();
  const Eigen::VectorXd row_max = S.rowwise().maxCoeff();
  const Eigen::MatrixXd col_exp = (S.rowwise() - col_max).array().exp().matrix();
  const Eigen::MatrixXd row_exp = (S.colwise() - row_max).array().exp().matrix();
  const Eigen::RowVectorXd col_lse =
      col_max.array() + col_exp.colwise().sum().array().log();
  const Eigen::VectorXd row_lse = row_max.array() + row_exp.rowwise().sum().array().log();

  const Eigen::RowVectorXd z =
      (head.match_w * x).array() + head.match_b;
  out.sigma.resize(nodes);
  out.log_sigma.resize(nodes);
  out.log_one_minus_sigma.resize(nodes);
  for (Eigen::Index o = 0; o < nodes; ++o) {
    out.log_sigma(o) = -softplus(-z(o));
    out.log_one_minus_sigma(o) = -softplus(z(o));
    out.sigma(o) = std::exp(out.log_sigma(o));
  }

  out.log_P.resize(num_a, num_b);
  for (Eigen::Index j = 0; j < num_b; ++j) {
    for (Eigen::Index i = 0; i < num_a; ++i) {
      out.log_P(i, j) = out.log_sigma(i) + out.log_sigma(num_a + j) + (S(i, j) - col_lse(j)) +
                        (S(i, j) - row_lse(i));
    }
  }
  out.P = out.log_P.array().exp().matrix();

  if (tape) {
    tape->embeddings = x;
    tape->proj_a = std::move(pa);
    tape->proj_b = std::move(pb);
    tape->col_softmax = (S.rowwise() - col_lse).array().exp().matrix();
    tape->row_softmax = (S.colwise() - row_lse).array().exp().matrix();
    tape->sigma = out.sigma;
  }
}

void head_backward(const HeadParams& head, int num_a, const HeadTape& tape,
                   const Eigen::MatrixXd& d_log_p, const Eigen::VectorXd& d_log_sigma,
                   const Eigen::VectorXd& d_log_one_minus, HeadParams& grad, Eigen::MatrixXd& dx) {
  const Eigen::MatrixXd& x = tape.embeddings;
  const Eigen::Index nodes = x.cols();
  const Eigen::Index num_b = nodes - num_a;

  const Eigen::RowVectorXd col_sum = d_log_p.colwise().sum();
  const Eigen::VectorXd row_sum = d_log_p.rowwise().sum();
  Eigen::MatrixXd dS = 2.0 * d_log_p;
  dS -= (tape.col_softmax.array().rowwise() * col_sum.array()).matrix();
  dS -= (tape.row_softmax.array().colwise() * row_sum.array()).matrix();

  Eigen::VectorXd dls = d_log_sigma;
  dls.head(num_a) += row_sum;
  dls.tail(num_b) += col_sum.transpose();
  Eigen::RowVectorXd dz(nodes);
  for (Eigen::Index o = 0; o < nodes; ++o) {
    dz(o) = dls(o) * (1.0 - tape.sigma(o)) - d_log_one_minus(o) * tape.sigma(o);
  }
  grad.match_w.noalias() += dz * x.transpose();
  grad.match_b += dz.sum();
  dx.noalias() += head.match_w.transpose() * dz;

  const Eigen::MatrixXd d_pa = tape.proj_b * dS.transpose();
  const Eigen::MatrixXd d_pb = tape.proj_a * dS;
  grad.proj_a.noalias() += d_pa * x.leftCols(num_a).transpose();
  grad.bias_a += d_pa.rowwise().sum();
  grad.proj_b.noalias() += d_pb * x.rightCols(num_b).transpose();
  grad.bias_b += d_pb.rowwise().sum();
  dx.leftCols(num_a).noalias() += head.proj_a.transpose() * d_pa;
  dx.rightCols(num_b).noalias() += head.proj_b.transpose() * d_pb;
}

MatchResult forward_impl(const PairGraph& graph, const ModelParams& params,
                         const ModelConfig& cfg, ForwardTape* tape) {
  check_shapes(graph, params, cfg);
  Eigen::MatrixXd x;
  if (params.input_proj.size() > 0) {
    x = params.input_proj * graph.descriptors;
    x.colwise() += params.input_bias;
  } else {
    x = graph.descriptors;
  }
  if (tape) {
    tape->initial = x;
    tape->branches.assign(2 * params.rounds.size(), BranchTape{});
  }
  MatchResult out;
  const EdgeView self_edges = self_view(graph);
  const EdgeView cross_edges = cross_view(graph);
  for (std::size_t r = 0; r < params.rounds.size(); ++r) {
    BranchTape* ts = tape ? &tape->branches[2 * r] : nullptr;
    BranchTape* tc = tape ? &tape->branches[2 * r + 1] : nullptr;
    BranchTape local_s, local_c;
    x = branch_forward(x, self_edges, params.rounds[r].self, cfg.num_heads, ts ? ts : &local_s);
    x = branch_forward(x, cross_edges, params.rounds[r].cross, cfg.num_heads, tc ? tc : &local_c);
    out.degenerate_norms += (ts ? ts : &local_s)->norm.degenerate;
    out.degenerate_norms += (tc ? tc : &local_c)->norm.degenerate;
  }
  head_forward(x, graph.num_a, params.head, out, tape ? &tape->head : nullptr);
  out.matches = extract_matches(out.P, cfg.assign_threshold);
  out.embeddings = std::move(x);
  return out;
}

}  // namespace detail

MatchResult assignment_head(const Eigen::MatrixXd& embeddings, int num_a, const HeadParams& head,
                            double tau) {
  if (num_a < 1 || num_a >= embeddings.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "assignment head needs nodes in both images");
  }
  MatchResult out;
  detail::head_forward(embeddings, num_a, head, out, nullptr);
  out.matches = extract_matches(out.P, tau);
  out.embeddings = embeddings;
  return out;
}

MatchResult forward(const PairGraph& graph, const ModelParams& params, const ModelConfig& cfg) {
  return detail::forward_impl(graph, params, cfg, nullptr);
}

}  // namespace dglue
