#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "dglue/error.hpp"
#include "layers.hpp"

namespace dglue {
namespace detail {

Eigen::MatrixXd attention_forward(const Eigen::MatrixXd& x, const EdgeView& view,
                                  const BranchParams& p, int num_heads, AttentionTape* tape) {
  const Eigen::Index dim = x.rows();
  const Eigen::Index nodes = x.cols();
  const int hd = static_cast<int>(dim / num_heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const Eigen::Index num_edges = static_cast<Eigen::Index>(view.edges.size());

  AttentionTape local;
  AttentionTape& t = tape ? *tape : local;
  t.query.noalias() = p.query * x;
  t.key.noalias() = p.key * x;
  t.value.noalias() = p.value * x;
  const bool with_edges = view.features != nullptr;
  if (with_edges) {
    t.edge_key.noalias() = p.edge_key * (*view.features);
    t.edge_value.noalias() = p.edge_value * (*view.features);
  } else {
    t.edge_key.resize(0, 0);
    t.edge_value.resize(0, 0);
  }
  t.alpha.resize(num_heads, num_edges);

  Eigen::MatrixXd out(dim, nodes);
  out.noalias() = p.skip * x;

  std::vector<double> logits;
  for (Eigen::Index i = 0; i < nodes; ++i) {
    const int begin = view.offsets[i];
    const int end = view.offsets[i + 1];
    if (begin == end) continue;
    logits.resize(end - begin);
    for (int h = 0; h < num_heads; ++h) {
      const double* q = t.query.col(i).data() + h * hd;
      double max_logit = -std::numeric_limits<double>::infinity();
      for (int e = begin; e < end; ++e) {
        const double* k = t.key.col(view.edges[e].dst).data() + h * hd;
        double s = 0.0;
        if (with_edges) {
          const double* ke = t.edge_key.col(e).data() + h * hd;
          for (int c = 0; c < hd; ++c) s += q[c] * (k[c] + ke[c]);
        } else {
          for (int c = 0; c < hd; ++c) s += q[c] * k[c];
        }
        s *= inv_sqrt;
        logits[e - begin] = s;
        max_logit = std::max(max_logit, s);
      }
      double z = 0.0;
      for (auto& l : logits) {
        l = std::exp(l - max_logit);
        z += l;
      }
      double* o = out.col(i).data() + h * hd;
      for (int e = begin; e < end; ++e) {
        const double a = logits[e - begin] / z;
        t.alpha(h, e) = a;
        const double* v = t.value.col(view.edges[e].dst).data() + h * hd;
        if (with_edges) {
          const double* ve = t.edge_value.col(e).data() + h * hd;
          for (int c = 0; c < hd; ++c) o[c] += a * (v[c] + ve[c]);
        } else {
          for (int c = 0; c < hd; ++c) o[c] += a * v[c];
        }
      }
    }
  }
  return out;
}

void attention_backward(const Eigen::MatrixXd& x, const EdgeView& view, const BranchParams& p,
                        int num_heads, const AttentionTape& t, const Eigen::MatrixXd& d_out,
                        BranchParams& grad, Eigen::MatrixXd& dx) {
  const Eigen::Index dim = x.rows();
  const Eigen::Index nodes = x.cols();
  const int hd = static_cast<int>(dim / num_heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool with_edges = view.features != nullptr;
  const Eigen::Index num_edges = static_cast<Eigen::Index>(view.edges.size());

  Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(dim, nodes);
  Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(dim, nodes);
  Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(dim, nodes);
  Eigen::MatrixXd dke, dve;
  if (with_edges) {
    dke.setZero(dim, num_edges);
    dve.setZero(dim, num_edges);
  }

  std::vector<double> d_alpha;
  for (Eigen::Index i = 0; i < nodes; ++i) {
    const int begin = view.offsets[i];
    const int end = view.offsets[i + 1];
    if (begin == end) continue;
    d_alpha.resize(end - begin);
    for (int h = 0; h < num_heads; ++h) {
      const double* g = d_out.col(i).data() + h * hd;
      double weighted = 0.0;
      for (int e = begin; e < end; ++e) {
        const int j = view.edges[e].dst;
        const double a = t.alpha(h, e);
        const double* v = t.value.col(j).data() + h * hd;
        double* dvj = dv.col(j).data() + h * hd;
        double da = 0.0;
        if (with_edges) {
          const double* ve = t.edge_value.col(e).data() + h * hd;
          double* dvee = dve.col(e).data() + h * hd;
          for (int c = 0; c < hd; ++c) {
            da += g[c] * (v[c] + ve[c]);
            dvj[c] += a * g[c];
            dvee[c] += a * g[c];
          }
        } else {
          for (int c = 0; c < hd; ++c) {
            da += g[c] * v[c];
            dvj[c] += a * g[c];
          }
        }
        d_alpha[e - begin] = da;
        weighted += a * da;
      }
      const double* q = t.query.col(i).data() + h * hd;
      double* dqi = dq.col(i).data() + h * hd;
      for (int e = begin; e < end; ++e) {
        const int j = view.edges[e].dst;
        const double dl = t.alpha(h, e) * (d_alpha[e - begin] - weighted) * inv_sqrt;
        const double* k = t.key.col(j).data() + h * hd;
        double* dkj = dk.col(j).data() + h * hd;
        if (with_edges) {
          const double* ke = t.edge_key.col(e).data() + h * hd;
          double* dkee = dke.col(e).data() + h * hd;
          for (int c = 0; c < hd; ++c) {
            dqi[c] += dl * (k[c] + ke[c]);
            dkj[c] += dl * q[c];
            dkee[c] += dl * q[c];
          }
        } else {
          for (int c = 0; c < hd; ++c) {
            dqi[c] += dl * k[c];
            dkj[c] += dl * q[c];
          }
        }
      }
    }
  }

  grad.skip.noalias() += d_out * x.transpose();
  grad.query.noalias() += dq * x.transpose();
  grad.key.noalias() += dk * x.transpose();
  grad.value.noalias() += dv * x.transpose();
  dx.noalias() += p.skip.transpose() * d_out;
  dx.noalias() += p.query.transpose() * dq;
  dx.noalias() += p.key.transpose() * dk;
  dx.noalias() += p.value.transpose() * dv;
  if (with_edges) {
    grad.edge_key.noalias() += dke * view.features->transpose();
    grad.edge_value.noalias() += dve * view.features->transpose();
  }
}

Eigen::MatrixXd mlp_forward(const Eigen::MatrixXd& input, const BranchParams& p, MlpTape* tape) {
  const std::size_t layers = p.mlp_weights.size();
  if (tape) {
    tape->input = input;
    tape->hidden.resize(layers - 1);
  }
  Eigen::MatrixXd h = input;
  for (std::size_t l = 0; l < layers; ++l) {
    Eigen::MatrixXd z = p.mlp_weights[l] * h;
    z.colwise() += p.mlp_biases[l];
    if (l + 1 < layers) {
      z = z.cwiseMax(0.0);
      if (tape) tape->hidden[l] = z;
    }
    h = std::move(z);
  }
  return h;
}

void mlp_backward(const BranchParams& p, const MlpTape& tape, const Eigen::MatrixXd& d_out,
                  BranchParams& grad, Eigen::MatrixXd& d_input) {
  const std::size_t layers = p.mlp_weights.size();
  Eigen::MatrixXd d = d_out;
  for (std::size_t l = layers; l-- > 0;) {
    const Eigen::MatrixXd& prev = l == 0 ? tape.input : tape.hidden[l - 1];
    grad.mlp_weights[l].noalias() += d * prev.transpose();
    grad.mlp_biases[l] += d.rowwise().sum();
    Eigen::MatrixXd d_prev = p.mlp_weights[l].transpose() * d;
    if (l > 0) {
      // ReLU: gradient passes where the activation is positive.
      d_prev = (tape.hidden[l - 1].array() > 0.0).select(d_prev, 0.0);
    }
    d = std::move(d_prev);
  }
  d_input = std::move(d);
}

Eigen::MatrixXd pairnorm_forward(const Eigen::MatrixXd& y, double scale, PairNormTape* tape) {
  const Eigen::Index n = y.cols();
  Eigen::MatrixXd centered = y.colwise() - y.rowwise().mean();
  const double norm = centered.norm();
  const bool degenerate = !(norm > 1e-12 * std::max(1.0, y.norm()));
  Eigen::MatrixXd out;
  if (degenerate) {
    out = Eigen::MatrixXd::Zero(y.rows(), n);
  } else {
    out = centered * (scale * std::sqrt(static_cast<double>(n)) / norm);
  }
  if (tape) {
    tape->centered = std::move(centered);
    tape->norm = norm;
    tape->degenerate = degenerate;
  }
  return out;
}

void pairnorm_backward(const PairNormTape& tape, double scale, const Eigen::MatrixXd& d_out,
                       double& d_scale, Eigen::MatrixXd& d_y) {
  if (tape.degenerate) {
    d_y = Eigen::MatrixXd::Zero(d_out.rows(), d_out.cols());
    return;
  }
  const double sqrt_n = std::sqrt(static_cast<double>(d_out.cols()));
  const double inner = (d_out.array() * tape.centered.array()).sum();
  d_scale += sqrt_n * inner / tape.norm;
  const double c = scale * sqrt_n / tape.norm;
  Eigen::MatrixXd d_centered =
      c * (d_out - (inner / (tape.norm * tape.norm)) * tape.centered);
  d_y = d_centered.colwise() - d_centered.rowwise().mean();
}

Eigen::MatrixXd branch_forward(const Eigen::MatrixXd& x, const EdgeView& view,
                               const BranchParams& p, int num_heads, BranchTape* tape) {
  const Eigen::Index dim = x.rows();
  Eigen::MatrixXd msg = attention_forward(x, view, p, num_heads, tape ? &tape->attention : nullptr);
  Eigen::MatrixXd mlp_in(2 * dim, x.cols());
  mlp_in.topRows(dim) = x;
  mlp_in.bottomRows(dim) = msg;
  Eigen::MatrixXd y = x + mlp_forward(mlp_in, p, tape ? &tape->mlp : nullptr);
  if (tape) tape->input = x;
  return pairnorm_forward(y, p.norm_scale, tape ? &tape->norm : nullptr);
}

void branch_backward(const EdgeView& view, const BranchParams& p, int num_heads,
                     const BranchTape& tape, const Eigen::MatrixXd& d_out, BranchParams& grad,
                     Eigen::MatrixXd& dx) {
  const Eigen::Index dim = tape.input.rows();
  Eigen::MatrixXd d_y;
  pairnorm_backward(tape.norm, p.norm_scale, d_out, grad.norm_scale, d_y);
  Eigen::MatrixXd d_in;
  mlp_backward(p, tape.mlp, d_y, grad, d_in);
  dx = d_y + d_in.topRows(dim);
  const Eigen::MatrixXd d_msg = d_in.bottomRows(dim);
  attention_backward(tape.input, view, p, num_heads, tape.attention, d_msg, grad, dx);
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

Eigen::MatrixXd self_aggregate(const Eigen::MatrixXd& embeddings, const PairGraph& graph,
                               const BranchParams& params, int num_heads) {
  return detail::attention_forward(embeddings, detail::self_view(graph), params, num_heads,
                                   nullptr);
}

Eigen::MatrixXd cross_aggregate(const Eigen::MatrixXd& embeddings, const PairGraph& graph,
                                const BranchParams& params, int num_heads) {
  if (!params.has_edge_maps()) {
    throw Error(ErrorKind::ShapeMismatch, "cross aggregation needs edge feature maps");
  }
  return detail::attention_forward(embeddings, detail::cross_view(graph), params, num_heads,
                                   nullptr);
}

PairNormResult pairnorm(const Eigen::MatrixXd& embeddings, double scale) {
  if (embeddings.cols() < 2) {
    throw Error(ErrorKind::ShapeMismatch, "pairnorm needs at least 2 nodes");
  }
  detail::PairNormTape tape;
  PairNormResult r;
  r.embeddings = detail::pairnorm_forward(embeddings, scale, &tape);
  r.degenerate = tape.degenerate;
  return r;
}

}  // namespace dglue
