#pragma once

// Straight-line reimplementation of the matcher and its loss, templated on
// the scalar type. Used as an oracle for the library forward pass and, in
// long double, for finite-difference gradient checks whose round-off stays
// far below the tolerance.

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "dglue/graph.hpp"
#include "dglue/model.hpp"
#include "dglue/trainer.hpp"

namespace oracle {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

// Parameter blocks in weights-file order, optionally with one scalar nudged.
template <class T>
struct Blocks {
  std::vector<Mat<T>> blocks;
  std::size_t pos = 0;
  const Mat<T>& next() { return blocks.at(pos++); }
};

template <class T>
Blocks<T> to_blocks(const dglue::ModelParams& p) {
  Blocks<T> out;
  p.visit([&](const std::string&, const double* d, Eigen::Index r, Eigen::Index c) {
    Mat<T> m(r, c);
    for (Eigen::Index i = 0; i < r * c; ++i) m.data()[i] = static_cast<T>(d[i]);
    out.blocks.push_back(std::move(m));
  });
  return out;
}

// Adds delta to scalar `flat_index` (visit order).
template <class T>
void nudge(Blocks<T>& b, std::size_t flat_index, T delta) {
  for (auto& m : b.blocks) {
    const auto n = static_cast<std::size_t>(m.size());
    if (flat_index < n) {
      m.data()[flat_index] += delta;
      return;
    }
    flat_index -= n;
  }
}

// Block holding scalar `flat_index` (visit order).
template <class T>
std::size_t block_of(const Blocks<T>& b, std::size_t flat_index) {
  for (std::size_t k = 0; k < b.blocks.size(); ++k) {
    const auto n = static_cast<std::size_t>(b.blocks[k].size());
    if (flat_index < n) return k;
    flat_index -= n;
  }
  return b.blocks.size();
}

template <class T>
struct Output {
  Mat<T> log_p;                   // num_a x num_b
  std::vector<T> log_one_minus;   // per node
};

template <class T>
Mat<T> relu(const Mat<T>& m) {
  return m.unaryExpr([](T v) { return v > T(0) ? v : T(0); });
}

template <class T>
Mat<T> branch(const Mat<T>& x, const std::vector<dglue::Edge>& edges,
              const dglue::EdgeFeatures* feats, Blocks<T>& b, int heads, int mlp_layers) {
  using std::exp;
  using std::sqrt;
  const Mat<T> skip = b.next(), value = b.next(), query = b.next(), key = b.next();
  Mat<T> ev, ek;
  if (feats) {
    ev = b.next();
    ek = b.next();
  }
  std::vector<Mat<T>> w, bias;
  for (int l = 0; l < mlp_layers; ++l) {
    w.push_back(b.next());
    bias.push_back(b.next());
  }
  const T scale = b.next()(0, 0);

  const int d = static_cast<int>(x.rows());
  const int n = static_cast<int>(x.cols());
  const int hd = d / heads;
  Mat<T> msg = skip * x;
  const Mat<T> q = query * x, k = key * x, v = value * x;
  Mat<T> edge_k, edge_v;
  if (feats) {
    const Mat<T> f = feats->template cast<T>();
    edge_k = ek * f;
    edge_v = ev * f;
  }
  std::vector<std::vector<int>> by_src(n);
  for (std::size_t e = 0; e < edges.size(); ++e) by_src[edges[e].src].push_back(static_cast<int>(e));
  const T norm = sqrt(static_cast<T>(hd));
  for (int i = 0; i < n; ++i) {
    for (int h = 0; h < heads; ++h) {
      std::vector<T> score;
      T z = 0;
      for (int e : by_src[i]) {
        T dot = 0;
        for (int c = h * hd; c < (h + 1) * hd; ++c) {
          dot += q(c, i) * (k(c, edges[e].dst) + (feats ? edge_k(c, e) : T(0)));
        }
        score.push_back(exp(dot / norm));
        z += score.back();
      }
      for (std::size_t m = 0; m < score.size(); ++m) {
        const int e = by_src[i][m];
        for (int c = h * hd; c < (h + 1) * hd; ++c) {
          msg(c, i) += score[m] / z * (v(c, edges[e].dst) + (feats ? edge_v(c, e) : T(0)));
        }
      }
    }
  }
  Mat<T> hcur(2 * d, n);
  hcur.topRows(d) = x;
  hcur.bottomRows(d) = msg;
  for (int l = 0; l < mlp_layers; ++l) {
    Mat<T> z = w[l] * hcur;
    for (int c = 0; c < n; ++c) z.col(c) += bias[l];
    hcur = l + 1 < mlp_layers ? relu<T>(z) : z;
  }
  const Mat<T> y = x + hcur;
  Mat<T> mean = Mat<T>::Zero(d, 1);
  for (int c = 0; c < n; ++c) mean += y.col(c);
  mean /= static_cast<T>(n);
  Mat<T> centered = y;
  for (int c = 0; c < n; ++c) centered.col(c) -= mean;
  T sq = 0;
  for (Eigen::Index i = 0; i < centered.size(); ++i) sq += centered.data()[i] * centered.data()[i];
  return centered * (scale * sqrt(static_cast<T>(n)) / sqrt(sq));
}

// Per branch (and finally the head): the first parameter block it reads and
// the embeddings it receives, so a nudged parameter can resume from there.
template <class T>
struct Trace {
  std::vector<std::size_t> first_block;
  std::vector<Mat<T>> input;
};

// With `start` > 0, `b.pos` must point at that stage's first block and
// `x_start` holds its input.
template <class T>
Output<T> forward(const dglue::PairGraph& g, const dglue::ModelConfig& cfg, Blocks<T> b,
                  Trace<T>* trace = nullptr, int start = 0, const Mat<T>* x_start = nullptr) {
  using std::exp;
  using std::log;
  Mat<T> x;
  if (start > 0) {
    x = *x_start;
  } else {
    x = g.descriptors.cast<T>();
    if (cfg.descriptor_dim != cfg.embed_dim) {
      const Mat<T> w = b.next(), bias = b.next();
      x = w * x;
      for (int c = 0; c < x.cols(); ++c) x.col(c) += bias;
    }
  }
  auto record = [&]() {
    if (!trace) return;
    trace->first_block.push_back(b.pos);
    trace->input.push_back(x);
  };
  const int layers = static_cast<int>(cfg.mlp_dims.size());
  for (int r = 0; r < cfg.num_rounds; ++r) {
    if (2 * r >= start) {
      record();
      x = branch<T>(x, g.self_edges, nullptr, b, cfg.num_heads, layers);
    }
    if (2 * r + 1 >= start) {
      record();
      x = branch<T>(x, g.cross_edges, &g.cross_edge_features, b, cfg.num_heads, layers);
    }
  }
  record();
  const Mat<T> pa = b.next(), ba = b.next(), pb = b.next(), bb = b.next(), mw = b.next();
  const T mb = b.next()(0, 0);

  const int na = g.num_a, nb = g.num_b;
  Mat<T> fa = pa * x.leftCols(na), fb = pb * x.rightCols(nb);
  for (int c = 0; c < na; ++c) fa.col(c) += ba;
  for (int c = 0; c < nb; ++c) fb.col(c) += bb;
  const Mat<T> s = fa.transpose() * fb;

  Output<T> out;
  std::vector<T> log_sigma(na + nb);
  for (int o = 0; o < na + nb; ++o) {
    const T z = (mw * x.col(o))(0, 0) + mb;
    const T sigma = T(1) / (T(1) + exp(-z));
    log_sigma[o] = log(sigma);
    out.log_one_minus.push_back(log(T(1) - sigma));
  }
  out.log_p.resize(na, nb);
  for (int i = 0; i < na; ++i) {
    for (int j = 0; j < nb; ++j) {
      T col = 0, row = 0;
      for (int k = 0; k < na; ++k) col += exp(s(k, j));
      for (int k = 0; k < nb; ++k) row += exp(s(i, k));
      out.log_p(i, j) = log_sigma[i] + log_sigma[na + j] + log(exp(s(i, j)) / col) +
                        log(exp(s(i, j)) / row);
    }
  }
  return out;
}

template <class T>
T loss(const Output<T>& o, const dglue::LabelBatch& labels, int num_a) {
  T lm = 0, la = 0, lb = 0;
  for (const auto& m : labels.matches) lm += o.log_p(m.a, m.b);
  for (int i : labels.unmatched_a) la += o.log_one_minus[i];
  for (int j : labels.unmatched_b) lb += o.log_one_minus[num_a + j];
  T total = 0;
  if (!labels.matches.empty()) total += lm / static_cast<T>(labels.matches.size());
  if (!labels.unmatched_a.empty()) total += la / (T(2) * static_cast<T>(labels.unmatched_a.size()));
  if (!labels.unmatched_b.empty()) total += lb / (T(2) * static_cast<T>(labels.unmatched_b.size()));
  return -total;
}

}  // namespace oracle
