#pragma once

// Discrete dependency-graph learning.
//
//   G^i   = FC(vec(Conv(S^i_train)))            global feature, one per node
//   Z^i   = relu(FC(H^i)) + G^i                  H^i: concatenated patch representations
//   Θ_ij  = FC(relu(FC(Z^i ∥ Z^j))) ∈ R²         unnormalized (edge, no-edge) scores
//   A_ij  = softmax((Θ_ij + g) / τ)[edge]         g ~ Gumbel(0, 1), i.i.d.
//
// Θ′_ij = softmax(Θ_ij)[edge] is regularized towards a kNN graph with binary
// cross-entropy. A_ij = 1 means node j feeds node i.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "step/data.hpp"
#include "step/error.hpp"
#include "step/io.hpp"
#include "step/nn.hpp"
#include "step/rng.hpp"
#include "step/tensor.hpp"
#include "step/tsformer.hpp"

namespace step::graph {

/// Coordinate of Θ_ij holding the edge score.
inline constexpr std::size_t kEdge = 0;

enum class SimilaritySource { kRepresentations, kRawSeries };

inline std::string source_name(SimilaritySource s) {
  return s == SimilaritySource::kRepresentations ? "representations" : "raw";
}

inline SimilaritySource similarity_source_from_string(const std::string& s) {
  if (s == "representations") return SimilaritySource::kRepresentations;
  if (s == "raw") return SimilaritySource::kRawSeries;
  throw ConfigError("graph: unknown similarity source '" + s + "' (expected representations or raw)");
}

struct GraphLearnerConfig {
  std::size_t k = 10;
  std::size_t d_g = 32;
  std::size_t hidden = 32;  ///< pairwise head hidden width
  std::size_t conv_channels = 8;
  std::size_t conv_kernel1 = 12;  ///< stride equals kernel
  std::size_t conv_kernel2 = 4;
  double tau = 0.5;
  bool anneal = false;  ///< linear τ from tau_start to tau_end over training
  double tau_start = 1.0, tau_end = 0.1;
  SimilaritySource source = SimilaritySource::kRepresentations;

  void validate() const {
    if (k == 0) throw ConfigError("graph: k must be at least 1");
    if (d_g == 0 || hidden == 0 || conv_channels == 0) throw ConfigError("graph: widths must be positive");
    if (conv_kernel1 == 0 || conv_kernel2 == 0) throw ConfigError("graph: conv kernels must be positive");
    if (!(tau > 0) || !(tau_start > 0) || !(tau_end > 0)) throw ConfigError("graph: temperatures must be positive");
  }

  json to_json() const {
    return {{"k", k}, {"d_g", d_g}, {"hidden", hidden}, {"conv_channels", conv_channels},
            {"conv_kernel1", conv_kernel1}, {"conv_kernel2", conv_kernel2}, {"tau", tau}, {"anneal", anneal},
            {"tau_start", tau_start}, {"tau_end", tau_end}, {"source", source_name(source)}};
  }

  static GraphLearnerConfig from_json(const json& j) {
    const std::string where = "graph config";
    io::check_keys(j, {"k", "d_g", "hidden", "conv_channels", "conv_kernel1", "conv_kernel2", "tau", "anneal",
                       "tau_start", "tau_end", "source"},
                   where);
    GraphLearnerConfig c;
    io::read_key(j, "k", c.k, where);
    io::read_key(j, "d_g", c.d_g, where);
    io::read_key(j, "hidden", c.hidden, where);
    io::read_key(j, "conv_channels", c.conv_channels, where);
    io::read_key(j, "conv_kernel1", c.conv_kernel1, where);
    io::read_key(j, "conv_kernel2", c.conv_kernel2, where);
    io::read_key(j, "tau", c.tau, where);
    io::read_key(j, "anneal", c.anneal, where);
    io::read_key(j, "tau_start", c.tau_start, where);
    io::read_key(j, "tau_end", c.tau_end, where);
    std::string src = source_name(c.source);
    io::read_key(j, "source", src, where);
    c.source = similarity_source_from_string(src);
    return c;
  }
};

/// τ for a 1-based epoch out of `epochs`.
inline double tau_at(const GraphLearnerConfig& c, std::size_t epoch, std::size_t epochs) {
  if (!c.anneal) return c.tau;
  if (epochs <= 1) return c.tau_end;
  const double f = static_cast<double>(std::min(std::max<std::size_t>(epoch, 1), epochs) - 1) /
                   static_cast<double>(epochs - 1);
  return c.tau_start + (c.tau_end - c.tau_start) * f;
}

/// The training range of every node as [N, T_train, C].
inline Tensor train_series(const data::RawDataset& ds, const data::Range& r) {
  if (r.size() == 0) throw DataError("graph: empty training range");
  Tensor out({ds.N, r.size(), ds.C});
  for (std::size_t n = 0; n < ds.N; ++n)
    for (std::size_t t = 0; t < r.size(); ++t)
      for (std::size_t c = 0; c < ds.C; ++c) out.data[(n * r.size() + t) * ds.C + c] = ds.at(r.begin + t, n, c);
  return out;
}

class GraphLearner {
 public:
  GraphLearner() = default;
  /// `series_length`: T_train; `rep_width`: P·d.
  GraphLearner(nn::ParamStore& ps, const std::string& name, const GraphLearnerConfig& cfg, std::size_t C,
               std::size_t series_length, std::size_t rep_width, Rng& rng)
      : cfg_(cfg), C_(C), T_(series_length), rep_width_(rep_width) {
    cfg.validate();
    const std::size_t ch = cfg.conv_channels;
    if (T_ < cfg.conv_kernel1) {
      throw DataError("graph: training series of " + std::to_string(T_) + " steps is shorter than the conv kernel (" +
                      std::to_string(cfg.conv_kernel1) + ")");
    }
    T1_ = (T_ - cfg.conv_kernel1) / cfg.conv_kernel1 + 1;
    if (T1_ < cfg.conv_kernel2) {
      throw DataError("graph: training series of " + std::to_string(T_) +
                      " steps is shorter than the conv receptive field (" +
                      std::to_string(cfg.conv_kernel1 * cfg.conv_kernel2) + ")");
    }
    T2_ = (T1_ - cfg.conv_kernel2) / cfg.conv_kernel2 + 1;
    conv1_ = ps.add(name + ".conv1.w",
                    nn::uniform_tensor(rng, {cfg.conv_kernel1, C, ch}, 1.0 / std::sqrt(double(cfg.conv_kernel1 * C))));
    conv1_b_ = ps.add(name + ".conv1.b", Tensor({ch}));
    conv2_ = ps.add(name + ".conv2.w",
                    nn::uniform_tensor(rng, {cfg.conv_kernel2, ch, ch}, 1.0 / std::sqrt(double(cfg.conv_kernel2 * ch))));
    conv2_b_ = ps.add(name + ".conv2.b", Tensor({ch}));
    fc_g_ = nn::Linear(ps, name + ".global", T2_ * ch, cfg.d_g, rng);
    fc_h_ = nn::Linear(ps, name + ".node", rep_width, cfg.d_g, rng);
    pair_i_ = nn::Linear(ps, name + ".pair_i", cfg.d_g, cfg.hidden, rng);
    pair_j_ = ps.add(name + ".pair_j.w", nn::uniform_tensor(rng, {cfg.d_g, cfg.hidden}, 1.0 / std::sqrt(2.0 * cfg.d_g)));
    pair_out_ = nn::Linear(ps, name + ".pair_out", cfg.hidden, 2, rng);
  }

  const GraphLearnerConfig& config() const { return cfg_; }
  std::size_t series_length() const { return T_; }
  std::size_t rep_width() const { return rep_width_; }
  nn::Linear& node_fc() { return fc_h_; }

  /// series: [N, T_train, C] → G: [N, d_g].
  Var global_features(const Var& series) const {
    const auto& s = series.shape();
    if (s.size() != 3 || s[1] != T_ || s[2] != C_) {
      throw ShapeError("global_features: expected [N," + std::to_string(T_) + "," + std::to_string(C_) + "], got " +
                       to_string(s));
    }
    Var x = relu(add_row(conv1d(series, conv1_, 1, cfg_.conv_kernel1, false), conv1_b_));
    x = relu(add_row(conv1d(x, conv2_, 1, cfg_.conv_kernel2, false), conv2_b_));
    return fc_g_(reshape(x, {s[0], T2_ * cfg_.conv_channels}));
  }

  /// H: [N, P·d], G: [N, d_g] → Z: [N, d_g].
  Var node_embeddings(const Var& H, const Var& G) const {
    if (H.shape().size() != 2 || H.dim(1) != rep_width_) {
      throw ShapeError("node_embeddings: expected [N," + std::to_string(rep_width_) + "], got " + to_string(H.shape()));
    }
    return add(relu(fc_h_(H)), G);
  }

  /// Z: [N, d_g] → Θ: [N, N, 2], Θ_ij computed from (Z^i ∥ Z^j).
  Var pairwise_logits(const Var& Z) const {
    if (Z.shape().size() != 2 || Z.dim(1) != cfg_.d_g) {
      throw ShapeError("pairwise_logits: expected [N," + std::to_string(cfg_.d_g) + "], got " + to_string(Z.shape()));
    }
    // FC(Z^i ∥ Z^j) splits into a term from i and a term from j.
    return pair_out_(relu(pair_sum(pair_i_(Z), matmul(Z, pair_j_))));
  }

  Var logits(const Var& series, const Var& H) const { return pairwise_logits(node_embeddings(H, global_features(series))); }

 private:
  GraphLearnerConfig cfg_;
  std::size_t C_ = 1, T_ = 0, rep_width_ = 0, T1_ = 0, T2_ = 0;
  Var conv1_, conv1_b_, conv2_, conv2_b_;
  nn::Linear fc_g_, fc_h_, pair_i_;
  Var pair_j_;
  nn::Linear pair_out_;
};

/// Θ′_ij = softmax(Θ_ij)[edge]. Θ: [N, N, 2] → [N, N].
inline Var edge_probabilities(const Var& theta) {
  const auto& s = theta.shape();
  if (s.size() != 3 || s[2] != 2) throw ShapeError("edge_probabilities: expected [N,N,2], got " + to_string(s));
  return reshape(slice(softmax(theta, -1), 2, kEdge, kEdge + 1), {s[0], s[1]});
}

/// A_ij = softmax((Θ_ij + g)/τ)[edge] with fresh Gumbel noise per pair; the
/// noise is a constant so gradients flow through the softmax only.
inline Var gumbel_sample(Rng& rng, const Var& theta, double tau) {
  if (!(tau > 0.0)) throw ConfigError("gumbel_sample: temperature must be positive");
  const auto& s = theta.shape();
  if (s.size() != 3 || s[2] != 2) throw ShapeError("gumbel_sample: expected [N,N,2], got " + to_string(s));
  Tensor g(s);
  for (double& v : g.data) v = rng.gumbel();
  return edge_probabilities(scale(add(theta, Var(std::move(g))), 1.0 / tau));
}

/// Σ_ij −A_ij log Θ′_ij − (1 − A_ij) log(1 − Θ′_ij), probabilities clipped at eps.
inline Var graph_regularization(const Var& probs, const data::Adjacency& target, double eps = 1e-8) {
  const std::size_t N = target.N;
  if (probs.shape() != Shape{N, N}) {
    throw ShapeError("graph_regularization: probabilities " + to_string(probs.shape()) + " vs graph of " +
                     std::to_string(N) + " nodes");
  }
  Tensor a({N, N});
  for (std::size_t i = 0; i < N * N; ++i) a.data[i] = target.edges[i] ? 1.0 : 0.0;
  Tensor not_a({N, N});
  for (std::size_t i = 0; i < N * N; ++i) not_a.data[i] = 1.0 - a.data[i];
  Var pos = mul(Var(std::move(a)), clamp_log(probs, eps));
  Var neg = mul(Var(std::move(not_a)), clamp_log(add_scalar(scale(probs, -1.0), 1.0), eps));
  return scale(sum(add(pos, neg)), -1.0);
}

/// Row-wise kNN over cosine similarity: A_ij = 1 iff j ≠ i is among the k
/// rows most similar to row i; ties go to the lower index.
inline data::Adjacency knn_graph(const Tensor& features, std::size_t k) {
  if (features.shape.size() != 2) throw ShapeError("knn_graph: expected [N,F], got " + to_string(features.shape));
  const std::size_t N = features.shape[0], F = features.shape[1];
  if (k < 1 || k + 1 > N) {
    throw ConfigError("knn_graph: k = " + std::to_string(k) + " must lie in [1, " + std::to_string(N - 1) + "]");
  }
  std::vector<double> norms(N, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t f = 0; f < F; ++f) norms[i] += features.data[i * F + f] * features.data[i * F + f];
    norms[i] = std::sqrt(norms[i]);
    if (!(norms[i] > 0.0)) throw DataError("knn_graph: node " + std::to_string(i) + " has a zero-norm feature row");
  }
  data::Adjacency a{N, std::vector<std::uint8_t>(N * N, 0)};
  std::vector<double> sim(N);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      double dot = 0.0;
      for (std::size_t f = 0; f < F; ++f) dot += features.data[i * F + f] * features.data[j * F + f];
      sim[j] = dot / (norms[i] * norms[j]);
    }
    order.clear();
    for (std::size_t j = 0; j < N; ++j)
      if (j != i) order.push_back(j);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sim[x] > sim[y]; });
    for (std::size_t r = 0; r < k; ++r) a.edges[i * N + order[r]] = 1;
  }
  return a;
}

/// Per-node H^i (all P patch representations concatenated) averaged over the
/// given window starts. Returns [N, P·d].
inline Tensor mean_representations(const tsformer::RepresentationBank& bank, const std::vector<std::size_t>& starts) {
  if (starts.empty()) throw DataError("graph: no windows to average representations over");
  const std::size_t N = bank.N(), W = bank.P() * bank.d();
  Tensor out({N, W});
  for (std::size_t s : starts) {
    Tensor b = bank.block(s);
    for (std::size_t i = 0; i < N * W; ++i) out.data[i] += b.data[i];
  }
  for (double& v : out.data) v /= static_cast<double>(starts.size());
  return out;
}

/// Raw training series per node, flattened. Returns [N, T_train·C].
inline Tensor raw_series_features(const data::RawDataset& ds, const data::Range& r) {
  Tensor s = train_series(ds, r);
  s.shape = {ds.N, r.size() * ds.C};
  return s;
}

/// Edge list "src,dst,weight" of a weighted adjacency ([N, N], entry (i, j)
/// means j feeds i). Zero entries are skipped unless `keep_zeros`.
inline std::string matrix_to_edge_csv(const Tensor& w, bool keep_zeros = false) {
  if (w.shape.size() != 2 || w.shape[0] != w.shape[1]) throw ShapeError("edge csv: expected a square matrix");
  const std::size_t N = w.shape[0];
  std::ostringstream os;
  os << "src,dst,weight\n";
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      const double v = w.data[i * N + j];
      if (v == 0.0 && !keep_zeros) continue;
      os << j << ',' << i << ',' << io::fmt_double(v) << '\n';
    }
  return os.str();
}

inline Tensor adjacency_tensor(const data::Adjacency& a) {
  Tensor t({a.N, a.N});
  for (std::size_t i = 0; i < a.N * a.N; ++i) t.data[i] = a.edges[i] ? 1.0 : 0.0;
  return t;
}

struct EdgeScore {
  std::size_t true_positive = 0, predicted = 0, actual = 0;
  double precision() const { return predicted ? double(true_positive) / double(predicted) : 0.0; }
  double recall() const { return actual ? double(true_positive) / double(actual) : 0.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
};

/// Off-diagonal edge-set agreement of weights > threshold against a reference graph.
inline EdgeScore edge_f1(const Tensor& weights, double threshold, const data::Adjacency& truth) {
  const std::size_t N = truth.N;
  if (weights.shape != Shape{N, N}) throw ShapeError("edge_f1: weight matrix does not match graph size");
  EdgeScore s;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) continue;
      const bool p = weights.data[i * N + j] > threshold, t = truth(i, j);
      s.predicted += p;
      s.actual += t;
      s.true_positive += p && t;
    }
  return s;
}

}  // namespace step::graph
