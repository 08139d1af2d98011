#pragma once

// Forecasting stage. A spatiotemporal backend reads the last patch of every
// node together with a graph and produces H_gw ∈ R^{N×d′}. The frozen
// encoder's representation of the last patch is projected into the same width
// and added (H_final = SP(H_P) + H_gw); a per-node regression head maps
// H_final to T_f·C outputs. Training minimizes
//   L = L_regression + λ(epoch) · L_graph
// with a curriculum on the supervised horizon.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "step/checkpoint.hpp"
#include "step/data.hpp"
#include "step/error.hpp"
#include "step/graph_learner.hpp"
#include "step/io.hpp"
#include "step/metrics.hpp"
#include "step/nn.hpp"
#include "step/optim.hpp"
#include "step/rng.hpp"
#include "step/tensor.hpp"
#include "step/tsformer.hpp"

namespace step::forecast {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class BackendKind { kConv, kRecurrent };
/// kLearned: Gumbel-sampled learned graph; kKnn: the fixed kNN graph; kNone: self loops only.
enum class GraphMode { kLearned, kKnn, kNone };

inline std::string backend_name(BackendKind b) { return b == BackendKind::kConv ? "conv" : "recurrent"; }
inline BackendKind backend_from_string(const std::string& s) {
  if (s == "conv") return BackendKind::kConv;
  if (s == "recurrent") return BackendKind::kRecurrent;
  throw ConfigError("forecaster: unknown backend '" + s + "' (expected conv or recurrent)");
}

inline std::string graph_mode_name(GraphMode m) {
  switch (m) {
    case GraphMode::kLearned: return "learned";
    case GraphMode::kKnn: return "knn";
    case GraphMode::kNone: return "none";
  }
  return "learned";
}
inline GraphMode graph_mode_from_string(const std::string& s) {
  if (s == "learned") return GraphMode::kLearned;
  if (s == "knn") return GraphMode::kKnn;
  if (s == "none") return GraphMode::kNone;
  throw ConfigError("forecaster: unknown graph mode '" + s + "' (expected learned, knn or none)");
}

struct TrainSchedule {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double lr = 0.005;
  double weight_decay = 1.0e-5;
  double eps = 1.0e-8;
  std::vector<std::size_t> milestones{1, 18, 36, 54, 72};
  double gamma = 0.5;
  double clip = 5.0;
  std::size_t cl_num = 3;
  std::size_t warm_num = 30;
  bool warmup_full_horizon = true;  ///< false: supervise one step during warm-up

  void validate() const {
    if (cl_num < 1) throw ConfigError("schedule: cl_num must be at least 1");
    if (batch_size < 1) throw ConfigError("schedule: batch_size must be at least 1");
    if (!(lr > 0)) throw ConfigError("schedule: lr must be positive");
    if (!(clip > 0)) throw ConfigError("schedule: clip must be positive");
  }

  json to_json() const {
    return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr}, {"weight_decay", weight_decay},
            {"eps", eps}, {"milestones", milestones}, {"gamma", gamma}, {"clip", clip}, {"cl_num", cl_num},
            {"warm_num", warm_num}, {"warmup_full_horizon", warmup_full_horizon}};
  }
  static TrainSchedule from_json(const json& j) {
    const std::string where = "schedule";
    io::check_keys(j, {"epochs", "batch_size", "lr", "weight_decay", "eps", "milestones", "gamma", "clip", "cl_num",
                       "warm_num", "warmup_full_horizon"},
                   where);
    TrainSchedule s;
    io::read_key(j, "epochs", s.epochs, where);
    io::read_key(j, "batch_size", s.batch_size, where);
    io::read_key(j, "lr", s.lr, where);
    io::read_key(j, "weight_decay", s.weight_decay, where);
    io::read_key(j, "eps", s.eps, where);
    io::read_key(j, "milestones", s.milestones, where);
    io::read_key(j, "gamma", s.gamma, where);
    io::read_key(j, "clip", s.clip, where);
    io::read_key(j, "cl_num", s.cl_num, where);
    io::read_key(j, "warm_num", s.warm_num, where);
    io::read_key(j, "warmup_full_horizon", s.warmup_full_horizon, where);
    return s;
  }
};

struct ForecasterConfig {
  std::size_t horizon = 12;  ///< T_f
  std::size_t hidden = 64;   ///< d′
  BackendKind backend = BackendKind::kConv;
  bool fusion = true;
  GraphMode graph_mode = GraphMode::kLearned;
  graph::GraphLearnerConfig graph;
  TrainSchedule schedule;

  void validate() const {
    if (horizon == 0) throw ConfigError("forecaster: horizon must be at least 1");
    if (hidden == 0) throw ConfigError("forecaster: hidden width must be positive");
    graph.validate();
    schedule.validate();
  }

  /// Representations are needed for fusion, for the learned graph, and for a representation-based kNN graph.
  bool needs_representations() const {
    return fusion || graph_mode == GraphMode::kLearned ||
           (graph_mode == GraphMode::kKnn && graph.source == graph::SimilaritySource::kRepresentations);
  }

  json to_json() const {
    return {{"horizon", horizon}, {"hidden", hidden}, {"backend", backend_name(backend)}, {"fusion", fusion},
            {"graph_mode", graph_mode_name(graph_mode)}, {"graph", graph.to_json()},
            {"schedule", schedule.to_json()}};
  }
  static ForecasterConfig from_json(const json& j) {
    const std::string where = "forecaster config";
    io::check_keys(j, {"horizon", "hidden", "backend", "fusion", "graph_mode", "graph", "schedule"}, where);
    ForecasterConfig c;
    io::read_key(j, "horizon", c.horizon, where);
    io::read_key(j, "hidden", c.hidden, where);
    std::string b = backend_name(c.backend), g = graph_mode_name(c.graph_mode);
    io::read_key(j, "backend", b, where);
    io::read_key(j, "graph_mode", g, where);
    c.backend = backend_from_string(b);
    c.graph_mode = graph_mode_from_string(g);
    io::read_key(j, "fusion", c.fusion, where);
    if (j.contains("graph")) c.graph = graph::GraphLearnerConfig::from_json(j.at("graph"));
    if (j.contains("schedule")) c.schedule = TrainSchedule::from_json(j.at("schedule"));
    return c;
  }
};

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// λ = 1/⌈epoch/6⌉ for a 1-based epoch.
inline double lambda_at(std::size_t epoch) {
  if (epoch < 1) throw ConfigError("lambda_at: epochs are 1-based");
  return 1.0 / static_cast<double>((epoch + 5) / 6);
}

/// Supervised horizon for a 1-based epoch: the warm-up trains at full length
/// (or one step), then the horizon restarts at 1 and grows by one every cl_num epochs.
inline std::size_t curriculum_horizon(const TrainSchedule& s, std::size_t horizon, std::size_t epoch) {
  if (epoch < 1) throw ConfigError("curriculum_horizon: epochs are 1-based");
  if (epoch <= s.warm_num) return s.warmup_full_horizon ? horizon : 1;
  return std::min(horizon, (epoch - s.warm_num - 1) / s.cl_num + 1);
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Ã = A ⊙ (1 − I) + I, row-normalized. The learned graph's diagonal is
/// replaced by an explicit self loop.
inline Var propagation_matrix(const Var& adj) {
  if (adj.shape().size() != 2 || adj.dim(0) != adj.dim(1)) {
    throw ShapeError("propagation_matrix: expected a square matrix, got " + to_string(adj.shape()));
  }
  const std::size_t N = adj.dim(0);
  Tensor off({N, N}, 1.0), eye({N, N});
  for (std::size_t i = 0; i < N; ++i) off.data[i * N + i] = 0.0, eye.data[i * N + i] = 1.0;
  return row_normalize(add(mul(adj, Var(std::move(off))), Var(std::move(eye))));
}

inline void require_finite(const Var& v, const std::string& where) {
  for (double x : v.value().data)
    if (!std::isfinite(x)) throw NumericError(where + ": non-finite activation");
}

class Backend {
 public:
  virtual ~Backend() = default;
  /// x: [B, N, L, C], adj: [N, N] with entries in [0, 1] → H_gw: [B, N, d′].
  virtual Var forward(const Var& x, const Var& adj) const = 0;
};

/// Two layers of gated causal convolution along the patch (dilation 1, then 2),
/// each followed by one-hop graph mixing and a residual connection. The
/// readout is the last time step plus the mean over time.
class ConvBackend final : public Backend {
 public:
  ConvBackend(nn::ParamStore& ps, const std::string& name, std::size_t C, std::size_t width, Rng& rng)
      : width_(width) {
    in_ = nn::Linear(ps, name + ".in", C, width, rng);
    const double bound = 1.0 / std::sqrt(2.0 * static_cast<double>(width));
    for (std::size_t l = 0; l < 2; ++l) {
      const std::string p = name + ".layer" + std::to_string(l);
      Layer layer;
      layer.dilation = l + 1;
      layer.filter = ps.add(p + ".filter.w", nn::uniform_tensor(rng, {2, width, width}, bound));
      layer.filter_b = ps.add(p + ".filter.b", Tensor({width}));
      layer.gate = ps.add(p + ".gate.w", nn::uniform_tensor(rng, {2, width, width}, bound));
      layer.gate_b = ps.add(p + ".gate.b", Tensor({width}));
      layer.mix = nn::Linear(ps, p + ".mix", width, width, rng);
      layers_.push_back(layer);
    }
  }

  Var forward(const Var& x, const Var& adj) const override {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("backend: expected [B,N,L,C], got " + to_string(s));
    const std::size_t B = s[0], N = s[1], L = s[2], C = s[3];
    const Var prop = propagation_matrix(adj);
    Var h = in_(reshape(x, {B * N, L, C}));
    for (const auto& layer : layers_) {
      Var f = tanh(add_row(conv1d(h, layer.filter, layer.dilation, 1, true), layer.filter_b));
      Var g = sigmoid(add_row(conv1d(h, layer.gate, layer.dilation, 1, true), layer.gate_b));
      Var z = reshape(mul(f, g), {B, N, L * width_});
      Var mixed = layer.mix(reshape(node_mix(prop, z), {B * N, L, width_}));
      h = add(h, mixed);
      require_finite(h, "conv backend");
    }
    Var last = reshape(slice(h, 1, L - 1, L), {B, N, width_});
    return add(reshape(mean_axis(h, 1), {B, N, width_}), last);
  }

 private:
  struct Layer {
    std::size_t dilation = 1;
    Var filter, filter_b, gate, gate_b;
    nn::Linear mix;
  };
  std::size_t width_;
  nn::Linear in_;
  std::vector<Layer> layers_;
};

/// Gated recurrent cell whose state is mixed over the graph before every
/// update; the final state is the hidden output.
class RecurrentBackend final : public Backend {
 public:
  RecurrentBackend(nn::ParamStore& ps, const std::string& name, std::size_t C, std::size_t width, Rng& rng)
      : width_(width) {
    wx_ = nn::Linear(ps, name + ".wx", C, 3 * width, rng);
    wh_ = nn::Linear(ps, name + ".wh", width, 2 * width, rng);
    wc_ = nn::Linear(ps, name + ".wc", width, width, rng);
  }

  Var forward(const Var& x, const Var& adj) const override {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("backend: expected [B,N,L,C], got " + to_string(s));
    const std::size_t B = s[0], N = s[1], L = s[2], C = s[3], w = width_;
    const Var prop = propagation_matrix(adj);
    Var h(Tensor({B, N, w}));
    for (std::size_t t = 0; t < L; ++t) {
      Var gx = wx_(reshape(slice(x, 2, t, t + 1), {B, N, C}));
      Var hm = node_mix(prop, h);
      Var gh = wh_(hm);
      Var z = sigmoid(add(slice(gx, 2, 0, w), slice(gh, 2, 0, w)));
      Var r = sigmoid(add(slice(gx, 2, w, 2 * w), slice(gh, 2, w, 2 * w)));
      Var c = tanh(add(slice(gx, 2, 2 * w, 3 * w), wc_(mul(r, hm))));
      h = add(mul(z, h), mul(add_scalar(scale(z, -1.0), 1.0), c));
    }
    require_finite(h, "recurrent backend");
    return h;
  }

 private:
  std::size_t width_;
  nn::Linear wx_, wh_, wc_;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean |Ŷ − Y| over the first h horizon steps, all nodes and channels.
/// Ŷ, Y: [B, T_f, N, C]. `valid` (same shape, 0/1) drops missing targets.
inline Var regression_loss(const Var& pred, const Var& truth, std::size_t h, const Tensor* valid = nullptr) {
  if (pred.shape() != truth.shape() || pred.shape().size() != 4) {
    throw ShapeError("regression_loss: shapes " + to_string(pred.shape()) + " vs " + to_string(truth.shape()));
  }
  if (h < 1 || h > pred.dim(1)) {
    throw ConfigError("regression_loss: horizon " + std::to_string(h) + " outside [1, " + std::to_string(pred.dim(1)) +
                      "]");
  }
  Var diff = abs(sub(slice(pred, 1, 0, h), slice(truth, 1, 0, h)));
  if (!valid) return mean(diff);
  if (valid->shape != pred.shape()) throw ShapeError("regression_loss: mask shape differs");
  Var mask = slice(Var(*valid), 1, 0, h);
  double count = 0.0;
  for (double v : mask.value().data) count += v;
  if (count == 0.0) throw DataError("regression_loss: every target in the horizon is missing");
  return scale(sum(mul(diff, mask)), 1.0 / count);
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Window-start → [N, P, d] representation block.
using RepresentationFn = std::function<Tensor(std::size_t)>;

inline RepresentationFn from_bank(std::shared_ptr<const tsformer::RepresentationBank> bank) {
  return [bank](std::size_t s) { return bank->block(s); };
}

/// Runs the frozen encoder on demand (same float32 rounding as the bank).
inline RepresentationFn from_encoder(std::shared_ptr<const tsformer::TSFormer> model,
                                     std::shared_ptr<const data::RawDataset> ds) {
  return [model, ds](std::size_t s) { return tsformer::represent_window(*model, *ds, s); };
}

struct ForecastData {
  std::shared_ptr<const data::RawDataset> ds;  // normalized
  data::SplitSpec split;
  std::size_t P = 0, L = 0, horizon = 0, d = 0;  // d: representation width (0 when unused)
  std::vector<std::size_t> train_starts, val_starts, test_starts;
  Tensor series;  // [N, T_train, C]
  RepresentationFn representations;
  std::optional<data::Adjacency> knn;

  const std::vector<std::size_t>& starts(const std::string& which) const {
    if (which == "train") return train_starts;
    if (which == "val") return val_starts;
    if (which == "test") return test_starts;
    throw ConfigError("forecast data: unknown split '" + which + "'");
  }
  std::vector<std::size_t> all_starts() const {
    std::vector<std::size_t> s = train_starts;
    s.insert(s.end(), val_starts.begin(), val_starts.end());
    s.insert(s.end(), test_starts.begin(), test_starts.end());
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  }
};

/// Enumerates forecasting samples per split. Training samples always lie
/// wholly inside the training range; `policy` applies to validation and test.
inline ForecastData prepare_data(std::shared_ptr<const data::RawDataset> normalized, const data::SplitSpec& split,
                                 std::size_t P, std::size_t L, std::size_t horizon,
                                 data::WindowPolicy policy = data::WindowPolicy::kWithinSplit) {
  if (!normalized->norm_stats) throw DataError("forecast data: dataset must be z-score normalized");
  ForecastData fd;
  fd.ds = normalized;
  fd.split = split;
  fd.P = P;
  fd.L = L;
  fd.horizon = horizon;
  fd.train_starts = data::forecast_sample_starts(split.train_range, P, L, horizon);
  fd.val_starts = data::forecast_sample_starts(split.val_range, P, L, horizon, policy);
  fd.test_starts = data::forecast_sample_starts(split.test_range, P, L, horizon, policy);
  fd.series = graph::train_series(*normalized, split.train_range);
  return fd;
}

/// Sets the representation source and records its width.
inline void attach_representations(ForecastData& fd, RepresentationFn fn, std::size_t d) {
  fd.representations = std::move(fn);
  fd.d = d;
}

/// Builds the fixed kNN graph from training-window representations or raw training series.
inline void build_knn(ForecastData& fd, const graph::GraphLearnerConfig& g) {
  Tensor features;
  if (g.source == graph::SimilaritySource::kRepresentations) {
    if (!fd.representations) throw ConfigError("knn: representation source requested but no encoder output attached");
    const std::size_t N = fd.ds->N;
    for (std::size_t k = 0; k < fd.train_starts.size(); ++k) {
      Tensor b = fd.representations(fd.train_starts[k]);
      if (k == 0) features = Tensor({N, b.numel() / N});
      for (std::size_t i = 0; i < b.numel(); ++i) features.data[i] += b.data[i];
    }
    for (double& v : features.data) v /= static_cast<double>(fd.train_starts.size());
  } else {
    features = graph::raw_series_features(*fd.ds, fd.split.train_range);
  }
  fd.knn = graph::knn_graph(features, g.k);
}

struct Batch {
  std::size_t B = 0;
  Tensor x;      // [B, N, L, C]
  Tensor y;      // [B, T_f, N, C]
  Tensor valid;  // [B, T_f, N, C]
  Tensor h_last;  // [B, N, d]
  Tensor h_mean;  // [N, P·d], averaged over the batch
};

inline Batch make_batch(const ForecastData& fd, const std::vector<std::size_t>& starts, bool with_representations) {
  const auto& ds = *fd.ds;
  const std::size_t B = starts.size(), N = ds.N, L = fd.L, C = ds.C, T = fd.horizon;
  Batch b;
  b.B = B;
  b.x = Tensor({B, N, L, C});
  b.y = Tensor({B, T, N, C});
  b.valid = Tensor({B, T, N, C});
  for (std::size_t k = 0; k < B; ++k) {
    const auto s = data::make_forecast_sample(ds, starts[k], fd.P, L, T);
    std::copy(s.history.data.begin(), s.history.data.end(), b.x.data.begin() + static_cast<long>(k * N * L * C));
    std::copy(s.target.data.begin(), s.target.data.end(), b.y.data.begin() + static_cast<long>(k * T * N * C));
    for (std::size_t h = 0; h < T; ++h)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          b.valid.data[((k * T + h) * N + n) * C + c] = ds.is_missing(s.target_start() + h, n, c) ? 0.0 : 1.0;
  }
  if (with_representations) {
    if (!fd.representations) throw ConfigError("batch: representations requested but none attached");
    const std::size_t P = fd.P, d = fd.d;
    b.h_last = Tensor({B, N, d});
    b.h_mean = Tensor({N, P * d});
    for (std::size_t k = 0; k < B; ++k) {
      Tensor blk = fd.representations(starts[k]);
      if (blk.shape != Shape{N, P, d}) throw ShapeError("batch: representation block has shape " + to_string(blk.shape));
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t e = 0; e < d; ++e) b.h_last.data[(k * N + n) * d + e] = blk.data[(n * P + P - 1) * d + e];
      for (std::size_t i = 0; i < blk.numel(); ++i) b.h_mean.data[i] += blk.data[i] / static_cast<double>(B);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ModelShape {
  std::size_t N = 0, C = 1, L = 12, P = 0, d = 0, T_train = 0;

  json to_json() const { return {{"N", N}, {"C", C}, {"L", L}, {"P", P}, {"d", d}, {"T_train", T_train}}; }
  static ModelShape from_json(const json& j) {
    return {j.at("N"), j.at("C"), j.at("L"), j.at("P"), j.at("d"), j.at("T_train")};
  }
  static ModelShape of(const ForecastData& fd) {
    return {fd.ds->N, fd.ds->C, fd.L, fd.P, fd.d, fd.split.train_range.size()};
  }
  bool operator==(const ModelShape&) const = default;
};

struct ForwardResult {
  Var pred;   // [B, T_f, N, C]
  Var adj;    // [N, N] graph fed to the backend
  std::optional<Var> theta;  // [N, N, 2] when the graph is learned
};

class Forecaster {
 public:
  Forecaster(const ForecasterConfig& cfg, const ModelShape& shape, Rng& rng) : cfg_(cfg), shape_(shape) {
    cfg.validate();
    if (cfg.needs_representations() && shape.d == 0) {
      throw ConfigError("forecaster: fusion or a representation-based graph needs encoder outputs (d = 0)");
    }
    if (cfg.backend == BackendKind::kConv) {
      backend_ = std::make_unique<ConvBackend>(params_, "backend", shape.C, cfg.hidden, rng);
    } else {
      backend_ = std::make_unique<RecurrentBackend>(params_, "backend", shape.C, cfg.hidden, rng);
    }
    if (cfg.fusion) sp_ = nn::Mlp(params_, "sp", shape.d, cfg.hidden, cfg.hidden, rng);
    head_ = nn::Mlp(params_, "head", cfg.hidden, cfg.hidden, cfg.horizon * shape.C, rng);
    if (cfg.graph_mode == GraphMode::kLearned) {
      learner_ = graph::GraphLearner(params_, "graph", cfg.graph, shape.C, shape.T_train, shape.P * shape.d, rng);
    }
  }

  Forecaster(const Forecaster&) = delete;
  Forecaster& operator=(const Forecaster&) = delete;

  const ForecasterConfig& config() const { return cfg_; }
  const ModelShape& shape() const { return shape_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const Backend& backend() const { return *backend_; }
  const graph::GraphLearner& learner() const { return learner_; }
  nn::Mlp& projector() { return sp_; }
  nn::Mlp& head() { return head_; }

  /// H_final = SP(H_P) + H_gw. h_last: [B, N, d], h_gw: [B, N, d′].
  Var fuse(const Var& h_last, const Var& h_gw) const {
    if (!cfg_.fusion) return h_gw;
    if (h_last.shape().size() != 3 || h_last.dim(2) != shape_.d) {
      throw ShapeError("fuse: representation width " + to_string(h_last.shape()) + ", expected d = " +
                       std::to_string(shape_.d));
    }
    if (h_gw.shape().size() != 3 || h_gw.dim(2) != cfg_.hidden) {
      throw ShapeError("fuse: backend width " + to_string(h_gw.shape()) + ", expected d′ = " +
                       std::to_string(cfg_.hidden));
    }
    return add(sp_(h_last), h_gw);
  }

  /// H_final: [B, N, d′] → Ŷ: [B, T_f, N, C].
  Var predict(const Var& h_final) const {
    const std::size_t B = h_final.dim(0), N = h_final.dim(1);
    return permute(reshape(head_(h_final), {B, N, cfg_.horizon, shape_.C}), {0, 2, 1, 3});
  }

  /// Learned Θ from the batch-mean representation. h_mean: [N, P·d].
  Var logits(const Tensor& series, const Tensor& h_mean) const {
    return learner_.logits(Var(series), Var(h_mean));
  }

  /// `noise`: Gumbel generator for a sampled graph; nullptr uses Θ′ directly.
  ForwardResult forward(const Batch& b, const ForecastData& fd, Rng* noise, double tau) const {
    const std::size_t N = shape_.N;
    ForwardResult r;
    switch (cfg_.graph_mode) {
      case GraphMode::kLearned: {
        Var theta = logits(fd.series, b.h_mean);
        r.adj = noise ? graph::gumbel_sample(*noise, theta, tau) : graph::edge_probabilities(theta);
        r.theta = theta;
        break;
      }
      case GraphMode::kKnn:
        if (!fd.knn) throw ConfigError("forecaster: kNN graph mode but no kNN graph was built");
        r.adj = Var(graph::adjacency_tensor(*fd.knn));
        break;
      case GraphMode::kNone:
        r.adj = Var(Tensor({N, N}));
        break;
    }
    Var h_gw = backend_->forward(Var(b.x), r.adj);
    r.pred = predict(cfg_.fusion ? fuse(Var(b.h_last), h_gw) : h_gw);
    return r;
  }

 private:
  ForecasterConfig cfg_;
  ModelShape shape_;
  nn::ParamStore params_;
  std::unique_ptr<Backend> backend_;
  nn::Mlp sp_, head_;
  graph::GraphLearner learner_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct Predictions {
  std::size_t samples = 0, horizon = 0, N = 0, C = 0;
  std::vector<double> pred, truth;  // de-normalized, [S, T_f, N, C]
  metrics::Mask valid;
};

inline Predictions predict_split(const Forecaster& model, const ForecastData& fd, const std::vector<std::size_t>& starts,
                                 std::size_t batch_size = 32) {
  NoGradGuard ng;
  const auto& cfg = model.config();
  const auto& stats = *fd.ds->norm_stats;
  Predictions out{starts.size(), cfg.horizon, fd.ds->N, fd.ds->C, {}, {}, {}};
  // A learned graph depends on the batch composition, so evaluate it one sample at a time.
  const std::size_t step = cfg.graph_mode == GraphMode::kLearned ? 1 : std::max<std::size_t>(1, batch_size);
  for (std::size_t i = 0; i < starts.size(); i += step) {
    std::vector<std::size_t> chunk(starts.begin() + static_cast<long>(i),
                                   starts.begin() + static_cast<long>(std::min(starts.size(), i + step)));
    Batch b = make_batch(fd, chunk, cfg.needs_representations());
    Tensor p = model.forward(b, fd, nullptr, cfg.graph.tau).pred.value();
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const std::size_t c = k % out.C;
      out.pred.push_back(data::denormalize(stats, c, p.data[k]));
      out.truth.push_back(data::denormalize(stats, c, b.y.data[k]));
      out.valid.push_back(b.valid.data[k] != 0.0);
    }
  }
  return out;
}

inline metrics::MetricReport evaluate(const Forecaster& model, const ForecastData& fd, const std::string& split) {
  const auto& starts = fd.starts(split);
  if (starts.empty()) throw DataError("evaluate: split '" + split + "' has no forecasting samples");
  Predictions p = predict_split(model, fd, starts);
  return metrics::horizon_report(p.pred, p.truth, p.valid, p.samples, p.horizon, p.N * p.C);
}

/// Θ′ computed from representations averaged over all training windows (no noise).
inline Tensor mean_edge_probabilities(const Forecaster& model, const ForecastData& fd) {
  if (model.config().graph_mode != GraphMode::kLearned) throw ConfigError("edge probabilities need a learned graph");
  NoGradGuard ng;
  Batch b = make_batch(fd, fd.train_starts, true);
  return graph::edge_probabilities(model.logits(fd.series, b.h_mean)).value();
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainLog {
  std::size_t epoch = 0;
  double lr = 0, lambda = 0;
  std::size_t horizon = 0;
  double train_loss = 0;
  double val_mae = 0, val_rmse = 0, val_mape = 0;

  json to_json() const {
    return {{"epoch", epoch}, {"lr", lr}, {"lambda", lambda}, {"horizon", horizon}, {"train_loss", train_loss},
            {"val_mae", val_mae}, {"val_rmse", val_rmse}, {"val_mape", val_mape}};
  }
};

struct TrainResult {
  std::vector<TrainLog> log;
  std::size_t best_epoch = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
};

/// Everything one optimization step computes; exposed for tests.
struct StepLosses {
  Var total, regression;
  std::optional<Var> graph;
};

inline StepLosses step_losses(const Forecaster& model, const ForecastData& fd, const Batch& b, Rng& noise,
                              double tau, double lambda, std::size_t horizon) {
  ForwardResult r = model.forward(b, fd, &noise, tau);
  StepLosses s;
  s.regression = regression_loss(r.pred, Var(b.y), horizon, &b.valid);
  s.total = s.regression;
  if (r.theta) {
    if (!fd.knn) throw ConfigError("train: learned graph needs the kNN regularization target");
    s.graph = graph::graph_regularization(graph::edge_probabilities(*r.theta), *fd.knn);
    s.total = add(s.regression, scale(*s.graph, lambda));
  }
  return s;
}

inline TrainResult train(Forecaster& model, const ForecastData& fd, std::uint64_t seed,
                         const std::function<void(const TrainLog&)>& on_epoch = {}) {
  const auto& cfg = model.config();
  const auto& sch = cfg.schedule;
  if (fd.train_starts.empty()) throw DataError("train: no training samples");
  optim::LrSchedule lr_sched{sch.lr, sch.milestones, sch.gamma};
  optim::AdamSettings adam{sch.lr, 0.9, 0.999, sch.eps, sch.weight_decay};
  optim::OptimizerState opt;
  auto params = model.params().vars();
  Rng root(seed);
  Rng shuffle_rng = root.split(1);
  Rng noise = root.split(2);
  const bool reps = cfg.needs_representations();

  TrainResult result;
  std::vector<Tensor> best_values;
  for (std::size_t epoch = 1; epoch <= sch.epochs; ++epoch) {
    TrainLog log;
    log.epoch = epoch;
    log.lr = adam.lr = optim::lr_at(lr_sched, epoch - 1);
    log.lambda = lambda_at(epoch);
    log.horizon = curriculum_horizon(sch, cfg.horizon, epoch);
    const double tau = graph::tau_at(cfg.graph, epoch, sch.epochs);

    std::vector<std::size_t> order = fd.train_starts;
    shuffle_rng.shuffle(order);
    double total = 0.0;
    std::size_t seen = 0, batch_no = 0;
    for (std::size_t i = 0; i < order.size(); i += sch.batch_size, ++batch_no) {
      std::vector<std::size_t> chunk(order.begin() + static_cast<long>(i),
                                     order.begin() + static_cast<long>(std::min(order.size(), i + sch.batch_size)));
      Batch b = make_batch(fd, chunk, reps);
      model.params().zero_grad();
      StepLosses s = step_losses(model, fd, b, noise, tau, log.lambda, log.horizon);
      if (!std::isfinite(s.total.item())) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_no));
      }
      s.total.backward();
      optim::clip_gradients(params, sch.clip);
      optim::adam_step(opt, params, adam);
      total += s.regression.item() * static_cast<double>(chunk.size());
      seen += chunk.size();
    }
    log.train_loss = total / static_cast<double>(seen);

    double score = log.train_loss;
    if (!fd.val_starts.empty()) {
      const auto& m = evaluate(model, fd, "val").at("mean");
      log.val_mae = m.mae;
      log.val_rmse = m.rmse;
      log.val_mape = m.mape;
      score = m.mae;
    }
    if (score < result.best_val_mae) {
      result.best_val_mae = score;
      result.best_epoch = epoch;
      best_values.clear();
      for (const auto& [n, v] : model.params().entries()) best_values.push_back(v.value());
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  if (!best_values.empty()) {
    auto& entries = model.params().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].second.mutable_value() = best_values[i];
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& path, const Forecaster& model, const json& extra = {}) {
  json meta = {{"kind", "forecaster"},
               {"config", model.config().to_json()},
               {"shape", model.shape().to_json()},
               {"params_hash", io::hex64(checkpoint::params_hash(model.params()))}};
  if (extra.is_object())
    for (const auto& [k, v] : extra.items()) meta[k] = v;
  checkpoint::save(path, model.params(), meta);
}

struct LoadedForecaster {
  std::unique_ptr<Forecaster> model;
  json meta;
};

inline LoadedForecaster load_checkpoint(const std::filesystem::path& path) {
  auto ck = checkpoint::load(path);
  if (ck.meta.value("kind", "") != "forecaster") {
    throw IoError("checkpoint '" + path.string() + "' is not a forecaster", 0);
  }
  Rng rng(0);
  LoadedForecaster out;
  out.model = std::make_unique<Forecaster>(ForecasterConfig::from_json(ck.meta.at("config")),
                                           ModelShape::from_json(ck.meta.at("shape")), rng);
  checkpoint::assign(out.model->params(), ck);
  out.meta = ck.meta;
  return out;
}

}  // namespace step::forecast
