#pragma once

// Analyses of a pre-trained encoder: cosine similarity between patch
// representations or positional embeddings, similar-patch retrieval, and
// reconstruction overlays. Artifacts are CSV plus self-contained SVG.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "step/data.hpp"
#include "step/error.hpp"
#include "step/io.hpp"
#include "step/rng.hpp"
#include "step/tensor.hpp"
#include "step/tsformer.hpp"

namespace step::inspect {

/// Pairwise cosine similarity of the rows of a [P, d] matrix.
inline Tensor cosine_similarity(const Tensor& rows) {
  if (rows.shape.size() != 2) throw ShapeError("cosine_similarity: expected [P,d], got " + to_string(rows.shape));
  const std::size_t P = rows.shape[0], d = rows.shape[1];
  std::vector<double> norm(P, 0.0);
  for (std::size_t i = 0; i < P; ++i) {
    for (std::size_t e = 0; e < d; ++e) norm[i] += rows.data[i * d + e] * rows.data[i * d + e];
    norm[i] = std::sqrt(norm[i]);
    if (!(norm[i] > 0.0)) throw DataError("cosine_similarity: row " + std::to_string(i) + " has zero norm");
  }
  Tensor s({P, P});
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t j = i; j < P; ++j) {
      double dot = 0.0;
      for (std::size_t e = 0; e < d; ++e) dot += rows.data[i * d + e] * rows.data[j * d + e];
      const double v = std::clamp(dot / (norm[i] * norm[j]), -1.0, 1.0);
      s.data[i * P + j] = s.data[j * P + i] = v;
    }
  return s;
}

/// Rows of one node from a [N, P, d] representation block.
inline Tensor node_rows(const Tensor& block, std::size_t node) {
  if (block.shape.size() != 3 || node >= block.shape[0]) throw ShapeError("node_rows: bad block or node index");
  const std::size_t P = block.shape[1], d = block.shape[2];
  Tensor out({P, d});
  std::copy(block.data.begin() + static_cast<long>(node * P * d),
            block.data.begin() + static_cast<long>((node + 1) * P * d), out.data.begin());
  return out;
}

inline Tensor patch_similarity(const Tensor& block, std::size_t node) { return cosine_similarity(node_rows(block, node)); }

inline Tensor posemb_similarity(const tsformer::TSFormer& model) {
  return cosine_similarity(model.pos_embedding().value());
}

/// The k indices most similar to j (excluding j), best first; ties go to the lower index.
inline std::vector<std::size_t> top_k_similar(const Tensor& sim, std::size_t j, std::size_t k = 3) {
  const std::size_t P = sim.shape.at(0);
  if (j >= P) throw ConfigError("top_k_similar: patch index out of range");
  if (k < 1 || k + 1 > P) throw ConfigError("top_k_similar: k must lie in [1, P-1]");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < P; ++i)
    if (i != j) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return sim.data[j * P + a] > sim.data[j * P + b]; });
  idx.resize(k);
  return idx;
}

/// Mean of sim[j, j + lag] over all valid j.
inline double mean_lag_similarity(const Tensor& sim, std::size_t lag) {
  const std::size_t P = sim.shape.at(0);
  if (lag == 0 || lag >= P) throw ConfigError("mean_lag_similarity: lag must lie in [1, P-1]");
  double s = 0.0;
  for (std::size_t j = 0; j + lag < P; ++j) s += sim.data[j * P + j + lag];
  return s / static_cast<double>(P - lag);
}

/// Headerless CSV: one line per row, comma-separated.
inline std::string matrix_csv(const Tensor& m) {
  const std::size_t R = m.shape.at(0), C = m.shape.at(1);
  std::ostringstream os;
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) os << (j ? "," : "") << io::fmt_double(m.data[i * C + j]);
    os << '\n';
  }
  return os.str();
}

namespace detail {

/// Blue (−1) through white (0) to red (+1).
inline std::string ramp(double v) {
  v = std::clamp(v, -1.0, 1.0);
  int r = 255, g = 255, b = 255;
  if (v >= 0) {
    g = b = static_cast<int>(std::lround(255 * (1 - v)));
  } else {
    r = g = static_cast<int>(std::lround(255 * (1 + v)));
  }
  std::ostringstream os;
  os << '#' << std::hex << std::setfill('0') << std::setw(2) << r << std::setw(2) << g << std::setw(2) << b;
  return os.str();
}

}  // namespace detail

inline std::string heatmap_svg(const Tensor& m, const std::string& title, std::size_t cell = 6) {
  const std::size_t R = m.shape.at(0), C = m.shape.at(1);
  const std::size_t top = 24;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << C * cell << "\" height=\"" << R * cell + top
     << "\" shape-rendering=\"crispEdges\">\n";
  os << "<text x=\"4\" y=\"16\" font-family=\"sans-serif\" font-size=\"12\">" << title << "</text>\n";
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j)
      os << "<rect x=\"" << j * cell << "\" y=\"" << top + i * cell << "\" width=\"" << cell << "\" height=\"" << cell
         << "\" fill=\"" << detail::ramp(m.data[i * C + j]) << "\"/>\n";
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Reconstruction overlay
// ---------------------------------------------------------------------------

struct OverlayRow {
  std::size_t step = 0;  // absolute time index
  double original = 0.0;
  bool masked = false;
  std::optional<double> reconstruction;  // present on masked steps only
};

struct Overlay {
  std::size_t node = 0, start = 0, channel = 0;
  tsformer::MaskSpec mask;
  std::vector<OverlayRow> rows;

  std::string to_csv() const {
    std::ostringstream os;
    os << "step,original,masked,reconstruction\n";
    for (const auto& r : rows) {
      os << r.step << ',' << io::fmt_double(r.original) << ',' << (r.masked ? 1 : 0) << ',';
      if (r.reconstruction) os << io::fmt_double(*r.reconstruction);
      os << '\n';
    }
    return os.str();
  }

  /// Mean |reconstruction − original| over masked steps.
  double masked_mae() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (r.reconstruction) s += std::abs(*r.reconstruction - r.original), ++n;
    return n ? s / static_cast<double>(n) : 0.0;
  }

  /// Line plot: original series, grey bands over masked patches, reconstruction in red.
  std::string to_svg(std::size_t width = 900, std::size_t height = 240) const {
    if (rows.empty()) return "<svg xmlns=\"http://www.w3.org/2000/svg\"/>\n";
    double lo = rows[0].original, hi = lo;
    for (const auto& r : rows) {
      lo = std::min(lo, r.original);
      hi = std::max(hi, r.original);
      if (r.reconstruction) lo = std::min(lo, *r.reconstruction), hi = std::max(hi, *r.reconstruction);
    }
    if (hi - lo < 1e-12) hi = lo + 1.0;
    const double pad = 10.0, n = static_cast<double>(rows.size());
    auto X = [&](std::size_t i) { return pad + (static_cast<double>(width) - 2 * pad) * static_cast<double>(i) / std::max(1.0, n - 1); };
    auto Y = [&](double v) { return pad + (static_cast<double>(height) - 2 * pad) * (hi - v) / (hi - lo); };
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (std::size_t i = 0; i < rows.size();) {
      if (!rows[i].masked) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j + 1 < rows.size() && rows[j + 1].masked) ++j;
      os << "<rect x=\"" << X(i) << "\" y=\"0\" width=\"" << std::max(1.0, X(j) - X(i)) << "\" height=\"" << height
         << "\" fill=\"#dddddd\"/>\n";
      i = j + 1;
    }
    os << "<polyline fill=\"none\" stroke=\"#333333\" stroke-width=\"1\" points=\"";
    for (std::size_t i = 0; i < rows.size(); ++i) os << X(i) << ',' << Y(rows[i].original) << ' ';
    os << "\"/>\n";
    for (std::size_t i = 0; i < rows.size();) {
      if (!rows[i].reconstruction) {
        ++i;
        continue;
      }
      os << "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\" points=\"";
      while (i < rows.size() && rows[i].reconstruction) {
        os << X(i) << ',' << Y(*rows[i].reconstruction) << ' ';
        ++i;
      }
      os << "\"/>\n";
    }
    os << "</svg>\n";
    return os.str();
  }
};

/// Masks one window of one node with a mask drawn from `mask_seed`,
/// reconstructs it and lays the result out per time step. Values are in the
/// dataset's units (de-normalized when the dataset carries statistics).
inline Overlay reconstruction_dump(const tsformer::TSFormer& model, const data::RawDataset& ds, std::size_t node,
                                   std::size_t start, std::uint64_t mask_seed, std::size_t channel = 0) {
  const auto& cfg = model.config();
  if (node >= ds.N || channel >= ds.C) throw ConfigError("reconstruction_dump: node or channel out of range");
  if (start + cfg.P * cfg.L > ds.T) throw DataError("reconstruction_dump: window runs past the end of the series");
  NoGradGuard ng;
  Rng rng(mask_seed);
  Overlay o;
  o.node = node;
  o.start = start;
  o.channel = channel;
  o.mask = tsformer::sample_mask(rng, cfg.P, cfg.r);
  Tensor x = data::extract_patches(ds, node, start, cfg.P, cfg.L);
  x.shape = {1, cfg.P, cfg.L * ds.C};
  Tensor y = model.reconstruct(Var(x), o.mask).value();
  auto denorm = [&](double v) { return ds.norm_stats ? data::denormalize(*ds.norm_stats, channel, v) : v; };
  std::vector<bool> hidden(cfg.P, false);
  for (auto j : o.mask.masked) hidden[j] = true;
  for (std::size_t j = 0; j < cfg.P; ++j)
    for (std::size_t s = 0; s < cfg.L; ++s) {
      const std::size_t k = (j * cfg.L + s) * ds.C + channel;
      OverlayRow r{start + j * cfg.L + s, denorm(x.data[k]), hidden[j], std::nullopt};
      if (hidden[j]) r.reconstruction = denorm(y.data[k]);
      o.rows.push_back(r);
    }
  return o;
}

}  // namespace step::inspect
