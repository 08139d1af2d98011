#pragma once

// Dataset container, STSF/CSV I/O, z-score normalization, chronological
// splits, pre-training windows, forecasting samples and the synthetic
// generator with planted periodicity and a planted dependency graph.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "step/error.hpp"
#include "step/io.hpp"
#include "step/rng.hpp"
#include "step/tensor.hpp"

namespace step::data {

struct NormStats {
  std::vector<double> mean, std;  // per channel

  bool operator==(const NormStats&) const = default;
};

/// Multivariate series X ∈ R^{T×N×C}, stored t-major, then node, then channel.
struct RawDataset {
  std::size_t T = 0, N = 0, C = 0;
  std::size_t steps_per_day = 288;
  std::string name;
  std::vector<std::string> channel_names;
  std::vector<double> values;
  std::vector<std::uint8_t> missing;  // parallel to values; 1 = missing, and the value is then 0
  std::optional<NormStats> norm_stats;

  std::size_t index(std::size_t t, std::size_t n, std::size_t c) const { return (t * N + n) * C + c; }
  double at(std::size_t t, std::size_t n, std::size_t c) const { return values[index(t, n, c)]; }
  double& at(std::size_t t, std::size_t n, std::size_t c) { return values[index(t, n, c)]; }
  bool is_missing(std::size_t t, std::size_t n, std::size_t c) const { return missing[index(t, n, c)] != 0; }

  void validate() const {
    if (T == 0 || N == 0 || C == 0) throw DataError("dataset: T, N and C must all be at least 1");
    if (values.size() != T * N * C) throw DataError("dataset: value count does not match T·N·C");
    if (missing.size() != values.size()) throw DataError("dataset: missing mask size does not match values");
    if (channel_names.size() != C) throw DataError("dataset: channel_names must have C entries");
  }

  bool operator==(const RawDataset&) const = default;
};

inline RawDataset make_dataset(std::size_t T, std::size_t N, std::size_t C, std::size_t steps_per_day,
                               std::string name) {
  RawDataset ds;
  ds.T = T;
  ds.N = N;
  ds.C = C;
  ds.steps_per_day = steps_per_day;
  ds.name = std::move(name);
  ds.values.assign(T * N * C, 0.0);
  ds.missing.assign(T * N * C, 0);
  for (std::size_t c = 0; c < C; ++c) ds.channel_names.push_back(C == 1 ? "value" : "c" + std::to_string(c));
  return ds;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Half-open index range [begin, end).
struct Range {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t t) const { return t >= begin && t < end; }
  bool operator==(const Range&) const = default;
};

struct SplitSpec {
  double train = 0.7, val = 0.1, test = 0.2;
  Range train_range, val_range, test_range;

  /// Contiguous chronological ranges: train, then val, then test, covering [0, T).
  static SplitSpec resolve(std::size_t T, double train, double val, double test) {
    if (train <= 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9) {
      throw ConfigError("split: fractions must be non-negative, train positive, and sum to 1");
    }
    SplitSpec s{train, val, test, {}, {}, {}};
    const auto train_end = static_cast<std::size_t>(std::floor(static_cast<double>(T) * train + 1e-9));
    const auto val_end =
        std::min(T, static_cast<std::size_t>(std::floor(static_cast<double>(T) * (train + val) + 1e-9)));
    s.train_range = {0, train_end};
    s.val_range = {train_end, val_end};
    s.test_range = {val_end, T};
    if (train_end == 0) throw ConfigError("split: empty training range");
    return s;
  }

  const Range& range(const std::string& which) const {
    if (which == "train") return train_range;
    if (which == "val") return val_range;
    if (which == "test") return test_range;
    throw ConfigError("split: unknown split '" + which + "' (expected train, val or test)");
  }
};

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel z-score fitted on the training range only (missing entries skipped
/// when fitting and set to 0 in the output).
inline RawDataset fit_apply_zscore(const RawDataset& ds, const SplitSpec& split) {
  ds.validate();
  NormStats st;
  st.mean.assign(ds.C, 0.0);
  st.std.assign(ds.C, 0.0);
  for (std::size_t c = 0; c < ds.C; ++c) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t t = split.train_range.begin; t < split.train_range.end; ++t)
      for (std::size_t i = 0; i < ds.N; ++i) {
        if (ds.is_missing(t, i, c)) continue;
        s += ds.at(t, i, c);
        ++n;
      }
    if (n == 0) throw DataError("zscore: channel " + std::to_string(c) + " has no observed training values");
    const double mu = s / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t t = split.train_range.begin; t < split.train_range.end; ++t)
      for (std::size_t i = 0; i < ds.N; ++i) {
        if (ds.is_missing(t, i, c)) continue;
        var += (ds.at(t, i, c) - mu) * (ds.at(t, i, c) - mu);
      }
    const double sd = std::sqrt(var / static_cast<double>(n));
    if (!(sd > 0.0)) throw DataError("zscore: channel " + std::to_string(c) + " is degenerate (zero variance)");
    st.mean[c] = mu;
    st.std[c] = sd;
  }
  RawDataset out = ds;
  for (std::size_t k = 0; k < out.values.size(); ++k) {
    if (out.missing[k]) {
      out.values[k] = 0.0;  // the normalized mean, so gaps are neutral model inputs
      continue;
    }
    const std::size_t c = k % ds.C;
    out.values[k] = (out.values[k] - st.mean[c]) / st.std[c];
  }
  out.norm_stats = st;
  return out;
}

inline double denormalize(const NormStats& st, std::size_t channel, double v) {
  return v * st.std.at(channel) + st.mean.at(channel);
}

/// Inverse transform of a whole normalized dataset.
inline RawDataset inverse_zscore(const RawDataset& ds) {
  if (!ds.norm_stats) throw DataError("inverse_zscore: dataset is not normalized");
  RawDataset out = ds;
  for (std::size_t k = 0; k < out.values.size(); ++k) {
    if (out.missing[k]) continue;
    out.values[k] = denormalize(*ds.norm_stats, k % ds.C, out.values[k]);
  }
  out.norm_stats.reset();
  return out;
}

// ---------------------------------------------------------------------------
// Windows and samples
// ---------------------------------------------------------------------------

/// Which windows belong to a split range.
enum class WindowPolicy {
  kWithinSplit,  ///< every step of the window lies inside the range
  kEndInSplit,   ///< only the final step (pre-training) or the target (forecasting) must lie inside
};

/// One node's P consecutive length-L patches starting at `start`; row j holds
/// steps [start + jL, start + (j+1)L) flattened time-major then channel.
struct PatchWindow {
  std::size_t node = 0;
  std::size_t start = 0;
  std::size_t P = 0, L = 0, C = 0;
  Tensor patches;  // [P, L·C]
};

inline Tensor extract_patches(const RawDataset& ds, std::size_t node, std::size_t start, std::size_t P,
                              std::size_t L) {
  Tensor out({P, L * ds.C});
  for (std::size_t j = 0; j < P; ++j)
    for (std::size_t s = 0; s < L; ++s)
      for (std::size_t c = 0; c < ds.C; ++c) out.data[(j * L + s) * ds.C + c] = ds.at(start + j * L + s, node, c);
  return out;
}

inline std::vector<std::size_t> pretrain_window_starts(const Range& range, std::size_t P, std::size_t L,
                                                       std::size_t stride,
                                                       WindowPolicy policy = WindowPolicy::kWithinSplit) {
  if (stride == 0) throw ConfigError("windows: stride must be at least 1");
  if (P == 0 || L == 0) throw ConfigError("windows: P and L must be at least 1");
  const std::size_t span = P * L;
  std::vector<std::size_t> starts;
  if (policy == WindowPolicy::kWithinSplit) {
    if (span > range.size()) {
      throw DataError("windows: window of " + std::to_string(span) + " steps exceeds split length " +
                      std::to_string(range.size()));
    }
    for (std::size_t t0 = range.begin; t0 + span <= range.end; t0 += stride) starts.push_back(t0);
  } else {
    // Aligned to the range end, walking backwards while the final step stays inside.
    if (range.end < span || range.size() == 0) {
      throw DataError("windows: no window of " + std::to_string(span) + " steps can end inside the split");
    }
    for (std::size_t last = range.end - 1;; last -= stride) {
      if (last + 1 < span) break;
      starts.push_back(last + 1 - span);
      if (last < range.begin + stride) break;
    }
    std::reverse(starts.begin(), starts.end());
  }
  return starts;
}

/// Windows at every start for every node, node-minor: all nodes of the first start, then the next start.
inline std::vector<PatchWindow> make_pretrain_windows(const RawDataset& ds, const Range& range, std::size_t P,
                                                      std::size_t L, std::size_t stride,
                                                      WindowPolicy policy = WindowPolicy::kWithinSplit) {
  std::vector<PatchWindow> out;
  for (std::size_t t0 : pretrain_window_starts(range, P, L, stride, policy))
    for (std::size_t n = 0; n < ds.N; ++n) out.push_back({n, t0, P, L, ds.C, extract_patches(ds, n, t0, P, L)});
  return out;
}

/// One forecasting sample: P patches of long history starting at `start`,
/// the last of which is the short-term input, followed by T_f target steps.
struct ForecastSample {
  std::size_t start = 0;  // long-history start t₀
  std::size_t P = 0, L = 0, horizon = 0;
  Tensor history;  // [N, L, C]: the final patch S_P
  Tensor target;   // [T_f, N, C]

  std::size_t history_start() const { return start + (P - 1) * L; }
  std::size_t target_start() const { return start + P * L; }
};

inline std::vector<std::size_t> forecast_sample_starts(const Range& range, std::size_t P, std::size_t L,
                                                       std::size_t horizon,
                                                       WindowPolicy policy = WindowPolicy::kWithinSplit) {
  if (P == 0 || L == 0 || horizon == 0) throw ConfigError("samples: P, L and T_f must be at least 1");
  const std::size_t span = P * L;
  std::vector<std::size_t> starts;
  if (policy == WindowPolicy::kWithinSplit) {
    if (span + horizon > range.size()) {
      throw DataError("samples: history plus horizon (" + std::to_string(span + horizon) +
                      " steps) exceeds split length " + std::to_string(range.size()));
    }
    for (std::size_t t0 = range.begin; t0 + span + horizon <= range.end; ++t0) starts.push_back(t0);
  } else {
    const std::size_t first_target = std::max(range.begin, span);
    if (first_target + horizon > range.end) {
      throw DataError("samples: no target window of " + std::to_string(horizon) + " steps fits the split");
    }
    for (std::size_t ts = first_target; ts + horizon <= range.end; ++ts) starts.push_back(ts - span);
  }
  return starts;
}

inline ForecastSample make_forecast_sample(const RawDataset& ds, std::size_t t0, std::size_t P, std::size_t L,
                                           std::size_t horizon) {
  ForecastSample s{t0, P, L, horizon, Tensor({ds.N, L, ds.C}), Tensor({horizon, ds.N, ds.C})};
  const std::size_t h0 = s.history_start();
  for (std::size_t n = 0; n < ds.N; ++n)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < ds.C; ++c) s.history.data[(n * L + l) * ds.C + c] = ds.at(h0 + l, n, c);
  const std::size_t y0 = s.target_start();
  for (std::size_t h = 0; h < horizon; ++h)
    for (std::size_t n = 0; n < ds.N; ++n)
      for (std::size_t c = 0; c < ds.C; ++c) s.target.data[(h * ds.N + n) * ds.C + c] = ds.at(y0 + h, n, c);
  return s;
}

/// Stride-1 samples; each sample's long history ends exactly where its target begins.
inline std::vector<ForecastSample> make_forecast_samples(const RawDataset& ds, const Range& range, std::size_t P,
                                                         std::size_t L, std::size_t horizon,
                                                         WindowPolicy policy = WindowPolicy::kWithinSplit) {
  std::vector<ForecastSample> out;
  for (std::size_t t0 : forecast_sample_starts(range, P, L, horizon, policy))
    out.push_back(make_forecast_sample(ds, t0, P, L, horizon));
  return out;
}

// ---------------------------------------------------------------------------
// STSF container
// ---------------------------------------------------------------------------

inline constexpr char kStsfMagic[4] = {'S', 'T', 'S', 'F'};
inline constexpr std::uint8_t kStsfVersion = 1;

/// Header key (optional, default false): NaN payload entries mark missing values.
inline constexpr const char* kMissingAsNanKey = "missing_as_nan";

inline io::Bytes encode_stsf(const RawDataset& ds) {
  ds.validate();
  const bool any_missing = std::any_of(ds.missing.begin(), ds.missing.end(), [](auto m) { return m != 0; });
  json header = {{"T", ds.T},
                 {"N", ds.N},
                 {"C", ds.C},
                 {"steps_per_day", ds.steps_per_day},
                 {"name", ds.name},
                 {"channel_names", ds.channel_names}};
  if (any_missing) header[kMissingAsNanKey] = true;
  const std::string h = header.dump();
  io::Bytes out;
  out.reserve(9 + h.size() + ds.values.size() * 4);
  io::put_bytes(out, std::string_view(kStsfMagic, 4));
  out.push_back(kStsfVersion);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  io::put_bytes(out, h);
  for (std::size_t k = 0; k < ds.values.size(); ++k) {
    const float f = ds.missing[k] ? std::numeric_limits<float>::quiet_NaN() : static_cast<float>(ds.values[k]);
    io::put_le<float>(out, f);
  }
  return out;
}

inline RawDataset decode_stsf(const io::Bytes& bytes) {
  if (bytes.size() < 4 || !std::equal(kStsfMagic, kStsfMagic + 4, bytes.begin())) {
    throw IoError("STSF: magic mismatch", 0);
  }
  if (bytes.size() < 5) throw IoError("STSF: truncated before version byte", 4);
  if (bytes[4] != kStsfVersion) throw IoError("STSF: unsupported version " + std::to_string(bytes[4]), 4);
  const auto hlen = io::get_le<std::uint32_t>(bytes, 5);
  if (9 + static_cast<std::uint64_t>(hlen) > bytes.size()) throw IoError("STSF: truncated header", bytes.size());
  json header;
  try {
    header = json::parse(bytes.begin() + 9, bytes.begin() + 9 + hlen);
  } catch (const json::exception& e) {
    throw IoError(std::string("STSF: header is not valid JSON: ") + e.what(), 9);
  }
  for (const char* key : {"T", "N", "C", "steps_per_day", "name", "channel_names"}) {
    if (!header.contains(key)) throw IoError(std::string("STSF: header missing key '") + key + "'", 9);
  }
  RawDataset ds;
  try {
    ds = make_dataset(header.at("T").get<std::size_t>(), header.at("N").get<std::size_t>(),
                      header.at("C").get<std::size_t>(), header.at("steps_per_day").get<std::size_t>(),
                      header.at("name").get<std::string>());
    ds.channel_names = header.at("channel_names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw IoError(std::string("STSF: malformed header field: ") + e.what(), 9);
  }
  if (ds.T == 0 || ds.N == 0 || ds.C == 0) throw IoError("STSF: T, N and C must be positive", 9);
  if (ds.channel_names.size() != ds.C) throw IoError("STSF: channel_names length differs from C", 9);
  const bool nan_is_missing = header.value(kMissingAsNanKey, false);
  const std::size_t payload = 9 + hlen;
  const std::uint64_t need = static_cast<std::uint64_t>(ds.T) * ds.N * ds.C * 4;
  if (bytes.size() - payload < need) {
    throw IoError("STSF: payload truncated, expected " + std::to_string(need) + " bytes", bytes.size());
  }
  if (bytes.size() - payload > need) throw IoError("STSF: trailing bytes after payload", payload + need);
  for (std::size_t k = 0; k < ds.values.size(); ++k) {
    const std::size_t off = payload + 4 * k;
    const float f = io::get_le<float>(bytes, off);
    if (!std::isfinite(f)) {
      if (!nan_is_missing || !std::isnan(f)) throw IoError("STSF: non-finite value without missing flag", off);
      ds.missing[k] = 1;
      ds.values[k] = 0.0;
    } else {
      ds.values[k] = static_cast<double>(f);
    }
  }
  return ds;
}

inline void save_dataset(const RawDataset& ds, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_stsf(ds));
}

/// CSV import, one observation per row: timestamp,node,channel,value. A header
/// row is skipped when its value column is not numeric. Timestamps, nodes and
/// channels are ordered numerically when every label is an integer, otherwise
/// lexicographically. Absent (timestamp, node, channel) cells are flagged missing.
inline RawDataset parse_csv(const std::string& text, std::size_t steps_per_day, const std::string& name) {
  struct Row {
    std::string ts, node, ch;
    double value;
    bool missing;
  };
  std::vector<Row> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0, lineno = 0;
  while (std::getline(in, line)) {
    const std::size_t line_off = offset;
    offset += line.size() + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 4) throw IoError("CSV: expected 4 columns on line " + std::to_string(lineno), line_off);
    Row r{f[0], f[1], f[2], 0.0, false};
    const std::string& v = f[3];
    if (v.empty() || v == "nan" || v == "NaN" || v == "NA") {
      r.missing = true;
    } else {
      char* end = nullptr;
      r.value = std::strtod(v.c_str(), &end);
      if (end != v.c_str() + v.size()) {
        if (rows.empty() && lineno == 1) continue;  // header
        throw IoError("CSV: unparseable value '" + v + "' on line " + std::to_string(lineno), line_off);
      }
      if (!std::isfinite(r.value)) r.missing = true;
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw IoError("CSV: no observations", 0);
  auto ordered = [](std::vector<std::string> labels) {
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    const bool all_int = std::all_of(labels.begin(), labels.end(), [](const std::string& s) {
      long long x;
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
      return ec == std::errc() && p == s.data() + s.size();
    });
    if (all_int) {
      std::sort(labels.begin(), labels.end(),
                [](const std::string& a, const std::string& b) { return std::stoll(a) < std::stoll(b); });
    }
    std::map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) idx[labels[i]] = i;
    return std::make_pair(labels, idx);
  };
  std::vector<std::string> ts, nodes, chs;
  for (const auto& r : rows) {
    ts.push_back(r.ts);
    nodes.push_back(r.node);
    chs.push_back(r.ch);
  }
  auto [tl, ti] = ordered(ts);
  auto [nl, ni] = ordered(nodes);
  auto [cl, ci] = ordered(chs);
  RawDataset ds = make_dataset(tl.size(), nl.size(), cl.size(), steps_per_day, name);
  ds.channel_names = cl;
  std::fill(ds.missing.begin(), ds.missing.end(), 1);
  for (const auto& r : rows) {
    const std::size_t k = ds.index(ti[r.ts], ni[r.node], ci[r.ch]);
    ds.values[k] = r.missing ? 0.0 : r.value;
    ds.missing[k] = r.missing ? 1 : 0;
  }
  return ds;
}

/// Loads an STSF file, or a CSV file when the path ends in ".csv".
inline RawDataset load_dataset(const std::filesystem::path& path, std::size_t csv_steps_per_day = 288) {
  if (path.extension() == ".csv") return parse_csv(io::read_text(path), csv_steps_per_day, path.stem().string());
  return decode_stsf(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t nodes = 12;
  std::size_t days = 28;
  std::size_t steps_per_day = 48;
  std::size_t k_planted = 2;
  double noise_sd = 0.0;
  double coupling = 0.5;        ///< weight of the planted-neighbour average
  double weekend_factor = 0.6;  ///< amplitude multiplier on days 5 and 6 of each week
  double offset = 50.0;
  double amplitude = 10.0;
  std::size_t harmonics = 3;  ///< daily harmonics per node (fundamental included)
  double phase_jitter = 0.15;  ///< radians of per-node phase noise around the ring layout
};

/// Directed adjacency, row-major N×N, entry (i, j) = 1 when j feeds i.
struct Adjacency {
  std::size_t N = 0;
  std::vector<std::uint8_t> edges;

  bool operator()(std::size_t i, std::size_t j) const { return edges[i * N + j] != 0; }
  std::size_t row_sum(std::size_t i) const {
    return static_cast<std::size_t>(std::count(edges.begin() + i * N, edges.begin() + (i + 1) * N, 1));
  }
  bool operator==(const Adjacency&) const = default;
};

struct SyntheticData {
  RawDataset dataset;
  Adjacency planted;
};

namespace detail {

/// Euclidean (always non-negative) modulus for possibly negative time indices.
inline long floor_mod(long a, long m) { return ((a % m) + m) % m; }

}  // namespace detail

/// Synthetic periodic traffic-like series.
///
/// Nodes are laid on a randomly permuted ring. Planted neighbours of node i are
/// its ring neighbours at offsets ±1…±⌊k/2⌋ (plus the antipode when k is odd
/// and N even; offsets +1…+k when no symmetric k-regular layout exists), so
/// every row of A* has exactly k ones. Each node's base signal is a daily
/// waveform whose fundamental phase follows the ring position, so nodes that
/// share an edge have correlated phases. The observed series is
///   x_i(t) = offset + w(t)·b_i(t) + coupling · mean_{j ∈ A*(i)} (x_j(t−1) − offset) + ε,
/// with w the weekday/weekend factor and ε ~ N(0, noise_sd²), so noise injected
/// at a node reaches its planted successors one step later. Values are rounded
/// to float32 precision so they survive the STSF container exactly.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  const std::size_t N = spec.nodes;
  if (N < 2) throw ConfigError("synthetic: need at least 2 nodes");
  if (spec.days < 14) throw ConfigError("synthetic: need at least 14 days (two weekly periods)");
  if (spec.k_planted == 0 || spec.k_planted >= N) throw ConfigError("synthetic: k_planted must be in [1, N-1]");
  if (spec.steps_per_day < 2) throw ConfigError("synthetic: steps_per_day must be at least 2");
  if (spec.noise_sd < 0) throw ConfigError("synthetic: noise_sd must be non-negative");
  if (spec.harmonics == 0) throw ConfigError("synthetic: need at least one harmonic");

  Rng rng(spec.seed);
  std::vector<std::size_t> ring(N);
  std::iota(ring.begin(), ring.end(), 0);
  rng.shuffle(ring);  // ring[p] = node at ring position p
  std::vector<std::size_t> pos(N);
  for (std::size_t p = 0; p < N; ++p) pos[ring[p]] = p;

  const std::size_t k = spec.k_planted;
  std::vector<long> offsets;
  const bool symmetric = (k % 2 == 0) || (N % 2 == 0);
  if (symmetric) {
    for (std::size_t m = 1; m <= k / 2; ++m) {
      offsets.push_back(static_cast<long>(m));
      offsets.push_back(-static_cast<long>(m));
    }
    if (k % 2 == 1) offsets.push_back(static_cast<long>(N / 2));
  } else {
    for (std::size_t m = 1; m <= k; ++m) offsets.push_back(static_cast<long>(m));
  }
  Adjacency A{N, std::vector<std::uint8_t>(N * N, 0)};
  for (std::size_t i = 0; i < N; ++i)
    for (long o : offsets) {
      const std::size_t j = ring[static_cast<std::size_t>(detail::floor_mod(static_cast<long>(pos[i]) + o, static_cast<long>(N)))];
      A.edges[i * N + j] = 1;
    }

  struct Wave {
    double amp;
    std::vector<double> coef, phase;
  };
  std::vector<Wave> waves(N);
  for (std::size_t i = 0; i < N; ++i) {
    Wave& w = waves[i];
    w.amp = spec.amplitude * rng.uniform(0.8, 1.2);
    for (std::size_t h = 0; h < spec.harmonics; ++h) {
      if (h == 0) {
        w.coef.push_back(1.0);
        w.phase.push_back(2.0 * M_PI * static_cast<double>(pos[i]) / static_cast<double>(N) +
                          rng.uniform(-spec.phase_jitter, spec.phase_jitter));
      } else {
        w.coef.push_back(rng.uniform(0.0, 0.3));
        w.phase.push_back(rng.uniform(0.0, 2.0 * M_PI));
      }
    }
  }
  const long spd = static_cast<long>(spec.steps_per_day);
  auto base = [&](std::size_t i, long t) {
    const double tau = 2.0 * M_PI * static_cast<double>(detail::floor_mod(t, spd)) / static_cast<double>(spd);
    double v = 0.0;
    for (std::size_t h = 0; h < waves[i].coef.size(); ++h)
      v += waves[i].coef[h] * std::sin(static_cast<double>(h + 1) * tau + waves[i].phase[h]);
    const long day = (t >= 0 ? t : t - spd + 1) / spd;
    const bool weekend = detail::floor_mod(day, 7) >= 5;
    return waves[i].amp * v * (weekend ? spec.weekend_factor : 1.0);
  };

  const std::size_t T = spec.days * spec.steps_per_day;
  RawDataset ds = make_dataset(T, N, 1, spec.steps_per_day, "synthetic");
  // dev[i] = x_i(t−1) − offset, unrounded; before t = 0 the base signal stands in.
  std::vector<double> dev(N), next(N);
  for (std::size_t i = 0; i < N; ++i) dev[i] = base(i, -1);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      double coupled = 0.0;
      for (std::size_t j = 0; j < N; ++j)
        if (A(i, j)) coupled += dev[j];
      coupled /= static_cast<double>(k);
      double v = base(i, static_cast<long>(t)) + spec.coupling * coupled;
      if (spec.noise_sd > 0) v += rng.normal(0.0, spec.noise_sd);
      next[i] = v;
      ds.at(t, i, 0) = static_cast<double>(static_cast<float>(spec.offset + v));
    }
    dev.swap(next);
  }
  return {std::move(ds), std::move(A)};
}

/// Edge list "src,dst,weight" for every non-zero entry; src = j, dst = i for entry (i, j).
inline std::string adjacency_to_csv(const Adjacency& a) {
  std::string out = "src,dst,weight\n";
  for (std::size_t i = 0; i < a.N; ++i)
    for (std::size_t j = 0; j < a.N; ++j)
      if (a(i, j)) out += std::to_string(j) + "," + std::to_string(i) + ",1\n";
  return out;
}

}  // namespace step::data
