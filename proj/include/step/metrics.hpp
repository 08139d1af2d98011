#pragma once

// Error metrics on de-normalized values. Every metric takes an inclusion mask
// (empty mask = include everything); MAPE additionally drops entries whose
// ground truth is within 1e-6 of zero.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "step/error.hpp"
#include "step/io.hpp"

namespace step::metrics {

inline constexpr double kMapeZero = 1e-6;

using Mask = std::vector<std::uint8_t>;

namespace detail {

inline void check(const std::vector<double>& pred, const std::vector<double>& truth, const Mask& mask,
                  const char* what) {
  if (pred.size() != truth.size()) throw ShapeError(std::string(what) + ": prediction and truth sizes differ");
  if (!mask.empty() && mask.size() != pred.size()) throw ShapeError(std::string(what) + ": mask size differs");
}

inline bool included(const Mask& m, std::size_t i) { return m.empty() || m[i]; }

}  // namespace detail

inline double mae(const std::vector<double>& pred, const std::vector<double>& truth, const Mask& mask = {}) {
  detail::check(pred, truth, mask, "mae");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (detail::included(mask, i)) s += std::abs(pred[i] - truth[i]), ++n;
  if (n == 0) throw DataError("mae: no entries included");
  return s / static_cast<double>(n);
}

inline double rmse(const std::vector<double>& pred, const std::vector<double>& truth, const Mask& mask = {}) {
  detail::check(pred, truth, mask, "rmse");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (detail::included(mask, i)) s += (pred[i] - truth[i]) * (pred[i] - truth[i]), ++n;
  if (n == 0) throw DataError("rmse: no entries included");
  return std::sqrt(s / static_cast<double>(n));
}

/// Fraction, not percent.
inline double mape(const std::vector<double>& pred, const std::vector<double>& truth, const Mask& mask = {}) {
  detail::check(pred, truth, mask, "mape");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (detail::included(mask, i) && std::abs(truth[i]) >= kMapeZero) s += std::abs(pred[i] - truth[i]) / std::abs(truth[i]), ++n;
  if (n == 0) throw DataError("mape: every entry is excluded");
  return s / static_cast<double>(n);
}

struct MetricRow {
  std::string horizon;  // "3", "6", "12" or "mean"
  double mae = 0, rmse = 0, mape = 0;
  std::size_t count = 0;
  std::size_t mape_excluded = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  const MetricRow& at(const std::string& horizon) const {
    for (const auto& r : rows)
      if (r.horizon == horizon) return r;
    throw ConfigError("report: no row for horizon '" + horizon + "'");
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "horizon,mae,rmse,mape\n";
    for (const auto& r : rows)
      os << r.horizon << ',' << io::fmt_double(r.mae) << ',' << io::fmt_double(r.rmse) << ',' << io::fmt_double(r.mape)
         << '\n';
    return os.str();
  }

  json to_json() const {
    json j = json::array();
    for (const auto& r : rows)
      j.push_back({{"horizon", r.horizon}, {"mae", r.mae}, {"rmse", r.rmse}, {"mape", r.mape}, {"count", r.count},
                   {"mape_excluded", r.mape_excluded}});
    return j;
  }
};

inline MetricRow metric_row(std::string label, const std::vector<double>& pred, const std::vector<double>& truth,
                            const Mask& mask) {
  MetricRow r;
  r.horizon = std::move(label);
  r.mae = mae(pred, truth, mask);
  r.rmse = rmse(pred, truth, mask);
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (detail::included(mask, i)) {
      ++r.count;
      if (std::abs(truth[i]) < kMapeZero) ++r.mape_excluded;
    }
  r.mape = r.count > r.mape_excluded ? mape(pred, truth, mask) : std::nan("");
  return r;
}

/// Predictions and truths laid out [S, T_f, N, C]. Rows for single horizon
/// steps (1-based; those beyond T_f are skipped) plus "mean" over all steps.
inline MetricReport horizon_report(const std::vector<double>& pred, const std::vector<double>& truth, const Mask& mask,
                                   std::size_t samples, std::size_t horizon, std::size_t per_step,
                                   const std::vector<std::size_t>& steps = {3, 6, 12}) {
  if (pred.size() != samples * horizon * per_step) throw ShapeError("report: prediction size does not match layout");
  MetricReport rep;
  for (std::size_t h : steps) {
    if (h == 0 || h > horizon) continue;
    std::vector<double> p, t;
    Mask m;
    for (std::size_t s = 0; s < samples; ++s)
      for (std::size_t e = 0; e < per_step; ++e) {
        const std::size_t i = (s * horizon + h - 1) * per_step + e;
        p.push_back(pred[i]);
        t.push_back(truth[i]);
        m.push_back(detail::included(mask, i));
      }
    rep.rows.push_back(metric_row(std::to_string(h), p, t, m));
  }
  rep.rows.push_back(metric_row("mean", pred, truth, mask));
  return rep;
}

}  // namespace step::metrics
