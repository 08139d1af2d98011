#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "step/error.hpp"
#include "step/tensor.hpp"

namespace step::optim {

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Moment accumulators and step counter for Adam-family updates.
struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;

  void ensure(const std::vector<Var>& params) {
    if (m.size() == params.size()) return;
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.numel(), 0.0);
      v.emplace_back(p.numel(), 0.0);
    }
  }
};

namespace detail {

enum class Decay { kDecoupled, kCoupled };

inline void adam_update(OptimizerState& st, std::vector<Var>& params, const AdamSettings& s, Decay decay) {
  st.ensure(params);
  st.step += 1;
  const double t = static_cast<double>(st.step);
  const double bc1 = 1.0 - std::pow(s.beta1, t);
  const double bc2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Var& p = params[k];
    if (st.m[k].size() != p.numel()) {
      throw ShapeError("optimizer: moment size " + std::to_string(st.m[k].size()) + " does not match parameter " +
                       to_string(p.shape()));
    }
    auto& x = p.mutable_value().data;
    const std::vector<double> zero;
    const auto& g = p.has_grad() ? p.grad_buffer() : zero;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double gi = g.empty() ? 0.0 : g[i];
      if (decay == Decay::kCoupled) gi += s.weight_decay * x[i];
      st.m[k][i] = s.beta1 * st.m[k][i] + (1.0 - s.beta1) * gi;
      st.v[k][i] = s.beta2 * st.v[k][i] + (1.0 - s.beta2) * gi * gi;
      const double mhat = st.m[k][i] / bc1;
      const double vhat = st.v[k][i] / bc2;
      if (decay == Decay::kDecoupled) x[i] -= s.lr * s.weight_decay * x[i];
      x[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
  }
}

}  // namespace detail

/// AdamW: weight decay applied directly to the parameter, outside the moments.
inline void adamw_step(OptimizerState& st, std::vector<Var>& params, const AdamSettings& s) {
  detail::adam_update(st, params, s, detail::Decay::kDecoupled);
}

/// Classical Adam: weight decay folded into the gradient (L2 penalty).
inline void adam_step(OptimizerState& st, std::vector<Var>& params, const AdamSettings& s) {
  detail::adam_update(st, params, s, detail::Decay::kCoupled);
}

/// Step decay: rate(epoch) = base · gamma^(number of milestones ≤ epoch), epochs counted from 0.
struct LrSchedule {
  double base = 1e-3;
  std::vector<std::size_t> milestones;
  double gamma = 0.5;
};

inline double lr_at(const LrSchedule& s, std::size_t epoch) {
  const auto passed = std::count_if(s.milestones.begin(), s.milestones.end(), [&](std::size_t m) { return m <= epoch; });
  return s.base * std::pow(s.gamma, static_cast<double>(passed));
}

inline double global_grad_norm(const std::vector<Var>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : const_cast<Var&>(p).grad_buffer()) sq += g * g;
  }
  return std::sqrt(sq);
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping happened).
inline double clip_gradients(std::vector<Var>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_gradients: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double factor = max_norm / norm;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (double& g : p.grad_buffer()) g *= factor;
  }
  return factor;
}

}  // namespace step::optim
