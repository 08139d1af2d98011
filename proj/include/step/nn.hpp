#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "step/error.hpp"
#include "step/rng.hpp"
#include "step/tensor.hpp"

namespace step::nn {

/// Ordered collection of named trainable leaves. Order is registration order,
/// which fixes checkpoint layout and optimizer iteration.
class ParamStore {
 public:
  Var& add(const std::string& name, Tensor init, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("ParamStore: duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, Var(std::move(init), trainable));
    return entries_.back().second;
  }

  Var& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  const Var& get(const std::string& name) const { return const_cast<ParamStore*>(this)->get(name); }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<std::pair<std::string, Var>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }

  std::vector<Var> vars() const {
    std::vector<Var> out;
    for (const auto& [n, v] : entries_) {
      if (v.requires_grad()) out.push_back(v);
    }
    return out;
  }

  void zero_grad() {
    for (auto& [n, v] : entries_) v.zero_grad();
  }

  std::size_t size() const { return entries_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_) n += v.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

inline Tensor uniform_tensor(Rng& rng, Shape shape, double bound) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

/// y = x·W + b, W: [in, out]. Weights and bias drawn from U(−1/√in, 1/√in).
struct Linear {
  Var w, b;
  std::size_t in = 0, out = 0;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::size_t in_features, std::size_t out_features, Rng& rng)
      : in(in_features), out(out_features) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    w = ps.add(name + ".w", uniform_tensor(rng, {in_features, out_features}, bound));
    b = ps.add(name + ".b", uniform_tensor(rng, {out_features}, bound));
  }

  Var operator()(const Var& x) const { return add_row(matmul(x, w), b); }
};

/// Layer norm over the last axis with learnable gain and shift (initialised to 1 and 0).
struct LayerNorm {
  Var gain, shift;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, std::size_t width) {
    gain = ps.add(name + ".gain", Tensor({width}, 1.0));
    shift = ps.add(name + ".shift", Tensor({width}, 0.0));
  }

  Var operator()(const Var& x) const { return add_row(mul_row(layer_norm(x), gain), shift); }
};

/// Two affine maps with a ReLU between them.
struct Mlp {
  Linear first, second;

  Mlp() = default;
  Mlp(ParamStore& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
      : first(ps, name + ".0", in, hidden, rng), second(ps, name + ".1", hidden, out, rng) {}

  Var operator()(const Var& x) const { return second(relu(first(x))); }
};

/// Per-head softmax(Q·Kᵀ/√(d/heads))·V with heads concatenated, before any
/// output projection. Q, K, V: [B, n, d].
inline Var multi_head_attention_core(const Var& q, const Var& k, const Var& v, std::size_t heads) {
  if (q.shape().size() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention: Q/K/V shape mismatch " + to_string(q.shape()) + ", " + to_string(k.shape()) +
                     ", " + to_string(v.shape()));
  }
  const std::size_t B = q.dim(0), n = q.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::size_t dh = d / heads;
  auto split = [&](const Var& x) {
    return reshape(permute(reshape(x, {B, n, heads, dh}), {0, 2, 1, 3}), {B * heads, n, dh});
  };
  Var scores = scale(bmm(split(q), split(k), /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Var ctx = bmm(softmax(scores, -1), split(v));
  return reshape(permute(reshape(ctx, {B, heads, n, dh}), {0, 2, 1, 3}), {B, n, d});
}

struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, std::size_t d, std::size_t num_heads, Rng& rng)
      : heads(num_heads) {
    if (num_heads == 0 || d % num_heads != 0) {
      throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                        std::to_string(num_heads) + " heads");
    }
    q = Linear(ps, name + ".q", d, d, rng);
    k = Linear(ps, name + ".k", d, d, rng);
    v = Linear(ps, name + ".v", d, d, rng);
    o = Linear(ps, name + ".o", d, d, rng);
  }

  Var operator()(const Var& x) const { return o(multi_head_attention_core(q(x), k(x), v(x), heads)); }
};

/// Pre-norm Transformer block:
///   x ← x + MHA(LN(x));  x ← x + FFN(LN(x)),  FFN = Linear(d,4d) → ReLU → Linear(4d,d).
struct TransformerBlock {
  LayerNorm norm1, norm2;
  MultiHeadAttention attn;
  Mlp ffn;

  TransformerBlock() = default;
  TransformerBlock(ParamStore& ps, const std::string& name, std::size_t d, std::size_t heads, Rng& rng)
      : norm1(ps, name + ".norm1", d),
        norm2(ps, name + ".norm2", d),
        attn(ps, name + ".attn", d, heads, rng),
        ffn(ps, name + ".ffn", d, 4 * d, d, rng) {}

  /// x: [B, n, d].
  Var operator()(const Var& x) const {
    Var h = add(x, attn(norm1(x)));
    return add(h, ffn(norm2(h)));
  }
};

}  // namespace step::nn
