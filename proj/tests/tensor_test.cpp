#include <gtest/gtest.h>

#include <cmath>

#include "step/nn.hpp"
#include "step/tensor.hpp"
#include "test_support.hpp"

using namespace step;
using step::testing::finite_difference_check;
using step::testing::random_tensor;

namespace {

Var leaf(Rng& rng, Shape s) { return Var(random_tensor(rng, std::move(s)), true); }

}  // namespace

TEST(ForwardOps, SoftmaxOfZerosIsUniform) {
  Var y = softmax(Var(Tensor({2}, {0.0, 0.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(ForwardOps, SoftmaxRowsAreDistributions) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Var x(random_tensor(rng, {3, 5, 4}, -20.0, 20.0));
    for (long axis : {0L, 1L, 2L}) {
      Var y = softmax(x, axis);
      const auto v = step::detail::axis_view(x.shape(), static_cast<std::size_t>(axis));
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
          double s = 0.0;
          for (std::size_t e = 0; e < v.extent; ++e) {
            const double p = y.value()[(o * v.extent + e) * v.inner + i];
            EXPECT_GE(p, 0.0);
            s += p;
          }
          EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
  }
}

TEST(ForwardOps, LayerNormOfConstantIsZero) {
  Var y = layer_norm(Var(Tensor({2, 4}, 3.25)));
  for (double v : y.value().data) EXPECT_EQ(v, 0.0);
}

TEST(ForwardOps, MatmulIdentity) {
  Rng rng(1);
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Tensor m = random_tensor(rng, {3, 3});
  EXPECT_EQ(matmul(Var(eye), Var(m)).value(), m);
}

TEST(ForwardOps, ShapeMismatchNamesPrimitiveAndShapes) {
  try {
    matmul(Var(Tensor({2, 3})), Var(Tensor({4, 5})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,5]"), std::string::npos);
  }
  EXPECT_THROW(add(Var(Tensor({2})), Var(Tensor({3}))), ShapeError);
  EXPECT_THROW(conv1d(Var(Tensor({1, 4, 2})), Var(Tensor({2, 3, 1}))), ShapeError);
}

TEST(ForwardOps, CausalConvMatchesDirectSum) {
  Rng rng(3);
  Tensor x = random_tensor(rng, {2, 7, 3});
  Tensor k = random_tensor(rng, {2, 3, 4});
  const std::size_t dil = 2;
  Var y = conv1d(Var(x), Var(k), dil);
  ASSERT_EQ(y.shape(), (Shape{2, 7, 4}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 7; ++t)
      for (std::size_t o = 0; o < 4; ++o) {
        double want = 0.0;
        for (std::size_t tap = 0; tap < 2; ++tap) {
          const long s = static_cast<long>(t) - static_cast<long>((1 - tap) * dil);
          if (s < 0) continue;
          for (std::size_t c = 0; c < 3; ++c) want += x.data[(b * 7 + s) * 3 + c] * k.data[(tap * 3 + c) * 4 + o];
        }
        EXPECT_NEAR(y.value().data[(b * 7 + t) * 4 + o], want, 1e-14);
      }
}

TEST(ForwardOps, ValidStridedConvLength) {
  Var y = conv1d(Var(Tensor({1, 100, 1}, 1.0)), Var(Tensor({12, 1, 2}, 1.0)), 1, 12, false);
  EXPECT_EQ(y.shape(), (Shape{1, 8, 2}));
  EXPECT_DOUBLE_EQ(y.value()[0], 12.0);
  EXPECT_THROW(conv1d(Var(Tensor({1, 5, 1})), Var(Tensor({6, 1, 1})), 1, 1, false), ShapeError);
}

TEST(Attention, IdenticalKeysGiveMeanOfValues) {
  Rng rng(11);
  const std::size_t n = 5, d = 8;
  Tensor q = random_tensor(rng, {1, n, d});
  Tensor k({1, n, d});
  Tensor row = random_tensor(rng, {d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) k.data[i * d + c] = row.data[c];
  Tensor v = random_tensor(rng, {1, n, d});
  Var out = nn::multi_head_attention_core(Var(q), Var(k), Var(v), 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      double mean = 0.0;
      for (std::size_t j = 0; j < n; ++j) mean += v.data[j * d + c];
      EXPECT_NEAR(out.value().data[i * d + c], mean / n, 1e-12);
    }
}

TEST(Attention, SequenceLengthOneReturnsValues) {
  Rng rng(12);
  Tensor q = random_tensor(rng, {1, 1, 4}), k = random_tensor(rng, {1, 1, 4}), v = random_tensor(rng, {1, 1, 4});
  Var out = nn::multi_head_attention_core(Var(q), Var(k), Var(v), 2);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.value().data[c], v.data[c], 1e-15);
}

TEST(Attention, MatchesDirectDenseFormula) {
  Rng rng(13);
  const std::size_t n = 2, d = 4, heads = 2, dh = d / heads;
  Tensor q = random_tensor(rng, {1, n, d}), k = random_tensor(rng, {1, n, d}), v = random_tensor(rng, {1, n, d});
  Var out = nn::multi_head_attention_core(Var(q), Var(k), Var(v), heads);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        s[j] = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s[j] += q.data[i * d + h * dh + c] * k.data[j * d + h * dh + c];
        s[j] /= std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double want = 0.0;
        for (std::size_t j = 0; j < n; ++j) want += s[j] / z * v.data[j * d + h * dh + c];
        EXPECT_NEAR(out.value().data[i * d + h * dh + c], want, 1e-12);
      }
    }
}

TEST(Attention, WidthNotDivisibleByHeadsIsConfigError) {
  Rng rng(1);
  nn::ParamStore ps;
  EXPECT_THROW(nn::MultiHeadAttention(ps, "a", 6, 4, rng), ConfigError);
  Var x(Tensor({1, 2, 6}));
  EXPECT_THROW(nn::multi_head_attention_core(x, x, x, 4), ConfigError);
}

TEST(Backward, SumOfSquares) {
  Var x(Tensor({2}, {1.0, 2.0}), true);
  Var loss = sum(mul(x, x));
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  EXPECT_DOUBLE_EQ(loss.grad()[0], 1.0);
}

TEST(Backward, ReluOfNegativeHasZeroGrad) {
  Var x(Tensor({1}, {-3.0}), true);
  sum(relu(x)).backward();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Backward, NonScalarLossRejected) {
  Var x(Tensor({2}, {1.0, 2.0}), true);
  EXPECT_THROW(mul(x, x).backward(), ShapeError);
}

TEST(Backward, UnreachableParameterGetsZero) {
  Var x(Tensor({2}, {1.0, 2.0}), true);
  Var unused(Tensor({3}, 1.0), true);
  unused.zero_grad();
  sum(x).backward();
  for (double g : unused.grad().data) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NoGradGuardBuildsNoGraph) {
  Var x(Tensor({2}, {1.0, 2.0}), true);
  NoGradGuard guard;
  Var y = sum(mul(x, x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, ThreeLayerPerceptronMatchesFiniteDifferences) {
  Rng rng(21);
  nn::ParamStore ps;
  nn::Linear l1(ps, "l1", 5, 7, rng), l2(ps, "l2", 7, 6, rng), l3(ps, "l3", 6, 3, rng);
  Var x(random_tensor(rng, {4, 5}));
  auto loss = [&] { return mean(mul(l3(tanh(l2(relu(l1(x))))), l3(tanh(l2(relu(l1(x))))))); };
  auto r = finite_difference_check(loss, ps.vars());
  EXPECT_LT(r.max_rel_error, 1e-4) << "checked " << r.checked;
}

TEST(Backward, DeterministicAcrossRuns) {
  Rng rng(5);
  nn::ParamStore ps;
  nn::TransformerBlock block(ps, "b", 8, 2, rng);
  Var x(random_tensor(rng, {2, 3, 8}));
  auto grads = [&] {
    ps.zero_grad();
    sum(block(x)).backward();
    std::vector<Tensor> g;
    for (auto& v : ps.vars()) g.push_back(v.grad());
    return g;
  };
  EXPECT_EQ(grads(), grads());
}

// Every primitive against the finite-difference oracle.
TEST(Backward, PrimitivesMatchFiniteDifferences) {
  Rng rng(99);
  struct Case {
    const char* name;
    std::function<Var(std::vector<Var>&)> f;
    std::vector<Shape> shapes;
  };
  std::vector<Case> cases = {
      {"mul_row", [](auto& v) { return sum(mul(mul_row(v[0], v[1]), v[0])); }, {{3, 4}, {4}}},
      {"softmax0", [](auto& v) { return sum(mul(softmax(v[0], 0), v[1])); }, {{3, 4}, {3, 4}}},
      {"softmax1", [](auto& v) { return sum(mul(softmax(v[0], 1), v[1])); }, {{3, 4}, {3, 4}}},
      {"layer_norm", [](auto& v) { return sum(mul(layer_norm(v[0]), v[1])); }, {{3, 5}, {3, 5}}},
      {"sigmoid_tanh", [](auto& v) { return sum(mul(sigmoid(v[0]), tanh(v[1]))); }, {{6}, {6}}},
      {"abs", [](auto& v) { return sum(mul(abs(v[0]), v[1])); }, {{6}, {6}}},
      {"clamp_log", [](auto& v) { return sum(clamp_log(add_scalar(mul(v[0], v[0]), 0.1), 1e-8)); }, {{5}}},
      {"bmm", [](auto& v) { return sum(mul(bmm(v[0], v[1]), bmm(v[0], v[1]))); }, {{2, 3, 4}, {2, 4, 5}}},
      {"bmm_nt", [](auto& v) { return sum(mul(bmm(v[0], v[1], true), bmm(v[0], v[1], true))); },
       {{2, 3, 4}, {2, 5, 4}}},
      {"permute", [](auto& v) { return sum(mul(permute(v[0], {2, 0, 1}), v[1])); }, {{2, 3, 4}, {4, 2, 3}}},
      {"concat_slice",
       [](auto& v) {
         Var c = concat({v[0], v[1]}, 1);
         return sum(mul(slice(c, 1, 1, 5), slice(c, 1, 0, 4)));
       },
       {{2, 3}, {2, 2}}},
      {"index_select", [](auto& v) { return sum(mul(index_select(v[0], 0, {2, 0, 2}), v[1])); }, {{3, 4}, {3, 4}}},
      {"mean_axis", [](auto& v) { return sum(mul(mean_axis(v[0], 1), v[1])); }, {{2, 3, 4}, {2, 4}}},
      {"conv_causal",
       [](auto& v) { Var y = conv1d(v[0], v[1], 2); return sum(mul(y, y)); }, {{2, 6, 3}, {2, 3, 4}}},
      {"conv_valid_strided",
       [](auto& v) { Var y = conv1d(v[0], v[1], 1, 2, false); return sum(mul(y, y)); }, {{2, 9, 2}, {3, 2, 3}}},
      {"pair_sum", [](auto& v) { Var y = pair_sum(v[0], v[1]); return sum(mul(y, y)); }, {{3, 2}, {4, 2}}},
      {"node_mix", [](auto& v) { Var y = node_mix(v[0], v[1]); return sum(mul(y, y)); }, {{3, 3}, {2, 3, 4}}},
  };
  for (auto& c : cases) {
    std::vector<Var> vars;
    for (auto& s : c.shapes) vars.push_back(leaf(rng, s));
    auto r = finite_difference_check([&] { return c.f(vars); }, vars);
    EXPECT_LT(r.max_rel_error, 1e-4) << c.name;
  }
  // Row normalization needs strictly positive rows.
  Var a(random_tensor(rng, {3, 3}, 0.1, 1.0), true);
  Var w(random_tensor(rng, {3, 3}), false);
  auto r = finite_difference_check([&] { return sum(mul(row_normalize(a), w)); }, {a});
  EXPECT_LT(r.max_rel_error, 1e-4) << "row_normalize";
}
