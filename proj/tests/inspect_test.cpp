#include <gtest/gtest.h>

#include <cmath>

#include "step/inspect.hpp"
#include "test_support.hpp"

using namespace step;
using namespace step::inspect;
using step::testing::random_tensor;

namespace {

double oracle_cosine(const Tensor& m, std::size_t a, std::size_t b) {
  const std::size_t d = m.shape[1];
  double dot = 0, na = 0, nb = 0;
  for (std::size_t e = 0; e < d; ++e) {
    dot += m.data[a * d + e] * m.data[b * d + e];
    na += m.data[a * d + e] * m.data[a * d + e];
    nb += m.data[b * d + e] * m.data[b * d + e];
  }
  return dot / std::sqrt(na * nb);
}

Tensor from_rows(std::vector<std::vector<double>> rows) {
  Tensor t({rows.size(), rows[0].size()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) t.data[i * rows[0].size() + j] = rows[i][j];
  return t;
}

}  // namespace

TEST(Cosine, MatchesOracleAndIsSymmetricWithUnitDiagonal) {
  Rng rng(3);
  Tensor m = random_tensor(rng, {9, 5});
  Tensor s = cosine_similarity(m);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_NEAR(s.data[i * 9 + i], 1.0, 1e-12);
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_NEAR(s.data[i * 9 + j], oracle_cosine(m, i, j), 1e-12);
      EXPECT_EQ(s.data[i * 9 + j], s.data[j * 9 + i]);
      EXPECT_LE(std::abs(s.data[i * 9 + j]), 1.0);
    }
  }
}

TEST(Cosine, ScaleInvariant) {
  Rng rng(4);
  Tensor m = random_tensor(rng, {4, 3});
  Tensor m2 = m;
  for (std::size_t e = 0; e < 3; ++e) m2.data[2 * 3 + e] *= 7.5;
  Tensor a = cosine_similarity(m), b = cosine_similarity(m2);
  for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-12);
}

TEST(Cosine, ZeroRowIsRejected) {
  EXPECT_THROW(cosine_similarity(from_rows({{1, 0}, {0, 0}})), DataError);
}

TEST(TopK, OrdersByScoreAndBreaksTiesByIndex) {
  Tensor s = from_rows({{1, .5, .9, .5, .1}, {.5, 1, 0, 0, 0}, {.9, 0, 1, 0, 0}, {.5, 0, 0, 1, 0}, {.1, 0, 0, 0, 1}});
  EXPECT_EQ(top_k_similar(s, 0, 3), (std::vector<std::size_t>{2, 1, 3}));
  EXPECT_EQ(top_k_similar(s, 1, 4), (std::vector<std::size_t>{0, 2, 3, 4}));
  EXPECT_THROW(top_k_similar(s, 0, 0), ConfigError);
  EXPECT_THROW(top_k_similar(s, 0, 5), ConfigError);
  EXPECT_THROW(top_k_similar(s, 5, 1), ConfigError);
}

TEST(TopK, NeverReturnsQueryAndMatchesSortOracle) {
  Rng rng(5);
  Tensor s = cosine_similarity(random_tensor(rng, {12, 4}));
  for (std::size_t j = 0; j < 12; ++j) {
    auto got = top_k_similar(s, j, 3);
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < 12; ++i)
      if (i != j) all.push_back({-s.data[j * 12 + i], i});
    std::sort(all.begin(), all.end());
    for (std::size_t q = 0; q < 3; ++q) {
      EXPECT_NE(got[q], j);
      EXPECT_EQ(got[q], all[q].second);
    }
  }
}

TEST(LagSimilarity, PeriodicRowsPeakAtThePeriod) {
  // Rows repeat every 4 positions.
  Tensor m({12, 4});
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t e = 0; e < 4; ++e) m.data[i * 4 + e] = (i % 4 == e) ? 1.0 : 0.1;
  Tensor s = cosine_similarity(m);
  EXPECT_NEAR(mean_lag_similarity(s, 4), 1.0, 1e-12);
  EXPECT_LT(mean_lag_similarity(s, 2), 0.5);
  EXPECT_THROW(mean_lag_similarity(s, 0), ConfigError);
  EXPECT_THROW(mean_lag_similarity(s, 12), ConfigError);
}

TEST(Artifacts, MatrixCsvIsHeaderless) {
  Tensor m = from_rows({{1, 0.5}, {0.25, -1}});
  EXPECT_EQ(matrix_csv(m), "1,0.5\n0.25,-1\n");
}

TEST(Artifacts, HeatmapHasOneCellPerEntry) {
  Tensor m = from_rows({{1, -1, 0}, {0, 1, 0.5}});
  std::string svg = heatmap_svg(m, "t");
  std::size_t n = 0;
  for (std::size_t p = svg.find("<rect"); p != std::string::npos; p = svg.find("<rect", p + 1)) ++n;
  EXPECT_EQ(n, 6u);
  EXPECT_NE(svg.find("#ff0000"), std::string::npos);
  EXPECT_NE(svg.find("#0000ff"), std::string::npos);
  EXPECT_NE(svg.find("#ffffff"), std::string::npos);
}

class DumpTest : public ::testing::Test {
 protected:
  void SetUp() override {
    data::SyntheticSpec spec;
    spec.nodes = 3;
    spec.days = 14;
    spec.steps_per_day = 16;
    raw = data::generate_synthetic(spec).dataset;
    split = data::SplitSpec::resolve(raw.T, 0.7, 0.1, 0.2);
    norm = data::fit_apply_zscore(raw, split);
    cfg.P = 8;
    cfg.L = 4;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.r = 0.5;
    Rng rng(7);
    model = std::make_unique<tsformer::TSFormer>(cfg, rng);
  }
  data::RawDataset raw, norm;
  data::SplitSpec split;
  tsformer::TSFormerConfig cfg;
  std::unique_ptr<tsformer::TSFormer> model;
};

TEST_F(DumpTest, LayoutAndDenormalization) {
  auto o = reconstruction_dump(*model, norm, 1, 10, 42);
  ASSERT_EQ(o.rows.size(), cfg.P * cfg.L);
  EXPECT_EQ(o.mask.masked.size(), 4u);
  for (std::size_t i = 0; i < o.rows.size(); ++i) {
    const auto& r = o.rows[i];
    EXPECT_EQ(r.step, 10 + i);
    EXPECT_NEAR(r.original, raw.at(r.step, 1, 0), 1e-9);
    EXPECT_EQ(r.masked, r.reconstruction.has_value());
  }
  std::string csv = o.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,original,masked,reconstruction");
  // Unmasked rows end in an empty reconstruction field.
  for (const auto& r : o.rows)
    if (!r.masked) {
      std::string prefix = std::to_string(r.step) + ",";
      auto p = csv.find("\n" + prefix);
      ASSERT_NE(p, std::string::npos);
      auto end = csv.find('\n', p + 1);
      EXPECT_EQ(csv[end - 1], ',');
      break;
    }
  EXPECT_GE(o.masked_mae(), 0.0);
  EXPECT_NE(o.to_svg().find("<polyline"), std::string::npos);
}

TEST_F(DumpTest, MaskSeedIsReproducible) {
  auto a = reconstruction_dump(*model, norm, 0, 0, 9);
  auto b = reconstruction_dump(*model, norm, 0, 0, 9);
  EXPECT_EQ(a.to_csv(), b.to_csv());
  EXPECT_EQ(a.to_svg(), b.to_svg());
}

TEST_F(DumpTest, BadArgumentsAreRejected) {
  EXPECT_THROW(reconstruction_dump(*model, norm, 3, 0, 1), ConfigError);
  EXPECT_THROW(reconstruction_dump(*model, norm, 0, raw.T - 10, 1), DataError);
}

TEST_F(DumpTest, PositionalSimilarityIsSquare) {
  Tensor s = posemb_similarity(*model);
  ASSERT_EQ(s.shape, (Shape{cfg.P, cfg.P}));
  for (std::size_t i = 0; i < cfg.P; ++i) EXPECT_NEAR(s.data[i * cfg.P + i], 1.0, 1e-12);
}

TEST_F(DumpTest, PatchSimilarityUsesTheNodesRows) {
  Tensor block = tsformer::represent_window(*model, norm, 0);
  Tensor s = patch_similarity(block, 2);
  Tensor rows = node_rows(block, 2);
  EXPECT_NEAR(s.data[1], oracle_cosine(rows, 0, 1), 1e-12);
  EXPECT_THROW(node_rows(block, 3), ShapeError);
}
