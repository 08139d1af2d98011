#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "step/tsformer.hpp"
#include "test_support.hpp"

using namespace step;
using namespace step::tsformer;
using step::testing::finite_difference_check;
using step::testing::random_tensor;

namespace {

TSFormerConfig tiny_config(std::size_t P = 6, std::size_t L = 4, std::size_t d = 8) {
  TSFormerConfig c;
  c.P = P;
  c.L = L;
  c.d = d;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.r = 0.5;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "step_tsformer_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void zero_positions(TSFormer& m) {
  for (double& v : m.pos_embedding().mutable_value().data) v = 0.0;
}

// Copy-last-unmasked baseline: each hidden patch is predicted by the nearest
// visible patch before it (or the first visible one when none precedes it).
double copy_last_baseline(const Tensor& x /* [B,P,W] */, const MaskSpec& m) {
  const std::size_t B = x.shape[0], P = x.shape[1], W = x.shape[2];
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j : m.masked) {
      std::size_t src = m.unmasked.front();
      for (std::size_t u : m.unmasked)
        if (u < j) src = u;
      for (std::size_t w = 0; w < W; ++w)
        total += std::abs(x.data[(b * P + src) * W + w] - x.data[(b * P + j) * W + w]);
    }
  return total / static_cast<double>(B * m.masked.size() * W);
}

}  // namespace

TEST(Mask, CountIsForcedByRatio) {
  Rng rng(1);
  EXPECT_EQ(sample_mask(rng, 4, 0.75).masked.size(), 3u);
  EXPECT_EQ(sample_mask(rng, 336, 0.75).masked.size(), 252u);
  EXPECT_EQ(sample_mask(rng, 168, 0.75).masked.size(), 126u);
  EXPECT_EQ(mask_count(2, 0.25), 1u);  // 0.5 rounds toward masking more
}

TEST(Mask, PartitionsPositionsAndIsSorted) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t P = 2 + rng.below(40);
    const double r = rng.uniform(0.05, 0.95);
    const std::size_t k = mask_count(P, r);
    if (k == 0 || k >= P) continue;
    MaskSpec m = sample_mask(rng, P, r);
    ASSERT_EQ(m.masked.size(), k);
    std::vector<int> seen(P, 0);
    for (auto j : m.masked) seen[j]++;
    for (auto j : m.unmasked) seen[j]++;
    for (int s : seen) EXPECT_EQ(s, 1);
    EXPECT_TRUE(std::is_sorted(m.masked.begin(), m.masked.end()));
    EXPECT_TRUE(std::is_sorted(m.unmasked.begin(), m.unmasked.end()));
  }
}

TEST(Mask, DegenerateCountsAreRejected) {
  Rng rng(3);
  EXPECT_THROW(sample_mask(rng, 1, 0.75), ConfigError);
  EXPECT_THROW(sample_mask(rng, 10, 0.01), ConfigError);
  EXPECT_THROW(sample_mask(rng, 10, 0.97), ConfigError);
  EXPECT_THROW(sample_mask(rng, 10, 0.0), ConfigError);
  EXPECT_THROW(sample_mask(rng, 10, 1.0), ConfigError);
}

TEST(Mask, DeterministicGivenGeneratorState) {
  Rng a(99), b(99);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_mask(a, 30, 0.75).masked, sample_mask(b, 30, 0.75).masked);
}

TEST(Mask, EveryPositionMaskedAtTheRatio) {
  Rng rng(4);
  std::vector<int> hits(8, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i)
    for (auto j : sample_mask(rng, 8, 0.5).masked) hits[j]++;
  for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / draws, 0.5, 0.02);
}

TEST(Embed, ZeroPatchGivesBias) {
  Rng rng(5);
  TSFormer m(tiny_config(), rng);
  Var u = m.embed_patches(Var(Tensor({1, 6, 4})));
  for (std::size_t j = 0; j < 6; ++j)
    for (std::size_t e = 0; e < 8; ++e) EXPECT_EQ(u.value().data[j * 8 + e], m.embedding().b.value()[e]);
}

TEST(Embed, IdentityWeightsCopyPatches) {
  Rng rng(6);
  TSFormer m(tiny_config(6, 8, 8), rng);
  auto& w = m.embedding().w.mutable_value();
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) w.data[i * 8 + j] = i == j ? 1.0 : 0.0;
  for (double& b : m.embedding().b.mutable_value().data) b = 0.0;
  Tensor x = random_tensor(rng, {2, 6, 8});
  EXPECT_EQ(m.embed_patches(Var(x)).value().data, x.data);
}

TEST(Embed, MatchesMatrixVectorOracle) {
  Rng rng(7);
  TSFormer m(tiny_config(), rng);
  Tensor x = random_tensor(rng, {3, 6, 4});
  Tensor u = m.embed_patches(Var(x)).value();
  const Tensor& w = m.embedding().w.value();  // [in, out]
  const Tensor& b = m.embedding().b.value();
  for (std::size_t r = 0; r < 18; ++r)
    for (std::size_t o = 0; o < 8; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < 4; ++i) acc += w.data[i * 8 + o] * x.data[r * 4 + i];
      EXPECT_NEAR(u.data[r * 8 + o], acc, 1e-12);
    }
}

TEST(Embed, WidthMismatchIsRejected) {
  Rng rng(8);
  TSFormer m(tiny_config(), rng);
  EXPECT_THROW(m.embed_patches(Var(Tensor({1, 6, 5}))), ShapeError);
  EXPECT_THROW(m.embed_patches(Var(Tensor({1, 5, 4}))), ShapeError);
}

TEST(Config, InvariantsAreChecked) {
  auto c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.r = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.enc_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(TSFormerConfig::from_json(tiny_config().to_json()).hash(), tiny_config().hash());
}

TEST(Encode, OutputsOneRowPerVisiblePatch) {
  Rng rng(9);
  auto cfg = tiny_config(12, 4, 8);
  cfg.r = 0.75;
  TSFormer m(cfg, rng);
  MaskSpec mask = sample_mask(rng, 12, 0.75);
  Var h = m.encode(m.embed_patches(Var(random_tensor(rng, {2, 12, 4}))), mask);
  EXPECT_EQ(h.shape(), (Shape{2, 3, 8}));
  EXPECT_EQ(m.last_encoder_length(), 3u);
  m.encode_full(Var(random_tensor(rng, {1, 12, 4})));
  EXPECT_EQ(m.last_encoder_length(), 12u);
}

TEST(Encode, IdenticalPatchesWithoutPositionsGiveIdenticalRows) {
  Rng rng(10);
  TSFormer m(tiny_config(), rng);
  zero_positions(m);
  Tensor x({1, 6, 4});
  for (std::size_t j = 0; j < 6; ++j)
    for (std::size_t i = 0; i < 4; ++i) x.data[j * 4 + i] = 0.3 * static_cast<double>(i) - 0.2;
  MaskSpec mask = sample_mask(rng, 6, 0.5);
  Tensor h = m.encode(m.embed_patches(Var(x)), mask).value();
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t e = 0; e < 8; ++e) EXPECT_NEAR(h.data[r * 8 + e], h.data[e], 1e-12);
}

TEST(Encode, PermutationEquivariantWithoutPositions) {
  Rng rng(11);
  TSFormer m(tiny_config(), rng);
  zero_positions(m);
  const MaskSpec mask = no_mask(6);
  Tensor x = random_tensor(rng, {1, 6, 4});
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Tensor xp({1, 6, 4});
  for (std::size_t j = 0; j < 6; ++j)
    for (std::size_t i = 0; i < 4; ++i) xp.data[j * 4 + i] = x.data[perm[j] * 4 + i];
  Tensor h = m.encode(m.embed_patches(Var(x)), mask).value();
  Tensor hp = m.encode(m.embed_patches(Var(xp)), mask).value();
  for (std::size_t j = 0; j < 6; ++j)
    for (std::size_t e = 0; e < 8; ++e) EXPECT_NEAR(hp.data[j * 8 + e], h.data[perm[j] * 8 + e], 1e-12);
}

TEST(Encode, EmptyVisibleSetIsRejected) {
  Rng rng(12);
  TSFormer m(tiny_config(), rng);
  MaskSpec all;
  all.masked = {0, 1, 2, 3, 4, 5};
  EXPECT_THROW(m.encode(m.embed_patches(Var(Tensor({1, 6, 4}))), all), ConfigError);
}

TEST(Decode, ProducesFullReconstruction) {
  Rng rng(13);
  TSFormer m(tiny_config(), rng);
  for (int trial = 0; trial < 5; ++trial) {
    MaskSpec mask = sample_mask(rng, 6, 0.5);
    Var y = m.reconstruct(Var(random_tensor(rng, {3, 6, 4})), mask);
    EXPECT_EQ(y.shape(), (Shape{3, 6, 4}));
  }
}

TEST(Decode, MaskedSlotsAreDistinguishedByPosition) {
  Rng rng(14);
  TSFormer m(tiny_config(), rng);
  MaskSpec mask;
  mask.unmasked = {0, 1, 2};
  mask.masked = {3, 4, 5};
  Tensor y = m.reconstruct(Var(random_tensor(rng, {1, 6, 4})), mask).value();
  for (std::size_t a = 3; a < 6; ++a)
    for (std::size_t b = a + 1; b < 6; ++b) {
      double diff = 0.0;
      for (std::size_t i = 0; i < 4; ++i) diff += std::abs(y.data[a * 4 + i] - y.data[b * 4 + i]);
      EXPECT_GT(diff, 1e-9);
    }
}

TEST(Decode, VisiblePatchInfluencesHiddenReconstructions) {
  Rng rng(15);
  TSFormer m(tiny_config(), rng);
  MaskSpec mask;
  mask.unmasked = {1, 4, 5};
  mask.masked = {0, 2, 3};
  Tensor x = random_tensor(rng, {1, 6, 4});
  Tensor y0 = m.reconstruct(Var(x), mask).value();
  x.data[1 * 4 + 2] += 0.5;
  Tensor y1 = m.reconstruct(Var(x), mask).value();
  for (std::size_t j : mask.masked) {
    double diff = 0.0;
    for (std::size_t i = 0; i < 4; ++i) diff += std::abs(y0.data[j * 4 + i] - y1.data[j * 4 + i]);
    EXPECT_GT(diff, 1e-9) << "position " << j;
  }
}

TEST(Decode, HiddenRowCountMustMatchMask) {
  Rng rng(16);
  TSFormer m(tiny_config(), rng);
  MaskSpec mask = sample_mask(rng, 6, 0.5);
  EXPECT_THROW(m.decode(Var(Tensor({1, 2, 8})), mask), ShapeError);
}

TEST(ReconstructionLoss, ExactOnHiddenPatchesIsZero) {
  Rng rng(17);
  Tensor s = random_tensor(rng, {2, 6, 4});
  Tensor shat = s;
  MaskSpec mask;
  mask.masked = {1, 4};
  mask.unmasked = {0, 2, 3, 5};
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j : mask.unmasked)
      for (std::size_t i = 0; i < 4; ++i) shat.data[(b * 6 + j) * 4 + i] = 1e6;
  EXPECT_EQ(reconstruction_loss(Var(shat), Var(s), mask).item(), 0.0);
}

TEST(ReconstructionLoss, ConstantOffsetOnSingleHiddenPatch) {
  Tensor s({1, 3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor shat = s;
  shat.data[2] += 2.0;
  shat.data[3] += 2.0;
  MaskSpec mask;
  mask.masked = {1};
  mask.unmasked = {0, 2};
  EXPECT_DOUBLE_EQ(reconstruction_loss(Var(shat), Var(s), mask).item(), 2.0);
}

TEST(ReconstructionLoss, MatchesBruteForceSum) {
  Rng rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t B = 1 + rng.below(3), P = 4 + rng.below(8), W = 1 + rng.below(6);
    Tensor s = random_tensor(rng, {B, P, W}), shat = random_tensor(rng, {B, P, W});
    MaskSpec mask = sample_mask(rng, P, 0.5);
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < P; ++j) {
        if (!std::binary_search(mask.masked.begin(), mask.masked.end(), j)) continue;
        for (std::size_t i = 0; i < W; ++i, ++n) total += std::abs(shat.data[(b * P + j) * W + i] - s.data[(b * P + j) * W + i]);
      }
    EXPECT_NEAR(reconstruction_loss(Var(shat), Var(s), mask).item(), total / static_cast<double>(n), 1e-12);
  }
}

TEST(ReconstructionLoss, VisiblePerturbationsDoNotMatter) {
  Rng rng(19);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t P = 4 + rng.below(10);
    Tensor s = random_tensor(rng, {2, P, 3}), shat = random_tensor(rng, {2, P, 3});
    MaskSpec mask = sample_mask(rng, P, 0.75);
    const double before = reconstruction_loss(Var(shat), Var(s), mask).item();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j : mask.unmasked)
        for (std::size_t i = 0; i < 3; ++i) shat.data[(b * P + j) * 3 + i] += rng.normal(0.0, 10.0);
    EXPECT_EQ(reconstruction_loss(Var(shat), Var(s), mask).item(), before);
  }
}

TEST(ReconstructionLoss, RejectsBadInputs) {
  MaskSpec none = no_mask(3);
  EXPECT_THROW(reconstruction_loss(Var(Tensor({1, 3, 2})), Var(Tensor({1, 3, 2})), none), ConfigError);
  EXPECT_THROW(reconstruction_loss(Var(Tensor({1, 3, 2})), Var(Tensor({1, 3, 3})), none), ShapeError);
}

TEST(Gradients, MiniatureModelMatchesFiniteDifferences) {
  Rng rng(20);
  TSFormer m(tiny_config(6, 4, 8), rng);
  Tensor x = random_tensor(rng, {2, 6, 4});
  MaskSpec mask;
  mask.unmasked = {0, 2, 5};
  mask.masked = {1, 3, 4};
  // Squared error keeps the objective smooth for the difference quotient.
  auto loss = [&] {
    Var d = sub(index_select(m.reconstruct(Var(x), mask), 1, mask.masked), index_select(Var(x), 1, mask.masked));
    return mean(mul(d, d));
  };
  auto r = finite_difference_check(loss, m.params().vars(), 1e-5, 1e-4);
  EXPECT_GT(r.checked, 500u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(EncodeFull, ShapeAndDeterminism) {
  Rng rng(21);
  TSFormer m(tiny_config(), rng);
  Tensor x = random_tensor(rng, {2, 6, 4});
  Tensor a = m.encode_full(Var(x)).value();
  Tensor b = m.encode_full(Var(x)).value();
  EXPECT_EQ(a.shape, (Shape{2, 6, 8}));
  EXPECT_EQ(a.data, b.data);
}

TEST(EncodeFull, ContextChangesLastRepresentation) {
  Rng rng(22);
  auto cfg = tiny_config(8, 4, 8);
  cfg.r = 0.75;
  TSFormer m(cfg, rng);
  Tensor x = random_tensor(rng, {1, 8, 4});
  MaskSpec mask;
  mask.masked = {0, 1, 2, 3, 4, 6};
  mask.unmasked = {5, 7};
  Tensor full = m.encode_full(Var(x)).value();
  Tensor part = m.encode(m.embed_patches(Var(x)), mask).value();
  double diff = 0.0;
  for (std::size_t e = 0; e < 8; ++e) diff += std::abs(full.data[7 * 8 + e] - part.data[1 * 8 + e]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Pretrain, ZeroEpochsKeepsInitialization) {
  data::SyntheticSpec spec;
  spec.nodes = 3;
  spec.days = 14;
  spec.steps_per_day = 8;
  auto syn = data::generate_synthetic(spec);
  auto split = data::SplitSpec::resolve(syn.dataset.T, 0.7, 0.1, 0.2);
  auto ds = data::fit_apply_zscore(syn.dataset, split);
  Rng a(5), b(5);
  TSFormer m(tiny_config(4, 2, 8), a), fresh(tiny_config(4, 2, 8), b);
  PretrainSettings st;
  st.epochs = 0;
  auto res = pretrain(m, ds, split, st, 1);
  EXPECT_TRUE(res.log.empty());
  EXPECT_EQ(res.best_epoch, 0u);
  EXPECT_EQ(checkpoint::params_hash(m.params()), checkpoint::params_hash(fresh.params()));
}

TEST(Pretrain, LearnsPeriodicSignalBetterThanCopyBaseline) {
  data::SyntheticSpec spec;
  spec.nodes = 4;
  spec.days = 14;
  spec.steps_per_day = 16;
  spec.coupling = 0.0;
  spec.weekend_factor = 1.0;
  spec.seed = 3;
  auto syn = data::generate_synthetic(spec);
  auto split = data::SplitSpec::resolve(syn.dataset.T, 0.7, 0.1, 0.2);
  auto ds = data::fit_apply_zscore(syn.dataset, split);
  auto cfg = tiny_config(8, 4, 16);
  cfg.r = 0.5;
  Rng rng(1);
  TSFormer m(cfg, rng);
  PretrainSettings st;
  st.epochs = 40;
  st.batch_starts = 2;
  st.base_lr = 2e-3;
  st.stride = 4;
  auto res = pretrain(m, ds, split, st, 7);
  ASSERT_EQ(res.log.size(), 40u);
  ASSERT_TRUE(res.log.front().val_loss.has_value());
  EXPECT_LE(res.log[res.best_epoch - 1].val_loss.value(), res.log.front().val_loss.value());

  auto test = data::make_pretrain_windows(ds, split.test_range, cfg.P, cfg.L, cfg.L);
  Rng mrng(11);
  double model_err = 0.0, base_err = 0.0;
  NoGradGuard ng;
  for (std::size_t s = 0; s < test.size() / ds.N; ++s) {
    std::vector<const data::PatchWindow*> batch;
    for (std::size_t n = 0; n < ds.N; ++n) batch.push_back(&test[s * ds.N + n]);
    Tensor x = stack_windows(batch);
    MaskSpec mask = sample_mask(mrng, cfg.P, cfg.r);
    model_err += reconstruction_loss(m.reconstruct(Var(x), mask), Var(x), mask).item();
    base_err += copy_last_baseline(x, mask);
  }
  EXPECT_LT(model_err, base_err);
}

TEST(Checkpoint, RoundTripRestoresModel) {
  Rng rng(23);
  TSFormer m(tiny_config(), rng);
  auto path = temp_path("model.stck");
  save_checkpoint(path, m, 42, 3);
  auto back = load_checkpoint(path);
  EXPECT_EQ(checkpoint::params_hash(back->params()), checkpoint::params_hash(m.params()));
  Tensor x = random_tensor(rng, {1, 6, 4});
  EXPECT_EQ(back->encode_full(Var(x)).value().data, m.encode_full(Var(x)).value().data);
  auto meta = checkpoint::load(path).meta;
  EXPECT_EQ(meta.at("seed"), 42);
  EXPECT_EQ(meta.at("epoch"), 3);
  EXPECT_EQ(meta.at("config_hash"), io::hex64(m.config().hash()));
}

class BankTest : public ::testing::Test {
 protected:
  void SetUp() override {
    data::SyntheticSpec spec;
    spec.nodes = 3;
    spec.days = 14;
    spec.steps_per_day = 8;
    auto syn = data::generate_synthetic(spec);
    split = data::SplitSpec::resolve(syn.dataset.T, 0.6, 0.2, 0.2);
    ds = data::fit_apply_zscore(syn.dataset, split);
    Rng rng(31);
    model = std::make_unique<TSFormer>(tiny_config(4, 4, 8), rng);
  }
  data::SplitSpec split;
  data::RawDataset ds;
  std::unique_ptr<TSFormer> model;
};

TEST_F(BankTest, LookupEqualsOnTheFlyEncoding) {
  auto samples = data::make_forecast_samples(ds, split.test_range, 4, 4, 3);
  std::vector<std::size_t> starts;
  for (const auto& s : samples) starts.push_back(s.start);
  auto bank = precompute_representations(*model, ds, starts);
  for (std::size_t s : starts) EXPECT_EQ(bank.block(s).data, represent_window(*model, ds, s).data);
  for (const auto& s : samples) EXPECT_TRUE(bank.contains(s.start));
  EXPECT_FALSE(bank.contains(split.test_range.end + 100));
  EXPECT_THROW(bank.block(split.test_range.end + 100), StaleCacheError);
}

TEST_F(BankTest, RepresentationsAreFloat32Rounded) {
  Tensor h = represent_window(*model, ds, 0);
  for (double v : h.data) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
}

TEST_F(BankTest, FileRoundTripAndProvenance) {
  auto bank = precompute_representations(*model, ds, {0, 4, 8});
  auto path = temp_path("bank.strb");
  bank.save(path);
  auto back = RepresentationBank::load(path);
  EXPECT_EQ(back, bank);
  EXPECT_NO_THROW(back.check_provenance(model->config().hash(), checkpoint::params_hash(model->params())));
  model->params().entries()[0].second.mutable_value().data[0] += 1.0;
  EXPECT_THROW(back.check_provenance(model->config().hash(), checkpoint::params_hash(model->params())),
               StaleCacheError);
  EXPECT_THROW(back.check_provenance(model->config().hash() + 1, back.params_hash()), StaleCacheError);
}

TEST_F(BankTest, CorruptFilesAreRejected) {
  auto bytes = precompute_representations(*model, ds, {0}).encode();
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(RepresentationBank::decode(truncated), IoError);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(RepresentationBank::decode(bad), IoError);
}
