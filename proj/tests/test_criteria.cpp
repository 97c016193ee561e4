#include <gtest/gtest.h>

#include <numeric>

#include "prunekit/criteria.hpp"
#include "prunekit/pipeline.hpp"
#include "test_support.hpp"

using namespace prunekit;
using namespace prunekit::testing;

namespace {

GroupScores scores_of(std::vector<double> s, std::size_t group_size = 1) {
  GroupScores g;
  g.group_size = group_size;
  g.scores = std::move(s);
  return g;
}

std::vector<std::size_t> kept_groups(const ChannelMask& m) {
  std::vector<std::size_t> out;
  for (std::size_t g = 0; g < m.group_count(); ++g)
    if (m.group_kept(g)) out.push_back(g);
  return out;
}

}  // namespace

TEST(Magnitude, RowSquaredNorm) {
  EXPECT_DOUBLE_EQ(magnitude_scores(Matrix::from_rows({{3, 4}}), 1).scores[0], 25.0);
  EXPECT_EQ(magnitude_scores(Matrix(2, 3), 1).scores, (std::vector<double>{0, 0}));
}

TEST(Magnitude, GroupIsAdditive) {
  const auto s = magnitude_scores(Matrix::from_rows({{1, 2}, {1, 2}}), 2);
  ASSERT_EQ(s.scores.size(), 1u);
  EXPECT_DOUBLE_EQ(s.scores[0], 2 * 5.0);
}

TEST(Magnitude, GroupSizeMustDivideRows) { EXPECT_THROW(magnitude_scores(Matrix(3, 2), 2), ValidationError); }

TEST(MagnitudeProperty, InvariantToColumnPermutation) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix w = random_matrix(rng, 8, 5);
    std::vector<std::size_t> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    const auto a = magnitude_scores(w, 4).scores, b = magnitude_scores(select_columns(w, perm), 4).scores;
    for (std::size_t g = 0; g < a.size(); ++g) ASSERT_NEAR(a[g], b[g], 1e-12);
  }
}

TEST(Snip, Normalization) {
  EXPECT_EQ(normalize_abs(std::vector<double>{-3.0}), (std::vector<double>{1.0}));
  const auto s = normalize_abs(std::vector<double>{36.0, -12.0});
  EXPECT_DOUBLE_EQ(s[0], 0.75);
  EXPECT_DOUBLE_EQ(s[1], 0.25);
  EXPECT_EQ(normalize_abs(std::vector<double>{0, 0, 0, 0}), (std::vector<double>(4, 0.25)));
}

TEST(Snip, SingleGroupScoresOne) {
  ModelConfig c = small_config();
  c.layers = 1;
  c.heads = 1;
  c.head_dim = 16;
  const ToyTransformer m = random_model(c, 3);
  const TokenBatch b = sample_markov(markov_transitions(c.vocab, 2.0, 4), 2, 5, 5);
  const auto s = snip_scores(m, b, Site::attn_out, 0);
  ASSERT_EQ(s.scores.size(), 1u);
  EXPECT_DOUBLE_EQ(s.scores[0], 1.0);
}

TEST(SnipProperty, ScoresSumToOne) {
  const auto assets = gen_synthetic(small_gen(), 6);
  for (std::size_t layer = 0; layer < 2; ++layer)
    for (Site site : {Site::attn_out, Site::ffn_down}) {
      const auto s = snip_scores(assets.model, assets.calib, site, layer);
      EXPECT_NEAR(std::accumulate(s.scores.begin(), s.scores.end(), 0.0), 1.0, 1e-12);
      EXPECT_EQ(s.group_size, site == Site::attn_out ? 4u : 1u);
    }
}

TEST(Fluctuation, Examples) {
  // Constant channel 0, zero weight row for channel 2.
  const Batch3 x(1, 2, 3, std::vector<double>{5, 0, 1, 5, 2, 3});
  const Matrix w = Matrix::from_rows({{9, 9}, {1, 1}, {0, 0}});
  const auto s = fluctuation_scores(x, w, 1).scores;
  EXPECT_EQ(s[0], 0.0);
  EXPECT_DOUBLE_EQ(s[1], 2.0);  // variance 1 times squared norm 2
  EXPECT_EQ(s[2], 0.0);
  EXPECT_THROW(fluctuation_scores(x, Matrix(2, 2), 1), ValidationError);
}

TEST(SelectMask, Examples) {
  EXPECT_EQ(kept_groups(select_mask(scores_of({3, 1, 2}), 1.0)), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(kept_groups(select_mask(scores_of({3, 1, 2}), 2.0 / 3.0)), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(kept_groups(select_mask(scores_of({1, 1, 1, 1}), 0.5)), (std::vector<std::size_t>{0, 1}));
}

TEST(SelectMask, CeilingAndFloorOfOne) {
  EXPECT_EQ(select_mask(scores_of({1, 2, 3}), 0.01).kept_groups(), 1u);
  EXPECT_EQ(select_mask(scores_of({1, 2, 3, 4, 5}), 0.99).kept_groups(), 5u);
  EXPECT_EQ(select_mask(scores_of(std::vector<double>(10, 1.0)), 0.7).kept_groups(), 7u);
  EXPECT_THROW(select_mask(scores_of({1}), 0.0), ValidationError);
  EXPECT_THROW(select_mask(scores_of({1}), 1.5), ValidationError);
}

TEST(SelectMask, ExpandsGroupsToChannels) {
  const auto m = select_mask(scores_of({0.1, 0.9}, 3), 0.5);
  EXPECT_EQ(m.keep, (std::vector<bool>{false, false, false, true, true, true}));
  EXPECT_NO_THROW(m.validate(6));
}

TEST(SelectMaskProperty, InvariantUnderPositiveRescaling) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(1 + rng.below(12));
    for (double& v : s) v = static_cast<double>(rng.below(5));  // ties on purpose
    const double ratio = 0.05 + 0.95 * rng.uniform();
    const double factor = std::ldexp(1.0, static_cast<int>(rng.below(20)) - 10);
    std::vector<double> scaled = s;
    for (double& v : scaled) v *= factor;
    ASSERT_EQ(select_mask(scores_of(s), ratio).keep, select_mask(scores_of(scaled), ratio).keep);
  }
}

TEST(SelectMasksGlobal, RanksAcrossLayersAndKeepsOnePerLayer) {
  GroupScores a = scores_of({10, 9, 8});
  GroupScores b = scores_of({1, 2, 3});
  a.layer = 0;
  b.layer = 1;
  const auto masks = select_masks_global({a, b}, 0.5);
  EXPECT_EQ(kept_groups(masks[0]), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(kept_groups(masks[1]), (std::vector<std::size_t>{2}));  // rescued best group
  EXPECT_EQ(masks[1].layer, 1u);
}

TEST(CriteriaProperty, AllKeepSurgeryIsForwardNoOp) {
  const auto assets = gen_synthetic(small_gen(), 10);
  const auto& m = assets.model;
  for (std::size_t l = 0; l < 2; ++l) {
    const auto s = magnitude_scores(m.blocks[l].down.weight, 1);
    GroupScores gs = s;
    gs.layer = l;
    const ToyTransformer p = apply_surgery(m, select_mask(gs, 1.0));
    EXPECT_EQ(forward_logits(p, assets.eval), forward_logits(m, assets.eval));
  }
}

TEST(SnipSubset, RespectsTokenBudget) {
  GenConfig g = small_gen();
  g.calib_n = 40;
  const auto assets = gen_synthetic(g, 12);
  const TokenBatch sub = snip_subset(assets.calib, 100, 3);
  EXPECT_EQ(sub.n, 12u);  // floor(100 / 8)
  EXPECT_EQ(sub.targets.size(), sub.tokens.size());
  EXPECT_EQ(snip_subset(assets.calib, 5000, 3).n, 40u);
  EXPECT_EQ(snip_subset(assets.calib, 3, 3).n, 1u);
}
