#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "iceformer/sparse_attention.hpp"
#include "test_util.hpp"

namespace iceformer {
namespace {

using testing::Rng;

SparseAttentionConfig exhaustive_config(std::size_t k, std::size_t m, std::size_t p = 2, std::size_t l = 2) {
  SparseAttentionConfig c;
  c.num_simple = p;
  c.num_composite = l;
  c.spec = QuerySpec::exhaustive(k, m, p);
  return c;
}

template <typename T>
void expect_weights_normalised(const SparseResult<T>& r, const AttentionProblem<T>& p) {
  ASSERT_EQ(r.selected.size(), p.n());
  for (std::size_t i = 0; i < p.n(); ++i) {
    ASSERT_EQ(r.selected[i].size(), r.weights[i].size());
    ASSERT_FALSE(r.selected[i].empty());
    double s = 0.0;
    for (std::size_t t = 0; t < r.selected[i].size(); ++t) {
      EXPECT_TRUE(p.mask.visible(i, r.selected[i][t]));
      EXPECT_GE(r.weights[i][t], T(0));
      s += r.weights[i][t];
    }
    EXPECT_NEAR(s, 1.0, precision_tolerance<T>());
  }
}

TEST(AdaptiveK, ReferenceValues) {
  EXPECT_EQ(resolve_k(AdaptiveK{5e-3}, 8000), 40u);
  EXPECT_EQ(resolve_k(AdaptiveK{5e-3}, 1000), 30u);
  EXPECT_EQ(resolve_k(AdaptiveK{6e-3}, 10000), 50u);
  EXPECT_EQ(resolve_k(AdaptiveK{5e-3}, 1), 30u);
}

TEST(AdaptiveK, MatchesFormulaEverywhere) {
  Rng rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    const double alpha = std::uniform_real_distribution<double>(1e-5, 0.5)(rng);
    const std::size_t n = testing::uniform_size(rng, 1, 100000);
    const std::size_t floor = testing::uniform_size(rng, 1, 40);
    const std::size_t cap = floor + testing::uniform_size(rng, 0, 40);
    const AdaptiveK a{alpha, floor, cap};
    const auto raw = static_cast<std::size_t>(std::floor(static_cast<double>(n) * alpha));
    EXPECT_EQ(resolve_k(a, n), std::max(std::min(raw, cap), floor));
  }
}

TEST(AdaptiveK, Validation) {
  EXPECT_THROW(AdaptiveK{0.0}.validate(), ValidationError);
  EXPECT_THROW(AdaptiveK{1.0}.validate(), ValidationError);
  EXPECT_THROW((AdaptiveK{0.1, 60, 50}.validate()), ValidationError);
}

TEST(SparseConfig, AdaptiveRaisesBudgets) {
  SparseAttentionConfig c;
  c.spec = QuerySpec{10, 20, 30};
  c.adaptive = AdaptiveK{5e-3};
  const auto s = c.resolved_spec(8000);
  EXPECT_EQ(s.k, 40u);
  EXPECT_EQ(s.k0, 40u);
  EXPECT_EQ(s.k1, 40u);
  c.spec = QuerySpec{10, 100, 1000};
  EXPECT_EQ(c.resolved_spec(8000), (QuerySpec{40, 100, 1000}));
}

TEST(SparseConfig, Validation) {
  SparseAttentionConfig c;
  c.num_simple = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = SparseAttentionConfig{};
  c.spec = QuerySpec{5, 4, 10};
  EXPECT_THROW(c.validate(), ValidationError);
  c = SparseAttentionConfig{};
  c.threads = 0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(SparseAttention, FullKMatchesVanilla) {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const auto kind = trial % 2 ? MaskKind::Explicit : MaskKind::None;
    const std::size_t n = testing::uniform_size(rng, 1, 80);
    const std::size_t m = testing::uniform_size(rng, 1, 80);
    auto p = testing::random_problem<float>(rng, n, m, testing::uniform_size(rng, 1, 32), 6, kind);
    const auto r = sparse_attention(p, exhaustive_config(m, m));
    EXPECT_LE(approximation_error(vanilla_attention(p), r.output).mean, 1e-5);
    EXPECT_LE(testing::max_row_l2(vanilla_attention(p), r.output), 1e-5);
    expect_weights_normalised(r, p);
  }
}

TEST(SparseAttention, FullKMatchesVanillaInDoublePrecision) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = testing::random_problem<double>(rng, 30, 50, 8, 4, MaskKind::Explicit);
    const auto r = sparse_attention(p, exhaustive_config(50, 50, 3, 1));
    EXPECT_LE(testing::max_row_l2(vanilla_attention(p), r.output), 1e-12);
  }
}

TEST(SparseAttention, DominantKeyCarriesTheOutput) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = testing::random_problem<double>(rng, 1, 8, 4, 3);
    p.scale = 1.0;
    // Make key 5 score exactly 20 above every other key.
    const std::size_t hot = 5;
    double best_other = -INFINITY;
    for (std::size_t j = 0; j < 8; ++j) {
      if (j == hot) continue;
      double s = 0.0;
      for (std::size_t t = 0; t < 4; ++t) s += p.queries(0, t) * p.keys(j, t);
      best_other = std::max(best_other, s);
    }
    double qq = 0.0, s_hot = 0.0;
    for (std::size_t t = 0; t < 4; ++t) {
      qq += p.queries(0, t) * p.queries(0, t);
      s_hot += p.queries(0, t) * p.keys(hot, t);
    }
    const double shift = (best_other + 20.0 - s_hot) / qq;
    for (std::size_t t = 0; t < 4; ++t) p.keys(hot, t) += shift * p.queries(0, t);

    SparseAttentionConfig c;
    c.spec = QuerySpec{1, 8, 100};
    c.num_simple = 2;
    const auto r = sparse_attention(p, c);
    ASSERT_EQ(r.selected[0], (std::vector<PointId>{hot}));
    for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(r.output(0, t), p.values(hot, t), 1e-4);

    // The full softmax differs from v_hot by at most 7 e^-20 max_j |v_j - v_hot|.
    const auto full = vanilla_attention(p);
    double spread = 0.0;
    for (std::size_t j = 0; j < 8; ++j)
      for (std::size_t t = 0; t < 3; ++t) spread = std::max(spread, std::abs(p.values(j, t) - p.values(hot, t)));
    for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(full(0, t), p.values(hot, t), 7.0 * std::exp(-20.0) * spread * 1.01);
  }
}

TEST(SparseAttention, ArgmaxFidelityAtKOne) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = testing::random_problem<float>(rng, 40, 100, 16, 2, trial % 2 ? MaskKind::Explicit : MaskKind::None);
    const auto r = sparse_attention(p, exhaustive_config(1, 100));
    for (std::size_t i = 0; i < p.n(); ++i) {
      const auto truth = brute_force_topk(p, i, 1);
      EXPECT_EQ(r.selected[i], (std::vector<PointId>{truth[0]}));
    }
  }
}

TEST(SparseAttention, ApproximateRetrievalStaysNormalisedAndMasked) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = testing::random_problem<float>(rng, 64, 200, 16, 8, MaskKind::Explicit);
    SparseAttentionConfig c;
    c.spec = QuerySpec{5, 12, 40};
    c.num_simple = 2;
    c.num_composite = 2;
    const auto r = sparse_attention(p, c);
    expect_weights_normalised(r, p);
    for (const auto& sel : r.selected) EXPECT_LE(sel.size(), 5u);
  }
}

TEST(SparseAttention, PaddingKeysAreNeverIndexed) {
  Rng rng(7);
  auto p = testing::random_problem<float>(rng, 20, 30, 8, 4);
  std::vector<std::uint8_t> bits(20 * 30, 1);
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 25; j < 30; ++j) bits[i * 30 + j] = 0;
  p.mask = Mask::explicit_bits(20, 30, bits);
  // Padding keys get a huge inner product so any leak would be selected.
  for (std::size_t j = 25; j < 30; ++j)
    for (std::size_t t = 0; t < 8; ++t) p.keys(j, t) = 50.0f * p.queries(0, t);
  const auto r = sparse_attention(p, exhaustive_config(10, 30));
  for (const auto& sel : r.selected)
    for (auto id : sel) EXPECT_LT(id, 25u);
  expect_weights_normalised(r, p);
}

TEST(SparseAttention, ThreadsDoNotChangeResults) {
  Rng rng(8);
  auto p = testing::random_problem<float>(rng, 150, 300, 16, 8, MaskKind::Explicit);
  SparseAttentionConfig c;
  c.spec = QuerySpec{8, 32, 128};
  c.num_simple = 2;
  c.num_composite = 3;
  const auto a = sparse_attention(p, c);
  c.threads = 4;
  const auto b = sparse_attention(p, c);
  EXPECT_EQ(a.output, b.output);
  EXPECT_EQ(a.selected, b.selected);
  EXPECT_EQ(a.stats.visited, b.stats.visited);
}

TEST(SparseAttention, ZeroQueryUsesUniformFallback) {
  Rng rng(9);
  auto p = testing::random_problem<double>(rng, 3, 20, 4, 2);
  for (std::size_t t = 0; t < 4; ++t) p.queries(1, t) = 0.0;
  SparseAttentionConfig c = exhaustive_config(6, 20);
  const auto r = sparse_attention(p, c);
  EXPECT_EQ(r.stats.fallback_rows, 1u);
  EXPECT_EQ(r.selected[1], (std::vector<PointId>{0, 1, 2, 3, 4, 5}));
  for (double w : r.weights[1]) EXPECT_NEAR(w, 1.0 / 6.0, 1e-15);

  c.fallback_uniform_topk = 3;
  const auto r3 = sparse_attention(p, c);
  EXPECT_EQ(r3.selected[1], (std::vector<PointId>{0, 1, 2}));
  for (std::size_t t = 0; t < 2; ++t) {
    EXPECT_NEAR(r3.output(1, t), (p.values(0, t) + p.values(1, t) + p.values(2, t)) / 3.0, 1e-12);
  }
}

TEST(SparseAttention, EmptyKeySetRejected) {
  AttentionProblem<float> p;
  p.queries = Matrix<float>(2, 3);
  p.keys = Matrix<float>(0, 3);
  p.values = Matrix<float>(0, 2);
  EXPECT_THROW(sparse_attention(p, SparseAttentionConfig{}), ValidationError);
}

TEST(SparseAttention, FixedNormBoundBelowKeysRejected) {
  Rng rng(10);
  auto p = testing::random_problem<float>(rng, 4, 10, 4, 2);
  SparseAttentionConfig c;
  c.norm_bound = 1e-3;
  EXPECT_THROW(sparse_attention(p, c), NormBoundError);
}

TEST(CausalAttention, FirstRowIsFirstValue) {
  Rng rng(11);
  auto p = testing::random_problem<float>(rng, 16, 16, 8, 5, MaskKind::Causal);
  SparseAttentionConfig c;
  c.spec = QuerySpec{4, 8, 32};
  c.num_simple = 2;
  const auto r = causal_attention(p, c);
  for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(r.output(0, t), p.values(0, t));
  EXPECT_EQ(r.selected[0], (std::vector<PointId>{0}));
}

TEST(CausalAttention, NeverSelectsFutureKeys) {
  Rng rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = testing::random_problem<float>(rng, 200, 200, 16, 4, MaskKind::Causal);
    SparseAttentionConfig c;
    c.spec = QuerySpec{6, 16, 64};
    c.num_simple = 2;
    c.num_composite = 2;
    c.seed = trial;
    const auto r = causal_attention(p, c);
    for (std::size_t i = 0; i < 200; ++i)
      for (auto id : r.selected[i]) EXPECT_LE(id, i);
    expect_weights_normalised(r, p);
  }
}

TEST(CausalAttention, EarlyRowsAreExact) {
  Rng rng(13);
  auto p = testing::random_problem<float>(rng, 50, 50, 8, 4, MaskKind::Causal);
  SparseAttentionConfig c;
  c.spec = QuerySpec{10, 10, 11};
  c.num_simple = 3;
  const auto r = causal_attention(p, c);
  const auto full = vanilla_attention(p);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_LE(testing::row_l2(r.output.row(i), testing::reference_output_row(p, i)), 1e-5);
    EXPECT_EQ(r.selected[i].size(), i + 1);
  }
  EXPECT_GE(r.stats.exact_rows, 10u);
}

TEST(CausalAttention, FullKMatchesVanilla) {
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = testing::uniform_size(rng, 1, 100);
    auto p = testing::random_problem<float>(rng, n, n, 16, 4, MaskKind::Causal);
    const auto r = causal_attention(p, exhaustive_config(n, n));
    EXPECT_LE(testing::max_row_l2(vanilla_attention(p), r.output), 1e-5);
  }
}

TEST(CausalAttention, SparseAttentionDelegatesCausalMasks) {
  Rng rng(15);
  auto p = testing::random_problem<float>(rng, 40, 40, 8, 4, MaskKind::Causal);
  SparseAttentionConfig c;
  c.spec = QuerySpec{4, 8, 32};
  EXPECT_EQ(sparse_attention(p, c).output, causal_attention(p, c).output);
  auto none = p;
  none.mask = Mask::none();
  EXPECT_THROW(causal_attention(none, c), ValidationError);
}

TEST(CausalAttention, MatchesPerPrefixBatchConstruction) {
  Rng rng(16);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t n = 120;
    auto p = testing::random_problem<float>(rng, n, n, 12, 5, MaskKind::Causal);
    SparseAttentionConfig c;
    c.spec = QuerySpec{5, 10, 40};
    c.num_simple = 2;
    c.num_composite = 2;
    c.seed = 100 + trial;
    const auto streamed = causal_attention(p, c);

    c.norm_bound = choose_c(p.keys);
    for (std::size_t i = 0; i < n; ++i) {
      AttentionProblem<float> prefix;
      prefix.queries = p.queries.slice_rows(i, i + 1);
      prefix.keys = p.keys.slice_rows(0, i + 1);
      prefix.values = p.values.slice_rows(0, i + 1);
      const auto batch = sparse_attention(prefix, c);
      EXPECT_EQ(batch.selected[0], streamed.selected[i]) << "row " << i;
      EXPECT_TRUE(std::ranges::equal(batch.output.row(0), streamed.output.row(i))) << "row " << i;
    }
  }
}

TEST(CausalStream, RebuildsWhenKeysOutgrowTheBound) {
  Rng rng(17);
  const std::size_t n = 60, d = 6, dv = 3;
  auto p = testing::random_problem<double>(rng, n, n, d, dv, MaskKind::Causal);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t t = 0; t < d; ++t) p.keys(j, t) *= 1.0 + 0.1 * static_cast<double>(j);
  SparseAttentionConfig c = exhaustive_config(n, n);
  CausalStream<double> stream(d, dv, p.effective_scale(), c, n);
  std::vector<double> out(dv);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<PointId> sel;
    stream.step(p.queries.row(i), p.keys.row(i), p.values.row(i), out, &sel);
    EXPECT_EQ(sel.size(), i + 1);
    EXPECT_LE(testing::row_l2(std::span<const double>(out), testing::reference_output_row(p, i)), 1e-12);
  }
  EXPECT_GT(stream.stats().rebuilds, 0u);
  EXPECT_EQ(stream.size(), n);
}

TEST(SparseAttentionHeads, MatchesPerHeadCalls) {
  Rng rng(18);
  std::vector<AttentionProblem<float>> causal, batch;
  for (int h = 0; h < 3; ++h) {
    causal.push_back(testing::random_problem<float>(rng, 50, 50, 8, 4, MaskKind::Causal));
    batch.push_back(testing::random_problem<float>(rng, 30, 60, 8, 4, MaskKind::Explicit));
  }
  SparseAttentionConfig c;
  c.spec = QuerySpec{4, 10, 40};
  c.num_simple = 2;
  c.threads = 3;
  const auto rc = sparse_attention_heads<float>(causal, c);
  const auto rb = sparse_attention_heads<float>(batch, c);
  SparseAttentionConfig single = c;
  single.threads = 1;
  for (int h = 0; h < 3; ++h) {
    EXPECT_EQ(rc[h].output, causal_attention(causal[h], single).output);
    EXPECT_EQ(rb[h].output, sparse_attention(batch[h], single).output);
  }
}

TEST(SparseAttention, ExhaustiveRetrievalWithoutShortcutMatchesVanilla) {
  Rng rng(20);
  for (int trial = 0; trial < 12; ++trial) {
    const auto kind = static_cast<MaskKind>(trial % 3);
    const std::size_t n = testing::uniform_size(rng, 1, 60);
    const std::size_t m = kind == MaskKind::Causal ? n : testing::uniform_size(rng, 1, 60);
    auto p = testing::random_problem<float>(rng, n, m, 12, 4, kind);
    auto c = exhaustive_config(m, m, 1 + trial % 2, 1 + trial % 3);
    c.exact_short_rows = false;
    const auto r = sparse_attention(p, c);
    EXPECT_EQ(r.stats.exact_rows, 0u);
    EXPECT_GT(r.stats.visited, 0u);
    EXPECT_LE(testing::max_row_l2(vanilla_attention(p), r.output), 1e-5);
  }
}

TEST(ApproximationError, Examples) {
  auto a = Matrix<double>::from_data(2, 2, {1, 0, 3, 4});
  auto b = Matrix<double>::from_data(2, 2, {0, 1, 3, 4});
  const auto same = approximation_error(a, a);
  EXPECT_EQ(same.mean, 0.0);
  const auto e = approximation_error(a, b);
  EXPECT_DOUBLE_EQ(e.per_row[0], std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(e.per_row[1], 0.0);
  EXPECT_DOUBLE_EQ(e.mean, std::sqrt(2.0) / 2.0);
  EXPECT_THROW(approximation_error(a, Matrix<double>(2, 3)), ValidationError);
}

TEST(Workspace, GrowsWithRowsNotKeys) {
  Rng rng(19);
  SparseAttentionConfig c;
  c.spec = QuerySpec{8, 16, 32};
  c.num_simple = 1;
  std::size_t prev = 0;
  for (std::size_t n : {256, 512, 1024}) {
    auto p = testing::random_problem<float>(rng, n, n, 8, 4, MaskKind::Causal);
    const auto bytes = causal_attention(p, c).stats.workspace_bytes;
    if (prev) {
      const double ratio = static_cast<double>(bytes) / static_cast<double>(prev);
      EXPECT_LT(ratio, 2.5);
      EXPECT_GT(ratio, 1.5);
    }
    prev = bytes;
  }
}

}  // namespace
}  // namespace iceformer
