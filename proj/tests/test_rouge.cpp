#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "psp/rouge.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace psp {
namespace {

TokenIds random_list(std::mt19937_64& rng, std::size_t max_len, TokenId alphabet) {
  TokenIds t(rng() % (max_len + 1));
  for (auto& x : t) x = static_cast<TokenId>(rng() % alphabet);
  return t;
}

TEST(NgramCounts, Examples) {
  const TokenId a = 10, b = 11, c = 12;
  EXPECT_EQ(ngram_counts(TokenIds{a, b, a}, 1), (NgramCounts{{{a}, 2}, {{b}, 1}}));
  EXPECT_EQ(ngram_counts(TokenIds{a, b, c}, 2), (NgramCounts{{{a, b}, 1}, {{b, c}, 1}}));
  EXPECT_TRUE(ngram_counts(TokenIds{a}, 2).empty());
  EXPECT_THROW(ngram_counts(TokenIds{a}, 0), Error);
}

TEST(NgramCounts, TotalCountProperty) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const TokenIds t = random_list(rng, 8, 4);
    for (std::size_t n = 1; n <= 3; ++n) {
      std::size_t total = 0;
      for (const auto& [g, k] : ngram_counts(t, n)) total += k;
      EXPECT_EQ(total, t.size() >= n ? t.size() - n + 1 : 0);
    }
  }
}

TEST(RougeN, Examples) {
  const TokenId the = 4, cat = 5, sat = 6, dog = 7;
  EXPECT_NEAR(rouge_n_f1(TokenIds{the, cat, sat}, TokenIds{the, cat}, 1), 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(rouge_n_f1(TokenIds{the, cat, sat}, TokenIds{the, cat, sat}, 1), 1.0);
  EXPECT_DOUBLE_EQ(rouge_n_f1(TokenIds{the, cat}, TokenIds{sat, dog}, 1), 0.0);
  EXPECT_DOUBLE_EQ(rouge_n_f1(TokenIds{}, TokenIds{the}, 1), 0.0);
  EXPECT_DOUBLE_EQ(rouge_n_f1(TokenIds{the}, TokenIds{the}, 2), 0.0);
}

TEST(Lcs, Examples) {
  const TokenIds abcd{0, 1, 2, 3}, acbd{0, 2, 1, 3};
  EXPECT_EQ(lcs_length(abcd, acbd), 3u);
  EXPECT_EQ(oracle::lcs(abcd, acbd), 3u);
  EXPECT_EQ(lcs_length(abcd, abcd), 4u);
  EXPECT_EQ(lcs_length(abcd, TokenIds{}), 0u);
}

TEST(RougeL, Examples) {
  const TokenIds abcd{0, 1, 2, 3}, acbd{0, 2, 1, 3};
  EXPECT_DOUBLE_EQ(rouge_l_f1(abcd, acbd), 0.75);
  EXPECT_DOUBLE_EQ(rouge_l_f1(abcd, abcd), 1.0);
  EXPECT_DOUBLE_EQ(rouge_l_f1(TokenIds{}, abcd), 0.0);
}

TEST(Rouge, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const TokenIds c = random_list(rng, 8, 4), r = random_list(rng, 8, 4);
    const std::size_t lcs = oracle::lcs(c, r);
    ASSERT_EQ(lcs_length(c, r), lcs);
    ASSERT_EQ(lcs_length(r, c), lcs);
    const RougeScore s = rouge(c, r);
    ASSERT_EQ(s.r1_f1, oracle::rouge_n(c, r, 1));
    ASSERT_EQ(s.r2_f1, oracle::rouge_n(c, r, 2));
    ASSERT_EQ(s.rl_f1, oracle::f1(static_cast<double>(lcs), static_cast<double>(c.size()),
                                static_cast<double>(r.size())));
  }
}

TEST(Rouge, BoundsAndUnigramPermutationInvariance) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    TokenIds c = random_list(rng, 8, 4);
    const TokenIds r = random_list(rng, 8, 4);
    const RougeScore s = rouge(c, r);
    for (double v : {s.r1_f1, s.r2_f1, s.rl_f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_LE(lcs_length(c, r), std::min(c.size(), r.size()));
    std::shuffle(c.begin(), c.end(), rng);
    EXPECT_EQ(rouge_n_f1(c, r, 1), s.r1_f1);
    if (!r.empty()) {
      const RougeScore self = rouge(r, r);
      EXPECT_EQ(self.r1_f1, 1.0);
      EXPECT_EQ(self.rl_f1, 1.0);
    }
  }
}

TEST(Lcs, AdditiveOverDisjointAlphabetConcatenation) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 300; ++i) {
    const TokenIds a1 = random_list(rng, 6, 4), b1 = random_list(rng, 6, 4);
    TokenIds a2 = random_list(rng, 6, 4), b2 = random_list(rng, 6, 4);
    for (auto& t : a2) t += 100;
    for (auto& t : b2) t += 100;
    TokenIds a = a1, b = b1;
    a.insert(a.end(), a2.begin(), a2.end());
    b.insert(b.end(), b2.begin(), b2.end());
    EXPECT_EQ(lcs_length(a, b), lcs_length(a1, b1) + lcs_length(a2, b2));
  }
}

}  // namespace
}  // namespace psp
