#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "psp/pseudodata.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace psp {
namespace {

Document uniform_document(std::size_t sentences, std::size_t len) {
  std::vector<TokenIds> s;
  for (std::size_t i = 0; i < sentences; ++i) s.push_back(TokenIds(len, static_cast<TokenId>(4 + i)));
  return Document(std::move(s));
}

std::vector<std::size_t> iota_vec(std::size_t from, std::size_t to) {
  std::vector<std::size_t> v(to - from);
  std::iota(v.begin(), v.end(), from);
  return v;
}

TEST(Lead, NoAugmentationWhenSummaryIsLongEnough) {
  const auto r = build_lead_pair(uniform_document(10, 20));
  ASSERT_TRUE(r.accepted());
  EXPECT_EQ(r.pair->summary_sentences, iota_vec(0, 3));
  EXPECT_EQ(r.pair->document_sentences, iota_vec(3, 10));
  EXPECT_EQ(r.pair->pair.summary.size(), 60u);
  EXPECT_EQ(r.pair->pair.document.flat_length(), 140u);
}

TEST(Lead, AugmentsToTargetThenRejectsShortSource) {
  // 3 x 10 = 30 < 50, so sentences are added until 70: 7 sentences, leaving
  // a 30-token source.
  const Document doc = uniform_document(10, 10);
  const auto r = build_lead_pair(doc);
  EXPECT_FALSE(r.accepted());
  EXPECT_EQ(r.reason, RejectReason::kSourceShorterThanSummary);
  EXPECT_EQ(reject_reason_name(r.reason), "source-shorter-than-summary");

  // Same trace with a larger document shows the augmented split.
  const auto ok = build_lead_pair(uniform_document(20, 10));
  ASSERT_TRUE(ok.accepted());
  EXPECT_EQ(ok.pair->summary_sentences, iota_vec(0, 7));
  EXPECT_EQ(ok.pair->pair.summary.size(), 70u);
}

TEST(Lead, TooFewSentences) {
  const auto r = build_lead_pair(uniform_document(2, 30));
  EXPECT_FALSE(r.accepted());
  EXPECT_EQ(r.reason, RejectReason::kTooFewSentences);
  EXPECT_EQ(reject_reason_name(r.reason), "too-few-sentences");
}

TEST(Lead, CleaningStripsBylinesAndAgencyTags) {
  const std::string text =
      "By Jane Doe . (CNN) -- The council approved the budget. Officials said more. Residents were told. "
      "Details would follow soon. Talks lasted weeks after the vote. The mayor thanked the staff for the work. "
      "Another meeting was planned for next month at the hall.";
  const Vocab v = Vocab::build({tokenize_words(text)});
  const Document doc = document_from_text(text, v);
  LeadConfig cfg;
  cfg.lead_n = 2;
  cfg.min_sum = 1;
  const auto r = build_lead_pair(doc, cfg, &v);
  ASSERT_TRUE(r.accepted());
  EXPECT_EQ(r.pair->summary_text.find("Jane"), std::string::npos) << r.pair->summary_text;
  EXPECT_EQ(r.pair->summary_text.find("CNN"), std::string::npos) << r.pair->summary_text;
  EXPECT_NE(r.pair->summary_text.find("council approved"), std::string::npos);

  cfg.clean_patterns.clear();
  const auto raw = build_lead_pair(doc, cfg, &v);
  ASSERT_TRUE(raw.accepted());
  EXPECT_GT(raw.pair->pair.summary.size(), r.pair->pair.summary.size());
}

TEST(Gsg, ScoreExamples) {
  const TokenId a = 4, b = 5, c = 6, d = 7, e = 8;
  const auto dup = gsg_scores(testing::doc_of({{a, b}, {a, b}}));
  EXPECT_DOUBLE_EQ(dup[0], 1.0);
  EXPECT_DOUBLE_EQ(dup[1], 1.0);
  EXPECT_EQ(gsg_scores(testing::doc_of({{a, b}, {c, d}})), (std::vector<double>{0.0, 0.0}));

  // [a,b] vs [a,c,d,e]: overlap 1, P = 1/2, R = 1/4 -> 1/3; [a,c] symmetric;
  // [d,e] vs [a,b,a,c]: no overlap.
  const auto s = gsg_scores(testing::doc_of({{a, b}, {a, c}, {d, e}}));
  EXPECT_NEAR(s[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(s[1], 1.0 / 3.0, 1e-15);
  EXPECT_EQ(s[2], 0.0);

  try {
    gsg_scores(testing::doc_of({{a}}));
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::kDegenerateDocument);
  }
}

TEST(Gsg, SelectionExamples) {
  EXPECT_EQ(top_m_sentences({0.1, 0.9, 0.5}, 1), (std::vector<std::size_t>{1}));
  EXPECT_EQ(top_m_sentences({0.5, 0.5, 0.1}, 1), (std::vector<std::size_t>{0}));

  const TokenId a = 4, b = 5, c = 6;
  const auto r = build_gsg_pair(testing::doc_of({{a, b}, {c, c}, {a, c}}), 1);
  ASSERT_TRUE(r.accepted());
  EXPECT_EQ(r.pair->document_sentences.size(), 2u);
  EXPECT_FALSE(build_gsg_pair(testing::doc_of({{a}, {b}}), 2).accepted());
}

// The unique dominating m-subset under the exhaustive oracle.
std::vector<std::size_t> brute_top_m(const Document& doc, std::size_t m) {
  const auto found = oracle::top_m_sets(oracle::gsg_scores(doc.sentences()), m);
  EXPECT_EQ(found.size(), 1u);
  return found.empty() ? std::vector<std::size_t>{} : found.front();
}

TEST(Gsg, FiveSentencesTopThree) {
  const TokenId a = 4, b = 5, c = 6, d = 7;
  const Document doc = testing::doc_of({{a, b}, {c, d}, {a, c}, {b, b, d}, {a}});
  const auto r = build_gsg_pair(doc, 3);
  ASSERT_TRUE(r.accepted());
  EXPECT_EQ(r.pair->summary_sentences, brute_top_m(doc, 3));
}

TEST(Gsg, ExhaustiveAgreementWithBruteForce) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 2000; ++i) {
    std::vector<TokenIds> sents(2 + rng() % 5);
    for (auto& s : sents) s = testing::random_tokens(rng, 1 + rng() % 3, 7);
    const Document doc(sents);
    for (std::size_t m = 1; m < doc.sentence_count(); ++m) {
      const auto r = build_gsg_pair(doc, m);
      ASSERT_TRUE(r.accepted());
      ASSERT_EQ(r.pair->summary_sentences, brute_top_m(doc, m));
    }
  }
}

// Summary sentences and document sentences partition the source.
void expect_partition(const PseudoPair& p, const Document& src) {
  std::vector<std::size_t> all = p.summary_sentences;
  all.insert(all.end(), p.document_sentences.begin(), p.document_sentences.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, iota_vec(0, src.sentence_count()));
  EXPECT_TRUE(std::is_sorted(p.summary_sentences.begin(), p.summary_sentences.end()));
  EXPECT_TRUE(std::is_sorted(p.document_sentences.begin(), p.document_sentences.end()));
  ASSERT_EQ(p.pair.document.sentence_count(), p.document_sentences.size());
  for (std::size_t k = 0; k < p.document_sentences.size(); ++k) {
    EXPECT_EQ(p.pair.document.sentences()[k], src.sentences()[p.document_sentences[k]]);
  }
  TokenIds summary;
  for (auto i : p.summary_sentences) summary.insert(summary.end(), src.sentences()[i].begin(), src.sentences()[i].end());
  EXPECT_EQ(p.pair.summary, summary);
}

TEST(PseudoPairs, PartitionProperty) {
  std::mt19937_64 rng(12);
  LeadConfig small;
  small.lead_n = 2;
  small.min_sum = 4;
  small.target_sum = 6;
  std::size_t lead_ok = 0, gsg_ok = 0;
  for (int i = 0; i < 500; ++i) {
    const Document doc = testing::random_document(rng, 8, 5, 12);
    const auto lead = build_lead_pair(doc, small);
    if (lead.accepted()) {
      ++lead_ok;
      expect_partition(*lead.pair, doc);
    }
    const auto gsg = build_gsg_pair(doc, 1 + rng() % 2);
    if (gsg.accepted()) {
      ++gsg_ok;
      expect_partition(*gsg.pair, doc);
    }
  }
  EXPECT_GT(lead_ok, 50u);
  EXPECT_GT(gsg_ok, 50u);
}

TEST(FilterThreshold, Examples) {
  const TokenId a = 4, b = 5, c = 6, d = 7, e = 8;
  // [a,b,c,e,e] vs [a,b,d,d]: overlap 2, P = 2/5, R = 1/2 -> F1 = 4/9.
  const SummaryPair p = {testing::doc_of({{a, b, d, d}}), {a, b, c, e, e}};
  const double r = 4.0 / 9.0;
  ASSERT_NEAR(pair_rouge1(p), r, 1e-15);
  const auto same = compute_filter_threshold({p, p, p});
  EXPECT_NEAR(same.epsilon, r, 1e-15);
  EXPECT_NEAR(same.sigma2, 0.0, 1e-15);
  const auto one = compute_filter_threshold({p});
  EXPECT_NEAR(one.threshold(), r, 1e-15);

  // [a] vs 9 tokens containing a: P = 1, R = 1/9 -> 0.2.
  // [a,b,c] vs 7 tokens containing all three: P = 1, R = 3/7 -> 0.6.
  const SummaryPair lo = {testing::doc_of({{a, b, c, d, e, e, e, e, e}}), {a}};
  const SummaryPair hi = {testing::doc_of({{a, b, c, d, e, d, e}}), {a, b, c}};
  ASSERT_NEAR(pair_rouge1(lo), 0.2, 1e-15);
  ASSERT_NEAR(pair_rouge1(hi), 0.6, 1e-15);
  const auto t = compute_filter_threshold({lo, hi});
  EXPECT_NEAR(t.epsilon, 0.4, 1e-15);
  EXPECT_NEAR(t.sigma2, 0.04, 1e-15);
  EXPECT_NEAR(t.threshold(), 0.36, 1e-15);

  EXPECT_THROW(compute_filter_threshold({}), Error);
}

// Five pairs with F1 = 1, 1/2, 1/3, 0, 2/5. Mean 67/150; population variance
// 1369/4500 - (67/150)^2 = 2356/22500; threshold 7694/22500.
std::vector<SummaryPair> five_pair_fixture() {
  const TokenId a = 4, b = 5, c = 6, d = 7, e = 8;
  return {
      {testing::doc_of({{a, b}}), {a, b}},           // 1
      {testing::doc_of({{a, c}}), {a, b}},           // P = R = 1/2
      {testing::doc_of({{a, e}}), {a, b, c, d}},     // P = 1/4, R = 1/2
      {testing::doc_of({{c, d}}), {a, b}},           // 0
      {testing::doc_of({{a, b, c, d}}), {a}},        // P = 1, R = 1/4
  };
}

TEST(FilterThreshold, FivePairFixtureMatchesHandArithmetic) {
  const auto pairs = five_pair_fixture();
  const std::vector<double> expected = {1.0, 0.5, 1.0 / 3.0, 0.0, 0.4};
  for (std::size_t i = 0; i < pairs.size(); ++i) EXPECT_NEAR(pair_rouge1(pairs[i]), expected[i], 1e-15);
  const auto t = compute_filter_threshold(pairs);
  EXPECT_NEAR(t.epsilon, 67.0 / 150.0, 1e-12);
  EXPECT_NEAR(t.sigma2, 2356.0 / 22500.0, 1e-12);
  EXPECT_NEAR(t.threshold(), 7694.0 / 22500.0, 1e-12);
  EXPECT_LE(t.threshold(), t.epsilon);

  const auto kept = filter_pseudo(pairs, t);
  ASSERT_EQ(kept.size(), 3u);
  EXPECT_EQ(kept[0].summary, pairs[0].summary);
  EXPECT_EQ(kept[1].summary, pairs[1].summary);
  EXPECT_EQ(kept[2].summary, pairs[4].summary);
}

TEST(FilterPseudo, BoundaryAndDisjoint) {
  const auto pairs = five_pair_fixture();
  FilterThreshold exact{0.5, 0.0};
  const auto kept = filter_pseudo(std::vector<SummaryPair>{pairs[1]}, exact);
  EXPECT_EQ(kept.size(), 1u);
  EXPECT_TRUE(filter_pseudo(std::vector<SummaryPair>{pairs[3]}, FilterThreshold{0.1, 0.0}).empty());
}

TEST(FilterPseudo, RetainsExactlyQualifyingSubsequence) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<SummaryPair> pairs;
    for (int i = 0; i < 12; ++i) pairs.push_back(testing::random_pair(rng, 9, 3, 3, 1 + rng() % 4));
    const auto t = compute_filter_threshold(pairs);
    EXPECT_LE(t.threshold(), t.epsilon);
    EXPECT_GE(t.sigma2, 0.0);
    const auto kept = filter_pseudo(pairs, t);
    std::size_t k = 0;
    for (const auto& p : pairs) {
      if (pair_rouge1(p) >= t.threshold()) {
        ASSERT_LT(k, kept.size());
        EXPECT_EQ(kept[k].summary, p.summary);
        EXPECT_EQ(kept[k].document, p.document);
        ++k;
      }
    }
    EXPECT_EQ(k, kept.size());
  }
}

}  // namespace
}  // namespace psp
