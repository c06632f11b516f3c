#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "psp/model.hpp"
#include "psp/training.hpp"
#include "test_util.hpp"

namespace psp {
namespace {

using testing::doc_of;
using testing::tiny_dims;

PromptConfig small_config(InnerStrategy s = InnerStrategy::kSequential) {
  PromptConfig c;
  c.len_en = 3;
  c.len_de = 3;
  c.strategy = s;
  c.k = 3;
  c.n_max = 2;
  return c;
}

std::vector<Real> row_of(const Matrix& m, std::size_t r) {
  auto s = m.row(r);
  return {s.begin(), s.end()};
}

TEST(InitBackbone, Examples) {
  const auto dims = tiny_dims(32, 2, 4, 30, 64);
  const auto a = init_backbone(dims, 5);
  EXPECT_EQ(a.dims.d / a.dims.heads, 8u);
  EXPECT_FALSE(a.frozen);
  EXPECT_EQ(a.checksum(), init_backbone(dims, 5).checksum());
  EXPECT_NE(a.checksum(), init_backbone(dims, 6).checksum());

  auto bad = dims;
  bad.d = 30;
  try {
    init_backbone(bad, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
}

TEST(InitBackbone, ParameterCountMatchesTensorShapes) {
  const auto dims = tiny_dims(8, 1, 2, 20, 64);
  const auto b = init_backbone(dims, 1);
  const std::size_t d = 8, f = 16, v = 20, p = 64;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t ln = 2 * d;
  const std::size_t enc = attn + ffn + 2 * ln;
  const std::size_t dec = 2 * attn + ffn + 3 * ln;
  EXPECT_EQ(b.parameter_count(), v * d + p * d + enc + dec + 2 * ln);
}

TEST(InitPrompts, RowsAreDistinctVocabularyCopies) {
  const auto b = init_backbone(tiny_dims(8, 1, 2, 500, 256), 2);
  PromptConfig c;
  c.len_en = 100;
  c.len_de = 100;
  c.strategy = InnerStrategy::kNone;
  const auto p = init_prompts(c, b, 3);
  ASSERT_EQ(p.p_en.rows(), 100u);
  std::set<std::size_t> used;
  for (std::size_t r = 0; r < 100; ++r) {
    std::size_t match = 0;
    for (std::size_t id = 0; id < 500; ++id) {
      if (row_of(b.embed, id) == row_of(p.p_en, r)) match = id;
    }
    EXPECT_GE(match, kReservedTokens.size()) << "row " << r << " is not an ordinary vocabulary row";
    used.insert(match);
  }
  EXPECT_EQ(used.size(), 100u);
  EXPECT_TRUE(p.p_in.empty());
}

TEST(InitPrompts, InnerRowsFollowStrategyAndInitScale) {
  const auto b = init_backbone(tiny_dims(32, 1, 4, 20, 64), 2);
  auto c = small_config(InnerStrategy::kInterval);
  EXPECT_EQ(init_prompts(c, b, 1).p_in.rows(), 2u);
  c.strategy = InnerStrategy::kFixedK;
  EXPECT_EQ(init_prompts(c, b, 1).p_in.rows(), 3u);
  c.strategy = InnerStrategy::kSequential;
  c.n_max = 999;
  const auto p = init_prompts(c, b, 1);
  ASSERT_EQ(p.p_in.rows(), 1000u);
  double sum = 0, sq = 0;
  for (std::size_t i = 0; i < p.p_in.size(); ++i) {
    sum += p.p_in.data()[i];
    sq += p.p_in.data()[i] * p.p_in.data()[i];
  }
  const double n = static_cast<double>(p.p_in.size());
  const double mean = sum / n;
  EXPECT_NEAR(mean, 0.0, 0.002);
  EXPECT_NEAR(std::sqrt(sq / n - mean * mean), kInnerPromptInitStd, 0.002);
}

TEST(InitPrompts, SmallVocabularyFallsBackWithWarning) {
  const auto b = init_backbone(tiny_dims(8, 1, 2, 10, 64), 2);
  std::vector<std::string> warnings;
  auto saved = warning_sink();
  warning_sink() = [&](std::string_view m) { warnings.emplace_back(m); };
  auto c = small_config(InnerStrategy::kNone);
  c.len_en = 8;
  c.len_de = 2;
  const auto p = init_prompts(c, b, 4);
  warning_sink() = saved;
  EXPECT_EQ(p.p_en.rows(), 8u);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("with replacement"), std::string::npos);
}

TEST(PromptConfig, Validation) {
  auto c = small_config();
  c.shared = true;
  c.encoder_only = true;
  EXPECT_THROW(c.validate(), Error);
  c = small_config(InnerStrategy::kFixedK);
  c.k = 0;
  EXPECT_THROW(c.validate(), Error);
  c = small_config();
  c.n_max = 0;
  EXPECT_THROW(c.validate(), Error);
  c = small_config();
  c.encoder_only = c.decoder_only = true;
  EXPECT_THROW(c.validate(), Error);
}

TEST(ComputeNMax, Examples) {
  std::vector<Document> docs;
  for (std::size_t n = 1; n <= 100; ++n) docs.push_back(Document(std::vector<TokenIds>(n, TokenIds{4})));
  const std::size_t n_max = compute_n_max(docs, 0.85);
  EXPECT_EQ(n_max, 85u);
  PromptConfig c;
  c.n_max = n_max;
  EXPECT_EQ(c.inner_rows(), 86u);

  std::vector<Document> fives(7, Document(std::vector<TokenIds>(5, TokenIds{4, 5})));
  EXPECT_EQ(compute_n_max(fives), 5u);
  // Spans of k = 3 over 10 tokens: 4 spans.
  EXPECT_EQ(compute_n_max(fives, 0.85, CountUnit::kSpan, 3), 4u);
  EXPECT_THROW(compute_n_max({}), Error);
}

TEST(AssignInnerPrompts, Examples) {
  auto c = small_config(InnerStrategy::kInterval);
  const Document four = doc_of({{4}, {5}, {6}, {7}});
  EXPECT_EQ(assign_inner_prompts(four, c), (std::vector<std::size_t>{0, 1, 0, 1}));

  c.strategy = InnerStrategy::kSequential;
  c.n_max = 5;
  const Document seven = doc_of({{4}, {4}, {4}, {4}, {4}, {4}, {4}});
  EXPECT_EQ(assign_inner_prompts(seven, c), (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 5}));

  c.strategy = InnerStrategy::kFixedK;
  c.k = 10;
  const Document flat25 = doc_of({TokenIds(7, 4), TokenIds(18, 5)});
  const auto idx = assign_inner_prompts(flat25, c);
  ASSERT_EQ(idx.size(), 25u);
  EXPECT_EQ(std::count(idx.begin(), idx.end(), 0u), 10);
  EXPECT_EQ(std::count(idx.begin(), idx.end(), 1u), 10);
  EXPECT_EQ(std::count(idx.begin(), idx.end(), 2u), 5);

  c.strategy = InnerStrategy::kNone;
  EXPECT_THROW(assign_inner_prompts(four, c), Error);
}

TEST(AssignInnerPrompts, PropertiesOverRandomDocuments) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 500; ++trial) {
    const Document doc = testing::random_document(rng, 12, 9, 20);
    PromptConfig c;
    c.n_max = 1 + rng() % 6;
    c.k = 1 + rng() % 7;

    c.strategy = InnerStrategy::kInterval;
    const auto interval = assign_inner_prompts(doc, c);
    c.strategy = InnerStrategy::kSequential;
    const auto sequential = assign_inner_prompts(doc, c);
    c.strategy = InnerStrategy::kFixedK;
    const auto fixed = assign_inner_prompts(doc, c);
    ASSERT_EQ(interval.size(), doc.flat_length());
    ASSERT_EQ(sequential.size(), doc.flat_length());
    ASSERT_EQ(fixed.size(), doc.flat_length());

    std::size_t t = 0;
    for (std::size_t i = 0; i < doc.sentence_count(); ++i) {
      for (std::size_t j = 0; j < doc.sentences()[i].size(); ++j, ++t) {
        ASSERT_EQ(interval[t], i % 2);
        ASSERT_EQ(sequential[t], std::min<std::size_t>(i, c.n_max));
      }
    }
    // Spans: consecutive runs of k tokens; every token lands in exactly one.
    const std::size_t spans = (doc.flat_length() + c.k - 1) / c.k;
    std::vector<std::size_t> covered(doc.flat_length(), 0);
    for (std::size_t s = 0; s < spans; ++s) {
      for (std::size_t u = s * c.k; u < std::min((s + 1) * c.k, doc.flat_length()); ++u) {
        ++covered[u];
        ASSERT_EQ(fixed[u], std::min(s, c.n_max));
      }
    }
    for (auto n : covered) ASSERT_EQ(n, 1u);
  }
}

TEST(ComposeEncoderInput, Examples) {
  const auto b = init_backbone(tiny_dims(), 3);
  auto c = small_config(InnerStrategy::kNone);
  c.len_en = 0;
  const Document doc = doc_of({{5, 9}, {7}});
  const auto plain = compose_encoder_input(doc, init_prompts(c, b, 1), b, c);
  ASSERT_EQ(plain.rows(), 3u);
  const TokenIds flat = doc.flat();
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(plain(t, j), b.embed(flat[t], j) + b.positions(t, j));
  }

  c = small_config(InnerStrategy::kInterval);
  const auto p = init_prompts(c, b, 2);
  const auto one = compose_encoder_input(doc_of({{6}}), p, b, c);
  ASSERT_EQ(one.rows(), c.len_en + 1);
  for (std::size_t r = 0; r < c.len_en; ++r) {
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(one(r, j), p.p_en(r, j) + b.positions(r, j));
  }
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_EQ(one(c.len_en, j), b.embed(6, j) + b.positions(c.len_en, j) + p.p_in(0, j));
  }

  c.len_en = 2;
  EXPECT_EQ(compose_encoder_input(doc_of({{4, 5, 6}}), init_prompts(c, b, 2), b, c).rows(), 5u);
}

TEST(ComposeEncoderInput, LengthOverflowNamesMaxPos) {
  const auto b = init_backbone(tiny_dims(8, 1, 2, 20, 8), 3);
  const auto c = small_config();
  const auto p = init_prompts(c, b, 1);
  try {
    compose_encoder_input(doc_of({TokenIds(6, 4)}), p, b, c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kLengthOverflow);
    EXPECT_NE(std::string(e.what()).find("max_pos=8"), std::string::npos);
  }
  EXPECT_NO_THROW(compose_encoder_input(doc_of({TokenIds(5, 4)}), p, b, c));
}

TEST(ComposeEncoderInput, ZeroInnerPromptsEqualStrategyNone) {
  const auto b = init_backbone(tiny_dims(), 3);
  std::mt19937_64 rng(4);
  for (auto s : {InnerStrategy::kInterval, InnerStrategy::kSequential, InnerStrategy::kFixedK}) {
    const auto c = small_config(s);
    auto p = init_prompts(c, b, 5);
    p.p_in.fill(0.0);
    auto none = c;
    none.strategy = InnerStrategy::kNone;
    for (int i = 0; i < 20; ++i) {
      const Document doc = testing::random_document(rng, 5, 4, 20);
      EXPECT_EQ(compose_encoder_input(doc, p, b, c), compose_encoder_input(doc, p, b, none));
    }
  }
}

TEST(Forward, ShapesAndAttentionRows) {
  const auto b = init_backbone(tiny_dims(8, 2, 2, 20, 64), 4);
  const auto c = small_config();
  const auto p = init_prompts(c, b, 1);
  const Document doc = doc_of({{4, 5}, {6, 7, 8}});
  for (const TokenIds& prefix : {TokenIds{}, TokenIds{9}, TokenIds{9, 10, 11}}) {
    const auto r = forward(b, p, c, doc, prefix);
    EXPECT_EQ(r.logits.rows(), prefix.size() + 1);
    EXPECT_EQ(r.logits.cols(), 20u);
    const auto& w = r.attention.weights;
    EXPECT_EQ(w.rows(), c.len_de + 1 + prefix.size());
    EXPECT_EQ(w.cols(), c.len_en + doc.flat_length());
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < w.cols(); ++j) s += w(i, j);
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
    EXPECT_EQ(r.attention.row_labels.size(), w.rows());
    EXPECT_EQ(r.attention.col_labels.size(), w.cols());
    EXPECT_EQ(r.attention.row_labels[c.len_de], "BOS");
    EXPECT_EQ(r.attention.col_labels[c.len_en], "X:0");
  }
}

TEST(Forward, DeterministicAndCausal) {
  const auto b = init_backbone(tiny_dims(8, 2, 2, 20, 64), 4);
  const auto c = small_config();
  const auto p = init_prompts(c, b, 1);
  const Document doc = doc_of({{4, 5}, {6, 7, 8}});
  const auto a1 = forward(b, p, c, doc, TokenIds{9, 10, 11});
  const auto a2 = forward(b, p, c, doc, TokenIds{9, 10, 11});
  EXPECT_EQ(a1.logits, a2.logits);
  // Changing the last prefix token leaves earlier predictions untouched.
  const auto a3 = forward(b, p, c, doc, TokenIds{9, 10, 12});
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(row_of(a1.logits, r), row_of(a3.logits, r));
  EXPECT_NE(row_of(a1.logits, 3), row_of(a3.logits, 3));
}

TEST(Forward, PlacementAblationsShapeTheAttentionGrid) {
  const auto b = init_backbone(tiny_dims(), 4);
  const Document doc = doc_of({{4, 5, 6}});
  const TokenIds prefix{7, 8};
  auto c = small_config();
  c.encoder_only = true;
  auto r = forward(b, init_prompts(c, b, 1), c, doc, prefix);
  EXPECT_EQ(r.attention.len_de, 0u);
  EXPECT_EQ(r.attention.weights.rows(), 1 + prefix.size());
  EXPECT_EQ(r.attention.weights.cols(), c.len_en + 3);

  c = small_config();
  c.decoder_only = true;
  r = forward(b, init_prompts(c, b, 1), c, doc, prefix);
  EXPECT_EQ(r.attention.len_en, 0u);
  EXPECT_EQ(r.attention.weights.rows(), c.len_de + 1 + prefix.size());
  EXPECT_EQ(r.attention.weights.cols(), 3u);
}

TEST(CountTrainableParams, Examples) {
  PromptConfig psp;
  psp.len_en = psp.len_de = 100;
  psp.strategy = InnerStrategy::kSequential;
  psp.n_max = 61;
  EXPECT_EQ(psp.inner_rows(), 62u);
  EXPECT_EQ(count_trainable_params(psp, 768, TrainMode::kPromptOnly), 201216u);

  PromptConfig tuning;
  tuning.len_en = 100;
  tuning.len_de = 0;
  tuning.strategy = InnerStrategy::kNone;
  EXPECT_EQ(count_trainable_params(tuning, 768, TrainMode::kPromptOnly), 76800u);

  PromptConfig shared;
  shared.len_en = shared.len_de = 100;
  shared.strategy = InnerStrategy::kNone;
  shared.shared = true;
  EXPECT_EQ(count_trainable_params(shared, 768, TrainMode::kPromptOnly), 76800u);

  EXPECT_EQ(count_trainable_params(tuning, 768, TrainMode::kFullModel, 1000), 77800u);
}

TEST(CountTrainableParams, AgreesWithAllocatedTensors) {
  const auto b = init_backbone(tiny_dims(), 1);
  for (auto s : {InnerStrategy::kNone, InnerStrategy::kInterval, InnerStrategy::kSequential, InnerStrategy::kFixedK}) {
    for (int variant = 0; variant < 4; ++variant) {
      auto c = small_config(s);
      c.shared = variant == 1;
      c.encoder_only = variant == 2;
      c.decoder_only = variant == 3;
      const auto p = init_prompts(c, b, 1);
      EXPECT_EQ(p.parameter_count(), count_trainable_params(c, 8, TrainMode::kPromptOnly));
      if (variant == 1) {
        auto sep = c;
        sep.shared = false;
        EXPECT_EQ(count_trainable_params(c, 8, TrainMode::kPromptOnly),
                  count_trainable_params(sep, 8, TrainMode::kPromptOnly) - 8 * c.len_de);
      }
    }
  }
}

TEST(SharedPrompts, DecoderReadsTheEncoderTensor) {
  const auto b = init_backbone(tiny_dims(), 6);
  auto c = small_config();
  c.shared = true;
  auto p = init_prompts(c, b, 2);
  EXPECT_TRUE(p.p_de.empty());
  EXPECT_EQ(&p.decoder_prompts(), &p.p_en);

  // A separate set with P_de = P_en computes the same function.
  auto sep_c = c;
  sep_c.shared = false;
  PromptSet sep = p;
  sep.shared = false;
  sep.p_de = p.p_en;
  const Document doc = doc_of({{4, 5}, {6}});
  EXPECT_EQ(forward(b, p, c, doc, TokenIds{7}).logits, forward(b, sep, sep_c, doc, TokenIds{7}).logits);

  const auto before = forward(b, p, c, doc, TokenIds{7});
  p.p_en(0, 0) += 0.5;
  const auto after = forward(b, p, c, doc, TokenIds{7});
  EXPECT_NE(before.attention.weights(0, 0), after.attention.weights(0, 0));
}

TEST(SharedPrompts, GradientIsSumOfSeparateGradients) {
  const auto b = init_backbone(tiny_dims(), 6);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    auto c = small_config(InnerStrategy::kInterval);
    c.shared = true;
    const auto p = init_prompts(c, b, trial);
    auto sep_c = c;
    sep_c.shared = false;
    PromptSet sep = p;
    sep.shared = false;
    sep.p_de = p.p_en;

    const SummaryPair pair = testing::random_pair(rng, 20);
    const std::vector<SummaryPair> one{pair};
    const auto gs = compute_gradients(b, p, c, one, TrainMode::kPromptOnly);
    const auto gp = compute_gradients(b, sep, sep_c, one, TrainMode::kPromptOnly);
    EXPECT_EQ(gs.grads.count("prompts/P_de"), 0u);
    Matrix sum = gp.grads.at("prompts/P_en");
    axpy(sum, gp.grads.at("prompts/P_de"));
    const Matrix& shared = gs.grads.at("prompts/P_en");
    for (std::size_t i = 0; i < sum.size(); ++i) EXPECT_NEAR(shared.data()[i], sum.data()[i], 1e-12);

    // And the shared gradient matches finite differences of the shared model.
    EXPECT_LT(grad_check(b, p, c, pair, 1e-5, 24, trial).max_rel_error, 1e-4);
  }
}

}  // namespace
}  // namespace psp
