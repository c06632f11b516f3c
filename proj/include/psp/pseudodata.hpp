#pragma once

// Self-supervised pseudo summary pairs: Lead and gap-sentence (GSG)
// construction plus the mean-minus-variance quality filter.

#include <algorithm>
#include <numeric>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "psp/corpus.hpp"
#include "psp/rouge.hpp"

namespace psp {

enum class RejectReason { kNone, kTooFewSentences, kSourceShorterThanSummary };

inline std::string_view reject_reason_name(RejectReason r) {
  switch (r) {
    case RejectReason::kNone: return "none";
    case RejectReason::kTooFewSentences: return "too-few-sentences";
    case RejectReason::kSourceShorterThanSummary: return "source-shorter-than-summary";
  }
  return "unknown";
}

struct PseudoPair {
  SummaryPair pair;
  std::vector<std::size_t> summary_sentences;   // indices into the source document
  std::vector<std::size_t> document_sentences;  // indices into the source document
  std::string summary_text;                     // raw text when the source carried it
  std::string document_text;
};

struct PseudoResult {
  std::optional<PseudoPair> pair;
  RejectReason reason = RejectReason::kNone;

  bool accepted() const noexcept { return pair.has_value(); }
};

inline std::vector<std::string> default_lead_clean_patterns() {
  return {
      // bylines at the start of a summary: "By John Smith ."
      R"(^\s*[Bb]y\s+[A-Z][A-Za-z'.-]*(\s+[A-Z][A-Za-z'.-]*)*\s*[,.|:-]*\s*)",
      // parenthesized agency tags: "(CNN) --"
      R"(\((CNN|AP|AFP|Reuters|[A-Z]{2,})\)\s*-*\s*)",
      // leading ISO dates
      R"(^\s*\d{4}-\d{2}-\d{2}\s*)",
  };
}

struct LeadConfig {
  std::size_t lead_n = 3;
  std::size_t min_sum = 50;
  std::size_t target_sum = 70;
  std::vector<std::string> clean_patterns = default_lead_clean_patterns();
};

namespace detail {

inline std::string join_text(const Document& doc, const std::vector<std::size_t>& idx, const Vocab* vocab) {
  std::string out;
  for (auto i : idx) {
    if (!out.empty()) out.push_back(' ');
    if (doc.has_text()) {
      out += doc.sentence_text()[i];
    } else if (vocab != nullptr) {
      out += detokenize(doc.sentences()[i], *vocab);
    }
  }
  return out;
}

inline std::optional<Document> sub_document(const Document& doc, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return std::nullopt;
  std::vector<TokenIds> s;
  std::vector<std::string> t;
  for (auto i : idx) {
    s.push_back(doc.sentences()[i]);
    if (doc.has_text()) t.push_back(doc.sentence_text()[i]);
  }
  return Document(std::move(s), std::move(t));
}

}  // namespace detail

// Leading sentences as the pseudo summary. Short summaries are grown from the
// remainder; pairs whose source ends up shorter than the summary are rejected.
// Cleaning patterns apply to summary sentences when the document carries raw
// text and a vocab is supplied for re-tokenization.
inline PseudoResult build_lead_pair(const Document& doc, const LeadConfig& cfg = {}, const Vocab* vocab = nullptr) {
  if (cfg.lead_n == 0) throw Error(ErrorCode::kConfig, "lead_n must be >= 1");
  if (doc.sentence_count() < cfg.lead_n + 1) return {std::nullopt, RejectReason::kTooFewSentences};

  const bool clean = vocab != nullptr && doc.has_text() && !cfg.clean_patterns.empty();
  std::vector<std::regex> patterns;
  if (clean) {
    for (const auto& p : cfg.clean_patterns) patterns.emplace_back(p);
  }

  TokenIds summary;
  std::string summary_text;
  std::vector<std::size_t> summary_idx;
  auto take = [&](std::size_t i) {
    summary_idx.push_back(i);
    if (clean) {
      std::string text = doc.sentence_text()[i];
      for (const auto& re : patterns) text = std::regex_replace(text, re, "");
      auto ids = tokenize(text, *vocab);
      summary.insert(summary.end(), ids.begin(), ids.end());
      auto trimmed = detail::trim(text);
      if (!trimmed.empty()) {
        if (!summary_text.empty()) summary_text.push_back(' ');
        summary_text += trimmed;
      }
    } else {
      const auto& s = doc.sentences()[i];
      summary.insert(summary.end(), s.begin(), s.end());
    }
  };

  std::size_t next = 0;
  for (; next < cfg.lead_n; ++next) take(next);
  if (summary.size() < cfg.min_sum) {
    while (summary.size() < cfg.target_sum && next < doc.sentence_count()) take(next++);
  }

  std::vector<std::size_t> doc_idx;
  for (std::size_t i = next; i < doc.sentence_count(); ++i) doc_idx.push_back(i);
  std::size_t doc_len = 0;
  for (auto i : doc_idx) doc_len += doc.sentences()[i].size();
  if (doc_idx.empty() || doc_len < summary.size() || summary.empty()) {
    return {std::nullopt, RejectReason::kSourceShorterThanSummary};
  }

  PseudoPair out;
  out.pair = {*detail::sub_document(doc, doc_idx), std::move(summary)};
  out.summary_sentences = std::move(summary_idx);
  out.document_sentences = std::move(doc_idx);
  out.summary_text = clean ? summary_text : detail::join_text(doc, out.summary_sentences, vocab);
  out.document_text = detail::join_text(doc, out.document_sentences, vocab);
  return {std::move(out), RejectReason::kNone};
}

// Principal score per sentence: ROUGE-1 F1 against the rest of the document
// in original order.
inline std::vector<double> gsg_scores(const Document& doc) {
  if (doc.sentence_count() < 2) {
    throw Error(ErrorCode::kDegenerateDocument, "gap-sentence scores need at least 2 sentences");
  }
  std::vector<double> scores;
  scores.reserve(doc.sentence_count());
  for (std::size_t i = 0; i < doc.sentence_count(); ++i) {
    TokenIds rest;
    for (std::size_t j = 0; j < doc.sentence_count(); ++j) {
      if (j == i) continue;
      rest.insert(rest.end(), doc.sentences()[j].begin(), doc.sentences()[j].end());
    }
    scores.push_back(rouge_n_f1(doc.sentences()[i], rest, 1));
  }
  return scores;
}

// Indices of the m highest scores (ties to the lower index), ascending.
inline std::vector<std::size_t> top_m_sentences(const std::vector<double>& scores, std::size_t m) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min(m, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

inline PseudoResult build_gsg_pair(const Document& doc, std::size_t m = 1, const Vocab* vocab = nullptr) {
  if (m == 0) throw Error(ErrorCode::kConfig, "gsg m must be >= 1");
  if (doc.sentence_count() < m + 1) return {std::nullopt, RejectReason::kTooFewSentences};
  const auto selected = top_m_sentences(gsg_scores(doc), m);
  std::vector<std::size_t> rest;
  for (std::size_t i = 0, s = 0; i < doc.sentence_count(); ++i) {
    if (s < selected.size() && selected[s] == i) {
      ++s;
    } else {
      rest.push_back(i);
    }
  }
  TokenIds summary;
  for (auto i : selected) summary.insert(summary.end(), doc.sentences()[i].begin(), doc.sentences()[i].end());
  PseudoPair out;
  out.pair = {*detail::sub_document(doc, rest), std::move(summary)};
  out.summary_sentences = selected;
  out.document_sentences = std::move(rest);
  out.summary_text = detail::join_text(doc, out.summary_sentences, vocab);
  out.document_text = detail::join_text(doc, out.document_sentences, vocab);
  return {std::move(out), RejectReason::kNone};
}

struct FilterThreshold {
  double epsilon = 0.0;
  double sigma2 = 0.0;

  double threshold() const noexcept { return epsilon - sigma2; }
};

inline double pair_rouge1(const SummaryPair& p) { return rouge_n_f1(p.summary, p.document.flat(), 1); }

// Mean and population variance of ROUGE-1 F1 between each reference summary
// and its (truncated) document.
inline FilterThreshold compute_filter_threshold(const std::vector<SummaryPair>& fewshot) {
  if (fewshot.empty()) throw Error(ErrorCode::kEmptyDataset, "filter threshold needs at least one pair");
  std::vector<double> r;
  r.reserve(fewshot.size());
  for (const auto& p : fewshot) r.push_back(pair_rouge1(p));
  const double n = static_cast<double>(r.size());
  FilterThreshold t;
  t.epsilon = std::accumulate(r.begin(), r.end(), 0.0) / n;
  for (double v : r) t.sigma2 += (v - t.epsilon) * (v - t.epsilon);
  t.sigma2 /= n;
  return t;
}

// Keeps pairs whose summary/document ROUGE-1 F1 is at least the threshold.
template <typename PairLike>
std::vector<PairLike> filter_pseudo(const std::vector<PairLike>& pairs, const FilterThreshold& threshold) {
  std::vector<PairLike> kept;
  const double bound = threshold.threshold();
  for (const auto& p : pairs) {
    const SummaryPair* sp = nullptr;
    if constexpr (std::is_same_v<PairLike, PseudoPair>) {
      sp = &p.pair;
    } else {
      sp = &p;
    }
    if (pair_rouge1(*sp) >= bound) kept.push_back(p);
  }
  return kept;
}

}  // namespace psp
