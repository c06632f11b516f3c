#pragma once

// ROUGE-1/2/L F1 over token ids. No stemming or stopword removal; ROUGE-L is
// summary-level over the whole sequence.

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "psp/corpus.hpp"

namespace psp {

struct RougeScore {
  double r1_f1 = 0.0;
  double r2_f1 = 0.0;
  double rl_f1 = 0.0;
};

using NgramCounts = std::map<std::vector<TokenId>, std::size_t>;

inline NgramCounts ngram_counts(std::span<const TokenId> tokens, std::size_t n) {
  NgramCounts counts;
  if (n == 0) throw Error(ErrorCode::kConfig, "n-gram order must be >= 1");
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<TokenId>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                  tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

inline double f1_from_overlap(double overlap, double cand_total, double ref_total) {
  if (cand_total == 0.0 || ref_total == 0.0 || overlap == 0.0) return 0.0;
  const double p = overlap / cand_total;
  const double r = overlap / ref_total;
  return 2.0 * p * r / (p + r);
}

inline double rouge_n_f1(std::span<const TokenId> candidate, std::span<const TokenId> reference, std::size_t n) {
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  std::size_t overlap = 0;
  for (const auto& [gram, count] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(count, it->second);
  }
  const double cand_total = candidate.size() >= n ? static_cast<double>(candidate.size() - n + 1) : 0.0;
  const double ref_total = reference.size() >= n ? static_cast<double>(reference.size() - n + 1) : 0.0;
  return f1_from_overlap(static_cast<double>(overlap), cand_total, ref_total);
}

inline std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l_f1(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
  return f1_from_overlap(static_cast<double>(lcs_length(candidate, reference)),
                         static_cast<double>(candidate.size()), static_cast<double>(reference.size()));
}

inline RougeScore rouge(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
  return {rouge_n_f1(candidate, reference, 1), rouge_n_f1(candidate, reference, 2),
          rouge_l_f1(candidate, reference)};
}

}  // namespace psp
