#pragma once

// Greedy and beam-search generation. PAD and BOS are never emitted.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "psp/model.hpp"

namespace psp {

namespace detail {

inline std::vector<Real> log_softmax_row(std::span<const Real> row) {
  Real mx = -std::numeric_limits<Real>::infinity();
  for (Real v : row) mx = std::max(mx, v);
  Real sum = 0.0;
  for (Real v : row) sum += std::exp(v - mx);
  const Real lse = mx + std::log(sum);
  std::vector<Real> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lse;
  return out;
}

inline bool emittable(TokenId id) { return id != kPad && id != kBos; }

}  // namespace detail

// Incremental generation context: the encoder runs once per source. Holds
// references to the backbone and prompts, which must outlive it.
class Generator {
 public:
  Generator(const BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config, const Document& src)
      : backbone_(backbone), prompts_(prompts), config_(config), memory_(encode(backbone, prompts, config, src)) {}

  // log p(. | prefix) over the whole vocabulary.
  std::vector<Real> next_log_probs(std::span<const TokenId> prefix) const {
    ad::Tape tape;
    ModelGraph g(tape, backbone_, prompts_, config_, false, false);
    ad::Var logits = g.decode(tape.leaf(memory_, false), prefix, nullptr);
    const Matrix& lv = tape.value(logits);
    return detail::log_softmax_row(lv.row(lv.rows() - 1));
  }

 private:
  const BackboneParams& backbone_;
  const PromptSet& prompts_;
  PromptConfig config_;
  Matrix memory_;
};

// Both searches are written against a scorer: any callable mapping a prefix
// to log-probabilities over the vocabulary.

// Argmax per step (ties to the lower id); stops after EOS or max_len tokens.
template <typename NextLogProbs>
TokenIds greedy_search(NextLogProbs&& next, std::size_t max_len) {
  TokenIds out;
  while (out.size() < max_len) {
    const std::vector<Real> lp = next(std::span<const TokenId>(out));
    TokenId best = kEos;
    for (TokenId v = 0; v < lp.size(); ++v) {
      if (detail::emittable(v) && (lp[v] > lp[best] || (lp[v] == lp[best] && v < best))) best = v;
    }
    out.push_back(best);
    if (best == kEos) break;
  }
  return out;
}

struct Hypothesis {
  TokenIds tokens;
  Real score = 0.0;  // cumulative log-prob
};

// Length-unnormalized beam search. Each step ranks every extension of the
// live beams by (score desc, token asc, beam asc); EOS extensions ranked
// within the first `beam` places finish, and the first `beam` non-EOS
// extensions stay live. Hypotheses reaching max_len are terminal. Scores only
// decrease, so search stops once the best terminal score reaches the best
// live one.
template <typename NextLogProbs>
Hypothesis beam_search_with(NextLogProbs&& next, std::size_t beam, std::size_t max_len) {
  if (beam == 0) throw Error(ErrorCode::kConfig, "beam must be >= 1");
  std::vector<Hypothesis> alive{Hypothesis{}};
  std::vector<Hypothesis> finished;

  struct Candidate {
    Real score;
    TokenId token;
    std::size_t beam;
  };

  for (std::size_t step = 0; step < max_len && !alive.empty(); ++step) {
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < alive.size(); ++b) {
      const std::vector<Real> lp = next(std::span<const TokenId>(alive[b].tokens));
      for (TokenId v = 0; v < lp.size(); ++v) {
        if (detail::emittable(v)) cands.push_back({alive[b].score + lp[v], v, b});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.token != b.token) return a.token < b.token;
      return a.beam < b.beam;
    });
    std::vector<Hypothesis> next_alive;
    for (std::size_t rank = 0; rank < cands.size() && next_alive.size() < beam; ++rank) {
      const auto& c = cands[rank];
      Hypothesis h{alive[c.beam].tokens, c.score};
      h.tokens.push_back(c.token);
      if (c.token == kEos) {
        if (rank < beam) finished.push_back(std::move(h));
      } else if (h.tokens.size() == max_len) {
        finished.push_back(std::move(h));
      } else {
        next_alive.push_back(std::move(h));
      }
    }
    alive = std::move(next_alive);
    if (!finished.empty() && !alive.empty()) {
      Real best_finished = -std::numeric_limits<Real>::infinity();
      for (const auto& f : finished) best_finished = std::max(best_finished, f.score);
      if (best_finished >= alive.front().score) break;
    }
  }
  if (finished.empty()) {
    if (alive.empty()) return {};
    return alive.front();
  }
  // First-found wins ties.
  auto best = std::max_element(finished.begin(), finished.end(),
                               [](const Hypothesis& a, const Hypothesis& b) { return a.score < b.score; });
  return *best;
}

inline TokenIds greedy_decode(const BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config,
                              const Document& src, std::size_t max_len) {
  Generator gen(backbone, prompts, config, src);
  return greedy_search([&](std::span<const TokenId> p) { return gen.next_log_probs(p); }, max_len);
}

inline Hypothesis beam_search_hypothesis(const BackboneParams& backbone, const PromptSet& prompts,
                                         const PromptConfig& config, const Document& src, std::size_t beam = 4,
                                         std::size_t max_len = 256) {
  Generator gen(backbone, prompts, config, src);
  return beam_search_with([&](std::span<const TokenId> p) { return gen.next_log_probs(p); }, beam, max_len);
}

inline TokenIds beam_search(const BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config,
                            const Document& src, std::size_t beam = 4, std::size_t max_len = 256) {
  return beam_search_hypothesis(backbone, prompts, config, src, beam, max_len).tokens;
}

// Sum of log p(tokens[t] | tokens[<t]) under the prompted model.
inline Real score_sequence(const BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config,
                           const Document& src, std::span<const TokenId> tokens) {
  if (tokens.empty()) return 0.0;
  const auto fr = forward(backbone, prompts, config, src, tokens.first(tokens.size() - 1));
  Real total = 0.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) total += detail::log_softmax_row(fr.logits.row(t))[tokens[t]];
  return total;
}

}  // namespace psp
