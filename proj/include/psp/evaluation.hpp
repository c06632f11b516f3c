#pragma once

// Corpus-level ROUGE, perplexity of generated summaries, and the
// cross-attention probe export.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "psp/decoding.hpp"
#include "psp/rouge.hpp"
#include "psp/training.hpp"

namespace psp {

struct EvalReport {
  double r1 = 0.0;
  double r2 = 0.0;
  double rl = 0.0;
  double ppl = 0.0;
  std::size_t n_examples = 0;
  std::string fingerprint;
};

struct Prediction {
  std::size_t id = 0;
  TokenIds tokens;  // generated, EOS stripped
  RougeScore score;
};

struct EvalResult {
  EvalReport report;
  std::vector<Prediction> predictions;
};

inline TokenIds strip_eos(TokenIds t) {
  if (!t.empty() && t.back() == kEos) t.pop_back();
  return t;
}

// exp of the mean per-token NLL of each generated sequence given its source.
inline double perplexity(const BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config,
                         const std::vector<std::pair<Document, TokenIds>>& pairs) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& [doc, gen] : pairs) {
    if (gen.empty()) throw Error(ErrorCode::kEmptyDataset, "perplexity of an empty generated summary");
    total -= score_sequence(backbone, prompts, config, doc, gen);
    count += gen.size();
  }
  if (count == 0) throw Error(ErrorCode::kEmptyDataset, "perplexity needs at least one pair");
  return std::exp(total / static_cast<double>(count));
}

inline std::string config_fingerprint(const PromptConfig& c, std::size_t beam, std::size_t max_len) {
  std::ostringstream os;
  os << "len_en=" << c.len_en << ";len_de=" << c.len_de << ";strategy=" << strategy_name(c.strategy) << ";k=" << c.k
     << ";n_max=" << c.n_max << ";shared=" << c.shared << ";encoder_only=" << c.encoder_only
     << ";decoder_only=" << c.decoder_only << ";beam=" << beam << ";max_len=" << max_len;
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : os.str()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline EvalReport summarize_scores(const std::vector<RougeScore>& scores) {
  if (scores.empty()) throw Error(ErrorCode::kEmptyDataset, "no scores to summarize");
  EvalReport r;
  for (const auto& s : scores) {
    r.r1 += s.r1_f1;
    r.r2 += s.r2_f1;
    r.rl += s.rl_f1;
  }
  const double n = static_cast<double>(scores.size());
  r.r1 /= n, r.r2 /= n, r.rl /= n;
  r.n_examples = scores.size();
  return r;
}

// ROUGE of each generated sequence against its reference; unweighted means.
// EOS is stripped before scoring. Leaves ppl and fingerprint unset.
inline EvalResult score_predictions(const std::vector<SummaryPair>& test, const std::vector<TokenIds>& generated) {
  if (test.empty()) throw Error(ErrorCode::kEmptyDataset, "evaluation needs a non-empty test set");
  if (generated.size() != test.size()) throw Error(ErrorCode::kShapeMismatch, "one generated sequence per test pair");
  EvalResult out;
  std::vector<RougeScore> scores;
  for (std::size_t i = 0; i < test.size(); ++i) {
    Prediction p;
    p.id = i;
    p.tokens = strip_eos(generated[i]);
    p.score = rouge(p.tokens, test[i].summary);
    scores.push_back(p.score);
    out.predictions.push_back(std::move(p));
  }
  out.report = summarize_scores(scores);
  return out;
}

// Beam-search every test document and score it against its reference.
// Perplexity is taken over the generated sequences including any EOS.
inline EvalResult evaluate(const BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config,
                           const std::vector<SummaryPair>& test, std::size_t beam = 4, std::size_t max_len = 256) {
  if (test.empty()) throw Error(ErrorCode::kEmptyDataset, "evaluation needs a non-empty test set");
  std::vector<TokenIds> generated;
  std::vector<std::pair<Document, TokenIds>> nonempty;
  for (const auto& pair : test) {
    generated.push_back(beam_search(backbone, prompts, config, pair.document, beam, max_len));
    if (!generated.back().empty()) nonempty.emplace_back(pair.document, generated.back());
  }
  EvalResult out = score_predictions(test, generated);
  out.report.ppl = nonempty.empty() ? 0.0 : perplexity(backbone, prompts, config, nonempty);
  out.report.fingerprint = config_fingerprint(config, beam, max_len);
  return out;
}

inline nlohmann::json report_json(const EvalReport& r) {
  return {{"rouge1_f1", r.r1}, {"rouge2_f1", r.r2},   {"rougeL_f1", r.rl},
          {"ppl", r.ppl},      {"n_examples", r.n_examples}, {"fingerprint", r.fingerprint}};
}

inline void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& preds,
                              const Vocab& vocab) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& p : preds) {
    nlohmann::json j = {{"id", p.id},          {"tokens", p.tokens},      {"text", detokenize(p.tokens, vocab)},
                        {"r1", p.score.r1_f1}, {"r2", p.score.r2_f1}, {"rl", p.score.rl_f1}};
    out << j.dump() << '\n';
  }
}

inline std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<Prediction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Prediction p;
      p.id = j.at("id").get<std::size_t>();
      p.tokens = j.at("tokens").get<TokenIds>();
      p.score = {j.at("r1").get<double>(), j.at("r2").get<double>(), j.at("rl").get<double>()};
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kParse, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention probe

struct QuadrantSums {
  double prompt_to_prompt = 0.0;  // P_de rows -> P_en columns
  double prompt_to_source = 0.0;  // P_de rows -> X columns
  double target_to_prompt = 0.0;  // BOS/Y rows -> P_en columns
  double target_to_source = 0.0;  // BOS/Y rows -> X columns

  double total() const { return prompt_to_prompt + prompt_to_source + target_to_prompt + target_to_source; }
};

inline QuadrantSums quadrant_sums(const AttentionRecord& rec) {
  QuadrantSums q;
  for (std::size_t r = 0; r < rec.weights.rows(); ++r) {
    for (std::size_t c = 0; c < rec.weights.cols(); ++c) {
      const double v = rec.weights(r, c);
      const bool prompt_row = r < rec.len_de;
      const bool prompt_col = c < rec.len_en;
      (prompt_row ? (prompt_col ? q.prompt_to_prompt : q.prompt_to_source)
                  : (prompt_col ? q.target_to_prompt : q.target_to_source)) += v;
    }
  }
  return q;
}

namespace detail {

inline std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_real(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(ErrorCode::kParse, "bad number '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace detail

// Plain-text matrix: "key value" header lines, then one row per line.
inline void write_attention(const std::filesystem::path& path, const AttentionRecord& rec) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << "psp-attention 1\n";
  out << "rows " << rec.weights.rows() << "\ncols " << rec.weights.cols() << '\n';
  out << "len_de " << rec.len_de << "\nlen_en " << rec.len_en << '\n';
  out << "layers " << rec.layers << "\nheads " << rec.heads << '\n';
  out << "row_labels";
  for (const auto& l : rec.row_labels) out << ' ' << l;
  out << "\ncol_labels";
  for (const auto& l : rec.col_labels) out << ' ' << l;
  out << "\ndata\n";
  for (std::size_t r = 0; r < rec.weights.rows(); ++r) {
    for (std::size_t c = 0; c < rec.weights.cols(); ++c) {
      if (c) out << ' ';
      out << detail::format_real(rec.weights(r, c));
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

inline AttentionRecord read_attention(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "psp-attention 1") throw Error(ErrorCode::kParse, "not an attention file");
  AttentionRecord rec;
  std::size_t rows = 0, cols = 0;
  while (std::getline(in, line) && line != "data") {
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "rows") is >> rows;
    else if (key == "cols") is >> cols;
    else if (key == "len_de") is >> rec.len_de;
    else if (key == "len_en") is >> rec.len_en;
    else if (key == "layers") is >> rec.layers;
    else if (key == "heads") is >> rec.heads;
    else if (key == "row_labels" || key == "col_labels") {
      auto& labels = key == "row_labels" ? rec.row_labels : rec.col_labels;
      std::string l;
      while (is >> l) labels.push_back(l);
    } else {
      throw Error(ErrorCode::kParse, "unknown attention header key '" + key + "'");
    }
  }
  rec.weights = Matrix(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!std::getline(in, line)) throw Error(ErrorCode::kParse, "attention file truncated");
    std::istringstream is(line);
    std::string tok;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!(is >> tok)) throw Error(ErrorCode::kParse, "attention row " + std::to_string(r) + " too short");
      rec.weights(r, c) = detail::parse_real(tok);
    }
  }
  return rec;
}

// Teacher-forced forward on (document, gold summary) and export of the
// layer/head-averaged cross-attention.
inline AttentionRecord export_attention(const BackboneParams& backbone, const PromptSet& prompts,
                                        const PromptConfig& config, const SummaryPair& pair,
                                        const std::filesystem::path& path) {
  auto fr = forward(backbone, prompts, config, pair.document, pair.summary);
  write_attention(path, fr.attention);
  return std::move(fr.attention);
}

}  // namespace psp
