#pragma once

// Tokenization, sentence segmentation, dataset ingestion and few-shot
// sampling.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "psp/errors.hpp"

namespace psp {

using TokenId = std::uint32_t;
using TokenIds = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::array<std::string_view, 4> kReservedTokens = {"<pad>", "<s>", "</s>", "<unk>"};

namespace detail {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
inline bool is_upper(char c) { return std::isupper(static_cast<unsigned char>(c)) != 0; }
inline bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Vocab

class Vocab {
 public:
  Vocab() {
    for (auto tok : kReservedTokens) append(std::string(tok));
  }

  // Frequency-ordered vocabulary over pre-tokenized words (ties broken
  // lexicographically). `max_size` counts the reserved entries; 0 = unbounded.
  static Vocab build(const std::vector<std::vector<std::string>>& texts, std::size_t min_count = 1,
                     std::size_t max_size = 0) {
    std::map<std::string, std::size_t> counts;
    for (const auto& words : texts) {
      for (const auto& w : words) ++counts[w];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [word, count] : ranked) {
      if (count < min_count) continue;
      if (max_size != 0 && v.size() >= max_size) break;
      if (v.contains(word)) continue;
      v.append(word);
    }
    return v;
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::kIo, "cannot open vocab file " + path.string());
    Vocab v;
    v.tokens_.clear();
    v.index_.clear();
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (v.contains(line)) {
        throw Error(ErrorCode::kParse, path.string() + ":" + std::to_string(v.size() + 1) +
                                           ": duplicate token '" + line + "'");
      }
      v.append(line);
    }
    for (std::size_t i = 0; i < kReservedTokens.size(); ++i) {
      if (v.size() <= i || v.tokens_[i] != kReservedTokens[i]) {
        throw Error(ErrorCode::kParse, path.string() + ": line " + std::to_string(i + 1) + " must be " +
                                           std::string(kReservedTokens[i]));
      }
    }
    return v;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::kIo, "cannot write vocab file " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) return tokens_[kUnk];
    return tokens_[id];
  }

 private:
  void append(std::string token) {
    index_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(token));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// Sentence splitting

namespace detail {

inline bool is_abbreviation(std::string_view word) {
  static constexpr std::array<std::string_view, 28> kAbbrev = {
      "Mr.",   "Mrs.",  "Ms.",   "Dr.",  "Prof.", "Sr.",  "Jr.",  "St.",  "vs.",  "etc.",
      "e.g.",  "i.e.",  "Gen.",  "Sen.", "Rep.",  "Gov.", "Lt.",  "Col.", "Capt.", "Sgt.",
      "Inc.",  "Ltd.",  "Co.",   "Corp.", "No.",  "Mt.",  "Ave.", "Rev."};
  return std::find(kAbbrev.begin(), kAbbrev.end(), word) != kAbbrev.end();
}

// Whether the period at `pos` ends an abbreviation that must not split.
inline bool protected_period(std::string_view text, std::size_t pos) {
  std::size_t start = pos;
  while (start > 0 && !is_space(text[start - 1])) --start;
  std::string_view word = text.substr(start, pos - start + 1);
  while (!word.empty() && (word.front() == '(' || word.front() == '"' || word.front() == '\'')) {
    word.remove_prefix(1);
  }
  if (is_abbreviation(word)) return true;
  // Single capital before the period: initials ("J. Smith") and dotted
  // acronyms ("U.S.").
  if (pos >= 1 && is_upper(text[pos - 1])) {
    return pos == 1 || is_space(text[pos - 2]) || text[pos - 2] == '.' || text[pos - 2] == '(';
  }
  return false;
}

}  // namespace detail

// Boundaries fall after '.', '!' or '?' (plus any closing quotes/brackets)
// when followed by whitespace and an uppercase letter, or by end of text.
inline std::vector<std::string> split_sentences(std::string_view text) {
  using detail::is_space;
  if (detail::trim(text).empty()) throw Error(ErrorCode::kEmptyDocument, "empty document text");
  std::vector<std::string> out;
  std::size_t begin = 0;
  auto emit = [&](std::size_t end) {
    auto piece = detail::trim(text.substr(begin, end - begin));
    if (!piece.empty()) out.emplace_back(piece);
    begin = end;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c != '.' && c != '!' && c != '?') continue;
    std::size_t j = i + 1;
    while (j < text.size() && (text[j] == '"' || text[j] == '\'' || text[j] == ')')) ++j;
    std::size_t k = j;
    while (k < text.size() && is_space(text[k])) ++k;
    const bool at_end = k == text.size();
    const bool next_upper = k > j && k < text.size() && detail::is_upper(text[k]);
    if (!at_end && !next_upper) continue;
    if (c == '.' && !at_end && detail::protected_period(text, i)) continue;
    emit(j);
    i = j - 1;
  }
  emit(text.size());
  return out;
}

// ---------------------------------------------------------------------------
// Tokenization

// Lowercased words; each ASCII punctuation character is its own token.
inline std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (detail::is_space(c)) {
      flush();
    } else if (detail::is_punct(c)) {
      flush();
      words.emplace_back(1, c);
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return words;
}

inline TokenIds tokenize(std::string_view text, const Vocab& vocab) {
  TokenIds ids;
  for (const auto& w : tokenize_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

// Space-joined tokens; reserved ids other than UNK are dropped.
inline std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Document / SummaryPair

class Document {
 public:
  Document() = default;

  // Sentences must be non-empty; `text` is optional raw text per sentence
  // (either empty or one entry per sentence).
  explicit Document(std::vector<TokenIds> sentences, std::vector<std::string> text = {})
      : sentences_(std::move(sentences)), text_(std::move(text)) {
    if (sentences_.empty()) throw Error(ErrorCode::kEmptyDocument, "document has no sentences");
    for (const auto& s : sentences_) {
      if (s.empty()) throw Error(ErrorCode::kEmptyDocument, "document contains an empty sentence");
    }
    if (!text_.empty() && text_.size() != sentences_.size()) {
      throw Error(ErrorCode::kShapeMismatch, "sentence text count does not match sentence count");
    }
  }

  const std::vector<TokenIds>& sentences() const noexcept { return sentences_; }
  const std::vector<std::string>& sentence_text() const noexcept { return text_; }
  bool has_text() const noexcept { return !text_.empty(); }
  std::size_t sentence_count() const noexcept { return sentences_.size(); }

  std::size_t flat_length() const {
    std::size_t n = 0;
    for (const auto& s : sentences_) n += s.size();
    return n;
  }

  TokenIds flat() const {
    TokenIds out;
    out.reserve(flat_length());
    for (const auto& s : sentences_) out.insert(out.end(), s.begin(), s.end());
    return out;
  }

  // Raw text when available, otherwise the detokenized sentences.
  std::string text(const Vocab& vocab) const {
    std::string out;
    for (std::size_t i = 0; i < sentences_.size(); ++i) {
      if (!out.empty()) out.push_back(' ');
      out += has_text() ? text_[i] : detokenize(sentences_[i], vocab);
    }
    return out;
  }

  friend bool operator==(const Document& a, const Document& b) { return a.sentences_ == b.sentences_; }

 private:
  std::vector<TokenIds> sentences_;
  std::vector<std::string> text_;
};

inline Document document_from_text(std::string_view text, const Vocab& vocab) {
  std::vector<TokenIds> sentences;
  std::vector<std::string> raw;
  for (auto& s : split_sentences(text)) {
    auto ids = tokenize(s, vocab);
    if (ids.empty()) continue;
    sentences.push_back(std::move(ids));
    raw.push_back(std::move(s));
  }
  if (sentences.empty()) throw Error(ErrorCode::kEmptyDocument, "document has no tokens");
  return Document(std::move(sentences), std::move(raw));
}

// Keeps the first `max_tokens` tokens. The sentence that straddles the cut is
// kept in shortened form.
inline Document truncate_document(const Document& doc, std::size_t max_tokens) {
  if (max_tokens == 0) throw Error(ErrorCode::kConfig, "max_src_tokens must be positive");
  if (doc.flat_length() <= max_tokens) return doc;
  std::vector<TokenIds> kept;
  std::vector<std::string> text;
  std::size_t budget = max_tokens;
  for (std::size_t i = 0; i < doc.sentence_count() && budget > 0; ++i) {
    const auto& s = doc.sentences()[i];
    if (s.size() <= budget) {
      kept.push_back(s);
      if (doc.has_text()) text.push_back(doc.sentence_text()[i]);
      budget -= s.size();
    } else {
      kept.emplace_back(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(budget));
      budget = 0;
      // The raw text of a cut sentence no longer matches its tokens.
      text.clear();
    }
  }
  return Document(std::move(kept), std::move(text));
}

struct SummaryPair {
  Document document;
  TokenIds summary;  // without EOS

  // Decoder targets: the summary followed by EOS.
  TokenIds target() const {
    TokenIds t = summary;
    t.push_back(kEos);
    return t;
  }
};

// ---------------------------------------------------------------------------
// Line-delimited records

struct RawRecord {
  std::size_t line = 0;
  std::string document;
  std::string summary;
};

// Reads {"document": ..., "summary": ...} records. With `require_summary`
// false, the summary field may be absent (unlabelled corpora).
inline std::vector<RawRecord> read_records(const std::filesystem::path& path, bool require_summary = true) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open dataset " + path.string());
  std::vector<RawRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::kParse, where + ": malformed record: " + e.what());
    }
    if (!j.is_object()) throw Error(ErrorCode::kParse, where + ": record is not an object");
    RawRecord rec;
    rec.line = lineno;
    if (!j.contains("document") || !j["document"].is_string()) {
      throw Error(ErrorCode::kParse, where + ": missing string field \"document\"");
    }
    rec.document = j["document"].get<std::string>();
    if (j.contains("summary")) {
      if (!j["summary"].is_string()) throw Error(ErrorCode::kParse, where + ": field \"summary\" is not a string");
      rec.summary = j["summary"].get<std::string>();
    } else if (require_summary) {
      throw Error(ErrorCode::kParse, where + ": missing string field \"summary\"");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline void write_records(const std::filesystem::path& path, const std::vector<RawRecord>& records) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& r : records) {
    nlohmann::json j = {{"document", r.document}, {"summary", r.summary}};
    out << j.dump() << '\n';
  }
}

struct LoadedDataset {
  std::vector<SummaryPair> pairs;
  std::size_t skipped = 0;
};

inline LoadedDataset load_dataset(const std::filesystem::path& path, const Vocab& vocab,
                                  std::size_t max_src_tokens) {
  LoadedDataset out;
  for (const auto& rec : read_records(path)) {
    auto summary = tokenize(rec.summary, vocab);
    if (detail::trim(rec.document).empty() || summary.empty() || tokenize_words(rec.document).empty()) {
      ++out.skipped;
      continue;
    }
    Document doc = truncate_document(document_from_text(rec.document, vocab), max_src_tokens);
    out.pairs.push_back({std::move(doc), std::move(summary)});
  }
  if (out.pairs.empty()) throw Error(ErrorCode::kEmptyDataset, "no valid records in " + path.string());
  return out;
}

// ---------------------------------------------------------------------------
// Few-shot sampling

struct FewShotSplit {
  std::vector<SummaryPair> train;
  std::vector<SummaryPair> dev;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> dev_indices;
  std::uint64_t seed = 0;
};

// Train and dev are disjoint uniform samples of `size` pairs each.
inline FewShotSplit sample_fewshot(const std::vector<SummaryPair>& pairs, std::size_t size, std::uint64_t seed) {
  if (pairs.size() < 2 * size) {
    throw Error(ErrorCode::kCapacity, "few-shot sampling needs " + std::to_string(2 * size) + " pairs, have " +
                                          std::to_string(pairs.size()));
  }
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  FewShotSplit split;
  split.seed = seed;
  split.train_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(size));
  split.dev_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(size),
                           order.begin() + static_cast<std::ptrdiff_t>(2 * size));
  for (auto i : split.train_indices) split.train.push_back(pairs[i]);
  for (auto i : split.dev_indices) split.dev.push_back(pairs[i]);
  return split;
}

}  // namespace psp
