#pragma once

// Shared fixtures: tiny models, random documents, synthetic corpora.

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "psp/psp.hpp"

namespace psp::testing {

inline ModelDims tiny_dims(std::size_t d = 8, std::size_t layers = 1, std::size_t heads = 2, std::size_t vocab = 20,
                           std::size_t max_pos = 64) {
  ModelDims dims;
  dims.d = d;
  dims.layers = layers;
  dims.heads = heads;
  dims.ffn = 2 * d;
  dims.vocab = vocab;
  dims.max_pos = max_pos;
  return dims;
}

// Token ids drawn from the non-reserved range [4, vocab).
inline TokenIds random_tokens(std::mt19937_64& rng, std::size_t len, std::size_t vocab) {
  std::uniform_int_distribution<TokenId> dist(static_cast<TokenId>(kReservedTokens.size()),
                                              static_cast<TokenId>(vocab - 1));
  TokenIds out(len);
  for (auto& t : out) t = dist(rng);
  return out;
}

inline Document random_document(std::mt19937_64& rng, std::size_t max_sentences, std::size_t max_sentence_len,
                                std::size_t vocab) {
  std::uniform_int_distribution<std::size_t> ns(1, max_sentences);
  std::uniform_int_distribution<std::size_t> nl(1, max_sentence_len);
  std::vector<TokenIds> sentences(ns(rng));
  for (auto& s : sentences) s = random_tokens(rng, nl(rng), vocab);
  return Document(std::move(sentences));
}

inline SummaryPair random_pair(std::mt19937_64& rng, std::size_t vocab, std::size_t max_sentences = 4,
                               std::size_t max_sentence_len = 4, std::size_t summary_len = 3) {
  return {random_document(rng, max_sentences, max_sentence_len, vocab), random_tokens(rng, summary_len, vocab)};
}

inline Document doc_of(std::vector<TokenIds> sentences) { return Document(std::move(sentences)); }

// Unique scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("psp_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

// News-style synthetic corpus: every document opens with a headline sentence
// built from a small topic lexicon, followed by filler sentences; the
// reference summary is that first sentence.
struct SyntheticCorpus {
  std::vector<RawRecord> records;
};

inline SyntheticCorpus lead_biased_corpus(std::size_t n, std::uint64_t seed, std::size_t filler_sentences = 4) {
  static const std::vector<std::string> kSubjects = {"council", "team", "company", "court", "school", "police"};
  static const std::vector<std::string> kVerbs = {"approved", "rejected", "announced", "delayed", "won", "lost"};
  static const std::vector<std::string> kObjects = {"budget", "match", "merger", "appeal", "award", "plan"};
  static const std::vector<std::string> kFiller = {"officials", "said", "the", "decision", "was", "expected",
                                                   "after", "weeks", "of", "talks", "residents", "were",
                                                   "told", "more", "details", "would", "follow", "soon"};
  std::mt19937_64 rng(seed);
  auto pick = [&](const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  auto cap = [](std::string s) {
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
  };
  SyntheticCorpus c;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string lead = "The " + pick(kSubjects) + " " + pick(kVerbs) + " the " + pick(kObjects) + ".";
    std::string doc = lead;
    for (std::size_t s = 0; s < filler_sentences; ++s) {
      std::string sent = cap(pick(kFiller));
      for (int w = 0; w < 5; ++w) sent += " " + pick(kFiller);
      doc += " " + sent + ".";
    }
    c.records.push_back({i + 1, doc, lead});
  }
  return c;
}

}  // namespace psp::testing
