#pragma once

// Toy encoder-decoder transformer (pre-LN, GELU, tied output projection) with
// soft prompts on both input embedding layers and inner prompts added to the
// source token embeddings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "psp/autodiff.hpp"
#include "psp/corpus.hpp"
#include "psp/log.hpp"
#include "psp/tensor.hpp"

namespace psp {

// ---------------------------------------------------------------------------
// Backbone

struct ModelDims {
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t vocab = 0;
  std::size_t max_pos = 512;

  std::size_t head_dim() const { return d / heads; }

  void validate() const {
    if (d == 0 || heads == 0 || layers == 0 || ffn == 0) throw Error(ErrorCode::kConfig, "model dims must be positive");
    if (d % heads != 0) {
      throw Error(ErrorCode::kConfig,
                  "d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
    }
    if (vocab <= kReservedTokens.size()) throw Error(ErrorCode::kConfig, "vocab must exceed the reserved ids");
    if (max_pos < 2) throw Error(ErrorCode::kConfig, "max_pos too small");
  }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct LayerNormParams {
  Matrix gamma, beta;
};

struct AttentionParams {
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FeedForwardParams {
  Matrix w1, b1, w2, b2;
};

struct EncoderLayer {
  LayerNormParams ln_attn;
  AttentionParams self_attn;
  LayerNormParams ln_ffn;
  FeedForwardParams ffn;
};

struct DecoderLayer {
  LayerNormParams ln_self;
  AttentionParams self_attn;
  LayerNormParams ln_cross;
  AttentionParams cross_attn;
  LayerNormParams ln_ffn;
  FeedForwardParams ffn;
};

struct BackboneParams {
  ModelDims dims;
  Matrix embed;      // [vocab x d], also the output projection
  Matrix positions;  // [max_pos x d], shared by encoder and decoder
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  LayerNormParams encoder_norm;
  LayerNormParams decoder_norm;
  bool frozen = false;

  // Visits every tensor with a stable hierarchical name.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    auto ln = [&](const std::string& p, auto& l) {
      f(p + ".gamma", l.gamma);
      f(p + ".beta", l.beta);
    };
    auto attn = [&](const std::string& p, auto& a) {
      f(p + ".wq", a.wq), f(p + ".bq", a.bq), f(p + ".wk", a.wk), f(p + ".bk", a.bk);
      f(p + ".wv", a.wv), f(p + ".bv", a.bv), f(p + ".wo", a.wo), f(p + ".bo", a.bo);
    };
    auto ff = [&](const std::string& p, auto& m) {
      f(p + ".w1", m.w1), f(p + ".b1", m.b1), f(p + ".w2", m.w2), f(p + ".b2", m.b2);
    };
    f(std::string("embed"), self.embed);
    f(std::string("positions"), self.positions);
    for (std::size_t i = 0; i < self.encoder.size(); ++i) {
      const std::string p = "encoder." + std::to_string(i);
      ln(p + ".ln_attn", self.encoder[i].ln_attn);
      attn(p + ".self_attn", self.encoder[i].self_attn);
      ln(p + ".ln_ffn", self.encoder[i].ln_ffn);
      ff(p + ".ffn", self.encoder[i].ffn);
    }
    for (std::size_t i = 0; i < self.decoder.size(); ++i) {
      const std::string p = "decoder." + std::to_string(i);
      ln(p + ".ln_self", self.decoder[i].ln_self);
      attn(p + ".self_attn", self.decoder[i].self_attn);
      ln(p + ".ln_cross", self.decoder[i].ln_cross);
      attn(p + ".cross_attn", self.decoder[i].cross_attn);
      ln(p + ".ln_ffn", self.decoder[i].ln_ffn);
      ff(p + ".ffn", self.decoder[i].ffn);
    }
    ln("encoder_norm", self.encoder_norm);
    ln("decoder_norm", self.decoder_norm);
  }

  template <typename F>
  void for_each_tensor(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for_each_tensor([&](const std::string&, const Matrix& m) { h = psp::checksum(m, h); });
    return h;
  }
};

namespace detail {

inline LayerNormParams init_layer_norm(std::size_t d) { return {Matrix(1, d, 1.0), Matrix(1, d, 0.0)}; }

inline Matrix init_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return random_normal(in, out, 1.0 / std::sqrt(static_cast<Real>(in)), rng);
}

inline AttentionParams init_attention(std::size_t d, std::mt19937_64& rng) {
  AttentionParams a;
  a.wq = init_linear(d, d, rng), a.bq = Matrix(1, d);
  a.wk = init_linear(d, d, rng), a.bk = Matrix(1, d);
  a.wv = init_linear(d, d, rng), a.bv = Matrix(1, d);
  a.wo = init_linear(d, d, rng), a.bo = Matrix(1, d);
  return a;
}

inline FeedForwardParams init_ffn(std::size_t d, std::size_t hidden, std::mt19937_64& rng) {
  return {init_linear(d, hidden, rng), Matrix(1, hidden), init_linear(hidden, d, rng), Matrix(1, d)};
}

}  // namespace detail

// Scaled-normal initialization: embeddings N(0, 1/d), linear maps
// N(0, 1/fan_in), zero biases, unit layer-norm gains.
inline BackboneParams init_backbone(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  std::mt19937_64 rng(seed);
  BackboneParams b;
  b.dims = dims;
  const Real emb_std = 1.0 / std::sqrt(static_cast<Real>(dims.d));
  b.embed = random_normal(dims.vocab, dims.d, emb_std, rng);
  b.positions = random_normal(dims.max_pos, dims.d, emb_std, rng);
  for (std::size_t l = 0; l < dims.layers; ++l) {
    EncoderLayer e;
    e.ln_attn = detail::init_layer_norm(dims.d);
    e.self_attn = detail::init_attention(dims.d, rng);
    e.ln_ffn = detail::init_layer_norm(dims.d);
    e.ffn = detail::init_ffn(dims.d, dims.ffn, rng);
    b.encoder.push_back(std::move(e));
  }
  for (std::size_t l = 0; l < dims.layers; ++l) {
    DecoderLayer dl;
    dl.ln_self = detail::init_layer_norm(dims.d);
    dl.self_attn = detail::init_attention(dims.d, rng);
    dl.ln_cross = detail::init_layer_norm(dims.d);
    dl.cross_attn = detail::init_attention(dims.d, rng);
    dl.ln_ffn = detail::init_layer_norm(dims.d);
    dl.ffn = detail::init_ffn(dims.d, dims.ffn, rng);
    b.decoder.push_back(std::move(dl));
  }
  b.encoder_norm = detail::init_layer_norm(dims.d);
  b.decoder_norm = detail::init_layer_norm(dims.d);
  return b;
}

// ---------------------------------------------------------------------------
// Prompts

enum class InnerStrategy { kNone, kInterval, kSequential, kFixedK };

inline std::string_view strategy_name(InnerStrategy s) {
  switch (s) {
    case InnerStrategy::kNone: return "none";
    case InnerStrategy::kInterval: return "interval";
    case InnerStrategy::kSequential: return "sequential";
    case InnerStrategy::kFixedK: return "fixed_k";
  }
  return "unknown";
}

inline InnerStrategy parse_strategy(std::string_view s) {
  if (s == "none") return InnerStrategy::kNone;
  if (s == "interval") return InnerStrategy::kInterval;
  if (s == "sequential") return InnerStrategy::kSequential;
  if (s == "fixed_k" || s == "fixed") return InnerStrategy::kFixedK;
  throw Error(ErrorCode::kConfig, "unknown inner-prompt strategy '" + std::string(s) + "'");
}

struct PromptConfig {
  std::size_t len_en = 100;
  std::size_t len_de = 100;
  InnerStrategy strategy = InnerStrategy::kSequential;
  std::size_t k = 10;      // span length for fixed_k
  std::size_t n_max = 1;   // inner-prompt cap; rows = n_max + 1
  bool shared = false;     // decoder prompts alias the encoder prompts
  bool encoder_only = false;
  bool decoder_only = false;

  std::size_t encoder_prompt_len() const { return decoder_only ? 0 : len_en; }
  std::size_t decoder_prompt_len() const { return encoder_only ? 0 : len_de; }

  std::size_t inner_rows() const {
    switch (strategy) {
      case InnerStrategy::kNone: return 0;
      case InnerStrategy::kInterval: return 2;
      case InnerStrategy::kSequential:
      case InnerStrategy::kFixedK: return n_max + 1;
    }
    return 0;
  }

  void validate() const {
    if (encoder_only && decoder_only) throw Error(ErrorCode::kConfig, "encoder_only and decoder_only are exclusive");
    if (shared && (encoder_only || decoder_only)) {
      throw Error(ErrorCode::kConfig, "shared prompts need both the encoder and decoder blocks");
    }
    if (shared && len_en != len_de) throw Error(ErrorCode::kConfig, "shared prompts need len_en == len_de");
    if (strategy == InnerStrategy::kFixedK && k == 0) throw Error(ErrorCode::kConfig, "fixed_k needs k >= 1");
    if ((strategy == InnerStrategy::kSequential || strategy == InnerStrategy::kFixedK) && n_max == 0) {
      throw Error(ErrorCode::kConfig, "sequential/fixed_k need n_max >= 1");
    }
  }
};

struct PromptSet {
  Matrix p_en;  // [len_en x d]
  Matrix p_de;  // [len_de x d]; empty when shared
  Matrix p_in;  // [inner_rows x d]; empty for strategy none
  bool shared = false;

  const Matrix& decoder_prompts() const { return shared ? p_en : p_de; }

  template <typename F>
  void for_each_tensor(F&& f) {
    f(std::string("P_en"), p_en);
    if (!shared) f(std::string("P_de"), p_de);
    f(std::string("P_in"), p_in);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    f(std::string("P_en"), p_en);
    if (!shared) f(std::string("P_de"), p_de);
    f(std::string("P_in"), p_in);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }
};

namespace detail {

// Copies of vocabulary embeddings, drawn without replacement from the
// non-reserved ids while enough exist.
inline Matrix sample_vocab_rows(const Matrix& embed, std::size_t count, std::mt19937_64& rng, const char* what) {
  const std::size_t first = kReservedTokens.size();
  const std::size_t pool = embed.rows() > first ? embed.rows() - first : 0;
  Matrix out(count, embed.cols());
  if (count == 0) return out;
  if (pool == 0) throw Error(ErrorCode::kConfig, "vocabulary has no ordinary tokens to copy prompts from");
  std::vector<std::size_t> ids;
  if (count <= pool) {
    std::vector<std::size_t> all(pool);
    std::iota(all.begin(), all.end(), first);
    std::shuffle(all.begin(), all.end(), rng);
    ids.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count));
  } else {
    warn(std::string(what) + ": " + std::to_string(count) + " prompt rows exceed " + std::to_string(pool) +
         " vocabulary entries; sampling with replacement");
    std::uniform_int_distribution<std::size_t> dist(first, embed.rows() - 1);
    for (std::size_t i = 0; i < count; ++i) ids.push_back(dist(rng));
  }
  for (std::size_t i = 0; i < count; ++i) {
    auto src = embed.row(ids[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace detail

inline constexpr Real kInnerPromptInitStd = 0.05;

inline PromptSet init_prompts(const PromptConfig& config, const BackboneParams& backbone, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  PromptSet p;
  p.shared = config.shared;
  p.p_en = detail::sample_vocab_rows(backbone.embed, config.encoder_prompt_len(), rng, "P_en");
  if (!config.shared) p.p_de = detail::sample_vocab_rows(backbone.embed, config.decoder_prompt_len(), rng, "P_de");
  p.p_in = random_normal(config.inner_rows(), backbone.dims.d, kInnerPromptInitStd, rng);
  return p;
}

enum class TrainMode { kPromptOnly, kFullModel };

inline std::string_view mode_name(TrainMode m) { return m == TrainMode::kPromptOnly ? "prompt_only" : "full_model"; }

inline TrainMode parse_mode(std::string_view s) {
  if (s == "prompt_only") return TrainMode::kPromptOnly;
  if (s == "full_model" || s == "full") return TrainMode::kFullModel;
  throw Error(ErrorCode::kConfig, "unknown training mode '" + std::string(s) + "'");
}

inline std::size_t count_trainable_params(const PromptConfig& config, std::size_t d, TrainMode mode,
                                          std::size_t backbone_params = 0) {
  const std::size_t prompt_rows = config.encoder_prompt_len() + (config.shared ? 0 : config.decoder_prompt_len()) +
                                  config.inner_rows();
  const std::size_t prompts = d * prompt_rows;
  return mode == TrainMode::kPromptOnly ? prompts : prompts + backbone_params;
}

// ---------------------------------------------------------------------------
// Inner-prompt assignment

enum class CountUnit { kSentence, kSpan };

// Largest unit count among the lowest ceil(percentile * N) documents.
inline std::size_t compute_n_max(const std::vector<Document>& corpus, double percentile = 0.85,
                                 CountUnit unit = CountUnit::kSentence, std::size_t k = 10) {
  if (corpus.empty()) throw Error(ErrorCode::kEmptyDataset, "compute_n_max needs a non-empty corpus");
  if (percentile <= 0.0 || percentile > 1.0) throw Error(ErrorCode::kConfig, "percentile must be in (0, 1]");
  if (unit == CountUnit::kSpan && k == 0) throw Error(ErrorCode::kConfig, "span length must be >= 1");
  std::vector<std::size_t> counts;
  counts.reserve(corpus.size());
  for (const auto& doc : corpus) {
    counts.push_back(unit == CountUnit::kSentence ? doc.sentence_count() : (doc.flat_length() + k - 1) / k);
  }
  std::sort(counts.begin(), counts.end());
  auto group = static_cast<std::size_t>(std::ceil(percentile * static_cast<double>(counts.size()) - 1e-9));
  group = std::clamp<std::size_t>(group, 1, counts.size());
  return counts[group - 1];
}

// Inner-prompt row index for every flat token position.
inline std::vector<std::size_t> assign_inner_prompts(const Document& doc, const PromptConfig& config) {
  std::vector<std::size_t> out;
  out.reserve(doc.flat_length());
  switch (config.strategy) {
    case InnerStrategy::kNone:
      throw Error(ErrorCode::kConfig, "assign_inner_prompts called with strategy none");
    case InnerStrategy::kInterval:
      for (std::size_t i = 0; i < doc.sentence_count(); ++i) out.insert(out.end(), doc.sentences()[i].size(), i % 2);
      break;
    case InnerStrategy::kSequential:
      for (std::size_t i = 0; i < doc.sentence_count(); ++i) {
        out.insert(out.end(), doc.sentences()[i].size(), std::min(i, config.n_max));
      }
      break;
    case InnerStrategy::kFixedK: {
      if (config.k == 0) throw Error(ErrorCode::kConfig, "fixed_k needs k >= 1");
      const std::size_t n = doc.flat_length();
      for (std::size_t t = 0; t < n; ++t) out.push_back(std::min(t / config.k, config.n_max));
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward computation

struct AttentionRecord {
  Matrix weights;  // [decoder positions x encoder positions]
  std::size_t len_de = 0;
  std::size_t len_en = 0;
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
};

// Binds a backbone and prompt set to a tape and builds encoder/decoder
// graphs. Parameters become leaves on first use.
class ModelGraph {
 public:
  ModelGraph(ad::Tape& tape, const BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config,
             bool backbone_grad, bool prompt_grad)
      : tape_(tape),
        backbone_(backbone),
        prompts_(prompts),
        config_(config),
        backbone_grad_(backbone_grad),
        prompt_grad_(prompt_grad) {}

  ad::Tape& tape() { return tape_; }

  ad::Var param(const Matrix& m) {
    auto it = leaves_.find(&m);
    if (it != leaves_.end()) return it->second;
    const bool is_prompt = &m == &prompts_.p_en || &m == &prompts_.p_de || &m == &prompts_.p_in;
    ad::Var v = tape_.leaf(m, is_prompt ? prompt_grad_ : backbone_grad_);
    leaves_.emplace(&m, v);
    return v;
  }

  // Leaf for `m` if the graph used it.
  std::optional<ad::Var> find_leaf(const Matrix& m) const {
    auto it = leaves_.find(&m);
    if (it == leaves_.end()) return std::nullopt;
    return it->second;
  }

  // [P_en ; e(x) + pos + P_in(x)]
  ad::Var encoder_input(const Document& src) {
    const std::size_t len_en = config_.encoder_prompt_len();
    const std::size_t n = src.flat_length();
    if (len_en + n > backbone_.dims.max_pos) {
      throw Error(ErrorCode::kLengthOverflow, "encoder input of " + std::to_string(len_en + n) +
                                                  " positions exceeds max_pos=" +
                                                  std::to_string(backbone_.dims.max_pos));
    }
    const TokenIds flat = src.flat();
    std::vector<std::size_t> ids(flat.begin(), flat.end());
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), len_en);
    ad::Var x = ad::add(tape_, ad::gather_rows(tape_, param(backbone_.embed), std::move(ids)),
                        ad::gather_rows(tape_, param(backbone_.positions), std::move(pos)));
    if (config_.strategy != InnerStrategy::kNone) {
      if (prompts_.p_in.rows() != config_.inner_rows()) {
        throw Error(ErrorCode::kShapeMismatch, "P_in has " + std::to_string(prompts_.p_in.rows()) +
                                                   " rows, config needs " + std::to_string(config_.inner_rows()));
      }
      x = ad::add(tape_, x, ad::gather_rows(tape_, param(prompts_.p_in), assign_inner_prompts(src, config_)));
    }
    if (len_en == 0) return x;
    return ad::concat_rows(tape_, prompt_block(prompts_.p_en, len_en), x);
  }

  ad::Var encode(const Document& src) {
    ad::Var h = encoder_input(src);
    for (const auto& layer : backbone_.encoder) {
      ad::Var a = norm(h, layer.ln_attn);
      h = ad::add(tape_, h, attention(layer.self_attn, a, a, false, nullptr));
      h = ad::add(tape_, h, feed_forward(layer.ffn, norm(h, layer.ln_ffn)));
    }
    return norm(h, backbone_.encoder_norm);
  }

  // Logits for the |prefix| + 1 positions after [P_de ; BOS], i.e. the
  // predictions of y_1 .. y_{|prefix|+1}. Cross-attention averaged over
  // layers and heads is written to `record` when given.
  ad::Var decode(ad::Var memory, std::span<const TokenId> prefix, AttentionRecord* record) {
    const std::size_t len_de = config_.decoder_prompt_len();
    const std::size_t n = prefix.size() + 1;
    if (len_de + n > backbone_.dims.max_pos) {
      throw Error(ErrorCode::kLengthOverflow, "decoder input of " + std::to_string(len_de + n) +
                                                  " positions exceeds max_pos=" +
                                                  std::to_string(backbone_.dims.max_pos));
    }
    std::vector<std::size_t> ids{kBos};
    ids.insert(ids.end(), prefix.begin(), prefix.end());
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), len_de);
    ad::Var h = ad::add(tape_, ad::gather_rows(tape_, param(backbone_.embed), std::move(ids)),
                        ad::gather_rows(tape_, param(backbone_.positions), std::move(pos)));
    if (len_de > 0) h = ad::concat_rows(tape_, prompt_block(prompts_.decoder_prompts(), len_de), h);

    Matrix* probe = nullptr;
    if (record != nullptr) {
      const std::size_t mem_rows = tape_.value(memory).rows();
      record->weights = Matrix::zeros(len_de + n, mem_rows);
      record->len_de = len_de;
      record->len_en = config_.encoder_prompt_len();
      record->layers = backbone_.decoder.size();
      record->heads = backbone_.dims.heads;
      probe = &record->weights;
    }
    for (const auto& layer : backbone_.decoder) {
      ad::Var a = norm(h, layer.ln_self);
      h = ad::add(tape_, h, attention(layer.self_attn, a, a, true, nullptr));
      h = ad::add(tape_, h, attention(layer.cross_attn, norm(h, layer.ln_cross), memory, false, probe));
      h = ad::add(tape_, h, feed_forward(layer.ffn, norm(h, layer.ln_ffn)));
    }
    h = norm(h, backbone_.decoder_norm);
    if (record != nullptr) {
      const Real denom = static_cast<Real>(backbone_.decoder.size() * backbone_.dims.heads);
      for (auto& v : record->weights.data()) v /= denom;
    }
    ad::Var out = ad::slice_rows(tape_, h, len_de, n);
    return ad::matmul_nt(tape_, out, param(backbone_.embed));
  }

 private:
  // First `len` prompt rows plus positional embeddings 0..len-1.
  ad::Var prompt_block(const Matrix& table, std::size_t len) {
    if (table.rows() != len || table.cols() != backbone_.dims.d) {
      throw Error(ErrorCode::kShapeMismatch, "prompt table " + shape_string(table) + " does not match " +
                                                 std::to_string(len) + " x " + std::to_string(backbone_.dims.d));
    }
    std::vector<std::size_t> pos(len);
    std::iota(pos.begin(), pos.end(), 0);
    return ad::add(tape_, param(table), ad::gather_rows(tape_, param(backbone_.positions), std::move(pos)));
  }

  ad::Var norm(ad::Var x, const LayerNormParams& p) {
    return ad::layer_norm(tape_, x, param(p.gamma), param(p.beta));
  }

  ad::Var linear(ad::Var x, const Matrix& w, const Matrix& b) {
    return ad::add_row(tape_, ad::matmul(tape_, x, param(w)), param(b));
  }

  ad::Var feed_forward(const FeedForwardParams& p, ad::Var x) {
    return linear(ad::gelu(tape_, linear(x, p.w1, p.b1)), p.w2, p.b2);
  }

  ad::Var attention(const AttentionParams& p, ad::Var query_in, ad::Var kv_in, bool causal, Matrix* probe) {
    const std::size_t heads = backbone_.dims.heads;
    const std::size_t hd = backbone_.dims.head_dim();
    const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(hd));
    ad::Var q = linear(query_in, p.wq, p.bq);
    ad::Var k = linear(kv_in, p.wk, p.bk);
    ad::Var v = linear(kv_in, p.wv, p.bv);
    std::vector<ad::Var> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      ad::Var qh = ad::slice_cols(tape_, q, h * hd, hd);
      ad::Var kh = ad::slice_cols(tape_, k, h * hd, hd);
      ad::Var vh = ad::slice_cols(tape_, v, h * hd, hd);
      ad::Var w = ad::softmax_rows(tape_, ad::scale(tape_, ad::matmul_nt(tape_, qh, kh), inv_sqrt), causal);
      if (probe != nullptr) axpy(*probe, tape_.value(w));
      outs.push_back(ad::matmul(tape_, w, vh));
    }
    return linear(ad::concat_cols(tape_, outs), p.wo, p.bo);
  }

  ad::Tape& tape_;
  const BackboneParams& backbone_;
  const PromptSet& prompts_;
  const PromptConfig& config_;
  bool backbone_grad_;
  bool prompt_grad_;
  std::unordered_map<const Matrix*, ad::Var> leaves_;
};

inline Matrix compose_encoder_input(const Document& src, const PromptSet& prompts, const BackboneParams& backbone,
                                    const PromptConfig& config) {
  ad::Tape tape;
  ModelGraph g(tape, backbone, prompts, config, false, false);
  return tape.value(g.encoder_input(src));
}

// Encoder output for `src`, computed without gradient tracking.
inline Matrix encode(const BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config,
                     const Document& src) {
  ad::Tape tape;
  ModelGraph g(tape, backbone, prompts, config, false, false);
  return tape.value(g.encode(src));
}

inline void label_attention(AttentionRecord& rec, std::size_t src_len) {
  rec.row_labels.clear();
  rec.col_labels.clear();
  for (std::size_t i = 0; i < rec.len_de; ++i) rec.row_labels.push_back("P_de:" + std::to_string(i));
  rec.row_labels.emplace_back("BOS");
  for (std::size_t i = rec.len_de + 1; i < rec.weights.rows(); ++i) {
    rec.row_labels.push_back("Y:" + std::to_string(i - rec.len_de - 1));
  }
  for (std::size_t i = 0; i < rec.len_en; ++i) rec.col_labels.push_back("P_en:" + std::to_string(i));
  for (std::size_t i = 0; i < src_len; ++i) rec.col_labels.push_back("X:" + std::to_string(i));
}

struct ForwardResult {
  Matrix logits;  // [|prefix| + 1 x vocab]
  AttentionRecord attention;
};

inline ForwardResult forward(const BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config,
                             const Document& src, std::span<const TokenId> tgt_prefix) {
  ad::Tape tape;
  ModelGraph g(tape, backbone, prompts, config, false, false);
  ForwardResult out;
  ad::Var logits = g.decode(g.encode(src), tgt_prefix, &out.attention);
  out.logits = tape.value(logits);
  label_attention(out.attention, src.flat_length());
  return out;
}

}  // namespace psp
