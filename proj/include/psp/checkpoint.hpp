#pragma once

// Text checkpoint container:
//
//   psp-checkpoint 1
//   dims d=.. layers=.. heads=.. ffn=.. vocab=.. max_pos=..
//   prompt len_en=.. len_de=.. strategy=.. k=.. n_max=.. shared=.. encoder_only=..
//          decoder_only=.. has_prompts=..
//   tensor <name> <rows> <cols>
//   <rows lines of shortest round-trip decimals>
//   ...
//   end
//
// Tensor names are "backbone/<path>" and "prompts/P_en|P_de|P_in".

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "psp/evaluation.hpp"
#include "psp/model.hpp"

namespace psp {

struct Checkpoint {
  BackboneParams backbone;
  PromptConfig prompt_config;
  std::optional<PromptSet> prompts;
};

namespace detail {

inline void write_tensor(std::ostream& out, const std::string& name, const Matrix& m) {
  out << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c) out << ' ';
      out << format_real(m(r, c));
    }
    out << '\n';
  }
}

inline std::map<std::string, std::string> parse_kv(std::istringstream& is) {
  std::map<std::string, std::string> kv;
  std::string item;
  while (is >> item) {
    auto eq = item.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::kParse, "checkpoint: bad header item '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return kv;
}

inline std::size_t kv_size(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw Error(ErrorCode::kParse, "checkpoint: missing header key '" + key + "'");
  return static_cast<std::size_t>(std::stoull(it->second));
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const BackboneParams& backbone,
                            const PromptConfig& config, const PromptSet* prompts) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write checkpoint " + path.string());
  const auto& d = backbone.dims;
  out << "psp-checkpoint 1\n";
  out << "dims d=" << d.d << " layers=" << d.layers << " heads=" << d.heads << " ffn=" << d.ffn
      << " vocab=" << d.vocab << " max_pos=" << d.max_pos << '\n';
  out << "prompt len_en=" << config.len_en << " len_de=" << config.len_de
      << " strategy=" << strategy_name(config.strategy) << " k=" << config.k << " n_max=" << config.n_max
      << " shared=" << config.shared << " encoder_only=" << config.encoder_only
      << " decoder_only=" << config.decoder_only << " has_prompts=" << (prompts != nullptr) << '\n';
  backbone.for_each_tensor([&](const std::string& name, const Matrix& m) { detail::write_tensor(out, "backbone/" + name, m); });
  if (prompts != nullptr) {
    prompts->for_each_tensor([&](const std::string& name, const Matrix& m) {
      detail::write_tensor(out, "prompts/" + name, m);
    });
  }
  out << "end\n";
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

// Rejects files whose tensors disagree with the header dims, and, when
// `expected` is given, files built for different model dims.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelDims* expected = nullptr) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::kMissingCheckpoint, "checkpoint not found: " + path.string());
  }
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "psp-checkpoint 1") {
    throw Error(ErrorCode::kParse, path.string() + ": not a psp checkpoint");
  }

  ModelDims dims;
  {
    std::getline(in, line);
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag != "dims") throw Error(ErrorCode::kParse, "checkpoint: expected dims line");
    auto kv = detail::parse_kv(is);
    dims.d = detail::kv_size(kv, "d");
    dims.layers = detail::kv_size(kv, "layers");
    dims.heads = detail::kv_size(kv, "heads");
    dims.ffn = detail::kv_size(kv, "ffn");
    dims.vocab = detail::kv_size(kv, "vocab");
    dims.max_pos = detail::kv_size(kv, "max_pos");
  }
  if (expected != nullptr && !(dims == *expected)) {
    throw Error(ErrorCode::kShapeMismatch, path.string() + ": checkpoint dims (d=" + std::to_string(dims.d) +
                                               ", vocab=" + std::to_string(dims.vocab) +
                                               ") do not match the requested model (d=" +
                                               std::to_string(expected->d) + ", vocab=" +
                                               std::to_string(expected->vocab) + ")");
  }

  Checkpoint ck;
  bool has_prompts = false;
  {
    std::getline(in, line);
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag != "prompt") throw Error(ErrorCode::kParse, "checkpoint: expected prompt line");
    auto kv = detail::parse_kv(is);
    auto& c = ck.prompt_config;
    c.len_en = detail::kv_size(kv, "len_en");
    c.len_de = detail::kv_size(kv, "len_de");
    c.strategy = parse_strategy(kv.at("strategy"));
    c.k = detail::kv_size(kv, "k");
    c.n_max = detail::kv_size(kv, "n_max");
    c.shared = detail::kv_size(kv, "shared") != 0;
    c.encoder_only = detail::kv_size(kv, "encoder_only") != 0;
    c.decoder_only = detail::kv_size(kv, "decoder_only") != 0;
    has_prompts = detail::kv_size(kv, "has_prompts") != 0;
  }

  // Shape template: a zero-initialized model with the header dims.
  ck.backbone = init_backbone(dims, 0);
  std::map<std::string, Matrix*> slots;
  ck.backbone.for_each_tensor([&](const std::string& name, Matrix& m) { slots["backbone/" + name] = &m; });
  PromptSet prompts;
  if (has_prompts) {
    const auto& c = ck.prompt_config;
    prompts.shared = c.shared;
    prompts.p_en = Matrix(c.encoder_prompt_len(), dims.d);
    if (!c.shared) prompts.p_de = Matrix(c.decoder_prompt_len(), dims.d);
    prompts.p_in = Matrix(c.inner_rows(), dims.d);
    prompts.for_each_tensor([&](const std::string& name, Matrix& m) { slots["prompts/" + name] = &m; });
  }

  while (std::getline(in, line) && line != "end") {
    std::istringstream is(line);
    std::string tag, name;
    std::size_t rows = 0, cols = 0;
    is >> tag >> name >> rows >> cols;
    if (tag != "tensor") throw Error(ErrorCode::kParse, "checkpoint: expected tensor line, got '" + line + "'");
    auto it = slots.find(name);
    if (it == slots.end()) throw Error(ErrorCode::kShapeMismatch, "checkpoint: unexpected tensor " + name);
    Matrix& m = *it->second;
    if (m.rows() != rows || m.cols() != cols) {
      throw Error(ErrorCode::kShapeMismatch, "checkpoint: tensor " + name + " is " + std::to_string(rows) + " x " +
                                                 std::to_string(cols) + ", expected " + shape_string(m));
    }
    for (std::size_t r = 0; r < rows; ++r) {
      if (!std::getline(in, line)) throw Error(ErrorCode::kParse, "checkpoint: truncated tensor " + name);
      std::istringstream rs(line);
      std::string tok;
      for (std::size_t c = 0; c < cols; ++c) {
        if (!(rs >> tok)) throw Error(ErrorCode::kParse, "checkpoint: short row in " + name);
        m(r, c) = detail::parse_real(tok);
      }
    }
    slots.erase(it);
  }
  if (line != "end") throw Error(ErrorCode::kParse, "checkpoint: missing end marker");
  if (!slots.empty()) throw Error(ErrorCode::kShapeMismatch, "checkpoint: missing tensor " + slots.begin()->first);
  if (has_prompts) ck.prompts = std::move(prompts);
  return ck;
}

}  // namespace psp
