#pragma once

// Subcommand driver for the whole pipeline.
//
// Every subcommand writes <out>/manifest.json before touching its inputs and
// holds <out>/.psp.lock while it runs. A failed run prints usage text (for
// argument errors) and then exactly one JSON object as the last line of
// stderr, and exits nonzero.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "psp/psp.hpp"

#ifndef PSP_VERSION
#define PSP_VERSION "dev"
#endif

namespace psp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// ---------------------------------------------------------------------------
// Options

struct ModelOptions {
  std::size_t d = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t max_pos = 1152;

  ModelDims dims(std::size_t vocab) const {
    ModelDims m;
    m.d = d, m.layers = layers, m.heads = heads, m.ffn = ffn, m.vocab = vocab, m.max_pos = max_pos;
    return m;
  }
};

struct PromptOptions {
  std::string strategy = "sequential";
  std::size_t k = 10;
  std::size_t len_en = 100;
  std::size_t len_de = 100;
  std::size_t n_max = 0;  // 0: 85th percentile of the training documents
  bool shared = false;
  bool encoder_only = false;
  bool decoder_only = false;
};

struct TrainOptions {
  std::string mode = "prompt_only";
  double lr = 3e-4;
  std::size_t warmup = 100;
  double warmup_ratio = 0.0;  // > 0 overrides warmup
  std::size_t epochs = 400;
  std::size_t batch = 8;
  std::size_t accum = 10;

  TrainConfig config(std::uint64_t seed, std::size_t dev_max_len) const {
    TrainConfig c;
    c.mode = parse_mode(mode);
    c.peak_lr = lr;
    c.warmup_steps = warmup;
    if (warmup_ratio > 0.0) c.warmup_ratio = warmup_ratio;
    c.epochs = epochs;
    c.batch = batch;
    c.grad_accum = accum;
    c.seed = seed;
    c.dev_max_len = dev_max_len;
    return c;
  }
};

struct GlobalOptions {
  std::uint64_t seed = 0;
  std::string out;
  std::string vocab;
  ModelOptions model;
  PromptOptions prompt;
  std::size_t beam = 4;
  std::size_t max_len = 256;
  std::size_t max_src_tokens = 1024;

  // Independent streams derived from the one user-facing seed.
  std::uint64_t backbone_seed() const { return seed; }
  std::uint64_t prompt_seed() const { return seed + 1; }
  std::uint64_t train_seed() const { return seed + 2; }
  std::uint64_t fewshot_seed() const { return seed + 3; }
};

// ---------------------------------------------------------------------------
// Run bookkeeping

class LockFile {
 public:
  explicit LockFile(fs::path path) : path_(std::move(path)) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      throw Error(ErrorCode::kIo, "output directory is locked by another run (" + path_.string() +
                                      " exists; remove it if that run is gone)");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~LockFile() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  LockFile(const LockFile&) = delete;
  LockFile& operator=(const LockFile&) = delete;

 private:
  fs::path path_;
};

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

struct Context {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;
  std::string resolved_config;
  GlobalOptions opt;
  std::ostream* out = &std::cout;
  std::unique_ptr<LockFile> lock;

  fs::path output(const std::string& name) const { return fs::path(opt.out) / name; }

  // Creates the output directory, takes the lock and writes the manifest.
  // Must run before any input is read.
  void begin(std::vector<fs::path> inputs, const std::vector<std::string>& outputs) {
    if (opt.out.empty()) throw Error(ErrorCode::kUsage, "--out is required");
    fs::create_directories(opt.out);
    lock = std::make_unique<LockFile>(output(".psp.lock"));

    std::vector<fs::path> out_paths;
    for (const auto& name : outputs) out_paths.push_back(output(name));
    inputs.erase(std::remove_if(inputs.begin(), inputs.end(), [](const fs::path& p) { return p.empty(); }),
                 inputs.end());
    for (const auto& in : inputs) {
      for (const auto& o : out_paths) {
        if (fs::weakly_canonical(in) == fs::weakly_canonical(o)) {
          throw Error(ErrorCode::kConfig, "output " + o.string() + " would overwrite an input");
        }
      }
    }

    json manifest;
    manifest["command"] = command;
    manifest["argv"] = argv;
    manifest["cwd"] = fs::current_path().string();
    manifest["config_file"] = config_path;
    manifest["config_file_text"] = config_path.empty() ? "" : read_file(config_path);
    manifest["resolved_config"] = resolved_config;
    manifest["seeds"] = {{"seed", opt.seed},
                         {"backbone", opt.backbone_seed()},
                         {"prompts", opt.prompt_seed()},
                         {"train", opt.train_seed()},
                         {"fewshot", opt.fewshot_seed()}};
    json in_list = json::array();
    for (const auto& p : inputs) in_list.push_back(p.string());
    json out_list = json::array();
    for (const auto& p : out_paths) out_list.push_back(p.string());
    manifest["inputs"] = in_list;
    manifest["outputs"] = out_list;
    manifest["version"] = PSP_VERSION;
    manifest["started_at"] = utc_timestamp();
    write_json(output("manifest.json"), manifest);
  }

  void emit(const json& summary) const { *out << summary.dump() << std::endl; }
};

// ---------------------------------------------------------------------------
// Shared helpers

inline Vocab load_vocab(const GlobalOptions& opt) {
  if (opt.vocab.empty()) throw Error(ErrorCode::kUsage, "--vocab is required for this command");
  return Vocab::load(opt.vocab);
}

inline std::vector<SummaryPair> load_pairs(const std::string& path, const Vocab& vocab, const GlobalOptions& opt) {
  auto loaded = load_dataset(path, vocab, opt.max_src_tokens);
  if (loaded.skipped > 0) warn(path + ": skipped " + std::to_string(loaded.skipped) + " empty records");
  return std::move(loaded.pairs);
}

inline std::vector<Document> documents_of(const std::vector<SummaryPair>& pairs) {
  std::vector<Document> docs;
  docs.reserve(pairs.size());
  for (const auto& p : pairs) docs.push_back(p.document);
  return docs;
}

// Prompt layout from the flags; n_max = 0 is resolved against `corpus`.
inline PromptConfig prompt_config(const PromptOptions& po, const std::vector<SummaryPair>& corpus) {
  PromptConfig c;
  c.len_en = po.len_en;
  c.len_de = po.len_de;
  c.strategy = parse_strategy(po.strategy);
  c.k = po.k;
  c.shared = po.shared;
  c.encoder_only = po.encoder_only;
  c.decoder_only = po.decoder_only;
  c.n_max = po.n_max;
  if (c.n_max == 0) {
    c.n_max = 1;
    if (!corpus.empty() && (c.strategy == InnerStrategy::kSequential || c.strategy == InnerStrategy::kFixedK)) {
      const CountUnit unit = c.strategy == InnerStrategy::kFixedK ? CountUnit::kSpan : CountUnit::kSentence;
      c.n_max = std::max<std::size_t>(compute_n_max(documents_of(corpus), 0.85, unit, c.k), 1);
    }
  }
  c.validate();
  return c;
}

inline void check_positions(const ModelDims& dims, const PromptConfig& c, const GlobalOptions& opt) {
  if (c.encoder_prompt_len() + opt.max_src_tokens > dims.max_pos) {
    throw Error(ErrorCode::kConfig, "max_pos=" + std::to_string(dims.max_pos) + " cannot hold " +
                                        std::to_string(c.encoder_prompt_len()) + " encoder prompts plus " +
                                        std::to_string(opt.max_src_tokens) + " source tokens");
  }
  if (c.decoder_prompt_len() + 1 + opt.max_len > dims.max_pos) {
    throw Error(ErrorCode::kConfig, "max_pos=" + std::to_string(dims.max_pos) + " cannot hold " +
                                        std::to_string(c.decoder_prompt_len()) + " decoder prompts plus " +
                                        std::to_string(opt.max_len + 1) + " target positions");
  }
}

inline void check_vocab(const BackboneParams& b, const Vocab& vocab, const std::string& where) {
  if (b.dims.vocab != vocab.size()) {
    throw Error(ErrorCode::kShapeMismatch, where + ": model vocab " + std::to_string(b.dims.vocab) +
                                               " does not match vocab file size " + std::to_string(vocab.size()));
  }
}

// Backbone from a checkpoint, or freshly initialized from the model flags.
inline BackboneParams resolve_backbone(const std::string& path, const GlobalOptions& opt, const Vocab& vocab) {
  if (path.empty()) return init_backbone(opt.model.dims(vocab.size()), opt.backbone_seed());
  Checkpoint ck = load_checkpoint(path);
  check_vocab(ck.backbone, vocab, path);
  return std::move(ck.backbone);
}

// A checkpoint that must carry prompts.
inline Checkpoint load_prompted(const std::string& path, const Vocab& vocab) {
  if (path.empty()) throw Error(ErrorCode::kMissingCheckpoint, "no prompt checkpoint given (--checkpoint)");
  Checkpoint ck = load_checkpoint(path);
  if (!ck.prompts) throw Error(ErrorCode::kMissingCheckpoint, path + " holds no trained prompts");
  check_vocab(ck.backbone, vocab, path);
  return ck;
}

class TrainLog {
 public:
  explicit TrainLog(const fs::path& path) : out_(path) {
    if (!out_) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  }

  StageObserver observer() {
    StageObserver o;
    o.on_step = [this](Stage s, const StepLog& l) {
      out_ << json{{"stage", stage_name(s)}, {"step", l.step}, {"lr", l.lr}, {"loss", l.loss}}.dump() << '\n';
      last_loss_ = l.loss;
    };
    o.on_epoch = [this](Stage s, std::size_t epoch, Real score) {
      out_ << json{{"stage", stage_name(s)}, {"epoch", epoch}, {"dev_rouge1", score}}.dump() << '\n';
    };
    return o;
  }

  Real last_loss() const { return last_loss_; }

 private:
  std::ofstream out_;
  Real last_loss_ = 0.0;
};

inline TrainState train(Stage stage, const std::vector<SummaryPair>& data, const std::vector<SummaryPair>& dev,
                        BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config,
                        const TrainConfig& tc, TrainLog& log) {
  backbone.frozen = tc.mode == TrainMode::kPromptOnly;
  return run_stage(stage, data, dev, make_train_state(prompts), backbone, config, tc, log.observer());
}

inline json report_with_source(const EvalReport& r, const std::string& prompts) {
  json j = report_json(r);
  j["prompts"] = prompts;
  return j;
}

// ---------------------------------------------------------------------------
// Subcommands

struct BuildVocabArgs {
  std::vector<std::string> inputs;
  std::size_t min_count = 1;
  std::size_t max_size = 0;
};

inline int run_build_vocab(Context& ctx, const BuildVocabArgs& a) {
  ctx.begin({a.inputs.begin(), a.inputs.end()}, {"vocab.txt"});
  std::vector<std::vector<std::string>> texts;
  std::size_t records = 0;
  for (const auto& path : a.inputs) {
    for (const auto& rec : read_records(path, false)) {
      texts.push_back(tokenize_words(rec.document));
      texts.push_back(tokenize_words(rec.summary));
      ++records;
    }
  }
  const Vocab v = Vocab::build(texts, a.min_count, a.max_size);
  v.save(ctx.output("vocab.txt"));
  ctx.emit({{"command", ctx.command}, {"records", records}, {"vocab_size", v.size()}});
  return 0;
}

struct BuildPseudoArgs {
  std::string method = "lead";
  std::string input;
  std::size_t m = 1;
  std::size_t lead_n = 3;
  std::size_t min_sum = 50;
  std::size_t target_sum = 70;
  bool filter = false;
  std::string reference;
};

inline int run_build_pseudo(Context& ctx, const BuildPseudoArgs& a) {
  if (a.filter && a.reference.empty()) throw Error(ErrorCode::kUsage, "--filter needs --reference");
  ctx.begin({a.input, a.reference, ctx.opt.vocab}, {"pseudo.jsonl", "pseudo_stats.json"});
  const Vocab vocab = load_vocab(ctx.opt);

  LeadConfig lead;
  lead.lead_n = a.lead_n;
  lead.min_sum = a.min_sum;
  lead.target_sum = a.target_sum;

  std::map<std::string, std::size_t> rejected;
  std::vector<PseudoPair> built;
  std::size_t records = 0;
  for (const auto& rec : read_records(a.input, false)) {
    ++records;
    if (tokenize_words(rec.document).empty()) {
      ++rejected["empty-document"];
      continue;
    }
    const Document doc = document_from_text(rec.document, vocab);
    PseudoResult r = a.method == "lead" ? build_lead_pair(doc, lead, &vocab) : build_gsg_pair(doc, a.m, &vocab);
    if (!r.accepted()) {
      ++rejected[std::string(reject_reason_name(r.reason))];
      continue;
    }
    // The filter and training both see the truncated source.
    r.pair->pair.document = truncate_document(r.pair->pair.document, ctx.opt.max_src_tokens);
    built.push_back(std::move(*r.pair));
  }

  json stats = {{"method", a.method}, {"records", records}, {"built", built.size()}, {"rejected", rejected}};
  std::vector<PseudoPair> kept = built;
  if (a.filter) {
    const FilterThreshold t = compute_filter_threshold(load_pairs(a.reference, vocab, ctx.opt));
    kept = filter_pseudo(built, t);
    stats["filter"] = {{"epsilon", t.epsilon},
                       {"sigma2", t.sigma2},
                       {"threshold", t.threshold()},
                       {"removed", built.size() - kept.size()}};
  }
  stats["kept"] = kept.size();
  if (kept.empty()) throw Error(ErrorCode::kEmptyDataset, "no pseudo pairs survived construction and filtering");

  std::vector<RawRecord> out;
  for (std::size_t i = 0; i < kept.size(); ++i) out.push_back({i + 1, kept[i].document_text, kept[i].summary_text});
  write_records(ctx.output("pseudo.jsonl"), out);
  write_json(ctx.output("pseudo_stats.json"), stats);
  ctx.emit({{"command", ctx.command}, {"kept", kept.size()}, {"built", built.size()}});
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string dev;
  std::string backbone;
  std::string init;
  std::size_t fewshot = 0;
  TrainOptions train;
};

// Few-shot split when requested, else the data file plus an optional dev file.
inline std::pair<std::vector<SummaryPair>, std::vector<SummaryPair>> training_split(const TrainArgs& a,
                                                                                    const Vocab& vocab,
                                                                                    const GlobalOptions& opt) {
  auto data = load_pairs(a.data, vocab, opt);
  std::vector<SummaryPair> dev;
  if (!a.dev.empty()) dev = load_pairs(a.dev, vocab, opt);
  if (a.fewshot == 0) return {std::move(data), std::move(dev)};
  auto split = sample_fewshot(data, a.fewshot, opt.fewshot_seed());
  if (!a.dev.empty()) warn("--dev is ignored when --fewshot samples the dev split");
  return {std::move(split.train), std::move(split.dev)};
}

inline int run_pretrain_backbone(Context& ctx, const TrainArgs& a) {
  ctx.begin({a.data, a.dev, ctx.opt.vocab}, {"backbone.ckpt", "train_log.jsonl"});
  const Vocab vocab = load_vocab(ctx.opt);
  auto [data, dev] = training_split(a, vocab, ctx.opt);
  const PromptConfig config = prompt_config(ctx.opt.prompt, data);
  BackboneParams backbone = init_backbone(ctx.opt.model.dims(vocab.size()), ctx.opt.backbone_seed());
  check_positions(backbone.dims, config, ctx.opt);
  TrainConfig tc = a.train.config(ctx.opt.train_seed(), ctx.opt.max_len);
  tc.mode = TrainMode::kFullModel;

  TrainLog log(ctx.output("train_log.jsonl"));
  // The stand-in trains with prompts attached; only the backbone is kept.
  train(Stage::kPretrain, data, dev, backbone, init_prompts(config, backbone, ctx.opt.prompt_seed()), config, tc, log);
  backbone.frozen = false;
  save_checkpoint(ctx.output("backbone.ckpt"), backbone, config, nullptr);
  ctx.emit({{"command", ctx.command}, {"pairs", data.size()}, {"final_loss", log.last_loss()}});
  return 0;
}

inline int run_pretrain_prompts(Context& ctx, const TrainArgs& a) {
  ctx.begin({a.data, a.dev, a.backbone, ctx.opt.vocab}, {"prompts.ckpt", "train_log.jsonl"});
  const Vocab vocab = load_vocab(ctx.opt);
  auto [data, dev] = training_split(a, vocab, ctx.opt);
  BackboneParams backbone = resolve_backbone(a.backbone, ctx.opt, vocab);
  const PromptConfig config = prompt_config(ctx.opt.prompt, data);
  check_positions(backbone.dims, config, ctx.opt);

  TrainLog log(ctx.output("train_log.jsonl"));
  const TrainState state = train(Stage::kPretrain, data, dev, backbone, init_prompts(config, backbone, ctx.opt.prompt_seed()),
                                 config, a.train.config(ctx.opt.train_seed(), ctx.opt.max_len), log);
  backbone.frozen = false;
  save_checkpoint(ctx.output("prompts.ckpt"), backbone, config, &state.prompts);
  ctx.emit({{"command", ctx.command},
            {"pairs", data.size()},
            {"n_max", config.n_max},
            {"steps", state.step},
            {"final_loss", log.last_loss()}});
  return 0;
}

inline int run_finetune(Context& ctx, const TrainArgs& a) {
  ctx.begin({a.data, a.dev, a.backbone, a.init, ctx.opt.vocab}, {"model.ckpt", "train_log.jsonl"});
  const Vocab vocab = load_vocab(ctx.opt);
  auto [data, dev] = training_split(a, vocab, ctx.opt);

  BackboneParams backbone;
  PromptConfig config;
  PromptSet prompts;
  if (!a.init.empty()) {
    Checkpoint ck = load_prompted(a.init, vocab);
    backbone = std::move(ck.backbone);
    config = ck.prompt_config;
    prompts = std::move(*ck.prompts);
  } else {
    backbone = resolve_backbone(a.backbone, ctx.opt, vocab);
    config = prompt_config(ctx.opt.prompt, data);
    prompts = init_prompts(config, backbone, ctx.opt.prompt_seed());
  }
  check_positions(backbone.dims, config, ctx.opt);

  TrainLog log(ctx.output("train_log.jsonl"));
  const TrainState state = train(Stage::kFinetune, data, dev, backbone, prompts, config,
                                 a.train.config(ctx.opt.train_seed(), ctx.opt.max_len), log);
  backbone.frozen = false;
  save_checkpoint(ctx.output("model.ckpt"), backbone, config, &state.prompts);
  ctx.emit({{"command", ctx.command},
            {"train_pairs", data.size()},
            {"dev_pairs", dev.size()},
            {"steps", state.step},
            {"final_loss", log.last_loss()}});
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string input;
  bool fresh_prompts = false;
  bool baseline = false;
  std::size_t index = 0;
};

inline int run_generate(Context& ctx, const EvalArgs& a) {
  ctx.begin({a.checkpoint, a.input, ctx.opt.vocab}, {"predictions.jsonl"});
  const Vocab vocab = load_vocab(ctx.opt);
  const Checkpoint ck = load_prompted(a.checkpoint, vocab);
  std::ofstream out(ctx.output("predictions.jsonl"));
  if (!out) throw Error(ErrorCode::kIo, "cannot write predictions");
  std::size_t written = 0;
  for (const auto& rec : read_records(a.input, false)) {
    if (tokenize_words(rec.document).empty()) {
      warn(a.input + ":" + std::to_string(rec.line) + ": empty document skipped");
      continue;
    }
    const Document doc = truncate_document(document_from_text(rec.document, vocab), ctx.opt.max_src_tokens);
    const TokenIds gen =
        strip_eos(beam_search(ck.backbone, *ck.prompts, ck.prompt_config, doc, ctx.opt.beam, ctx.opt.max_len));
    out << json{{"id", rec.line}, {"tokens", gen}, {"text", detokenize(gen, vocab)}}.dump() << '\n';
    ++written;
  }
  ctx.emit({{"command", ctx.command}, {"generated", written}});
  return 0;
}

// Checkpoint prompts, or fresh ones of the same layout when asked.
inline PromptSet eval_prompts(const Checkpoint& ck, const GlobalOptions& opt, bool fresh) {
  return fresh ? init_prompts(ck.prompt_config, ck.backbone, opt.prompt_seed()) : *ck.prompts;
}

inline int run_evaluate(Context& ctx, const EvalArgs& a) {
  ctx.begin({a.checkpoint, a.input, ctx.opt.vocab}, {"report.json", "predictions.jsonl"});
  const Vocab vocab = load_vocab(ctx.opt);
  const Checkpoint ck = load_prompted(a.checkpoint, vocab);
  const auto test = load_pairs(a.input, vocab, ctx.opt);
  const PromptSet prompts = eval_prompts(ck, ctx.opt, a.fresh_prompts);
  const EvalResult res = evaluate(ck.backbone, prompts, ck.prompt_config, test, ctx.opt.beam, ctx.opt.max_len);
  write_predictions(ctx.output("predictions.jsonl"), res.predictions, vocab);
  const json report = report_with_source(res.report, a.fresh_prompts ? "fresh" : "checkpoint");
  write_json(ctx.output("report.json"), report);
  ctx.emit(report);
  return 0;
}

inline int run_zero_shot(Context& ctx, const EvalArgs& a) {
  ctx.begin({a.checkpoint, a.input, ctx.opt.vocab}, {"report.json", "predictions.jsonl"});
  const Vocab vocab = load_vocab(ctx.opt);
  if (!a.checkpoint.empty() && !fs::exists(a.checkpoint)) {
    throw Error(ErrorCode::kMissingCheckpoint,
                "zero-shot needs a pretrain-prompts checkpoint; " + a.checkpoint + " does not exist");
  }
  const Checkpoint ck = load_prompted(a.checkpoint, vocab);
  const auto test = load_pairs(a.input, vocab, ctx.opt);
  const EvalResult res = evaluate(ck.backbone, *ck.prompts, ck.prompt_config, test, ctx.opt.beam, ctx.opt.max_len);
  write_predictions(ctx.output("predictions.jsonl"), res.predictions, vocab);
  json report = report_with_source(res.report, "checkpoint");
  if (a.baseline) {
    const PromptSet fresh = eval_prompts(ck, ctx.opt, true);
    const EvalResult base = evaluate(ck.backbone, fresh, ck.prompt_config, test, ctx.opt.beam, ctx.opt.max_len);
    report["baseline"] = report_with_source(base.report, "fresh");
  }
  write_json(ctx.output("report.json"), report);
  ctx.emit(report);
  return 0;
}

inline int run_probe_attention(Context& ctx, const EvalArgs& a) {
  ctx.begin({a.checkpoint, a.input, ctx.opt.vocab}, {"attention.txt", "quadrants.json"});
  const Vocab vocab = load_vocab(ctx.opt);
  const Checkpoint ck = load_prompted(a.checkpoint, vocab);
  const auto pairs = load_pairs(a.input, vocab, ctx.opt);
  if (a.index >= pairs.size()) {
    throw Error(ErrorCode::kConfig, "--index " + std::to_string(a.index) + " is out of range for " +
                                        std::to_string(pairs.size()) + " pairs");
  }
  const AttentionRecord rec =
      export_attention(ck.backbone, *ck.prompts, ck.prompt_config, pairs[a.index], ctx.output("attention.txt"));
  const QuadrantSums q = quadrant_sums(rec);
  const json j = {{"rows", rec.weights.rows()},
                  {"cols", rec.weights.cols()},
                  {"len_de", rec.len_de},
                  {"len_en", rec.len_en},
                  {"prompt_to_prompt", q.prompt_to_prompt},
                  {"prompt_to_source", q.prompt_to_source},
                  {"target_to_prompt", q.target_to_prompt},
                  {"target_to_source", q.target_to_source}};
  write_json(ctx.output("quadrants.json"), j);
  ctx.emit(j);
  return 0;
}

struct AblateArgs {
  TrainArgs train;
  std::string test;
  std::vector<std::string> variants{"both"};
  std::vector<std::string> strategies{"none", "interval", "sequential", "fixed_k"};
  std::vector<std::size_t> k_grid;
};

inline PromptOptions apply_variant(PromptOptions po, const std::string& variant) {
  po.encoder_only = variant == "encoder-only";
  po.decoder_only = variant == "decoder-only";
  po.shared = variant == "shared";
  return po;
}

inline int run_ablate(Context& ctx, const AblateArgs& a) {
  ctx.begin({a.train.data, a.train.dev, a.train.backbone, a.test, ctx.opt.vocab}, {"ablation.json", "ablation.tsv"});
  const Vocab vocab = load_vocab(ctx.opt);
  auto [data, dev] = training_split(a.train, vocab, ctx.opt);
  const auto test = load_pairs(a.test, vocab, ctx.opt);
  const BackboneParams base = resolve_backbone(a.train.backbone, ctx.opt, vocab);
  const TrainConfig tc = a.train.train.config(ctx.opt.train_seed(), ctx.opt.max_len);

  json rows = json::array();
  std::ofstream tsv(ctx.output("ablation.tsv"));
  if (!tsv) throw Error(ErrorCode::kIo, "cannot write ablation table");
  tsv << "variant\tstrategy\tk\tn_max\ttrainable\trouge1\trouge2\trougeL\tppl\n";
  for (const auto& variant : a.variants) {
    for (const auto& strategy : a.strategies) {
      std::vector<std::size_t> ks{ctx.opt.prompt.k};
      if (strategy == "fixed_k" && !a.k_grid.empty()) ks = a.k_grid;
      for (std::size_t k : ks) {
        PromptOptions po = apply_variant(ctx.opt.prompt, variant);
        po.strategy = strategy;
        po.k = k;
        const PromptConfig config = prompt_config(po, data);
        BackboneParams backbone = base;
        check_positions(backbone.dims, config, ctx.opt);
        TrainLog log(ctx.output("train_log_" + variant + "_" + strategy + "_" + std::to_string(k) + ".jsonl"));
        const TrainState state = train(Stage::kFinetune, data, dev, backbone,
                                       init_prompts(config, backbone, ctx.opt.prompt_seed()), config, tc, log);
        const EvalReport r = evaluate(backbone, state.prompts, config, test, ctx.opt.beam, ctx.opt.max_len).report;
        const std::size_t trainable = count_trainable_params(config, backbone.dims.d, tc.mode, backbone.parameter_count());
        const bool uses_k = strategy == "fixed_k";
        rows.push_back({{"variant", variant},
                        {"strategy", strategy},
                        {"k", uses_k ? json(k) : json(nullptr)},
                        {"n_max", config.n_max},
                        {"trainable_params", trainable},
                        {"rouge1_f1", r.r1},
                        {"rouge2_f1", r.r2},
                        {"rougeL_f1", r.rl},
                        {"ppl", r.ppl}});
        tsv << variant << '\t' << strategy << '\t' << (uses_k ? std::to_string(k) : "-") << '\t' << config.n_max
            << '\t' << trainable << '\t' << r.r1 << '\t' << r.r2 << '\t' << r.rl << '\t' << r.ppl << '\n';
      }
    }
  }
  write_json(ctx.output("ablation.json"), rows);
  ctx.emit({{"command", ctx.command}, {"rows", rows.size()}});
  return 0;
}

// ---------------------------------------------------------------------------
// Argument wiring

inline void add_train_options(CLI::App* sub, TrainOptions& t, const TrainOptions& defaults, bool with_mode = true) {
  t = defaults;
  if (with_mode) {
    sub->add_option("--mode", t.mode, "prompt_only or full_model")->check(CLI::IsMember({"prompt_only", "full_model"}));
  }
  sub->add_option("--lr", t.lr, "peak learning rate");
  sub->add_option("--warmup", t.warmup, "warmup steps");
  sub->add_option("--warmup-ratio", t.warmup_ratio, "warmup as a fraction of all steps; overrides --warmup when > 0");
  sub->add_option("--epochs", t.epochs);
  sub->add_option("--batch", t.batch, "pairs per micro-batch");
  sub->add_option("--accum", t.accum, "micro-batches per optimizer step");
}

inline TrainOptions pretrain_defaults() {
  TrainOptions t;
  t.lr = 1e-3;
  t.warmup_ratio = 0.1;
  t.epochs = 10;
  return t;
}

// Root options plus the invoked subcommand's, one "key=value" per line.
inline std::string resolved_config(const CLI::App& app, const std::string& command) {
  std::istringstream in(app.config_to_str(true, false));
  std::string line, out;
  while (std::getline(in, line)) {
    const std::string key = line.substr(0, line.find('='));
    if (key.find('.') == std::string::npos || key.rfind(command + ".", 0) == 0) out += line + '\n';
  }
  return out;
}

inline std::string error_line(std::string_view code, const std::string& message, const std::string& command) {
  return json{{"error", code}, {"message", message}, {"command", command}}.dump();
}

inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Soft-prompt summarization pipeline", "psp"};
  app.fallthrough();
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "key = value config file; flags override it");

  Context ctx;
  ctx.out = &out;
  GlobalOptions& g = ctx.opt;
  app.add_option("--seed", g.seed, "base seed; all other seeds derive from it");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--vocab", g.vocab, "vocabulary file from build-vocab");
  app.add_option("--d", g.model.d, "model width");
  app.add_option("--layers", g.model.layers);
  app.add_option("--heads", g.model.heads);
  app.add_option("--ffn", g.model.ffn);
  app.add_option("--max-pos", g.model.max_pos, "positional table size shared by encoder and decoder");
  app.add_option("--strategy", g.prompt.strategy, "inner-prompt strategy")
      ->check(CLI::IsMember({"none", "interval", "sequential", "fixed_k"}));
  app.add_option("--k", g.prompt.k, "span length for fixed_k");
  app.add_option("--prompt-len-en", g.prompt.len_en);
  app.add_option("--prompt-len-de", g.prompt.len_de);
  app.add_option("--n-max", g.prompt.n_max, "inner-prompt cap; 0 picks the 85th percentile of the training data");
  app.add_flag("--shared", g.prompt.shared, "decoder reuses the encoder prompts");
  auto* enc = app.add_flag("--encoder-only", g.prompt.encoder_only, "no decoder prompts");
  app.add_flag("--decoder-only", g.prompt.decoder_only, "no encoder prompts")->excludes(enc);
  app.add_option("--beam", g.beam);
  app.add_option("--max-len", g.max_len, "maximum generated tokens");
  app.add_option("--max-src-tokens", g.max_src_tokens, "source truncation length");

  BuildVocabArgs vocab_args;
  auto* build_vocab = app.add_subcommand("build-vocab", "build a vocabulary from JSONL records");
  build_vocab->add_option("--input", vocab_args.inputs, "JSONL files")->required();
  build_vocab->add_option("--min-count", vocab_args.min_count);
  build_vocab->add_option("--max-size", vocab_args.max_size, "0 = unbounded");

  BuildPseudoArgs pseudo_args;
  auto* build_pseudo = app.add_subcommand("build-pseudo", "construct pseudo summary pairs from unlabeled documents");
  build_pseudo->add_option("method", pseudo_args.method, "lead or gsg")->check(CLI::IsMember({"lead", "gsg"}));
  build_pseudo->add_option("--input", pseudo_args.input, "JSONL documents")->required();
  build_pseudo->add_option("--m", pseudo_args.m, "sentences removed by gsg");
  build_pseudo->add_option("--lead-n", pseudo_args.lead_n, "leading sentences taken by lead");
  build_pseudo->add_option("--min-sum", pseudo_args.min_sum, "lead summaries shorter than this are grown");
  build_pseudo->add_option("--target-sum", pseudo_args.target_sum, "length lead summaries are grown to");
  build_pseudo->add_flag("--filter", pseudo_args.filter, "drop pairs below the few-shot ROUGE-1 threshold");
  build_pseudo->add_option("--reference", pseudo_args.reference, "labeled few-shot pairs for --filter");

  TrainArgs backbone_args, prompt_args, finetune_args;
  AblateArgs ablate_args;
  auto add_data = [](CLI::App* sub, TrainArgs& t) {
    sub->add_option("--data", t.data, "training pairs (JSONL)")->required();
    sub->add_option("--dev", t.dev, "dev pairs for checkpoint selection");
    sub->add_option("--fewshot", t.fewshot, "sample disjoint train/dev splits of this size from --data");
  };
  auto* pretrain_backbone = app.add_subcommand("pretrain-backbone", "train a small backbone end to end");
  add_data(pretrain_backbone, backbone_args);
  add_train_options(pretrain_backbone, backbone_args.train, pretrain_defaults(), false);

  auto* pretrain_prompts = app.add_subcommand("pretrain-prompts", "train prompts on pseudo pairs");
  add_data(pretrain_prompts, prompt_args);
  pretrain_prompts->add_option("--backbone", prompt_args.backbone, "backbone checkpoint (default: fresh)");
  add_train_options(pretrain_prompts, prompt_args.train, pretrain_defaults());

  auto* finetune = app.add_subcommand("finetune", "few-shot fine-tuning");
  add_data(finetune, finetune_args);
  finetune->add_option("--backbone", finetune_args.backbone, "backbone checkpoint when starting from fresh prompts");
  finetune->add_option("--init", finetune_args.init, "prompt checkpoint to start from");
  add_train_options(finetune, finetune_args.train, TrainOptions{});

  EvalArgs gen_args, eval_args, zero_args, probe_args;
  auto* generate = app.add_subcommand("generate", "beam-search summaries for documents");
  generate->add_option("--checkpoint", gen_args.checkpoint)->required();
  generate->add_option("--input", gen_args.input, "JSONL documents")->required();

  auto* evaluate_cmd = app.add_subcommand("evaluate", "ROUGE and perplexity on labeled pairs");
  evaluate_cmd->add_option("--checkpoint", eval_args.checkpoint)->required();
  evaluate_cmd->add_option("--test", eval_args.input, "labeled pairs (JSONL)")->required();
  evaluate_cmd->add_flag("--fresh-prompts", eval_args.fresh_prompts, "replace the checkpoint prompts with fresh ones");

  auto* zero_shot = app.add_subcommand("zero-shot", "evaluate pre-trained prompts without fine-tuning");
  zero_shot->add_option("--checkpoint", zero_args.checkpoint, "pretrain-prompts checkpoint");
  zero_shot->add_option("--test", zero_args.input, "labeled pairs (JSONL)")->required();
  zero_shot->add_flag("--baseline", zero_args.baseline, "also evaluate fresh prompts on the same backbone");

  auto* probe = app.add_subcommand("probe-attention", "export cross-attention for one pair");
  probe->add_option("--checkpoint", probe_args.checkpoint)->required();
  probe->add_option("--input", probe_args.input, "labeled pairs (JSONL)")->required();
  probe->add_option("--index", probe_args.index, "0-based pair index");

  auto* ablate = app.add_subcommand("ablate", "prompt placement and inner-prompt strategy grid");
  add_data(ablate, ablate_args.train);
  ablate->add_option("--backbone", ablate_args.train.backbone, "backbone checkpoint (default: fresh)");
  ablate->add_option("--test", ablate_args.test, "labeled pairs (JSONL)")->required();
  ablate->add_option("--variants", ablate_args.variants, "subset of both, encoder-only, decoder-only, shared")
      ->delimiter(',')
      ->check(CLI::IsMember({"both", "encoder-only", "decoder-only", "shared"}));
  ablate->add_option("--strategies", ablate_args.strategies, "inner-prompt strategies")
      ->delimiter(',')
      ->check(CLI::IsMember({"none", "interval", "sequential", "fixed_k"}));
  ablate->add_option("--k-grid", ablate_args.k_grid, "span lengths swept for fixed_k")->delimiter(',');
  add_train_options(ablate, ablate_args.train.train, TrainOptions{});

  std::string command = "psp";
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    command = app.get_subcommands().front()->get_name();
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    for (const auto& a : args) {
      if (app.get_subcommand_no_throw(a) != nullptr) {
        command = a;
        break;
      }
    }
    err << app.help() << error_line(error_code_name(ErrorCode::kUsage), e.what(), command) << std::endl;
    return kExitUsage;
  }

  ctx.command = command;
  ctx.argv = args;
  if (auto* cfg = app.get_config_ptr(); cfg != nullptr && cfg->count() > 0) ctx.config_path = cfg->as<std::string>();
  ctx.resolved_config = resolved_config(app, command);

  try {
    if (command == "build-vocab") return run_build_vocab(ctx, vocab_args);
    if (command == "build-pseudo") return run_build_pseudo(ctx, pseudo_args);
    if (command == "pretrain-backbone") return run_pretrain_backbone(ctx, backbone_args);
    if (command == "pretrain-prompts") return run_pretrain_prompts(ctx, prompt_args);
    if (command == "finetune") return run_finetune(ctx, finetune_args);
    if (command == "generate") return run_generate(ctx, gen_args);
    if (command == "evaluate") return run_evaluate(ctx, eval_args);
    if (command == "zero-shot") return run_zero_shot(ctx, zero_args);
    if (command == "probe-attention") return run_probe_attention(ctx, probe_args);
    if (command == "ablate") return run_ablate(ctx, ablate_args);
    throw Error(ErrorCode::kUsage, "unknown subcommand " + command);
  } catch (const Error& e) {
    err << error_line(error_code_name(e.code()), e.what(), command) << std::endl;
    return e.code() == ErrorCode::kUsage ? kExitUsage : kExitFailure;
  } catch (const std::exception& e) {
    err << error_line("internal", e.what(), command) << std::endl;
    return kExitFailure;
  }
}

inline int dispatch(int argc, const char* const* argv) {
  return dispatch(std::vector<std::string>(argv + 1, argv + argc));
}

}  // namespace psp::cli
