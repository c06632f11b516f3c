#pragma once

// MLE training of prompts (or the full model) with Adam and noam decay.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "psp/decoding.hpp"
#include "psp/model.hpp"
#include "psp/rouge.hpp"

namespace psp {

// Mean of -log softmax(logits[t])[targets[t]] over positions whose target is
// not PAD.
inline Real nll_loss(const Matrix& logits, std::span<const TokenId> targets) {
  if (logits.rows() != targets.size()) {
    throw Error(ErrorCode::kShapeMismatch, "nll_loss: " + std::to_string(logits.rows()) + " logit rows vs " +
                                               std::to_string(targets.size()) + " targets");
  }
  Real total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] == kPad) continue;
    if (targets[t] >= logits.cols()) throw Error(ErrorCode::kShapeMismatch, "nll_loss: target out of vocab");
    total -= detail::log_softmax_row(logits.row(t))[targets[t]];
    ++count;
  }
  if (count == 0) throw Error(ErrorCode::kShapeMismatch, "nll_loss: every target is PAD");
  return total / static_cast<Real>(count);
}

// Peak-normalized noam schedule: linear warmup to `peak_lr` at `warmup`,
// inverse-square-root decay afterwards.
inline Real noam_lr(std::size_t step, std::size_t warmup, Real peak_lr) {
  if (warmup == 0) throw Error(ErrorCode::kConfig, "noam warmup must be >= 1");
  if (step == 0) throw Error(ErrorCode::kConfig, "noam step must be >= 1");
  const Real s = static_cast<Real>(step);
  const Real w = static_cast<Real>(warmup);
  return peak_lr * std::min(s / w, std::sqrt(w / s));
}

enum class Stage { kPretrain, kFinetune };

inline std::string_view stage_name(Stage s) { return s == Stage::kPretrain ? "pretrain" : "finetune"; }

struct TrainConfig {
  TrainMode mode = TrainMode::kPromptOnly;
  Real peak_lr = 3e-4;
  std::size_t warmup_steps = 100;
  std::optional<Real> warmup_ratio;  // when set, overrides warmup_steps
  std::size_t epochs = 400;
  std::size_t batch = 8;
  std::size_t grad_accum = 10;
  Real beta1 = 0.9;
  Real beta2 = 0.998;
  Real adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t dev_max_len = 256;  // greedy decode length for dev selection

  static TrainConfig pretrain_defaults() {
    TrainConfig c;
    c.peak_lr = 1e-3;
    c.warmup_ratio = 0.1;
    return c;
  }
  static TrainConfig finetune_defaults() { return TrainConfig{}; }

  void validate() const {
    if (!(peak_lr > 0.0)) throw Error(ErrorCode::kConfig, "peak_lr must be > 0");
    if (batch == 0) throw Error(ErrorCode::kConfig, "batch must be >= 1");
    if (grad_accum == 0) throw Error(ErrorCode::kConfig, "grad_accum must be >= 1");
    if (warmup_ratio && (*warmup_ratio <= 0.0 || *warmup_ratio > 1.0)) {
      throw Error(ErrorCode::kConfig, "warmup_ratio must be in (0, 1]");
    }
  }

  std::size_t resolved_warmup(std::size_t total_steps) const {
    if (!warmup_ratio) return std::max<std::size_t>(warmup_steps, 1);
    return std::max<std::size_t>(
        static_cast<std::size_t>(std::llround(*warmup_ratio * static_cast<Real>(total_steps))), 1);
  }
};

struct AdamMoments {
  Matrix m;
  Matrix v;
};

struct StepLog {
  std::size_t step = 0;
  Real lr = 0.0;
  Real loss = 0.0;
};

struct TrainState {
  PromptSet prompts;
  std::map<std::string, AdamMoments> moments;
  std::size_t step = 0;
  std::size_t warmup = 1;
  std::vector<StepLog> history;
};

using NamedTensors = std::map<std::string, Matrix>;

// Trainable tensors by name: "prompts/..." always, "backbone/..." in full mode.
// Empty tensors (absent blocks) are skipped.
inline std::vector<std::pair<std::string, Matrix*>> trainable_tensors(PromptSet& prompts, BackboneParams& backbone,
                                                                      TrainMode mode) {
  std::vector<std::pair<std::string, Matrix*>> out;
  prompts.for_each_tensor([&](const std::string& name, Matrix& m) {
    if (!m.empty()) out.emplace_back("prompts/" + name, &m);
  });
  if (mode == TrainMode::kFullModel) {
    backbone.for_each_tensor([&](const std::string& name, Matrix& m) { out.emplace_back("backbone/" + name, &m); });
  }
  return out;
}

struct Gradients {
  Real loss = 0.0;  // token-mean NLL
  std::size_t tokens = 0;
  NamedTensors grads;
};

// Token-mean NLL over `batch` and its gradient with respect to the prompts
// (and the backbone in full mode).
inline Gradients compute_gradients(const BackboneParams& backbone, const PromptSet& prompts,
                                   const PromptConfig& config, std::span<const SummaryPair> batch, TrainMode mode) {
  Gradients out;
  for (const auto& p : batch) out.tokens += p.summary.size() + 1;
  if (out.tokens == 0) throw Error(ErrorCode::kEmptyDataset, "empty batch");
  const Real inv = 1.0 / static_cast<Real>(out.tokens);
  const bool full = mode == TrainMode::kFullModel;

  auto init = [&](const std::string& name, const Matrix& m) {
    if (!m.empty()) out.grads.emplace(name, Matrix::zeros(m.rows(), m.cols()));
  };
  prompts.for_each_tensor([&](const std::string& n, const Matrix& m) { init("prompts/" + n, m); });
  if (full) backbone.for_each_tensor([&](const std::string& n, const Matrix& m) { init("backbone/" + n, m); });

  for (const auto& p : batch) {
    ad::Tape tape;
    ModelGraph g(tape, backbone, prompts, config, full, true);
    ad::Var logits = g.decode(g.encode(p.document), p.summary, nullptr);
    const TokenIds target = p.target();
    ad::Var ce = ad::cross_entropy_sum(tape, logits, std::vector<std::size_t>(target.begin(), target.end()), kPad);
    out.loss += tape.value(ce)(0, 0) * inv;
    tape.backward(ce, inv);
    auto collect = [&](const std::string& name, const Matrix& m) {
      auto leaf = g.find_leaf(m);
      if (!leaf || !tape.has_grad(*leaf)) return;
      axpy(out.grads.at(name), tape.grad(*leaf));
    };
    prompts.for_each_tensor([&](const std::string& n, const Matrix& m) {
      if (!m.empty()) collect("prompts/" + n, m);
    });
    if (full) backbone.for_each_tensor([&](const std::string& n, const Matrix& m) { collect("backbone/" + n, m); });
  }
  return out;
}

inline TrainState make_train_state(PromptSet prompts) {
  TrainState s;
  s.prompts = std::move(prompts);
  return s;
}

// One optimizer update. The batch is cut into `grad_accum` consecutive
// micro-batches; the update uses the mean of their token-mean gradients.
// Prompt-only mode never writes to the backbone.
inline Real train_step(TrainState& state, BackboneParams& backbone, std::span<const SummaryPair> batch,
                       const PromptConfig& config, const TrainConfig& tc) {
  tc.validate();
  if (batch.empty()) throw Error(ErrorCode::kEmptyDataset, "train_step: empty batch");
  if (tc.mode == TrainMode::kPromptOnly && !backbone.frozen) {
    throw Error(ErrorCode::kConfig, "prompt_only training requires a frozen backbone");
  }
  if (tc.mode == TrainMode::kFullModel && backbone.frozen) {
    throw Error(ErrorCode::kConfig, "full_model training on a frozen backbone");
  }

  const std::size_t chunks = std::min(tc.grad_accum, batch.size());
  const std::size_t per = (batch.size() + chunks - 1) / chunks;
  NamedTensors acc;
  Real loss = 0.0;
  std::size_t used = 0;
  for (std::size_t start = 0; start < batch.size(); start += per) {
    auto micro = batch.subspan(start, std::min(per, batch.size() - start));
    Gradients g = compute_gradients(backbone, state.prompts, config, micro, tc.mode);
    loss += g.loss;
    ++used;
    for (auto& [name, grad] : g.grads) {
      auto it = acc.find(name);
      if (it == acc.end()) {
        acc.emplace(name, std::move(grad));
      } else {
        axpy(it->second, grad);
      }
    }
  }
  loss /= static_cast<Real>(used);
  if (!std::isfinite(loss)) {
    throw Error(ErrorCode::kNumerical, "non-finite loss at step " + std::to_string(state.step + 1) + " on a batch of " +
                                           std::to_string(batch.size()) + " pairs");
  }

  ++state.step;
  const Real lr = noam_lr(state.step, state.warmup, tc.peak_lr);
  const Real bc1 = 1.0 - std::pow(tc.beta1, static_cast<Real>(state.step));
  const Real bc2 = 1.0 - std::pow(tc.beta2, static_cast<Real>(state.step));
  const Real inv_used = 1.0 / static_cast<Real>(used);
  for (auto& [name, param] : trainable_tensors(state.prompts, backbone, tc.mode)) {
    const Matrix& grad = acc.at(name);
    auto [it, inserted] = state.moments.try_emplace(name);
    if (inserted) it->second = {Matrix::zeros(param->rows(), param->cols()), Matrix::zeros(param->rows(), param->cols())};
    auto& mom = it->second;
    auto& pd = param->data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      const Real g = grad.data()[i] * inv_used;
      Real& m = mom.m.data()[i];
      Real& v = mom.v.data()[i];
      m = tc.beta1 * m + (1.0 - tc.beta1) * g;
      v = tc.beta2 * v + (1.0 - tc.beta2) * g * g;
      pd[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + tc.adam_eps);
    }
  }
  state.history.push_back({state.step, lr, loss});
  return loss;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckReport {
  Real max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::map<std::string, Real> per_tensor;
};

// Central finite differences over up to `coords_per_tensor` random
// coordinates of each prompt tensor against the analytic gradient.
inline GradCheckReport grad_check(const BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config,
                                  const SummaryPair& pair, Real epsilon = 1e-5, std::size_t coords_per_tensor = 50,
                                  std::uint64_t seed = 0) {
  const std::span<const SummaryPair> one(&pair, 1);
  const Gradients analytic = compute_gradients(backbone, prompts, config, one, TrainMode::kPromptOnly);
  PromptSet probe = prompts;
  auto loss_at = [&]() { return compute_gradients(backbone, probe, config, one, TrainMode::kPromptOnly).loss; };
  std::mt19937_64 rng(seed);
  GradCheckReport report;
  probe.for_each_tensor([&](const std::string& name, Matrix& m) {
    if (m.empty()) return;
    std::vector<std::size_t> idx(m.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(coords_per_tensor, idx.size()));
    const Matrix& ga = analytic.grads.at("prompts/" + name);
    Real worst = 0.0;
    for (auto i : idx) {
      const Real orig = m.data()[i];
      m.data()[i] = orig + epsilon;
      const Real up = loss_at();
      m.data()[i] = orig - epsilon;
      const Real down = loss_at();
      m.data()[i] = orig;
      const Real numeric = (up - down) / (2.0 * epsilon);
      const Real a = ga.data()[i];
      const Real rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
      ++report.coordinates;
    }
    report.per_tensor[name] = worst;
    report.max_rel_error = std::max(report.max_rel_error, worst);
  });
  return report;
}

// ---------------------------------------------------------------------------
// Stages

inline Real mean_dev_rouge1(const BackboneParams& backbone, const PromptSet& prompts, const PromptConfig& config,
                            const std::vector<SummaryPair>& dev, std::size_t max_len) {
  Real total = 0.0;
  for (const auto& p : dev) {
    TokenIds out = greedy_decode(backbone, prompts, config, p.document, max_len);
    if (!out.empty() && out.back() == kEos) out.pop_back();
    total += rouge_n_f1(out, p.summary, 1);
  }
  return total / static_cast<Real>(dev.size());
}

struct StageObserver {
  std::function<void(Stage, const StepLog&)> on_step;
  std::function<void(Stage, std::size_t epoch, Real dev_rouge1)> on_epoch;
};

// Seeded epochs over shuffled data. After each epoch the dev set is greedily
// decoded and the best-scoring parameters are kept; with an empty dev set the
// final parameters are returned. In full mode the backbone is restored to the
// selected checkpoint as well.
inline TrainState run_stage(Stage stage, const std::vector<SummaryPair>& data, const std::vector<SummaryPair>& dev,
                            TrainState state, BackboneParams& backbone, const PromptConfig& config,
                            const TrainConfig& tc, const StageObserver& observer = {}) {
  tc.validate();
  if (data.empty()) throw Error(ErrorCode::kEmptyDataset, "run_stage: no training data");
  if (tc.epochs == 0) return state;
  if (dev.empty()) warn(std::string(stage_name(stage)) + ": empty dev set, keeping the final checkpoint");

  const std::size_t per_step = tc.batch * tc.grad_accum;
  const std::size_t steps_per_epoch = (data.size() + per_step - 1) / per_step;
  state.warmup = tc.resolved_warmup(steps_per_epoch * tc.epochs);

  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  std::optional<Real> best_score;
  PromptSet best_prompts = state.prompts;
  std::optional<BackboneParams> best_backbone;
  std::vector<SummaryPair> batch;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += per_step) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + per_step); ++i) batch.push_back(data[order[i]]);
      train_step(state, backbone, batch, config, tc);
      if (observer.on_step) observer.on_step(stage, state.history.back());
    }
    if (dev.empty()) continue;
    const Real score = mean_dev_rouge1(backbone, state.prompts, config, dev, tc.dev_max_len);
    if (observer.on_epoch) observer.on_epoch(stage, epoch, score);
    if (!best_score || score > *best_score) {
      best_score = score;
      best_prompts = state.prompts;
      if (tc.mode == TrainMode::kFullModel) best_backbone = backbone;
    }
  }
  if (best_score) {
    state.prompts = std::move(best_prompts);
    if (best_backbone) {
      const bool frozen = backbone.frozen;
      backbone = std::move(*best_backbone);
      backbone.frozen = frozen;
    }
  }
  return state;
}

}  // namespace psp
