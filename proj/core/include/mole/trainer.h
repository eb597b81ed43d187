// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// Reference training loop: hand-written reverse mode over the model in
// model.h, AdamW with global-norm clipping, warmup + cosine schedule, and the
// optional MoE auxiliary losses (router z-loss and load balance).
//
// Total loss of a batch of B sequences of length T:
//   lm      = mean over B*T positions of -log softmax(logits)[target]
//   z       = sum over layers of mean over B*T of logsumexp(router logits)^2
//   balance = sum over layers of N * sum_j f_j * P_j
//   total   = lm + z_loss_coeff * z + balance_loss_coeff * balance
// The auxiliary terms are only formed for the MoE variant.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "mole/model.h"

namespace mole {

struct TrainConfig {
  double peak_lr = 6e-4;
  double min_lr_fraction = 0.1;
  std::pair<double, double> betas{0.9, 0.95};
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  double warmup_fraction = 0.01;
  std::size_t total_steps = 200;
  std::size_t batch = 8;
  std::size_t seq_len = 128;
  double z_loss_coeff = 0.001;
  double balance_loss_coeff = 0.01;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
};

struct LossBreakdown {
  double lm = 0.0;
  double z = 0.0;
  double balance = 0.0;
  double total = 0.0;
};

struct Batch {
  std::vector<std::vector<TokenId>> inputs;
  std::vector<std::vector<TokenId>> targets;  // inputs shifted left by one
};

/// Gradient buffers share the parameter layout.
template <typename T>
using GradientSet = ModelParams<T>;

// ---- losses ----------------------------------------------------------------

/// Mean token cross-entropy. Throws ValueError for out-of-range targets.
template <typename T>
T lm_loss(const Tensor<T>& logits, std::span<const TokenId> targets);

/// N * sum_j f_j * P_j with f_j = (#positions whose top-k contains j) / (T k)
/// and P_j the mean router probability of expert j. Throws ValueError when
/// top_k is 0 (no top-k selection, i.e. not a MoE layer).
template <typename T>
T balance_loss(const Tensor<T>& router_probs,
               std::span<const std::vector<std::uint32_t>> selections, std::size_t n_experts,
               std::size_t top_k);

/// Mean over rows of logsumexp(row)^2.
template <typename T>
T z_loss(const Tensor<T>& router_logits);

// ---- gradients -------------------------------------------------------------

/// Loss of `batch` and its exact gradient, written into `grads` (resized and
/// overwritten). Throws NumericError if the loss is not finite.
template <typename T>
LossBreakdown backward(const ModelParams<T>& params, const Batch& batch,
                       const TrainConfig& config, GradientSet<T>& grads);

/// Forward-only loss with the same definition as backward().
template <typename T>
LossBreakdown evaluate_loss(const ModelParams<T>& params, const Batch& batch,
                            const TrainConfig& config);

template <typename T>
double global_norm(const GradientSet<T>& grads);

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
template <typename T>
double clip_global_norm(GradientSet<T>& grads, double max_norm);

// ---- optimizer -------------------------------------------------------------

/// Linear warmup over warmup_fraction * total_steps, then cosine decay to
/// min_lr_fraction * peak_lr at total_steps. Throws ValueError past the end.
double lr_at(std::size_t step, const TrainConfig& config);

template <typename T>
struct AdamState {
  GradientSet<T> m;
  GradientSet<T> v;
  std::size_t t = 0;
};

template <typename T>
AdamState<T> make_adam_state(const ModelParams<T>& params);

/// Clips `grads` in place, then applies one bias-corrected Adam update with
/// decoupled weight decay (p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)).
/// Returns the pre-clip gradient norm.
template <typename T>
double adam_step(ModelParams<T>& params, GradientSet<T>& grads, AdamState<T>& state, double lr,
                 const TrainConfig& config);

// ---- data and loop -----------------------------------------------------------

/// Seeded random windows of seq_len + 1 ids from a corpus.
class BatchSampler {
 public:
  BatchSampler(std::span<const TokenId> corpus, std::size_t batch, std::size_t seq_len,
               std::uint64_t seed);
  Batch next();

 private:
  std::span<const TokenId> corpus_;
  std::size_t batch_, seq_len_;
  std::mt19937_64 rng_;
};

/// A byte corpus repeating a seeded random pattern of `period` ids.
std::vector<TokenId> pattern_corpus(std::size_t length, std::size_t period, std::size_t vocab,
                                    std::uint64_t seed);

struct TrainStep {
  std::size_t step = 0;
  double lr = 0.0;
  LossBreakdown loss;
  double grad_norm = 0.0;
};

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  std::vector<TrainStep> trace;
  LossBreakdown initial_eval;  // fixed held-out batch, before training
  LossBreakdown final_eval;    // same batch, after training
};

struct TrainOutputs {
  std::filesystem::path checkpoint;  // empty: not written
  std::filesystem::path loss_csv;    // empty: not written
};

/// Runs config.total_steps optimizer steps. Step s uses lr_at(s + 1).
/// Throws NumericError naming the step if a loss turns non-finite.
template <typename T>
TrainResult<T> train(ModelParams<T> params, std::span<const TokenId> corpus,
                     const TrainConfig& config, const TrainOutputs& outputs = {});

/// CSV with header step,lr,lm_loss,z_loss,balance_loss,total.
void write_loss_csv(std::ostream& out, std::span<const TrainStep> trace);

}  // namespace mole
