// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// Folding MoLE routed experts into per-layer lookup tables:
//   table[layer][i][j] = FFN_j(expert_norm_layer(embedding[i]))
// and checking that the lookup form reproduces the training form.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mole/lut_file.h"
#include "mole/lut_source.h"
#include "mole/model.h"

namespace mole {

/// Table for one MoLE layer, computed with the whole embedding matrix as a
/// single batch (chunked over the vocabulary; chunking does not change any
/// value). Throws NumericError on non-finite output.
template <typename T>
LutTable build_layer_lut(const ModelConfig& config, const LayerParams<T>& layer,
                         const Tensor<T>& embedding, std::size_t layer_index);

template <typename T>
struct InferenceBundle {
  ModelParams<T> params;  // routed experts and expert_norm removed
  std::vector<LutTable> tables;
};

/// Throws ValueError unless `params` is a training-form MoLE model.
template <typename T>
InferenceBundle<T> reparameterize(const ModelParams<T>& params);

/// Parameters dropped by reparameterize(): expert weights, expert biases and
/// expert_norm gains.
std::size_t reparam_parameter_drop(const ModelConfig& config);

/// Tables held in memory behind the LutSource interface. Transfer accounting
/// counts 4 bytes per fetched element.
class InMemoryLut final : public LutSource {
 public:
  explicit InMemoryLut(std::vector<LutTable> tables);

  LutDims dims() const override { return dims_; }
  Tensor<float> gather(std::size_t layer, std::span<const TokenId> ids) const override;
  std::uint64_t bytes_transferred() const override { return bytes_.load(); }

  const std::vector<LutTable>& tables() const { return tables_; }
  /// Writable access, used for fault injection.
  std::vector<LutTable>& tables() { return tables_; }

 private:
  std::vector<LutTable> tables_;
  LutDims dims_;
  mutable std::atomic<std::uint64_t> bytes_{0};
};

struct PromptResult {
  double max_rel_error = 0.0;  // max |lut - train| / max |train| over the logits
  bool tokens_match = true;    // argmax at every position agrees
  std::optional<std::size_t> first_bad_layer;
};

struct EquivalenceReport {
  double tolerance = 0.0;
  bool pass = true;
  double max_rel_error = 0.0;
  std::size_t worst_prompt = 0;
  std::optional<std::size_t> first_bad_layer;  // first layer over tolerance, if any
  std::vector<PromptResult> prompts;
};

/// Runs every prompt through the training form of `train_params` and the
/// lookup form of `inference_params` + `lut`; passes iff every prompt's
/// relative logit error is within `tolerance`. For failing prompts the
/// block outputs are compared layer by layer to locate the first layer whose
/// relative error exceeds the tolerance.
template <typename T>
EquivalenceReport verify_equivalence(const ModelParams<T>& train_params,
                                     const ModelParams<T>& inference_params,
                                     const LutSource& lut,
                                     std::span<const std::vector<TokenId>> prompts,
                                     double tolerance);

/// Seeded prompts with lengths uniform in [min_len, max_len].
std::vector<std::vector<TokenId>> random_prompts(std::size_t count, std::size_t vocab,
                                                 std::size_t min_len, std::size_t max_len,
                                                 std::uint64_t seed);

/// max |a - b| / max |b| (0 when both are zero).
template <typename T>
double relative_error(std::span<const T> a, std::span<const T> b);

/// Documented verification tolerance for a LUT storage dtype.
double lut_tolerance(LutDtype dtype);

}  // namespace mole
