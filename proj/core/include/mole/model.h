// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// Transformer blocks and full-model passes for the dense, top-k MoE and
// Mixture-of-Lookup-Experts variants.
//
// Block layout (every variant):
//   h_mid = h + Attn(input_norm(h))
//   n     = post_attn_norm(h_mid)
//   h'    = h_mid + FFN_shared(n) + routed
// where `routed` is
//   dense: absent
//   moe:   sum_{j in topk(n . r)} g_j FFN_j(n)           (no shared expert)
//   mole:  sum_{j=1..N} g_j FFN_j(expert_norm(e))        (training form)
//          sum_{j=1..N} g_j lut[layer][id][j]            (lookup form)
// and e is the raw embedding row of the token at that position.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mole/kernels.h"
#include "mole/tensor.h"

namespace mole {

class LutSource;

enum class Variant : std::uint8_t { kDense = 0, kMoe = 1, kMole = 2 };

std::string_view variant_name(Variant v);
/// Parses "dense" / "moe" / "mole". Throws ValueError.
Variant parse_variant(std::string_view name);

/// Which path a MoLE model takes through its routed experts.
enum class Form : std::uint8_t { kTrain, kLut };

struct ModelConfig {
  Variant variant = Variant::kMole;
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_shared = 128;  // shared (mole) or dense FFN width; 0 for moe
  std::size_t d_routed = 128;  // routed expert width
  std::size_t n_experts = 4;
  std::size_t top_k = 0;  // moe only
  std::size_t vocab = 256;
  double rotary_fraction = 0.25;
  std::size_t max_seq = 256;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  std::size_t d_head() const { return d_model / n_heads; }
  bool has_shared() const { return d_shared > 0; }
  bool has_router() const { return variant != Variant::kDense; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct Ffn {
  Tensor<T> w_in;   // d x hidden
  Tensor<T> b_in;   // hidden
  Tensor<T> w_out;  // hidden x d
  Tensor<T> b_out;  // d

  bool empty() const { return w_in.empty(); }
  std::size_t hidden() const { return w_in.empty() ? 0 : w_in.dim(1); }
};

template <typename T>
struct LayerParams {
  Tensor<T> input_norm;      // d
  Tensor<T> attn_qkv_w;      // d x 3d
  Tensor<T> attn_qkv_b;      // 3d
  Tensor<T> attn_out_w;      // d x d
  Tensor<T> attn_out_b;      // d
  Tensor<T> post_attn_norm;  // d
  Ffn<T> shared;             // empty for moe
  std::vector<Ffn<T>> routed;  // N experts; empty for dense and after reparameterization
  Tensor<T> router;          // N x d, no bias; empty for dense
  Tensor<T> expert_norm;     // d; mole training form only
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> embedding;  // vocab x d
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm;  // d
  Tensor<T> lm_head;     // d x vocab, untied from the embedding

  /// True once routed experts were folded into lookup tables.
  bool is_lookup_form() const {
    return config.variant == Variant::kMole && !layers.empty() &&
           layers.front().routed.empty();
  }
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
};

/// Every parameter tensor in a fixed order with a stable dotted name.
template <typename T>
std::vector<NamedTensor<T>> named_tensors(ModelParams<T>& params);

template <typename T>
std::size_t parameter_count(const ModelParams<T>& params);

struct InitOptions {
  double stddev = 0.02;
  bool zero_routed = false;  // zero every routed-expert weight and bias
};

/// normal(0, stddev) projections, unit norm gains, zero biases.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed,
                           const InitOptions& options = {});

/// Zero-filled parameters with the layout `config` implies. With
/// `lookup_form` the routed experts and expert_norm are omitted.
template <typename T>
ModelParams<T> allocate_params(const ModelConfig& config, bool lookup_form = false);

/// Same-shaped parameters filled with zeros (gradient buffers, moments).
template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& params);

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params);

// ---- routing --------------------------------------------------------------

template <typename T>
struct GateResult {
  std::vector<std::uint32_t> selected;  // ascending expert indices
  std::vector<T> gates;                 // aligned with `selected`
};

/// moe: top-k by score (ties toward the lower index), softmax over the
/// selected scores. mole: softmax over all scores.
template <typename T>
GateResult<T> route_scores(std::span<const T> scores, Variant variant, std::size_t k);

template <typename T>
GateResult<T> route(const LayerParams<T>& layer, std::span<const T> h_normed,
                    Variant variant, std::size_t k);

// ---- activations kept for backprop ----------------------------------------

template <typename T>
struct FfnActs {
  Tensor<T> input;  // rows x d
  Tensor<T> pre;    // rows x hidden, before GELU
  Tensor<T> act;    // gelu(pre)
};

template <typename T>
struct AttentionActs {
  Tensor<T> input;  // h
  Tensor<T> normed;
  std::vector<T> inv_rms;
  Tensor<T> q, k, v;  // rotated q and k
  Tensor<T> probs;    // heads x T x T (causal, zero above the diagonal)
  Tensor<T> context;  // T x d, before the output projection
};

template <typename T>
struct ExpertActs {
  Tensor<T> residual;  // h_mid
  Tensor<T> normed;
  std::vector<T> inv_rms;
  FfnActs<T> shared;
  Tensor<T> router_logits;  // rows x N
  std::vector<GateResult<T>> gates;
  Tensor<T> embedded;  // raw embedding rows (mole training form)
  Tensor<T> expert_in;  // expert_norm(embedded)
  std::vector<T> expert_inv_rms;
  std::vector<std::vector<std::size_t>> expert_rows;  // rows each expert processed
  std::vector<FfnActs<T>> experts;
  std::vector<Tensor<T>> expert_out;  // |expert_rows[j]| x d
};

template <typename T>
struct ForwardActs {
  std::vector<TokenId> ids;
  Tensor<T> embedded;
  std::vector<AttentionActs<T>> attn;
  std::vector<ExpertActs<T>> experts;
  Tensor<T> final_input;
  Tensor<T> final_normed;
  std::vector<T> final_inv_rms;
};

/// Per-layer record of a forward pass (verification, offload accounting).
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> hidden;  // block outputs
  std::vector<std::vector<GateResult<T>>> gates;
};

// ---- incremental decoding -------------------------------------------------

template <typename T>
struct KvCache {
  std::vector<T> keys;    // position-major, d values per position
  std::vector<T> values;
};

template <typename T>
class DecodeState {
 public:
  explicit DecodeState(const ModelConfig& config)
      : d_model_(config.d_model), caches_(config.n_layers) {}

  /// Number of positions already processed.
  std::size_t position() const {
    return caches_.empty() ? ids_.size() : caches_.front().keys.size() / d_model_;
  }
  KvCache<T>& cache(std::size_t layer) { return caches_.at(layer); }
  const std::vector<TokenId>& ids() const { return ids_; }
  std::vector<TokenId>& ids() { return ids_; }
  std::vector<TokenId>& generated() { return generated_; }
  const std::vector<TokenId>& generated() const { return generated_; }

 private:
  std::size_t d_model_;
  std::vector<KvCache<T>> caches_;
  std::vector<TokenId> ids_;
  std::vector<TokenId> generated_;
};

// ---- operations -----------------------------------------------------------

/// Rows of the embedding matrix. Throws ValueError for ids >= vocab.
template <typename T>
Tensor<T> embed(const ModelParams<T>& params, std::span<const TokenId> ids);

/// h + Attn(input_norm(h)) over the rows of `h`, which occupy the positions
/// following whatever `cache` already holds. A null cache means a fresh
/// sequence. New keys/values are appended to the cache.
template <typename T>
Tensor<T> attention_forward(const ModelConfig& config, const LayerParams<T>& layer,
                            const Tensor<T>& h, KvCache<T>* cache = nullptr,
                            AttentionActs<T>* acts = nullptr);

/// What the routed experts consume for each row.
template <typename T>
struct ExpertInput {
  const Tensor<T>* embedded = nullptr;      // mole training form: rows x d
  const Tensor<float>* lut_rows = nullptr;  // mole lookup form: rows x N x d
};

/// Post-attention sub-layer over independent rows (positions or lanes).
template <typename T>
Tensor<T> expert_sublayer(const ModelConfig& config, const LayerParams<T>& layer,
                          const Tensor<T>& h_mid, const ExpertInput<T>& input,
                          ExpertActs<T>* acts = nullptr,
                          std::vector<GateResult<T>>* gates_out = nullptr);

/// Single-vector forms of the expert sub-layer.
template <typename T>
std::vector<T> moe_layer_forward(const ModelConfig& config, const LayerParams<T>& layer,
                                 std::span<const T> h);
template <typename T>
std::vector<T> mole_layer_forward_train(const ModelConfig& config,
                                        const LayerParams<T>& layer,
                                        std::span<const T> h, std::span<const T> e);
template <typename T>
std::vector<T> mole_layer_forward_infer(const ModelConfig& config,
                                        const LayerParams<T>& layer,
                                        std::span<const T> h, const Tensor<float>& rows);

/// One FFN applied row-wise.
template <typename T>
Tensor<T> ffn_forward(const Ffn<T>& ffn, const Tensor<T>& x, FfnActs<T>* acts = nullptr);

/// embed -> blocks -> final_norm -> lm_head. Returns (T x vocab) logits.
/// `lut` is required iff form == kLut and the model is MoLE.
template <typename T>
Tensor<T> model_forward(const ModelParams<T>& params, std::span<const TokenId> ids,
                        Form form, const LutSource* lut = nullptr,
                        ForwardTrace<T>* trace = nullptr);

/// Training-form forward that records everything backprop needs.
template <typename T>
Tensor<T> model_forward_acts(const ModelParams<T>& params, std::span<const TokenId> ids,
                             ForwardActs<T>& acts);

/// Runs `ids` through the model appending to `state`'s KV caches.
template <typename T>
Tensor<T> prefill(const ModelParams<T>& params, DecodeState<T>& state,
                  std::span<const TokenId> ids, Form form,
                  const LutSource* lut = nullptr, ForwardTrace<T>* trace = nullptr);

/// One token per lane. Per layer the lookup rows for every lane are
/// requested at layer entry and awaited after the shared expert.
template <typename T>
Tensor<T> decode_step(const ModelParams<T>& params, std::span<DecodeState<T>* const> states,
                      std::span<const TokenId> ids, Form form,
                      const LutSource* lut = nullptr, ForwardTrace<T>* trace = nullptr);

/// Index of the largest value, lowest index on ties.
template <typename T>
TokenId argmax(std::span<const T> values);

}  // namespace mole
