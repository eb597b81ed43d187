// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "mole/reparam.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "mole/nf_quant.h"

namespace mole {

namespace {

constexpr std::size_t kVocabChunk = 1024;

}  // namespace

template <typename T>
LutTable build_layer_lut(const ModelConfig& config, const LayerParams<T>& layer,
                         const Tensor<T>& embedding, std::size_t layer_index) {
  if (config.variant != Variant::kMole) throw ValueError("LUTs exist only for MoLE layers");
  if (layer.routed.size() != config.n_experts || layer.expert_norm.empty()) {
    throw ValueError("layer " + std::to_string(layer_index) + " has no routed experts to fold");
  }
  const std::size_t vocab = config.vocab;
  const std::size_t n_exp = config.n_experts;
  const std::size_t d = config.d_model;
  if (embedding.shape() != Shape{vocab, d}) {
    throw ShapeError("embedding must be " + shape_string({vocab, d}) + ", got " +
                     shape_string(embedding.shape()));
  }
  LutTable table;
  table.layer = layer_index;
  table.values = Tensor<float>({vocab, n_exp, d});
  for (std::size_t start = 0; start < vocab; start += kVocabChunk) {
    const std::size_t rows = std::min(kVocabChunk, vocab - start);
    Tensor<T> chunk({rows, d});
    std::copy_n(embedding.data() + start * d, rows * d, chunk.data());
    const Tensor<T> normed = rmsnorm_rows(chunk, layer.expert_norm.values(), T(kNormEps));
    for (std::size_t j = 0; j < n_exp; ++j) {
      const Tensor<T> out = ffn_forward(layer.routed[j], normed);
      for (std::size_t r = 0; r < rows; ++r) {
        float* dst = table.values.data() + ((start + r) * n_exp + j) * d;
        const T* src = out.data() + r * d;
        for (std::size_t i = 0; i < d; ++i) dst[i] = static_cast<float>(src[i]);
      }
    }
  }
  if (!table.values.all_finite()) {
    throw NumericError("LUT for layer " + std::to_string(layer_index) +
                       " contains non-finite values");
  }
  return table;
}

template <typename T>
InferenceBundle<T> reparameterize(const ModelParams<T>& params) {
  if (params.config.variant != Variant::kMole) {
    throw ValueError("only MoLE models can be re-parameterized (got " +
                     std::string(variant_name(params.config.variant)) + ")");
  }
  if (params.is_lookup_form()) throw ValueError("model is already in lookup form");
  InferenceBundle<T> out;
  out.tables.reserve(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    out.tables.push_back(build_layer_lut(params.config, params.layers[l], params.embedding, l));
  }
  out.params = params;
  for (auto& layer : out.params.layers) {
    layer.routed.clear();
    layer.expert_norm = Tensor<T>();
  }
  return out;
}

std::size_t reparam_parameter_drop(const ModelConfig& c) {
  if (c.variant != Variant::kMole) return 0;
  const std::size_t per_expert = 2 * c.d_model * c.d_routed + c.d_routed + c.d_model;
  return c.n_layers * (c.n_experts * per_expert + c.d_model);
}

InMemoryLut::InMemoryLut(std::vector<LutTable> tables) : tables_(std::move(tables)) {
  if (tables_.empty()) throw ValueError("an in-memory LUT needs at least one table");
  const Shape& s = tables_.front().values.shape();
  if (s.size() != 3) throw ShapeError("LUT tables must be (vocab x N x d)");
  for (std::size_t l = 0; l < tables_.size(); ++l) {
    if (tables_[l].values.shape() != s) throw ShapeError("LUT tables from different models");
  }
  dims_ = LutDims{tables_.size(), s[0], s[1], s[2]};
}

Tensor<float> InMemoryLut::gather(std::size_t layer, std::span<const TokenId> ids) const {
  check_request(layer, ids);
  const std::size_t width = dims_.n_experts * dims_.d_model;
  Tensor<float> out({ids.size(), dims_.n_experts, dims_.d_model});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    auto src = tables_[layer].values.row(ids[r]);
    std::copy(src.begin(), src.end(), out.data() + r * width);
  }
  bytes_.fetch_add(ids.size() * width * sizeof(float));
  return out;
}

template <typename T>
double relative_error(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("relative_error over tensors of different sizes");
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    ref = std::max(ref, std::abs(static_cast<double>(b[i])));
  }
  if (ref == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / ref;
}

template <typename T>
EquivalenceReport verify_equivalence(const ModelParams<T>& train_params,
                                     const ModelParams<T>& inference_params,
                                     const LutSource& lut,
                                     std::span<const std::vector<TokenId>> prompts,
                                     double tolerance) {
  const ModelConfig& cfg = train_params.config;
  if (!(cfg == inference_params.config)) {
    throw ShapeError("training and inference parameters describe different models");
  }
  EquivalenceReport report;
  report.tolerance = tolerance;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    ForwardTrace<T> ref_trace, lut_trace;
    const Tensor<T> ref = model_forward<T>(train_params, prompts[p], Form::kTrain, nullptr,
                                           &ref_trace);
    const Tensor<T> got = model_forward<T>(inference_params, prompts[p], Form::kLut, &lut,
                                           &lut_trace);
    if (ref.shape() != got.shape()) throw ShapeError("forms produced logits of different shapes");
    PromptResult r;
    r.max_rel_error = relative_error<T>(got.values(), ref.values());
    for (std::size_t t = 0; t < ref.dim(0); ++t) {
      if (argmax<T>(ref.row(t)) != argmax<T>(got.row(t))) r.tokens_match = false;
    }
    if (!(r.max_rel_error <= tolerance)) {
      report.pass = false;
      for (std::size_t l = 0; l < ref_trace.hidden.size(); ++l) {
        const double e =
            relative_error<T>(lut_trace.hidden[l].values(), ref_trace.hidden[l].values());
        if (!(e <= tolerance)) {
          r.first_bad_layer = l;
          break;
        }
      }
      if (r.first_bad_layer &&
          (!report.first_bad_layer || *r.first_bad_layer < *report.first_bad_layer)) {
        report.first_bad_layer = r.first_bad_layer;
      }
    }
    if (r.max_rel_error > report.max_rel_error || std::isnan(r.max_rel_error)) {
      report.max_rel_error = r.max_rel_error;
      report.worst_prompt = p;
    }
    report.prompts.push_back(r);
  }
  return report;
}

std::vector<std::vector<TokenId>> random_prompts(std::size_t count, std::size_t vocab,
                                                 std::size_t min_len, std::size_t max_len,
                                                 std::uint64_t seed) {
  if (min_len == 0 || min_len > max_len || vocab == 0) {
    throw ValueError("random_prompts needs 1 <= min_len <= max_len and a vocabulary");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(vocab - 1));
  std::vector<std::vector<TokenId>> out(count);
  for (auto& p : out) {
    p.resize(len(rng));
    for (auto& id : p) id = tok(rng);
  }
  return out;
}

double lut_tolerance(LutDtype dtype) {
  switch (dtype) {
    case LutDtype::kF32:
      return 1e-5;
    case LutDtype::kF16:
      return 1e-3;
    case LutDtype::kNF4:
      return codebook_max_gap(4) / 2.0;
    case LutDtype::kNF3:
      return codebook_max_gap(3) / 2.0;
  }
  throw ValueError("unknown LUT dtype");
}

#define MOLE_INSTANTIATE_REPARAM(T)                                                      \
  template LutTable build_layer_lut(const ModelConfig&, const LayerParams<T>&,           \
                                    const Tensor<T>&, std::size_t);                      \
  template InferenceBundle<T> reparameterize(const ModelParams<T>&);                     \
  template double relative_error(std::span<const T>, std::span<const T>);                \
  template EquivalenceReport verify_equivalence(const ModelParams<T>&,                   \
                                                const ModelParams<T>&, const LutSource&, \
                                                std::span<const std::vector<TokenId>>,   \
                                                double);

MOLE_INSTANTIATE_REPARAM(float)
MOLE_INSTANTIATE_REPARAM(double)

}  // namespace mole
