// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "mole/model.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "mole/lut_source.h"

namespace mole {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kDense:
      return "dense";
    case Variant::kMoe:
      return "moe";
    case Variant::kMole:
      return "mole";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  if (name == "dense") return Variant::kDense;
  if (name == "moe") return Variant::kMoe;
  if (name == "mole") return Variant::kMole;
  throw ValueError("unknown variant '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const char* field, const std::string& what) {
    throw ConfigError(field, what);
  };
  if (n_layers == 0) fail("n_layers", "must be at least 1");
  if (d_model == 0) fail("d_model", "must be at least 1");
  if (n_heads == 0 || d_model % n_heads != 0) fail("n_heads", "must divide d_model");
  if (vocab < 2) fail("vocab", "must be at least 2");
  if (max_seq == 0) fail("max_seq", "must be at least 1");
  try {
    rotary_span(d_head(), rotary_fraction);
  } catch (const ValueError& e) {
    fail("rotary_fraction", e.what());
  }
  switch (variant) {
    case Variant::kDense:
      if (n_experts != 0) fail("n_experts", "dense models carry no routed experts");
      if (d_shared == 0) fail("d_shared", "dense FFN width must be at least 1");
      if (top_k != 0) fail("top_k", "dense models do not route");
      break;
    case Variant::kMoe:
      if (n_experts == 0) fail("n_experts", "must be at least 1");
      if (top_k == 0 || top_k > n_experts) fail("top_k", "must satisfy 1 <= k <= n_experts");
      if (d_routed == 0) fail("d_routed", "must be at least 1");
      if (d_shared != 0) fail("d_shared", "the MoE baseline has no shared expert");
      break;
    case Variant::kMole:
      if (n_experts == 0) fail("n_experts", "must be at least 1");
      if (top_k != 0 && top_k != n_experts) fail("top_k", "MoLE activates every expert");
      if (d_routed == 0) fail("d_routed", "must be at least 1");
      if (d_shared == 0) fail("d_shared", "MoLE needs a shared expert");
      break;
  }
}

namespace {

template <typename T>
Ffn<T> make_ffn(std::size_t d, std::size_t hidden) {
  return Ffn<T>{Tensor<T>({d, hidden}), Tensor<T>({hidden}), Tensor<T>({hidden, d}),
                Tensor<T>({d})};
}

template <typename T>
ModelParams<T> make_skeleton_impl(const ModelConfig& cfg, bool lookup_form) {
  const std::size_t d = cfg.d_model;
  ModelParams<T> p;
  p.config = cfg;
  p.embedding = Tensor<T>({cfg.vocab, d});
  p.final_norm = Tensor<T>({d});
  p.lm_head = Tensor<T>({d, cfg.vocab});
  p.layers.resize(cfg.n_layers);
  for (auto& layer : p.layers) {
    layer.input_norm = Tensor<T>({d});
    layer.attn_qkv_w = Tensor<T>({d, 3 * d});
    layer.attn_qkv_b = Tensor<T>({3 * d});
    layer.attn_out_w = Tensor<T>({d, d});
    layer.attn_out_b = Tensor<T>({d});
    layer.post_attn_norm = Tensor<T>({d});
    if (cfg.has_shared()) layer.shared = make_ffn<T>(d, cfg.d_shared);
    if (cfg.has_router()) {
      layer.router = Tensor<T>({cfg.n_experts, d});
      if (!lookup_form) {
        for (std::size_t j = 0; j < cfg.n_experts; ++j) {
          layer.routed.push_back(make_ffn<T>(d, cfg.d_routed));
        }
        if (cfg.variant == Variant::kMole) layer.expert_norm = Tensor<T>({d});
      }
    }
  }
  return p;
}

template <typename T>
void add_ffn(std::vector<NamedTensor<T>>& out, const std::string& prefix, Ffn<T>& f) {
  if (f.empty()) return;
  out.push_back({prefix + ".in.weight", &f.w_in});
  out.push_back({prefix + ".in.bias", &f.b_in});
  out.push_back({prefix + ".out.weight", &f.w_out});
  out.push_back({prefix + ".out.bias", &f.b_out});
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
void require_width(const Tensor<T>& h, std::size_t d, const char* what) {
  if (h.rank() != 2 || h.dim(1) != d) {
    throw ShapeError(std::string(what) + " must be (rows x " + std::to_string(d) +
                     "), got " + shape_string(h.shape()));
  }
}

}  // namespace

template <typename T>
ModelParams<T> allocate_params(const ModelConfig& config, bool lookup_form) {
  return make_skeleton_impl<T>(config, lookup_form);
}

template <typename T>
std::vector<NamedTensor<T>> named_tensors(ModelParams<T>& params) {
  std::vector<NamedTensor<T>> out;
  out.push_back({"embedding", &params.embedding});
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& layer = params.layers[l];
    const std::string pre = "layers." + std::to_string(l);
    out.push_back({pre + ".input_norm", &layer.input_norm});
    out.push_back({pre + ".attn.qkv.weight", &layer.attn_qkv_w});
    out.push_back({pre + ".attn.qkv.bias", &layer.attn_qkv_b});
    out.push_back({pre + ".attn.out.weight", &layer.attn_out_w});
    out.push_back({pre + ".attn.out.bias", &layer.attn_out_b});
    out.push_back({pre + ".post_attn_norm", &layer.post_attn_norm});
    add_ffn(out, pre + ".shared", layer.shared);
    if (!layer.router.empty()) out.push_back({pre + ".router.weight", &layer.router});
    for (std::size_t j = 0; j < layer.routed.size(); ++j) {
      add_ffn(out, pre + ".experts." + std::to_string(j), layer.routed[j]);
    }
    if (!layer.expert_norm.empty()) out.push_back({pre + ".expert_norm", &layer.expert_norm});
  }
  out.push_back({"final_norm", &params.final_norm});
  out.push_back({"lm_head", &params.lm_head});
  return out;
}

template <typename T>
std::size_t parameter_count(const ModelParams<T>& params) {
  std::size_t total = 0;
  for (const auto& nt : named_tensors(const_cast<ModelParams<T>&>(params))) {
    total += nt.tensor->size();
  }
  return total;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed,
                           const InitOptions& options) {
  config.validate();
  ModelParams<T> p = allocate_params<T>(config, false);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, options.stddev);
  for (auto& nt : named_tensors(p)) {
    if (ends_with(nt.name, "norm")) {
      nt.tensor->fill(T(1));
    } else if (ends_with(nt.name, ".bias")) {
      nt.tensor->fill(T(0));
    } else if (options.zero_routed && nt.name.find(".experts.") != std::string::npos) {
      nt.tensor->fill(T(0));
    } else {
      for (T& v : nt.tensor->values()) v = static_cast<T>(normal(rng));
    }
  }
  return p;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& params) {
  ModelParams<T> out = params;
  for (auto& nt : named_tensors(out)) nt.tensor->fill(T(0));
  return out;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params) {
  ModelParams<To> out = allocate_params<To>(params.config, params.is_lookup_form());
  auto src = named_tensors(const_cast<ModelParams<From>&>(params));
  auto dst = named_tensors(out);
  if (src.size() != dst.size()) throw ShapeError("parameter layouts differ");
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = tensor_cast<To>(*src[i].tensor);
  return out;
}

// ---- routing --------------------------------------------------------------

template <typename T>
GateResult<T> route_scores(std::span<const T> scores, Variant variant, std::size_t k) {
  GateResult<T> out;
  const std::size_t n = scores.size();
  if (n == 0) throw ValueError("routing needs at least one expert score");
  if (variant == Variant::kMole) {
    out.selected.resize(n);
    std::iota(out.selected.begin(), out.selected.end(), 0u);
    out.gates = softmax(scores);
    return out;
  }
  if (variant != Variant::kMoe) throw ValueError("dense layers do not route");
  if (k == 0 || k > n) throw ValueError("top-k must satisfy 1 <= k <= N");
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                    });
  out.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.selected.begin(), out.selected.end());
  std::vector<T> picked(k);
  for (std::size_t i = 0; i < k; ++i) picked[i] = scores[out.selected[i]];
  out.gates = softmax<T>(picked);
  return out;
}

template <typename T>
GateResult<T> route(const LayerParams<T>& layer, std::span<const T> h_normed,
                    Variant variant, std::size_t k) {
  if (layer.router.empty()) throw ValueError("layer has no router");
  Tensor<T> row({1, h_normed.size()}, std::vector<T>(h_normed.begin(), h_normed.end()));
  Tensor<T> scores = matmul_nt(row, layer.router);
  return route_scores<T>(scores.values(), variant, k);
}

// ---- forward pieces ---------------------------------------------------------

template <typename T>
Tensor<T> embed(const ModelParams<T>& params, std::span<const TokenId> ids) {
  const std::size_t d = params.config.d_model;
  Tensor<T> out({ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] >= params.config.vocab) {
      throw ValueError("token id " + std::to_string(ids[t]) + " out of range for vocab " +
                       std::to_string(params.config.vocab));
    }
    auto src = params.embedding.row(ids[t]);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

template <typename T>
Tensor<T> ffn_forward(const Ffn<T>& ffn, const Tensor<T>& x, FfnActs<T>* acts) {
  Tensor<T> pre = linear(x, ffn.w_in, ffn.b_in);
  Tensor<T> act = pre;
  for (T& v : act.values()) v = gelu(v);
  Tensor<T> y = linear(act, ffn.w_out, ffn.b_out);
  if (acts) {
    acts->input = x;
    acts->pre = std::move(pre);
    acts->act = std::move(act);
  }
  return y;
}

template <typename T>
Tensor<T> attention_forward(const ModelConfig& cfg, const LayerParams<T>& layer,
                            const Tensor<T>& h, KvCache<T>* cache, AttentionActs<T>* acts) {
  const std::size_t d = cfg.d_model;
  const std::size_t n_heads = cfg.n_heads;
  const std::size_t dh = cfg.d_head();
  require_width(h, d, "attention input");

  KvCache<T> local;
  KvCache<T>& kv = cache ? *cache : local;
  if (kv.keys.size() != kv.values.size() || kv.keys.size() % d != 0) {
    throw ValueError("cache/position mismatch: cache holds " +
                     std::to_string(kv.keys.size()) + " keys and " +
                     std::to_string(kv.values.size()) + " values");
  }
  const std::size_t start = kv.keys.size() / d;
  const std::size_t rows = h.dim(0);
  const std::size_t total = start + rows;
  if (total > cfg.max_seq) {
    throw ValueError("sequence length " + std::to_string(total) + " exceeds max_seq " +
                     std::to_string(cfg.max_seq));
  }

  std::vector<T> inv_rms;
  Tensor<T> x = rmsnorm_rows(h, layer.input_norm.values(), T(kNormEps), &inv_rms);
  Tensor<T> qkv = linear(x, layer.attn_qkv_w, layer.attn_qkv_b);

  Tensor<T> q({rows, d}), k({rows, d}), v({rows, d});
  for (std::size_t t = 0; t < rows; ++t) {
    auto src = qkv.row(t);
    std::copy_n(src.begin(), d, q.row(t).begin());
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(d), d, k.row(t).begin());
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(2 * d), d, v.row(t).begin());
    rotate_heads_inplace<T>(q.row(t), n_heads, dh, start + t, cfg.rotary_fraction);
    rotate_heads_inplace<T>(k.row(t), n_heads, dh, start + t, cfg.rotary_fraction);
  }
  kv.keys.insert(kv.keys.end(), k.values().begin(), k.values().end());
  kv.values.insert(kv.values.end(), v.values().begin(), v.values().end());

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> context({rows, d});
  Tensor<T> probs;
  if (acts) probs = Tensor<T>({n_heads, rows, total});
  std::vector<T> scores(total);
  for (std::size_t t = 0; t < rows; ++t) {
    const std::size_t visible = start + t + 1;
    for (std::size_t hh = 0; hh < n_heads; ++hh) {
      const T* qh = q.data() + t * d + hh * dh;
      for (std::size_t s = 0; s < visible; ++s) {
        const T* ks = kv.keys.data() + s * d + hh * dh;
        T acc = T(0);
        for (std::size_t i = 0; i < dh; ++i) acc += qh[i] * ks[i];
        scores[s] = acc * scale;
      }
      softmax_inplace<T>(std::span<T>(scores.data(), visible));
      T* out = context.data() + t * d + hh * dh;
      for (std::size_t s = 0; s < visible; ++s) {
        const T p = scores[s];
        const T* vs = kv.values.data() + s * d + hh * dh;
        for (std::size_t i = 0; i < dh; ++i) out[i] += p * vs[i];
      }
      if (acts) {
        T* prow = probs.data() + (hh * rows + t) * total;
        std::copy_n(scores.begin(), visible, prow);
      }
    }
  }

  Tensor<T> projected = linear(context, layer.attn_out_w, layer.attn_out_b);
  Tensor<T> result = h;
  for (std::size_t i = 0; i < result.size(); ++i) result[i] += projected[i];

  if (acts) {
    acts->input = h;
    acts->normed = std::move(x);
    acts->inv_rms = std::move(inv_rms);
    acts->q = std::move(q);
    acts->k = std::move(k);
    acts->v = std::move(v);
    acts->probs = std::move(probs);
    acts->context = std::move(context);
  }
  return result;
}

template <typename T>
Tensor<T> expert_sublayer(const ModelConfig& cfg, const LayerParams<T>& layer,
                          const Tensor<T>& h_mid, const ExpertInput<T>& input,
                          ExpertActs<T>* acts, std::vector<GateResult<T>>* gates_out) {
  const std::size_t d = cfg.d_model;
  require_width(h_mid, d, "expert sub-layer input");
  const std::size_t rows = h_mid.dim(0);

  std::vector<T> inv_rms;
  Tensor<T> normed = rmsnorm_rows(h_mid, layer.post_attn_norm.values(), T(kNormEps), &inv_rms);
  Tensor<T> out = h_mid;
  if (!layer.shared.empty()) {
    Tensor<T> shared = ffn_forward(layer.shared, normed, acts ? &acts->shared : nullptr);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += shared[i];
  }

  std::vector<GateResult<T>> gates;
  Tensor<T> logits;
  if (cfg.has_router()) {
    const std::size_t n_exp = cfg.n_experts;
    logits = matmul_nt(normed, layer.router);
    gates.reserve(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      gates.push_back(route_scores<T>(logits.row(r), cfg.variant, cfg.top_k));
    }
    Tensor<T> routed({rows, d});

    if (cfg.variant == Variant::kMole && input.lut_rows) {
      const Tensor<float>& lut = *input.lut_rows;
      if (lut.shape() != Shape{rows, n_exp, d}) {
        throw ShapeError("lookup rows must be " + shape_string({rows, n_exp, d}) + ", got " +
                         shape_string(lut.shape()));
      }
      for (std::size_t r = 0; r < rows; ++r) {
        T* acc = routed.data() + r * d;
        for (std::size_t j = 0; j < n_exp; ++j) {
          const T g = gates[r].gates[j];
          const float* src = lut.data() + (r * n_exp + j) * d;
          for (std::size_t i = 0; i < d; ++i) acc[i] += g * static_cast<T>(src[i]);
        }
      }
    } else if (cfg.variant == Variant::kMole) {
      if (layer.routed.empty()) {
        throw ValueError("lookup-form parameters need a LUT to evaluate routed experts");
      }
      if (!input.embedded) throw ValueError("MoLE training form needs embedding rows");
      require_width(*input.embedded, d, "embedding rows");
      if (input.embedded->dim(0) != rows) throw ShapeError("embedding rows vs hidden rows");
      std::vector<T> e_inv;
      Tensor<T> expert_in =
          rmsnorm_rows(*input.embedded, layer.expert_norm.values(), T(kNormEps), &e_inv);
      std::vector<Tensor<T>> outputs(n_exp);
      if (acts) acts->experts.resize(n_exp);
      for (std::size_t j = 0; j < n_exp; ++j) {
        outputs[j] = ffn_forward(layer.routed[j], expert_in, acts ? &acts->experts[j] : nullptr);
      }
      for (std::size_t r = 0; r < rows; ++r) {
        T* acc = routed.data() + r * d;
        for (std::size_t j = 0; j < n_exp; ++j) {
          const T g = gates[r].gates[j];
          const T* src = outputs[j].data() + r * d;
          for (std::size_t i = 0; i < d; ++i) acc[i] += g * src[i];
        }
      }
      if (acts) {
        acts->embedded = *input.embedded;
        acts->expert_in = std::move(expert_in);
        acts->expert_inv_rms = std::move(e_inv);
        acts->expert_rows.assign(n_exp, std::vector<std::size_t>(rows));
        for (auto& v : acts->expert_rows) std::iota(v.begin(), v.end(), std::size_t{0});
        acts->expert_out = std::move(outputs);
      }
    } else {
      // Sparse top-k: each expert runs only on the rows routed to it.
      std::vector<std::vector<std::size_t>> expert_rows(n_exp);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::uint32_t j : gates[r].selected) expert_rows[j].push_back(r);
      }
      std::vector<Tensor<T>> outputs(n_exp);
      std::vector<std::vector<std::size_t>> slot(n_exp, std::vector<std::size_t>(rows, 0));
      if (acts) acts->experts.resize(n_exp);
      for (std::size_t j = 0; j < n_exp; ++j) {
        if (expert_rows[j].empty()) continue;
        Tensor<T> x({expert_rows[j].size(), d});
        for (std::size_t s = 0; s < expert_rows[j].size(); ++s) {
          const std::size_t r = expert_rows[j][s];
          slot[j][r] = s;
          auto src = normed.row(r);
          std::copy(src.begin(), src.end(), x.row(s).begin());
        }
        outputs[j] = ffn_forward(layer.routed[j], x, acts ? &acts->experts[j] : nullptr);
      }
      for (std::size_t r = 0; r < rows; ++r) {
        T* acc = routed.data() + r * d;
        const auto& gr = gates[r];
        for (std::size_t s = 0; s < gr.selected.size(); ++s) {
          const std::uint32_t j = gr.selected[s];
          const T g = gr.gates[s];
          const T* src = outputs[j].data() + slot[j][r] * d;
          for (std::size_t i = 0; i < d; ++i) acc[i] += g * src[i];
        }
      }
      if (acts) {
        acts->expert_rows = std::move(expert_rows);
        acts->expert_out = std::move(outputs);
      }
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += routed[i];
  }

  if (acts) {
    acts->residual = h_mid;
    acts->normed = std::move(normed);
    acts->inv_rms = std::move(inv_rms);
    acts->router_logits = std::move(logits);
    acts->gates = gates;
  }
  if (gates_out) *gates_out = std::move(gates);
  return out;
}

template <typename T>
std::vector<T> moe_layer_forward(const ModelConfig& config, const LayerParams<T>& layer,
                                 std::span<const T> h) {
  if (config.variant != Variant::kMoe) throw ValueError("moe_layer_forward needs a MoE config");
  Tensor<T> row({1, h.size()}, std::vector<T>(h.begin(), h.end()));
  Tensor<T> out = expert_sublayer(config, layer, row, ExpertInput<T>{});
  return {out.values().begin(), out.values().end()};
}

template <typename T>
std::vector<T> mole_layer_forward_train(const ModelConfig& config, const LayerParams<T>& layer,
                                        std::span<const T> h, std::span<const T> e) {
  if (config.variant != Variant::kMole) {
    throw ValueError("mole_layer_forward_train needs a MoLE config");
  }
  Tensor<T> row({1, h.size()}, std::vector<T>(h.begin(), h.end()));
  Tensor<T> emb({1, e.size()}, std::vector<T>(e.begin(), e.end()));
  ExpertInput<T> in;
  in.embedded = &emb;
  Tensor<T> out = expert_sublayer(config, layer, row, in);
  return {out.values().begin(), out.values().end()};
}

template <typename T>
std::vector<T> mole_layer_forward_infer(const ModelConfig& config, const LayerParams<T>& layer,
                                        std::span<const T> h, const Tensor<float>& rows) {
  if (config.variant != Variant::kMole) {
    throw ValueError("mole_layer_forward_infer needs a MoLE config");
  }
  if (rows.rank() != 2 || rows.dim(0) != config.n_experts || rows.dim(1) != config.d_model) {
    throw ShapeError("expected " + std::to_string(config.n_experts) + " lookup rows of width " +
                     std::to_string(config.d_model) + ", got " + shape_string(rows.shape()));
  }
  Tensor<T> row({1, h.size()}, std::vector<T>(h.begin(), h.end()));
  Tensor<float> lut({1, config.n_experts, config.d_model},
                    std::vector<float>(rows.values().begin(), rows.values().end()));
  ExpertInput<T> in;
  in.lut_rows = &lut;
  Tensor<T> out = expert_sublayer(config, layer, row, in);
  return {out.values().begin(), out.values().end()};
}

// ---- whole-model passes ---------------------------------------------------

namespace {

template <typename T>
bool wants_lookup(const ModelParams<T>& params, Form form, const LutSource* lut) {
  const ModelConfig& cfg = params.config;
  if (cfg.variant != Variant::kMole) return false;
  if (form == Form::kTrain) {
    if (params.is_lookup_form()) {
      throw ValueError("re-parameterized parameters cannot run the training form");
    }
    return false;
  }
  if (!lut) throw ValueError("the lookup form of a MoLE model requires a LUT");
  const LutDims dims = lut->dims();
  if (dims != LutDims{cfg.n_layers, cfg.vocab, cfg.n_experts, cfg.d_model}) {
    throw ShapeError("LUT dimensions do not match the model configuration");
  }
  return true;
}

template <typename T>
Tensor<T> head(const ModelParams<T>& params, const Tensor<T>& h, ForwardActs<T>* acts) {
  std::vector<T> inv;
  Tensor<T> normed = rmsnorm_rows(h, params.final_norm.values(), T(kNormEps), &inv);
  Tensor<T> logits = matmul(normed, params.lm_head);
  if (acts) {
    acts->final_input = h;
    acts->final_normed = std::move(normed);
    acts->final_inv_rms = std::move(inv);
  }
  return logits;
}

template <typename T>
Tensor<T> run_sequence(const ModelParams<T>& params, std::span<const TokenId> ids, Form form,
                       const LutSource* lut, ForwardTrace<T>* trace, ForwardActs<T>* acts,
                       DecodeState<T>* state) {
  const ModelConfig& cfg = params.config;
  if (ids.empty()) throw ValueError("forward pass over an empty id sequence");
  const bool use_lut = wants_lookup(params, form, lut);
  Tensor<T> h = embed(params, ids);
  Tensor<T> embedded;
  if (cfg.variant == Variant::kMole && !use_lut) embedded = h;
  if (acts) {
    acts->ids.assign(ids.begin(), ids.end());
    acts->embedded = h;
    acts->attn.assign(cfg.n_layers, {});
    acts->experts.assign(cfg.n_layers, {});
  }
  if (trace) {
    trace->hidden.clear();
    trace->gates.clear();
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& layer = params.layers[l];
    FetchTicket ticket;
    if (use_lut) ticket = lut->prefetch(l, ids);
    Tensor<T> h_mid = attention_forward(cfg, layer, h, state ? &state->cache(l) : nullptr,
                                        acts ? &acts->attn[l] : nullptr);
    ExpertInput<T> in;
    Tensor<float> rows;
    if (use_lut) {
      rows = ticket.await();
      in.lut_rows = &rows;
    } else if (cfg.variant == Variant::kMole) {
      in.embedded = &embedded;
    }
    std::vector<GateResult<T>> gates;
    h = expert_sublayer(cfg, layer, h_mid, in, acts ? &acts->experts[l] : nullptr,
                        trace ? &gates : nullptr);
    if (trace) {
      trace->hidden.push_back(h);
      trace->gates.push_back(std::move(gates));
    }
  }
  if (state) state->ids().insert(state->ids().end(), ids.begin(), ids.end());
  return head(params, h, acts);
}

}  // namespace

template <typename T>
Tensor<T> model_forward(const ModelParams<T>& params, std::span<const TokenId> ids, Form form,
                        const LutSource* lut, ForwardTrace<T>* trace) {
  return run_sequence<T>(params, ids, form, lut, trace, nullptr, nullptr);
}

template <typename T>
Tensor<T> model_forward_acts(const ModelParams<T>& params, std::span<const TokenId> ids,
                             ForwardActs<T>& acts) {
  return run_sequence<T>(params, ids, Form::kTrain, nullptr, nullptr, &acts, nullptr);
}

template <typename T>
Tensor<T> prefill(const ModelParams<T>& params, DecodeState<T>& state,
                  std::span<const TokenId> ids, Form form, const LutSource* lut,
                  ForwardTrace<T>* trace) {
  return run_sequence<T>(params, ids, form, lut, trace, nullptr, &state);
}

template <typename T>
Tensor<T> decode_step(const ModelParams<T>& params, std::span<DecodeState<T>* const> states,
                      std::span<const TokenId> ids, Form form, const LutSource* lut,
                      ForwardTrace<T>* trace) {
  const ModelConfig& cfg = params.config;
  if (states.size() != ids.size() || ids.empty()) {
    throw ValueError("decode_step needs one id per lane");
  }
  const std::size_t lanes = ids.size();
  const std::size_t d = cfg.d_model;
  const bool use_lut = wants_lookup(params, form, lut);
  Tensor<T> h = embed(params, ids);
  Tensor<T> embedded;
  if (cfg.variant == Variant::kMole && !use_lut) embedded = h;
  if (trace) {
    trace->hidden.clear();
    trace->gates.clear();
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& layer = params.layers[l];
    FetchTicket ticket;
    if (use_lut) ticket = lut->prefetch(l, ids);
    Tensor<T> h_mid({lanes, d});
    for (std::size_t b = 0; b < lanes; ++b) {
      auto src = h.row(b);
      Tensor<T> lane({1, d}, std::vector<T>(src.begin(), src.end()));
      Tensor<T> mid = attention_forward(cfg, layer, lane, &states[b]->cache(l));
      std::copy(mid.values().begin(), mid.values().end(), h_mid.row(b).begin());
    }
    ExpertInput<T> in;
    Tensor<float> rows;
    if (use_lut) {
      rows = ticket.await();
      in.lut_rows = &rows;
    } else if (cfg.variant == Variant::kMole) {
      in.embedded = &embedded;
    }
    std::vector<GateResult<T>> gates;
    h = expert_sublayer<T>(cfg, layer, h_mid, in, nullptr, trace ? &gates : nullptr);
    if (trace) {
      trace->hidden.push_back(h);
      trace->gates.push_back(std::move(gates));
    }
  }
  for (std::size_t b = 0; b < lanes; ++b) states[b]->ids().push_back(ids[b]);
  return head<T>(params, h, nullptr);
}

template <typename T>
TokenId argmax(std::span<const T> values) {
  if (values.empty()) throw ValueError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

#define MOLE_INSTANTIATE_MODEL(T)                                                            \
  template std::vector<NamedTensor<T>> named_tensors(ModelParams<T>&);                       \
  template std::size_t parameter_count(const ModelParams<T>&);                               \
  template ModelParams<T> allocate_params(const ModelConfig&, bool);                         \
  template ModelParams<T> init_params(const ModelConfig&, std::uint64_t, const InitOptions&); \
  template ModelParams<T> zeros_like(const ModelParams<T>&);                                 \
  template GateResult<T> route_scores(std::span<const T>, Variant, std::size_t);             \
  template GateResult<T> route(const LayerParams<T>&, std::span<const T>, Variant,           \
                               std::size_t);                                                 \
  template Tensor<T> embed(const ModelParams<T>&, std::span<const TokenId>);                 \
  template Tensor<T> ffn_forward(const Ffn<T>&, const Tensor<T>&, FfnActs<T>*);              \
  template Tensor<T> attention_forward(const ModelConfig&, const LayerParams<T>&,            \
                                       const Tensor<T>&, KvCache<T>*, AttentionActs<T>*);    \
  template Tensor<T> expert_sublayer(const ModelConfig&, const LayerParams<T>&,              \
                                     const Tensor<T>&, const ExpertInput<T>&,                \
                                     ExpertActs<T>*, std::vector<GateResult<T>>*);           \
  template std::vector<T> moe_layer_forward(const ModelConfig&, const LayerParams<T>&,       \
                                            std::span<const T>);                             \
  template std::vector<T> mole_layer_forward_train(const ModelConfig&, const LayerParams<T>&, \
                                                   std::span<const T>, std::span<const T>);  \
  template std::vector<T> mole_layer_forward_infer(const ModelConfig&, const LayerParams<T>&, \
                                                   std::span<const T>, const Tensor<float>&); \
  template Tensor<T> model_forward(const ModelParams<T>&, std::span<const TokenId>, Form,    \
                                   const LutSource*, ForwardTrace<T>*);                      \
  template Tensor<T> model_forward_acts(const ModelParams<T>&, std::span<const TokenId>,     \
                                        ForwardActs<T>&);                                    \
  template Tensor<T> prefill(const ModelParams<T>&, DecodeState<T>&,                         \
                             std::span<const TokenId>, Form, const LutSource*,               \
                             ForwardTrace<T>*);                                              \
  template Tensor<T> decode_step(const ModelParams<T>&, std::span<DecodeState<T>* const>,    \
                                 std::span<const TokenId>, Form, const LutSource*,           \
                                 ForwardTrace<T>*);                                          \
  template TokenId argmax(std::span<const T>);

MOLE_INSTANTIATE_MODEL(float)
MOLE_INSTANTIATE_MODEL(double)

template ModelParams<double> cast_params(const ModelParams<float>&);
template ModelParams<float> cast_params(const ModelParams<double>&);
template ModelParams<float> cast_params(const ModelParams<float>&);
template ModelParams<double> cast_params(const ModelParams<double>&);

#undef MOLE_INSTANTIATE_MODEL

}  // namespace mole
