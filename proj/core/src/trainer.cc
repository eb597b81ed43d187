// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "mole/trainer.h"

#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>
#include <string>

#include "mole/checkpoint.h"

namespace mole {

void TrainConfig::validate() const {
  auto fail = [](const char* field, const std::string& what) { throw ConfigError(field, what); };
  if (!(peak_lr >= 0.0) || !std::isfinite(peak_lr)) fail("peak_lr", "must be finite and >= 0");
  if (!(min_lr_fraction >= 0.0 && min_lr_fraction <= 1.0)) {
    fail("min_lr_fraction", "must lie in [0, 1]");
  }
  if (!(betas.first > 0.0 && betas.first < 1.0)) fail("betas", "beta1 must lie in (0, 1)");
  if (!(betas.second > 0.0 && betas.second < 1.0)) fail("betas", "beta2 must lie in (0, 1)");
  if (!(eps > 0.0)) fail("eps", "must be > 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (!(grad_clip > 0.0)) fail("grad_clip", "must be > 0");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    fail("warmup_fraction", "must lie in (0, 1)");
  }
  if (total_steps == 0) fail("total_steps", "must be at least 1");
  if (batch == 0) fail("batch", "must be at least 1");
  if (seq_len == 0) fail("seq_len", "must be at least 1");
  if (!(z_loss_coeff >= 0.0)) fail("z_loss_coeff", "must be >= 0");
  if (!(balance_loss_coeff >= 0.0)) fail("balance_loss_coeff", "must be >= 0");
}

// ---- losses ------------------------------------------------------------------

namespace {

template <typename T>
double row_logsumexp(std::span<const T> row) {
  double m = static_cast<double>(row[0]);
  for (T v : row) m = std::max(m, static_cast<double>(v));
  double s = 0.0;
  for (T v : row) s += std::exp(static_cast<double>(v) - m);
  return m + std::log(s);
}

void check_target(TokenId id, std::size_t vocab) {
  if (id >= vocab) {
    throw ValueError("target id " + std::to_string(id) + " out of range for vocab " +
                     std::to_string(vocab));
  }
}

}  // namespace

template <typename T>
T lm_loss(const Tensor<T>& logits, std::span<const TokenId> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeError("lm_loss needs one target per logits row");
  }
  if (targets.empty()) throw ValueError("lm_loss over zero positions");
  double total = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    check_target(targets[t], logits.dim(1));
    total += row_logsumexp(logits.row(t)) - static_cast<double>(logits.at(t, targets[t]));
  }
  return static_cast<T>(total / static_cast<double>(targets.size()));
}

template <typename T>
T balance_loss(const Tensor<T>& router_probs,
               std::span<const std::vector<std::uint32_t>> selections, std::size_t n_experts,
               std::size_t top_k) {
  if (top_k == 0) throw ValueError("balance loss applies to top-k (MoE) routing only");
  if (router_probs.rank() != 2 || router_probs.dim(1) != n_experts ||
      router_probs.dim(0) != selections.size() || selections.empty()) {
    throw ShapeError("balance loss needs (T x N) probabilities and T selections");
  }
  const double rows = static_cast<double>(selections.size());
  std::vector<double> count(n_experts, 0.0), mean_p(n_experts, 0.0);
  for (std::size_t r = 0; r < selections.size(); ++r) {
    for (std::uint32_t j : selections[r]) {
      if (j >= n_experts) throw ValueError("selected expert out of range");
      count[j] += 1.0;
    }
    for (std::size_t j = 0; j < n_experts; ++j) mean_p[j] += router_probs.at(r, j);
  }
  double loss = 0.0;
  for (std::size_t j = 0; j < n_experts; ++j) {
    loss += (count[j] / (rows * static_cast<double>(top_k))) * (mean_p[j] / rows);
  }
  return static_cast<T>(static_cast<double>(n_experts) * loss);
}

template <typename T>
T z_loss(const Tensor<T>& router_logits) {
  if (router_logits.rank() != 2 || router_logits.dim(0) == 0) {
    throw ShapeError("z_loss needs a non-empty (T x N) matrix");
  }
  double total = 0.0;
  for (std::size_t r = 0; r < router_logits.dim(0); ++r) {
    const double z = row_logsumexp(router_logits.row(r));
    total += z * z;
  }
  return static_cast<T>(total / static_cast<double>(router_logits.dim(0)));
}

// ---- forward over a batch ------------------------------------------------------

namespace {

template <typename T>
struct BatchPass {
  std::vector<ForwardActs<T>> acts;
  std::vector<Tensor<T>> dlogits;                 // [b] (T x vocab), only with gradients
  std::vector<std::vector<Tensor<T>>> router_dz;  // [b][layer] (T x N), aux terms only
  LossBreakdown loss;
};

template <typename T>
void check_batch(const ModelParams<T>& params, const Batch& batch) {
  if (batch.inputs.empty() || batch.inputs.size() != batch.targets.size()) {
    throw ValueError("batch needs matching, non-empty inputs and targets");
  }
  for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
    if (batch.inputs[b].size() != batch.targets[b].size() || batch.inputs[b].empty()) {
      throw ValueError("batch sequence " + std::to_string(b) + " has mismatched targets");
    }
    for (TokenId id : batch.targets[b]) check_target(id, params.config.vocab);
  }
}

template <typename T>
BatchPass<T> run_batch(const ModelParams<T>& params, const Batch& batch,
                       const TrainConfig& tc, bool want_grad) {
  check_batch(params, batch);
  const ModelConfig& cfg = params.config;
  const std::size_t B = batch.inputs.size();
  std::size_t positions = 0;
  for (const auto& s : batch.inputs) positions += s.size();
  const double inv_pos = 1.0 / static_cast<double>(positions);

  BatchPass<T> pass;
  pass.acts.resize(B);
  if (want_grad) pass.dlogits.resize(B);
  double lm = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    Tensor<T> logits = model_forward_acts<T>(params, batch.inputs[b], pass.acts[b]);
    const auto& targets = batch.targets[b];
    for (std::size_t t = 0; t < targets.size(); ++t) {
      auto row = logits.row(t);
      const double lse = row_logsumexp<T>(row);
      lm += lse - static_cast<double>(row[targets[t]]);
      if (want_grad) {
        for (T& v : row) v = static_cast<T>(std::exp(static_cast<double>(v) - lse) * inv_pos);
        row[targets[t]] -= static_cast<T>(inv_pos);
      }
    }
    if (want_grad) pass.dlogits[b] = std::move(logits);
  }
  pass.loss.lm = lm * inv_pos;
  pass.loss.total = pass.loss.lm;

  if (cfg.variant != Variant::kMoe) return pass;

  // Router z-loss and load balance, summed over layers.
  const std::size_t N = cfg.n_experts;
  const bool z_on = tc.z_loss_coeff != 0.0;
  const bool bal_on = tc.balance_loss_coeff != 0.0;
  if (want_grad && (z_on || bal_on)) {
    pass.router_dz.assign(B, std::vector<Tensor<T>>(cfg.n_layers));
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    std::vector<double> count(N, 0.0), mean_p(N, 0.0);
    double z_sum = 0.0;
    std::vector<std::vector<std::vector<double>>> probs(B);
    std::vector<std::vector<double>> lses(B);
    for (std::size_t b = 0; b < B; ++b) {
      const ExpertActs<T>& ea = pass.acts[b].experts[l];
      const std::size_t rows = ea.router_logits.dim(0);
      probs[b].resize(rows);
      lses[b].resize(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        auto z = ea.router_logits.row(r);
        const double lse = row_logsumexp<T>(z);
        lses[b][r] = lse;
        z_sum += lse * lse;
        probs[b][r].resize(N);
        for (std::size_t j = 0; j < N; ++j) {
          probs[b][r][j] = std::exp(static_cast<double>(z[j]) - lse);
          mean_p[j] += probs[b][r][j];
        }
        for (std::uint32_t j : ea.gates[r].selected) count[j] += 1.0;
      }
    }
    const double z_l = z_sum * inv_pos;
    double bal_l = 0.0;
    std::vector<double> f(N);
    for (std::size_t j = 0; j < N; ++j) {
      f[j] = count[j] * inv_pos / static_cast<double>(cfg.top_k);
      bal_l += f[j] * mean_p[j] * inv_pos;
    }
    bal_l *= static_cast<double>(N);
    pass.loss.z += z_l;
    pass.loss.balance += bal_l;

    if (!want_grad || !(z_on || bal_on)) continue;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t rows = probs[b].size();
      Tensor<T> dz({rows, N});
      for (std::size_t r = 0; r < rows; ++r) {
        const auto& p = probs[b][r];
        std::vector<double> g(N, 0.0);
        if (z_on) {
          const double c = tc.z_loss_coeff * 2.0 * lses[b][r] * inv_pos;
          for (std::size_t j = 0; j < N; ++j) g[j] += c * p[j];
        }
        if (bal_on) {
          // d/dp_j of coeff * N * sum f_j * mean(p_j), pushed through the softmax.
          double dot = 0.0;
          std::vector<double> a(N);
          for (std::size_t j = 0; j < N; ++j) {
            a[j] = tc.balance_loss_coeff * static_cast<double>(N) * f[j] * inv_pos;
            dot += p[j] * a[j];
          }
          for (std::size_t j = 0; j < N; ++j) g[j] += p[j] * (a[j] - dot);
        }
        for (std::size_t j = 0; j < N; ++j) dz.at(r, j) = static_cast<T>(g[j]);
      }
      pass.router_dz[b][l] = std::move(dz);
    }
  }
  if (z_on) pass.loss.total += tc.z_loss_coeff * pass.loss.z;
  if (bal_on) pass.loss.total += tc.balance_loss_coeff * pass.loss.balance;
  return pass;
}

// ---- reverse-mode pieces -------------------------------------------------------

template <typename T>
void add_colsum(const Tensor<T>& dy, Tensor<T>& db) {
  for (std::size_t r = 0; r < dy.dim(0); ++r) {
    auto row = dy.row(r);
    for (std::size_t i = 0; i < row.size(); ++i) db[i] += row[i];
  }
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// Accumulates the gain gradient and adds d loss / d x into `dx`.
template <typename T>
void rmsnorm_backward(const Tensor<T>& x, std::span<const T> gain, const std::vector<T>& inv_rms,
                      const Tensor<T>& dy, Tensor<T>& dgain, Tensor<T>& dx) {
  const std::size_t d = x.dim(1);
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    const T* xr = x.data() + r * d;
    const T* dyr = dy.data() + r * d;
    T* dxr = dx.data() + r * d;
    const T inv = inv_rms[r];
    T dot = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      dgain[i] += dyr[i] * xr[i] * inv;
      dot += gain[i] * dyr[i] * xr[i];
    }
    const T c = dot * inv * inv * inv / static_cast<T>(d);
    for (std::size_t i = 0; i < d; ++i) dxr[i] += inv * gain[i] * dyr[i] - xr[i] * c;
  }
}

/// Returns d loss / d input.
template <typename T>
Tensor<T> ffn_backward(const Ffn<T>& f, const FfnActs<T>& a, const Tensor<T>& dy, Ffn<T>& g) {
  matmul_tn_accumulate(a.act, dy, g.w_out);
  add_colsum(dy, g.b_out);
  Tensor<T> dpre = matmul_nt(dy, f.w_out);
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] *= gelu_grad(a.pre[i]);
  matmul_tn_accumulate(a.input, dpre, g.w_in);
  add_colsum(dpre, g.b_in);
  return matmul_nt(dpre, f.w_in);
}

/// Softmax backward over a gate vector: dz_s = g_s (dg_s - sum g dg).
template <typename T>
void softmax_backward(std::span<const T> gates, std::span<const T> dgates, std::span<T> dz) {
  T dot = T(0);
  for (std::size_t s = 0; s < gates.size(); ++s) dot += gates[s] * dgates[s];
  for (std::size_t s = 0; s < gates.size(); ++s) dz[s] += gates[s] * (dgates[s] - dot);
}

template <typename T>
T dot_row(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

/// Backward through expert_sublayer. Returns d loss / d h_mid and adds the
/// MoLE embedding-path gradient into `dembedded` (rows x d).
template <typename T>
Tensor<T> expert_backward(const ModelConfig& cfg, const LayerParams<T>& layer,
                          const ExpertActs<T>& a, const Tensor<T>& dout,
                          const Tensor<T>* aux_dz, LayerParams<T>& g, Tensor<T>& dembedded) {
  const std::size_t d = cfg.d_model;
  const std::size_t rows = dout.dim(0);
  Tensor<T> dh_mid = dout;
  Tensor<T> dnormed({rows, d});
  if (!layer.shared.empty()) add_into(dnormed, ffn_backward(layer.shared, a.shared, dout, g.shared));

  if (cfg.has_router()) {
    const std::size_t N = cfg.n_experts;
    Tensor<T> dz({rows, N});
    if (aux_dz) dz = *aux_dz;
    if (cfg.variant == Variant::kMole) {
      Tensor<T> dexpert_in({rows, d});
      std::vector<T> dgate(N);
      std::vector<Tensor<T>> dy(N, Tensor<T>({rows, d}));
      for (std::size_t r = 0; r < rows; ++r) {
        const T* dr = dout.data() + r * d;
        for (std::size_t j = 0; j < N; ++j) {
          const T gj = a.gates[r].gates[j];
          dgate[j] = dot_row(dr, a.expert_out[j].data() + r * d, d);
          T* dyr = dy[j].data() + r * d;
          for (std::size_t i = 0; i < d; ++i) dyr[i] = gj * dr[i];
        }
        softmax_backward<T>(a.gates[r].gates, dgate, dz.row(r));
      }
      for (std::size_t j = 0; j < N; ++j) {
        add_into(dexpert_in, ffn_backward(layer.routed[j], a.experts[j], dy[j], g.routed[j]));
      }
      rmsnorm_backward(a.embedded, layer.expert_norm.values(), a.expert_inv_rms, dexpert_in,
                       g.expert_norm, dembedded);
    } else {
      std::vector<std::vector<std::size_t>> slot(N, std::vector<std::size_t>(rows, 0));
      std::vector<Tensor<T>> dy(N);
      for (std::size_t j = 0; j < N; ++j) {
        for (std::size_t s = 0; s < a.expert_rows[j].size(); ++s) slot[j][a.expert_rows[j][s]] = s;
        if (!a.expert_rows[j].empty()) dy[j] = Tensor<T>({a.expert_rows[j].size(), d});
      }
      for (std::size_t r = 0; r < rows; ++r) {
        const auto& gr = a.gates[r];
        const T* dr = dout.data() + r * d;
        std::vector<T> dgate(gr.selected.size()), dsel(gr.selected.size(), T(0));
        for (std::size_t s = 0; s < gr.selected.size(); ++s) {
          const std::uint32_t j = gr.selected[s];
          const std::size_t k = slot[j][r];
          dgate[s] = dot_row(dr, a.expert_out[j].data() + k * d, d);
          T* dyr = dy[j].data() + k * d;
          for (std::size_t i = 0; i < d; ++i) dyr[i] = gr.gates[s] * dr[i];
        }
        softmax_backward<T>(gr.gates, dgate, dsel);
        for (std::size_t s = 0; s < gr.selected.size(); ++s) dz.at(r, gr.selected[s]) += dsel[s];
      }
      for (std::size_t j = 0; j < N; ++j) {
        if (a.expert_rows[j].empty()) continue;
        const Tensor<T> dx = ffn_backward(layer.routed[j], a.experts[j], dy[j], g.routed[j]);
        for (std::size_t s = 0; s < a.expert_rows[j].size(); ++s) {
          T* dst = dnormed.data() + a.expert_rows[j][s] * d;
          const T* src = dx.data() + s * d;
          for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
        }
      }
    }
    matmul_tn_accumulate(dz, a.normed, g.router);
    add_into(dnormed, matmul(dz, layer.router));
  }
  rmsnorm_backward(a.residual, layer.post_attn_norm.values(), a.inv_rms, dnormed,
                   g.post_attn_norm, dh_mid);
  return dh_mid;
}

/// Backward through attention_forward on a fresh sequence. Returns d loss / d h.
template <typename T>
Tensor<T> attention_backward(const ModelConfig& cfg, const LayerParams<T>& layer,
                             const AttentionActs<T>& a, const Tensor<T>& dh_mid,
                             LayerParams<T>& g) {
  const std::size_t d = cfg.d_model;
  const std::size_t H = cfg.n_heads;
  const std::size_t dh = cfg.d_head();
  const std::size_t rows = dh_mid.dim(0);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Tensor<T> dh_in = dh_mid;
  matmul_tn_accumulate(a.context, dh_mid, g.attn_out_w);
  add_colsum(dh_mid, g.attn_out_b);
  const Tensor<T> dcontext = matmul_nt(dh_mid, layer.attn_out_w);

  Tensor<T> dq({rows, d}), dk({rows, d}), dv({rows, d});
  std::vector<T> dp(rows);
  for (std::size_t hh = 0; hh < H; ++hh) {
    for (std::size_t t = 0; t < rows; ++t) {
      const T* p = a.probs.data() + (hh * rows + t) * rows;
      const T* dc = dcontext.data() + t * d + hh * dh;
      T dot = T(0);
      for (std::size_t s = 0; s <= t; ++s) {
        const T* vs = a.v.data() + s * d + hh * dh;
        dp[s] = dot_row(dc, vs, dh);
        dot += p[s] * dp[s];
        T* dvs = dv.data() + s * d + hh * dh;
        for (std::size_t i = 0; i < dh; ++i) dvs[i] += p[s] * dc[i];
      }
      const T* qt = a.q.data() + t * d + hh * dh;
      T* dqt = dq.data() + t * d + hh * dh;
      for (std::size_t s = 0; s <= t; ++s) {
        const T ds = p[s] * (dp[s] - dot) * scale;
        const T* ks = a.k.data() + s * d + hh * dh;
        T* dks = dk.data() + s * d + hh * dh;
        for (std::size_t i = 0; i < dh; ++i) {
          dqt[i] += ds * ks[i];
          dks[i] += ds * qt[i];
        }
      }
    }
  }
  Tensor<T> dqkv({rows, 3 * d});
  for (std::size_t t = 0; t < rows; ++t) {
    rotate_heads_inplace<T>(dq.row(t), H, dh, t, cfg.rotary_fraction, true);
    rotate_heads_inplace<T>(dk.row(t), H, dh, t, cfg.rotary_fraction, true);
    T* dst = dqkv.data() + t * 3 * d;
    std::copy_n(dq.data() + t * d, d, dst);
    std::copy_n(dk.data() + t * d, d, dst + d);
    std::copy_n(dv.data() + t * d, d, dst + 2 * d);
  }
  matmul_tn_accumulate(a.normed, dqkv, g.attn_qkv_w);
  add_colsum(dqkv, g.attn_qkv_b);
  const Tensor<T> dnormed = matmul_nt(dqkv, layer.attn_qkv_w);
  rmsnorm_backward(a.input, layer.input_norm.values(), a.inv_rms, dnormed, g.input_norm, dh_in);
  return dh_in;
}

template <typename T>
void sequence_backward(const ModelParams<T>& params, const ForwardActs<T>& acts,
                       const Tensor<T>& dlogits, const std::vector<Tensor<T>>* aux_dz,
                       GradientSet<T>& g) {
  const ModelConfig& cfg = params.config;
  const std::size_t rows = acts.ids.size();
  const std::size_t d = cfg.d_model;

  matmul_tn_accumulate(acts.final_normed, dlogits, g.lm_head);
  const Tensor<T> dnormed = matmul_nt(dlogits, params.lm_head);
  Tensor<T> dh({rows, d});
  rmsnorm_backward(acts.final_input, params.final_norm.values(), acts.final_inv_rms, dnormed,
                   g.final_norm, dh);

  Tensor<T> dembedded({rows, d});
  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const Tensor<T>* dz = aux_dz ? &(*aux_dz)[l] : nullptr;
    const Tensor<T> dh_mid = expert_backward(cfg, params.layers[l], acts.experts[l], dh, dz,
                                             g.layers[l], dembedded);
    dh = attention_backward(cfg, params.layers[l], acts.attn[l], dh_mid, g.layers[l]);
  }
  for (std::size_t t = 0; t < rows; ++t) {
    T* dst = g.embedding.data() + static_cast<std::size_t>(acts.ids[t]) * d;
    const T* a = dh.data() + t * d;
    const T* b = dembedded.data() + t * d;
    for (std::size_t i = 0; i < d; ++i) dst[i] += a[i] + b[i];
  }
}

void require_finite(const LossBreakdown& loss, const std::string& where) {
  if (!std::isfinite(loss.total) || !std::isfinite(loss.lm)) {
    throw NumericError("non-finite loss " + where + ": lm=" + std::to_string(loss.lm) +
                       " z=" + std::to_string(loss.z) + " balance=" +
                       std::to_string(loss.balance));
  }
}

}  // namespace

template <typename T>
LossBreakdown backward(const ModelParams<T>& params, const Batch& batch,
                       const TrainConfig& config, GradientSet<T>& grads) {
  if (params.is_lookup_form()) throw ValueError("cannot train lookup-form parameters");
  BatchPass<T> pass = run_batch(params, batch, config, true);
  require_finite(pass.loss, "in backward");
  grads = zeros_like(params);
  for (std::size_t b = 0; b < pass.acts.size(); ++b) {
    const std::vector<Tensor<T>>* dz = pass.router_dz.empty() ? nullptr : &pass.router_dz[b];
    sequence_backward(params, pass.acts[b], pass.dlogits[b], dz, grads);
  }
  return pass.loss;
}

template <typename T>
LossBreakdown evaluate_loss(const ModelParams<T>& params, const Batch& batch,
                            const TrainConfig& config) {
  return run_batch(params, batch, config, false).loss;
}

template <typename T>
double global_norm(const GradientSet<T>& grads) {
  double sq = 0.0;
  for (const auto& nt : named_tensors(const_cast<GradientSet<T>&>(grads))) {
    for (T v : nt.tensor->values()) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(sq);
}

template <typename T>
double clip_global_norm(GradientSet<T>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& nt : named_tensors(grads)) {
      for (T& v : nt.tensor->values()) v = static_cast<T>(static_cast<double>(v) * s);
    }
  }
  return norm;
}

double lr_at(std::size_t step, const TrainConfig& c) {
  if (step > c.total_steps) {
    throw ValueError("step " + std::to_string(step) + " beyond total_steps " +
                     std::to_string(c.total_steps));
  }
  const double total = static_cast<double>(c.total_steps);
  const double warmup = c.warmup_fraction * total;
  const double s = static_cast<double>(step);
  if (s < warmup) return c.peak_lr * s / warmup;
  const double min_lr = c.min_lr_fraction * c.peak_lr;
  const double progress = (s - warmup) / (total - warmup);
  return min_lr + (c.peak_lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
AdamState<T> make_adam_state(const ModelParams<T>& params) {
  return AdamState<T>{zeros_like(params), zeros_like(params), 0};
}

template <typename T>
double adam_step(ModelParams<T>& params, GradientSet<T>& grads, AdamState<T>& state, double lr,
                 const TrainConfig& c) {
  const double norm = clip_global_norm(grads, c.grad_clip);
  state.t += 1;
  const double b1 = c.betas.first, b2 = c.betas.second;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  auto p = named_tensors(params);
  auto g = named_tensors(grads);
  auto m = named_tensors(state.m);
  auto v = named_tensors(state.v);
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
    throw ShapeError("optimizer state does not match the parameters");
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].tensor->shape() != g[i].tensor->shape()) {
      throw ShapeError("gradient for " + p[i].name + " has the wrong shape");
    }
    T* pv = p[i].tensor->data();
    const T* gv = g[i].tensor->data();
    T* mv = m[i].tensor->data();
    T* vv = v[i].tensor->data();
    for (std::size_t e = 0; e < p[i].tensor->size(); ++e) {
      const double gd = gv[e];
      const double mn = b1 * mv[e] + (1.0 - b1) * gd;
      const double vn = b2 * vv[e] + (1.0 - b2) * gd * gd;
      mv[e] = static_cast<T>(mn);
      vv[e] = static_cast<T>(vn);
      const double update = (mn / bc1) / (std::sqrt(vn / bc2) + c.eps);
      const double pd = pv[e];
      pv[e] = static_cast<T>(pd - lr * (update + c.weight_decay * pd));
    }
  }
  return norm;
}

BatchSampler::BatchSampler(std::span<const TokenId> corpus, std::size_t batch,
                           std::size_t seq_len, std::uint64_t seed)
    : corpus_(corpus), batch_(batch), seq_len_(seq_len), rng_(seed) {
  if (corpus.size() < seq_len + 1) {
    throw ValueError("corpus of " + std::to_string(corpus.size()) +
                     " ids is shorter than one training window of " +
                     std::to_string(seq_len + 1));
  }
}

Batch BatchSampler::next() {
  std::uniform_int_distribution<std::size_t> start(0, corpus_.size() - seq_len_ - 1);
  Batch out;
  for (std::size_t b = 0; b < batch_; ++b) {
    const std::size_t o = start(rng_);
    out.inputs.emplace_back(corpus_.begin() + static_cast<std::ptrdiff_t>(o),
                            corpus_.begin() + static_cast<std::ptrdiff_t>(o + seq_len_));
    out.targets.emplace_back(corpus_.begin() + static_cast<std::ptrdiff_t>(o + 1),
                             corpus_.begin() + static_cast<std::ptrdiff_t>(o + seq_len_ + 1));
  }
  return out;
}

std::vector<TokenId> pattern_corpus(std::size_t length, std::size_t period, std::size_t vocab,
                                    std::uint64_t seed) {
  if (period == 0 || vocab == 0) throw ValueError("pattern corpus needs a period and a vocab");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> pattern(period);
  for (auto& id : pattern) id = tok(rng);
  std::vector<TokenId> out(length);
  for (std::size_t i = 0; i < length; ++i) out[i] = pattern[i % period];
  return out;
}

template <typename T>
TrainResult<T> train(ModelParams<T> params, std::span<const TokenId> corpus,
                     const TrainConfig& config, const TrainOutputs& outputs) {
  config.validate();
  params.config.validate();
  if (config.seq_len > params.config.max_seq) {
    throw ConfigError("seq_len", "exceeds the model's max_seq");
  }
  BatchSampler sampler(corpus, config.batch, config.seq_len, config.seed);
  const Batch eval_batch =
      BatchSampler(corpus, config.batch, config.seq_len, config.seed ^ 0x5eedf00dULL).next();

  TrainResult<T> result;
  result.initial_eval = evaluate_loss(params, eval_batch, config);
  require_finite(result.initial_eval, "before training");
  AdamState<T> state = make_adam_state(params);
  GradientSet<T> grads;
  result.trace.reserve(config.total_steps);
  for (std::size_t s = 0; s < config.total_steps; ++s) {
    const Batch batch = sampler.next();
    TrainStep rec;
    rec.step = s;
    rec.loss = backward(params, batch, config, grads);
    require_finite(rec.loss, "at step " + std::to_string(s));
    rec.lr = lr_at(s + 1, config);
    rec.grad_norm = adam_step(params, grads, state, rec.lr, config);
    result.trace.push_back(rec);
  }
  result.final_eval = evaluate_loss(params, eval_batch, config);
  require_finite(result.final_eval, "after training");
  if (!outputs.checkpoint.empty()) save_checkpoint(params, outputs.checkpoint);
  if (!outputs.loss_csv.empty()) {
    std::ofstream csv(outputs.loss_csv);
    if (!csv) throw IoError("cannot create " + outputs.loss_csv.string());
    write_loss_csv(csv, result.trace);
  }
  result.params = std::move(params);
  return result;
}

void write_loss_csv(std::ostream& out, std::span<const TrainStep> trace) {
  out << "step,lr,lm_loss,z_loss,balance_loss,total\n";
  char buf[256];
  for (const auto& s : trace) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", s.step, s.lr, s.loss.lm,
                  s.loss.z, s.loss.balance, s.loss.total);
    out << buf;
  }
}

#define MOLE_INSTANTIATE_TRAINER(T)                                                         \
  template T lm_loss(const Tensor<T>&, std::span<const TokenId>);                           \
  template T balance_loss(const Tensor<T>&, std::span<const std::vector<std::uint32_t>>,    \
                          std::size_t, std::size_t);                                        \
  template T z_loss(const Tensor<T>&);                                                      \
  template LossBreakdown backward(const ModelParams<T>&, const Batch&, const TrainConfig&,  \
                                  GradientSet<T>&);                                         \
  template LossBreakdown evaluate_loss(const ModelParams<T>&, const Batch&,                 \
                                       const TrainConfig&);                                 \
  template double global_norm(const GradientSet<T>&);                                       \
  template double clip_global_norm(GradientSet<T>&, double);                                \
  template AdamState<T> make_adam_state(const ModelParams<T>&);                             \
  template double adam_step(ModelParams<T>&, GradientSet<T>&, AdamState<T>&, double,        \
                            const TrainConfig&);                                            \
  template TrainResult<T> train(ModelParams<T>, std::span<const TokenId>, const TrainConfig&, \
                                const TrainOutputs&);

MOLE_INSTANTIATE_TRAINER(float)
MOLE_INSTANTIATE_TRAINER(double)

}  // namespace mole
