// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "mole/engine.h"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>

namespace mole {

void BandwidthModel::validate() const {
  if (!(bytes_per_second > 0.0) || !std::isfinite(bytes_per_second)) {
    throw ValueError("bandwidth must be positive");
  }
  if (!(fixed_overhead >= 0.0) || !std::isfinite(fixed_overhead)) {
    throw ValueError("fixed overhead must be non-negative");
  }
}

double step_latency(std::uint64_t bytes, const BandwidthModel& bw) {
  bw.validate();
  return bw.fixed_overhead + static_cast<double>(bytes) / bw.bytes_per_second;
}

void StepMeter::push(const StepRecord& record) {
  records_.push_back(record);
  total_bytes_ += record.bytes;
  total_loaded_ += record.experts_loaded;
  total_seconds_ += record.sim_seconds;
}

void StepMeter::write_csv(std::ostream& out) const {
  out << "step,lanes,bytes,experts_loaded,sim_seconds,prefill\n";
  char buf[160];
  for (const auto& r : records_) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%llu,%zu,%.9g,%d\n", r.step, r.lanes,
                  static_cast<unsigned long long>(r.bytes), r.experts_loaded, r.sim_seconds,
                  r.prefill ? 1 : 0);
    out << buf;
  }
}

MeterSummary summarize(const StepMeter& meter, std::size_t n_layers) {
  MeterSummary s;
  s.total_bytes = meter.total_bytes();
  double bytes = 0.0, experts = 0.0, seconds = 0.0;
  for (const auto& r : meter.records()) {
    if (r.prefill) {
      s.prefill_sim_seconds += r.sim_seconds;
      continue;
    }
    ++s.decode_steps;
    bytes += static_cast<double>(r.bytes);
    experts += static_cast<double>(r.experts_loaded);
    seconds += r.sim_seconds;
  }
  if (s.decode_steps > 0) {
    const double n = static_cast<double>(s.decode_steps);
    s.mean_bytes_per_step = bytes / n;
    s.mean_experts_per_step = experts / n;
    s.mean_experts_per_layer = n_layers ? experts / (n * static_cast<double>(n_layers)) : 0.0;
    s.mean_sim_seconds = seconds / n;
  }
  return s;
}

std::size_t cache_capacity(std::size_t top_k, std::size_t batch) {
  if (batch == 0) throw ValueError("batch must be at least 1");
  return batch == 1 ? top_k : 2;
}

ExpertCacheState::ExpertCacheState(std::size_t n_layers, std::size_t capacity, std::uint64_t seed)
    : capacity_(capacity), resident_(n_layers), rng_(seed) {}

std::vector<std::uint32_t> ExpertCacheState::update(
    std::size_t layer, std::span<const std::vector<std::uint32_t>> activated) {
  std::vector<std::uint32_t> uni;
  for (const auto& lane : activated) uni.insert(uni.end(), lane.begin(), lane.end());
  std::sort(uni.begin(), uni.end());
  uni.erase(std::unique(uni.begin(), uni.end()), uni.end());

  auto& res = resident_.at(layer);
  std::vector<std::uint32_t> loads;
  std::set_difference(uni.begin(), uni.end(), res.begin(), res.end(), std::back_inserter(loads));

  if (uni.size() <= capacity_) {
    res = uni;
  } else {
    // Partial Fisher-Yates: a uniform capacity-sized subset.
    for (std::size_t i = 0; i < capacity_; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, uni.size() - 1);
      std::swap(uni[i], uni[pick(rng_)]);
    }
    res.assign(uni.begin(), uni.begin() + static_cast<std::ptrdiff_t>(capacity_));
    std::sort(res.begin(), res.end());
  }
  return loads;
}

UniformRouter::UniformRouter(std::size_t n_experts, std::size_t top_k, std::uint64_t seed)
    : n_(n_experts), k_(top_k), rng_(seed), scratch_(n_experts) {
  if (k_ == 0 || k_ > n_) throw ValueError("uniform router needs 1 <= k <= N");
}

std::vector<std::uint32_t> UniformRouter::sample() {
  std::iota(scratch_.begin(), scratch_.end(), 0u);
  for (std::size_t i = 0; i < k_; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_ - 1);
    std::swap(scratch_[i], scratch_[pick(rng_)]);
  }
  std::vector<std::uint32_t> out(scratch_.begin(), scratch_.begin() + static_cast<std::ptrdiff_t>(k_));
  std::sort(out.begin(), out.end());
  return out;
}

std::string_view runtime_name(Runtime r) {
  switch (r) {
    case Runtime::kResident:
      return "dense";
    case Runtime::kMoeOffload:
      return "moe-offload";
    case Runtime::kMoleLut:
      return "mole-lut";
  }
  return "unknown";
}

Runtime parse_runtime(std::string_view name) {
  if (name == "dense" || name == "resident") return Runtime::kResident;
  if (name == "moe-offload") return Runtime::kMoeOffload;
  if (name == "mole-lut") return Runtime::kMoleLut;
  throw ValueError("unknown runtime '" + std::string(name) +
                   "' (dense, moe-offload, mole-lut)");
}

std::uint64_t expert_bytes(const ModelConfig& config, std::size_t bytes_per_element) {
  return 2ULL * config.d_model * config.d_routed * bytes_per_element;
}

// ---- engine -----------------------------------------------------------------

template <typename T>
Engine<T>::Engine(const ModelParams<T>& params, const LutSource* lut, EngineOptions options)
    : params_(params), lut_(lut), options_(options) {
  options_.bandwidth.validate();
  const Variant v = params.config.variant;
  switch (options_.runtime) {
    case Runtime::kResident:
      if (params.is_lookup_form()) {
        throw ValueError("lookup-form parameters need the mole-lut runtime");
      }
      break;
    case Runtime::kMoeOffload:
      if (v != Variant::kMoe) throw ValueError("moe-offload runtime needs a MoE model");
      if (options_.routing == RoutingSource::kTrace && !options_.trace) {
        throw ValueError("trace routing needs a routing trace");
      }
      break;
    case Runtime::kMoleLut:
      if (v != Variant::kMole) throw ValueError("mole-lut runtime needs a MoLE model");
      if (!lut_) throw ValueError("mole-lut runtime needs a LUT source");
      break;
  }
}

template <typename T>
DecodeResult Engine<T>::decode(std::span<const std::vector<TokenId>> prompts, std::size_t steps) {
  const ModelConfig& cfg = params_.config;
  if (prompts.empty()) throw ValueError("decode needs at least one lane");
  if (steps == 0) throw ValueError("decode needs steps >= 1");
  for (const auto& p : prompts) {
    if (p.empty()) throw ValueError("decode prompts must be non-empty");
    if (p.size() + steps - 1 > cfg.max_seq) {
      throw ValueError("prompt of " + std::to_string(p.size()) + " plus " +
                       std::to_string(steps) + " steps exceeds max_seq " +
                       std::to_string(cfg.max_seq));
    }
  }
  const std::size_t lanes = prompts.size();
  const Form form = options_.runtime == Runtime::kMoleLut ? Form::kLut : Form::kTrain;
  const LutSource* lut = options_.runtime == Runtime::kMoleLut ? lut_ : nullptr;
  const bool offload = options_.runtime == Runtime::kMoeOffload;

  ExpertCacheState cache(cfg.n_layers, offload ? cache_capacity(cfg.top_k, lanes) : 0,
                         options_.seed);
  std::optional<UniformRouter> uniform;
  if (offload && options_.routing == RoutingSource::kUniform) {
    uniform.emplace(cfg.n_experts, cfg.top_k, options_.seed ^ 0x9e3779b97f4a7c15ULL);
  }
  const std::uint64_t per_expert = expert_bytes(cfg, options_.bytes_per_element);

  DecodeResult out;
  out.generated.assign(lanes, {});
  std::vector<DecodeState<T>> states(lanes, DecodeState<T>(cfg));
  std::vector<DecodeState<T>*> state_ptrs;
  for (auto& s : states) state_ptrs.push_back(&s);

  // Selections per layer for one step: [layer][entry].
  auto account = [&](std::size_t step, bool prefill, std::size_t rows_per_layer,
                     std::vector<std::vector<std::vector<std::uint32_t>>> selections,
                     std::uint64_t lut_bytes) {
    StepRecord rec;
    rec.step = step;
    rec.prefill = prefill;
    rec.lanes = lanes;
    if (offload) {
      if (options_.routing == RoutingSource::kUniform) {
        for (auto& layer : selections) {
          for (auto& sel : layer) sel = uniform->sample();
        }
      } else if (options_.routing == RoutingSource::kTrace) {
        if (step >= options_.trace->size() || (*options_.trace)[step].size() != cfg.n_layers) {
          throw ValueError("routing trace has no entry for step " + std::to_string(step));
        }
        selections = (*options_.trace)[step];
      }
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        rec.experts_loaded += cache.update(l, selections[l]).size();
      }
      rec.bytes = rec.experts_loaded * per_expert;
      out.routing.push_back(std::move(selections));
    } else if (lut) {
      rec.bytes = lut_bytes;
      rec.rows_fetched = rows_per_layer * cfg.n_layers * cfg.n_experts;
    }
    rec.sim_seconds = step_latency(rec.bytes, options_.bandwidth);
    out.meter.push(rec);
  };

  auto selections_of = [&](const ForwardTrace<T>& trace,
                           std::vector<std::vector<std::vector<std::uint32_t>>>& sel) {
    if (sel.empty()) sel.resize(cfg.n_layers);
    for (std::size_t l = 0; l < trace.gates.size(); ++l) {
      for (const auto& g : trace.gates[l]) sel[l].push_back(g.selected);
    }
  };

  using Clock = std::chrono::steady_clock;
  std::vector<TokenId> last(lanes);
  {
    const auto t0 = Clock::now();
    const std::uint64_t before = lut ? lut->bytes_transferred() : 0;
    std::vector<std::vector<std::vector<std::uint32_t>>> sel;
    std::size_t rows = 0;
    for (std::size_t b = 0; b < lanes; ++b) {
      ForwardTrace<T> trace;
      const Tensor<T> logits = prefill<T>(params_, states[b], prompts[b], form, lut,
                                          offload ? &trace : nullptr);
      last[b] = argmax<T>(logits.row(logits.dim(0) - 1));
      out.generated[b].push_back(last[b]);
      rows += prompts[b].size();
      if (offload) selections_of(trace, sel);
    }
    if (offload && sel.empty()) sel.resize(cfg.n_layers);
    const std::uint64_t moved = lut ? lut->bytes_transferred() - before : 0;
    out.compute_seconds.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    account(0, true, rows, std::move(sel), moved);
  }
  for (std::size_t s = 1; s < steps; ++s) {
    const auto t0 = Clock::now();
    const std::uint64_t before = lut ? lut->bytes_transferred() : 0;
    ForwardTrace<T> trace;
    const Tensor<T> logits = decode_step<T>(params_, state_ptrs, last, form, lut,
                                            offload ? &trace : nullptr);
    for (std::size_t b = 0; b < lanes; ++b) {
      last[b] = argmax<T>(logits.row(b));
      out.generated[b].push_back(last[b]);
    }
    std::vector<std::vector<std::vector<std::uint32_t>>> sel;
    if (offload) selections_of(trace, sel);
    const std::uint64_t moved = lut ? lut->bytes_transferred() - before : 0;
    out.compute_seconds.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    account(s, false, lanes, std::move(sel), moved);
  }
  return out;
}

template class Engine<float>;
template class Engine<double>;

// ---- routing-only simulation ------------------------------------------------------

StepMeter simulate_moe_offload(const ModelConfig& config, std::size_t batch, std::size_t steps,
                               const BandwidthModel& bw, std::uint64_t seed,
                               std::size_t bytes_per_element) {
  if (config.variant != Variant::kMoe) throw ValueError("moe-offload simulation needs a MoE config");
  ExpertCacheState cache(config.n_layers, cache_capacity(config.top_k, batch), seed);
  UniformRouter router(config.n_experts, config.top_k, seed ^ 0x9e3779b97f4a7c15ULL);
  const std::uint64_t per_expert = expert_bytes(config, bytes_per_element);
  StepMeter meter;
  std::vector<std::vector<std::uint32_t>> lanes(batch);
  for (std::size_t s = 0; s < steps; ++s) {
    StepRecord rec;
    rec.step = s;
    rec.prefill = s == 0;  // cold cache
    rec.lanes = batch;
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      for (auto& lane : lanes) lane = router.sample();
      rec.experts_loaded += cache.update(l, lanes).size();
    }
    rec.bytes = rec.experts_loaded * per_expert;
    rec.sim_seconds = step_latency(rec.bytes, bw);
    meter.push(rec);
  }
  return meter;
}

StepMeter simulate_mole_lut(const ModelConfig& config, std::size_t batch, std::size_t steps,
                            const BandwidthModel& bw, std::size_t bytes_per_element) {
  if (config.variant != Variant::kMole) throw ValueError("mole-lut simulation needs a MoLE config");
  StepMeter meter;
  for (std::size_t s = 0; s < steps; ++s) {
    StepRecord rec;
    rec.step = s;
    rec.lanes = batch;
    rec.rows_fetched = batch * config.n_experts * config.n_layers;
    rec.bytes = static_cast<std::uint64_t>(rec.rows_fetched) * config.d_model * bytes_per_element;
    rec.sim_seconds = step_latency(rec.bytes, bw);
    meter.push(rec);
  }
  return meter;
}

}  // namespace mole
