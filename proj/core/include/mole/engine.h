// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// Greedy autoregressive decoding with transfer metering.
//
// Runtimes:
//   resident     every parameter in device memory; nothing is transferred
//   moe-offload  routed experts live off-device; a per-layer expert cache
//                decides which selected experts must be loaded each step
//   mole-lut     routed experts replaced by LUT rows fetched per token
//
// Step 0 is the prompt prefill (emits the first generated token); steps
// 1..n-1 are single-token decode steps. Caches start empty.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mole/lut_source.h"
#include "mole/model.h"

namespace mole {

struct BandwidthModel {
  double bytes_per_second = 16e9;
  double fixed_overhead = 0.0;  // seconds per step

  /// Throws ValueError unless bytes_per_second > 0 and fixed_overhead >= 0.
  void validate() const;
};

/// fixed_overhead + bytes / bytes_per_second.
double step_latency(std::uint64_t bytes, const BandwidthModel& bw);

struct StepRecord {
  std::size_t step = 0;
  bool prefill = false;
  std::size_t lanes = 0;
  std::uint64_t bytes = 0;
  std::size_t experts_loaded = 0;  // moe-offload, summed over layers
  std::size_t rows_fetched = 0;    // mole-lut, (token, expert) rows summed over layers
  double sim_seconds = 0.0;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

class StepMeter {
 public:
  void push(const StepRecord& record);
  const std::vector<StepRecord>& records() const { return records_; }
  std::uint64_t total_bytes() const { return total_bytes_; }
  std::size_t total_experts_loaded() const { return total_loaded_; }
  double total_seconds() const { return total_seconds_; }

  /// step,lanes,bytes,experts_loaded,sim_seconds (plus a prefill column).
  void write_csv(std::ostream& out) const;

  friend bool operator==(const StepMeter&, const StepMeter&) = default;

 private:
  std::vector<StepRecord> records_;
  std::uint64_t total_bytes_ = 0;
  std::size_t total_loaded_ = 0;
  double total_seconds_ = 0.0;
};

struct MeterSummary {
  std::size_t decode_steps = 0;          // excludes the prefill step
  double mean_bytes_per_step = 0.0;      // decode steps only
  double mean_experts_per_step = 0.0;    // per decode step, summed over layers
  double mean_experts_per_layer = 0.0;   // per decode step and layer
  double mean_sim_seconds = 0.0;         // decode steps only
  double prefill_sim_seconds = 0.0;
  std::uint64_t total_bytes = 0;
};

MeterSummary summarize(const StepMeter& meter, std::size_t n_layers);

// ---- expert cache -------------------------------------------------------------

/// Resident experts per layer: k at batch 1, 2 otherwise.
std::size_t cache_capacity(std::size_t top_k, std::size_t batch);

class ExpertCacheState {
 public:
  ExpertCacheState(std::size_t n_layers, std::size_t capacity, std::uint64_t seed);

  std::size_t capacity() const { return capacity_; }
  const std::vector<std::uint32_t>& resident(std::size_t layer) const {
    return resident_.at(layer);
  }

  /// Loads = union of `activated` across lanes minus the resident set. The
  /// layer then retains the whole union if it fits the capacity, otherwise a
  /// uniformly random capacity-sized subset of it drawn from the seeded RNG.
  /// Returns the loaded experts in ascending order.
  std::vector<std::uint32_t> update(std::size_t layer,
                                    std::span<const std::vector<std::uint32_t>> activated);

 private:
  std::size_t capacity_;
  std::vector<std::vector<std::uint32_t>> resident_;
  std::mt19937_64 rng_;
};

/// Draws k distinct experts of N uniformly (ascending), used as a router
/// stand-in for bandwidth simulation.
class UniformRouter {
 public:
  UniformRouter(std::size_t n_experts, std::size_t top_k, std::uint64_t seed);
  std::vector<std::uint32_t> sample();

 private:
  std::size_t n_, k_;
  std::mt19937_64 rng_;
  std::vector<std::uint32_t> scratch_;
};

/// Recorded selections: [step][layer][lane] -> experts. Step 0 holds the
/// prefill's per-position selections flattened over lanes.
using RoutingTrace = std::vector<std::vector<std::vector<std::vector<std::uint32_t>>>>;

// ---- engine -------------------------------------------------------------------

enum class Runtime : std::uint8_t { kResident, kMoeOffload, kMoleLut };
std::string_view runtime_name(Runtime r);
/// "dense" and "resident" both select kResident.
Runtime parse_runtime(std::string_view name);

enum class RoutingSource : std::uint8_t { kModel, kUniform, kTrace };

struct EngineOptions {
  Runtime runtime = Runtime::kResident;
  BandwidthModel bandwidth;
  RoutingSource routing = RoutingSource::kModel;
  const RoutingTrace* trace = nullptr;  // for RoutingSource::kTrace
  std::uint64_t seed = 0;               // expert-cache and uniform-router RNG
  std::size_t bytes_per_element = 2;    // offloaded expert weights (fp16)
};

struct DecodeResult {
  std::vector<std::vector<TokenId>> generated;  // [lane] steps ids
  StepMeter meter;
  RoutingTrace routing;                         // selections the meter used (moe-offload)
  std::vector<double> compute_seconds;          // wall clock per step, not deterministic
};

template <typename T>
class Engine {
 public:
  /// `lut` is required for mole-lut; `params` must then be lookup-form or
  /// training-form MoLE parameters (the LUT replaces the routed experts).
  Engine(const ModelParams<T>& params, const LutSource* lut, EngineOptions options);

  /// Greedy decode of `steps` tokens per lane. Throws ValueError for empty
  /// prompts, steps == 0 or prompt + steps beyond max_seq.
  DecodeResult decode(std::span<const std::vector<TokenId>> prompts, std::size_t steps);

 private:
  const ModelParams<T>& params_;
  const LutSource* lut_;
  EngineOptions options_;
};

/// Routing-only simulation of moe-offload transfer for `steps` decode steps
/// at a given batch size; no model is evaluated.
StepMeter simulate_moe_offload(const ModelConfig& config, std::size_t batch, std::size_t steps,
                               const BandwidthModel& bw, std::uint64_t seed,
                               std::size_t bytes_per_element = 2);

/// mole-lut transfer for `steps` decode steps: batch * N * d * L elements each.
StepMeter simulate_mole_lut(const ModelConfig& config, std::size_t batch, std::size_t steps,
                            const BandwidthModel& bw, std::size_t bytes_per_element = 2);

/// Bytes of one offloaded MoE expert (two d x D_r projections).
std::uint64_t expert_bytes(const ModelConfig& config, std::size_t bytes_per_element = 2);

}  // namespace mole
