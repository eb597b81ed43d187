// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// Closed-form cost accounting for a single FFN / MoE layer and whole models:
//
//   architecture            FLOPs            in VRAM          offloaded   loaded/token
//   dense                   4 d D_s          2 d D_s          0           0
//   moe (all resident)      4 d (k D_r+D_s)  2 d (N D_r+D_s)  0           0
//   moe + expert offload    4 d (k D_r+D_s)  2 d (k D_r+D_s)  2 d N D_r   2 d k D_r (worst case)
//   mole + LUT offload      4 d D_s          2 d D_s          d N |V|     d N
//
// Whole-model figures multiply by L. Attention is excluded throughout.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mole/engine.h"
#include "mole/model.h"

namespace mole {

std::uint64_t flops_per_layer(const ModelConfig& config);
std::uint64_t vram_params_per_layer(const ModelConfig& config);
std::uint64_t offloaded_params_per_layer(const ModelConfig& config);
std::uint64_t loaded_params_per_layer(const ModelConfig& config);

std::uint64_t offloaded_params(const ModelConfig& config);
std::uint64_t loaded_params_per_token(const ModelConfig& config);

/// Publication-style display: "B" with one decimal, "M" as an integer from 10M up
/// and with two significant digits below.
std::string format_billions(std::uint64_t n);
std::string format_millions(std::uint64_t n);

struct CostReport {
  std::string name;
  ModelConfig config;
  std::uint64_t flops_per_layer = 0;
  std::uint64_t flops_per_token = 0;  // x L
  std::uint64_t params_in_vram_per_layer = 0;
  std::uint64_t params_in_vram = 0;
  std::uint64_t offloaded_per_layer = 0;
  std::uint64_t offloaded = 0;
  std::uint64_t loaded_per_layer = 0;
  std::uint64_t loaded = 0;
  std::string offloaded_display;
  std::string loaded_display;
};

CostReport cost_report(const std::string& name, const ModelConfig& config);

struct SymbolicRow {
  std::string architecture, flops, params_in_vram, offloaded, loaded;
};
std::vector<SymbolicRow> symbolic_rows();

/// The thirteen architecture presets at 160M / 410M / 1B activated
/// parameters (vocab 50000), e.g. "410M MoE-10E".
struct Preset {
  std::string name;
  ModelConfig config;
  std::string published_offloaded;  // published display value
  std::string published_loaded;
};
std::vector<Preset> reference_presets();
/// Throws ValueError for unknown names.
Preset find_preset(const std::string& name);

enum class CellStatus { kPass, kWarn, kFail };
const char* cell_status_name(CellStatus s);

struct PublishedCell {
  std::string config;
  std::string column;  // "offloaded" or "loaded"
  std::uint64_t exact = 0;
  std::string computed;
  std::string published;
  CellStatus status = CellStatus::kPass;
  std::string note;
};

/// One offloaded and one loaded cell per MoE/MoLE preset. A mismatch on a
/// cell listed as a known discrepancy is WARN, any other mismatch FAIL.
std::vector<PublishedCell> published_table_check();

struct RatioCheck {
  std::string scale;  // "160M", "410M", "1B"
  std::string mole, moe;
  std::uint64_t mole_loaded = 0, moe_loaded = 0;
  double ratio = 0.0;  // moe / mole
  double published = 0.0;
  CellStatus status = CellStatus::kPass;
  std::string note;
};

/// Per-token loaded-parameter ratios MoE-10E / MoLE-4E against the published
/// 1500 / 2000 / 2000, passing within `tolerance` (relative).
std::vector<RatioCheck> loaded_ratio_check(double tolerance = 0.05);

// ---- expert-load statistics -----------------------------------------------------

/// Expected experts loaded per layer and step in steady state under uniform
/// routing: (N - c) (1 - ((N - k) / N)^B). Defined for capacity c <= k;
/// std::nullopt otherwise. Batch 1 (c = k) reduces to k - k^2 / N.
std::optional<double> expected_loads_closed_form(std::size_t n_experts, std::size_t top_k,
                                                 std::size_t batch, std::size_t capacity);

struct LoadEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::optional<double> closed_form;
  std::size_t trials = 0;
};

/// Monte Carlo mean of per-step loads for one layer over `trials` steps
/// after a single warm-up step, with integer accumulation.
LoadEstimate expected_expert_loads(std::size_t n_experts, std::size_t top_k, std::size_t batch,
                                   std::size_t capacity, std::size_t trials, std::uint64_t seed);

// ---- latency ------------------------------------------------------------------

struct LatencyRow {
  std::string config;
  std::size_t batch = 0;
  double experts_per_layer = 0.0;  // moe: expected loads; mole/dense: 0
  double bytes_per_step = 0.0;
  double transfer_seconds = 0.0;
  std::optional<double> compute_seconds;
};

/// Measured per-step compute for (config, batch); optional.
using ComputeProbe = std::function<double(const ModelConfig&, std::size_t batch)>;

/// Simulated per-step transfer for each config and batch size; fp16
/// offloaded parameters. Expected MoE loads come from the closed form
/// (Monte Carlo when the capacity exceeds k).
std::vector<LatencyRow> latency_report(const std::vector<Preset>& configs,
                                       const BandwidthModel& bw,
                                       const std::vector<std::size_t>& batches,
                                       const ComputeProbe& probe = {});

void write_cost_csv(std::ostream& out, const std::vector<CostReport>& rows);
void write_published_check_csv(std::ostream& out, const std::vector<PublishedCell>& cells);
void write_latency_csv(std::ostream& out, const std::vector<LatencyRow>& rows);

}  // namespace mole
