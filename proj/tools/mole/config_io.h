// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// JSON run configuration. Every field of "model" and "train" is required;
// command-line flags override file values afterwards.
//
//   {
//     "model": {"variant": "mole", "n_layers": 2, "d_model": 32, "n_heads": 4,
//               "d_shared": 64, "d_routed": 64, "n_experts": 4, "top_k": 0,
//               "vocab": 256, "rotary_fraction": 0.25, "max_seq": 256},
//     "train": {"peak_lr": 6e-4, "min_lr_fraction": 0.1, "betas": [0.9, 0.95],
//               "eps": 1e-8, "weight_decay": 0.01, "grad_clip": 1.0,
//               "warmup_fraction": 0.01, "total_steps": 200, "batch": 8,
//               "seq_len": 128, "z_loss_coeff": 0.001,
//               "balance_loss_coeff": 0.01, "seed": 0},
//     "data": {"kind": "pattern", "length": 65536, "period": 97, "seed": 1}
//   }
//
// "data" is optional; {"kind": "file", "path": "..."} reads raw bytes as ids.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mole/model.h"
#include "mole/trainer.h"

namespace mole::cli {

struct DataConfig {
  std::string kind = "pattern";
  std::size_t length = 65536;
  std::size_t period = 97;
  std::uint64_t seed = 1;
  std::string path;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

/// Throws ConfigError naming the missing or mistyped field (dotted path).
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
DataConfig data_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Parses the file; IoError if unreadable, ConfigError on bad JSON or fields.
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json load_json(const std::filesystem::path& path);

nlohmann::ordered_json to_json(const ModelConfig& c);
nlohmann::ordered_json to_json(const TrainConfig& c);
nlohmann::ordered_json to_json(const DataConfig& c);

std::vector<TokenId> build_corpus(const DataConfig& data, std::size_t vocab);

}  // namespace mole::cli
