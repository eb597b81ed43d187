// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint container, little-endian:
//   magic "MOLECKPT" | version u32 | tensor count u32
//   per tensor: name length u16 | name bytes | dtype u8 | rank u8 |
//               extents u64[rank] | raw data
// The model configuration travels as two tensors, "config" (i64) and
// "config.rotary_fraction" (f64).

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mole/model.h"

namespace mole {

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'L', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointDtype : std::uint8_t { kF32 = 0, kF16 = 1, kF64 = 2, kI64 = 3 };

std::size_t dtype_size(CheckpointDtype dtype);

struct CheckpointTensor {
  std::string name;
  CheckpointDtype dtype = CheckpointDtype::kF32;
  Shape shape;
  std::vector<std::uint8_t> raw;  // little-endian element bytes

  friend bool operator==(const CheckpointTensor&, const CheckpointTensor&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(std::span<const CheckpointTensor> tensors);
std::vector<CheckpointTensor> decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint_file(const std::filesystem::path& path,
                           std::span<const CheckpointTensor> tensors);
std::vector<CheckpointTensor> read_checkpoint_file(const std::filesystem::path& path);

template <typename T>
std::vector<CheckpointTensor> to_checkpoint(const ModelParams<T>& params);

template <typename T>
ModelParams<T> from_checkpoint(std::span<const CheckpointTensor> tensors);

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path);

template <typename T = float>
ModelParams<T> load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace mole
