// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// Little-endian encoding helpers shared by the on-disk formats.

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "mole/error.h"

namespace mole::detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

template <typename U>
U get_le(std::span<const std::uint8_t> in, std::size_t offset) {
  static_assert(std::is_unsigned_v<U>);
  if (offset + sizeof(U) > in.size()) throw IoError("unexpected end of buffer");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(static_cast<U>(in[offset + i]) << (8 * i));
  }
  return value;
}

/// Appends the raw little-endian bytes of arithmetic values.
template <typename V>
void put_array(std::vector<std::uint8_t>& out, std::span<const V> values) {
  static_assert(std::is_arithmetic_v<V>);
  const std::size_t start = out.size();
  out.resize(start + values.size_bytes());
  if constexpr (std::endian::native == std::endian::little) {
    if (!values.empty()) std::memcpy(out.data() + start, values.data(), values.size_bytes());
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint8_t tmp[sizeof(V)];
      std::memcpy(tmp, &values[i], sizeof(V));
      for (std::size_t b = 0; b < sizeof(V); ++b) {
        out[start + i * sizeof(V) + b] = tmp[sizeof(V) - 1 - b];
      }
    }
  }
}

template <typename V>
void get_array(std::span<const std::uint8_t> in, std::span<V> values) {
  static_assert(std::is_arithmetic_v<V>);
  if (in.size() < values.size_bytes()) throw IoError("unexpected end of buffer");
  if constexpr (std::endian::native == std::endian::little) {
    if (!values.empty()) std::memcpy(values.data(), in.data(), values.size_bytes());
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint8_t tmp[sizeof(V)];
      for (std::size_t b = 0; b < sizeof(V); ++b) tmp[b] = in[i * sizeof(V) + sizeof(V) - 1 - b];
      std::memcpy(&values[i], tmp, sizeof(V));
    }
  }
}

}  // namespace mole::detail
