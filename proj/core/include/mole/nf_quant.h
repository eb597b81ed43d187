// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// Blockwise normal-float quantization. A row of length d is tiled into
// blocks of `block_size` values; each block stores its absmax as an fp16
// scale followed by one codebook index per value, bit-packed LSB-first.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace mole {

/// Normal-float codebooks, ascending, each containing -1, 0 and +1.
inline constexpr double kNf4Codebook[16] = {
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
};

inline constexpr double kNf3Codebook[8] = {
    -1.0,
    -0.4786291718482971,
    -0.21714182198047638,
    0.0,
    0.16093017160892487,
    0.33791518211364746,
    0.5626169443130493,
    1.0,
};

/// Codebook for 3 or 4 bits. Throws ValueError otherwise.
std::span<const double> nf_codebook(int bits);

/// Largest distance between adjacent codebook entries.
double codebook_max_gap(int bits);

/// IEEE binary16 conversions (round to nearest even).
std::uint16_t fp16_from_float(float value);
float fp16_to_float(std::uint16_t bits);

/// Smallest fp16 value >= `value` (value must be finite, >= 0, <= 65504).
std::uint16_t fp16_round_up(float value);

struct QuantBlock {
  std::uint16_t scale_bits = 0;      // fp16 absmax, rounded up
  std::vector<std::uint8_t> packed;  // ceil(block_size * bits / 8) bytes

  float scale() const { return fp16_to_float(scale_bits); }

  friend bool operator==(const QuantBlock&, const QuantBlock&) = default;
};

/// Bytes one packed block occupies on disk (scale included).
std::size_t quant_block_bytes(int bits, std::size_t block_size);

/// Index of the codebook entry nearest to `x` (ties toward the lower index).
std::uint8_t nearest_code(std::span<const double> codebook, double x);

/// Throws ValueError if block_size is zero or does not divide `d`, or
/// NumericError on non-finite input.
std::vector<QuantBlock> quantize_row(std::span<const float> values, int bits,
                                     std::size_t block_size);

void dequantize_row(std::span<const QuantBlock> blocks, int bits, std::size_t block_size,
                    std::span<float> out);
std::vector<float> dequantize_row(std::span<const QuantBlock> blocks, int bits,
                                  std::size_t block_size);

/// Raw block serialization used by the LUT file.
void encode_blocks(std::span<const QuantBlock> blocks, std::vector<std::uint8_t>& out);
std::vector<QuantBlock> decode_blocks(std::span<const std::uint8_t> bytes, int bits,
                                      std::size_t block_size, std::size_t n_blocks);

/// Quantized bytes over fp16 bytes for one block:
/// (block_size * bits / 8 + 2) / (2 * block_size). Ratios above 1 are rejected.
double compression_ratio(int bits, std::size_t block_size);

}  // namespace mole
