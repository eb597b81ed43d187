// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "mole/nf_quant.h"

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "mole/error.h"

namespace mole {

std::span<const double> nf_codebook(int bits) {
  if (bits == 4) return kNf4Codebook;
  if (bits == 3) return kNf3Codebook;
  throw ValueError("no normal-float codebook for " + std::to_string(bits) + " bits");
}

double codebook_max_gap(int bits) {
  const auto cb = nf_codebook(bits);
  double gap = 0.0;
  for (std::size_t i = 1; i < cb.size(); ++i) gap = std::max(gap, cb[i] - cb[i - 1]);
  return gap;
}

std::uint16_t fp16_from_float(float value) {
  return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(value));
}

float fp16_to_float(std::uint16_t bits) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

std::uint16_t fp16_round_up(float value) {
  if (!std::isfinite(value) || value < 0.0f || value > 65504.0f) {
    throw ValueError("block scale " + std::to_string(value) + " is not representable in fp16");
  }
  std::uint16_t bits = fp16_from_float(value);
  // Positive halves order like their bit patterns, so one step up is +1.
  if (fp16_to_float(bits) < value) ++bits;
  return bits;
}

std::size_t quant_block_bytes(int bits, std::size_t block_size) {
  nf_codebook(bits);
  return 2 + (block_size * static_cast<std::size_t>(bits) + 7) / 8;
}

std::uint8_t nearest_code(std::span<const double> codebook, double x) {
  std::size_t best = 0;
  double best_dist = std::abs(x - codebook[0]);
  for (std::size_t i = 1; i < codebook.size(); ++i) {
    const double dist = std::abs(x - codebook[i]);
    if (dist < best_dist) {
      best = i;
      best_dist = dist;
    }
  }
  return static_cast<std::uint8_t>(best);
}

namespace {

void check_tiling(std::size_t d, std::size_t block_size) {
  if (block_size == 0 || d % block_size != 0) {
    throw ValueError("block size " + std::to_string(block_size) + " does not tile a row of " +
                     std::to_string(d));
  }
}

void put_code(std::vector<std::uint8_t>& packed, std::size_t index, int bits, std::uint8_t code) {
  const std::size_t bit0 = index * static_cast<std::size_t>(bits);
  for (int b = 0; b < bits; ++b) {
    if ((code >> b) & 1u) {
      const std::size_t pos = bit0 + static_cast<std::size_t>(b);
      packed[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
    }
  }
}

std::uint8_t get_code(std::span<const std::uint8_t> packed, std::size_t index, int bits) {
  const std::size_t bit0 = index * static_cast<std::size_t>(bits);
  std::uint8_t code = 0;
  for (int b = 0; b < bits; ++b) {
    const std::size_t pos = bit0 + static_cast<std::size_t>(b);
    code |= static_cast<std::uint8_t>(((packed[pos / 8] >> (pos % 8)) & 1u) << b);
  }
  return code;
}

}  // namespace

std::vector<QuantBlock> quantize_row(std::span<const float> values, int bits,
                                     std::size_t block_size) {
  const auto cb = nf_codebook(bits);
  check_tiling(values.size(), block_size);
  const std::size_t n_blocks = values.size() / block_size;
  const std::size_t packed_bytes = quant_block_bytes(bits, block_size) - 2;
  std::vector<QuantBlock> out(n_blocks);
  for (std::size_t blk = 0; blk < n_blocks; ++blk) {
    auto chunk = values.subspan(blk * block_size, block_size);
    float absmax = 0.0f;
    for (float v : chunk) {
      if (!std::isfinite(v)) throw NumericError("cannot quantize a non-finite value");
      absmax = std::max(absmax, std::abs(v));
    }
    QuantBlock& q = out[blk];
    q.scale_bits = fp16_round_up(absmax);
    q.packed.assign(packed_bytes, 0);
    const double scale = q.scale();
    const std::uint8_t zero = nearest_code(cb, 0.0);
    for (std::size_t i = 0; i < block_size; ++i) {
      const std::uint8_t code =
          scale > 0.0 ? nearest_code(cb, static_cast<double>(chunk[i]) / scale) : zero;
      put_code(q.packed, i, bits, code);
    }
  }
  return out;
}

void dequantize_row(std::span<const QuantBlock> blocks, int bits, std::size_t block_size,
                    std::span<float> out) {
  const auto cb = nf_codebook(bits);
  if (out.size() != blocks.size() * block_size) {
    throw ValueError("dequantize target holds " + std::to_string(out.size()) +
                     " values, blocks cover " + std::to_string(blocks.size() * block_size));
  }
  for (std::size_t blk = 0; blk < blocks.size(); ++blk) {
    const double scale = blocks[blk].scale();
    for (std::size_t i = 0; i < block_size; ++i) {
      const std::uint8_t code = get_code(blocks[blk].packed, i, bits);
      out[blk * block_size + i] = static_cast<float>(cb[code] * scale);
    }
  }
}

std::vector<float> dequantize_row(std::span<const QuantBlock> blocks, int bits,
                                  std::size_t block_size) {
  std::vector<float> out(blocks.size() * block_size);
  dequantize_row(blocks, bits, block_size, out);
  return out;
}

void encode_blocks(std::span<const QuantBlock> blocks, std::vector<std::uint8_t>& out) {
  for (const auto& q : blocks) {
    out.push_back(static_cast<std::uint8_t>(q.scale_bits & 0xff));
    out.push_back(static_cast<std::uint8_t>(q.scale_bits >> 8));
    out.insert(out.end(), q.packed.begin(), q.packed.end());
  }
}

std::vector<QuantBlock> decode_blocks(std::span<const std::uint8_t> bytes, int bits,
                                      std::size_t block_size, std::size_t n_blocks) {
  const std::size_t stride = quant_block_bytes(bits, block_size);
  if (bytes.size() < stride * n_blocks) throw ValueError("quantized block buffer too short");
  std::vector<QuantBlock> out(n_blocks);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    const std::uint8_t* p = bytes.data() + b * stride;
    out[b].scale_bits = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    out[b].packed.assign(p + 2, p + stride);
  }
  return out;
}

double compression_ratio(int bits, std::size_t block_size) {
  if (bits <= 0 || bits > 32 || block_size == 0) {
    throw ValueError("invalid quantization layout (" + std::to_string(bits) + " bits, block " +
                     std::to_string(block_size) + ")");
  }
  const double quantized = static_cast<double>(block_size) * bits / 8.0 + 2.0;
  const double ratio = quantized / (2.0 * static_cast<double>(block_size));
  if (ratio > 1.0) {
    throw ValueError("layout with " + std::to_string(bits) +
                     " bits per value does not compress fp16 (ratio " + std::to_string(ratio) +
                     ")");
  }
  return ratio;
}

}  // namespace mole
