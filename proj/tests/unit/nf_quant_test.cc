// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "mole/nf_quant.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "mole/error.h"

namespace mole {
namespace {

// Normal-float construction (2^bits standard-normal quantiles, asymmetric
// halves, normalized to [-1, 1]) evaluated offline with scipy.stats.norm.ppf
// and frozen here.
constexpr double kNf4Derived[16] = {
    -1.0, -0.6961929202079773, -0.5250730514526367, -0.39491748809814453,
    -0.28444135189056396, -0.18477343022823334, -0.09104999154806137, 0.0,
    0.07958032935857773, 0.16093017160892487, 0.24611228704452515, 0.33791518211364746,
    0.44070979952812195, 0.5626169443130493, 0.7229567170143127, 1.0};
constexpr double kNf3Derived[8] = {-1.0, -0.4786291718482971, -0.21714182198047638, 0.0,
                                   0.16093017160892487, 0.33791518211364746,
                                   0.5626169443130493, 1.0};

std::vector<float> gaussian_row(std::size_t n, std::uint64_t seed, float sigma = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, sigma);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Exhaustive nearest-entry search in double, first minimum wins.
std::uint8_t oracle_code(std::span<const double> cb, double x) {
  std::size_t best = 0;
  double best_d = std::abs(x - cb[0]);
  for (std::size_t i = 1; i < cb.size(); ++i) {
    const double d = std::abs(x - cb[i]);
    if (d < best_d) {
      best = i;
      best_d = d;
    }
  }
  return static_cast<std::uint8_t>(best);
}

TEST(Codebook, MatchesNormalQuantileConstruction) {
  const auto nf4 = nf_codebook(4);
  const auto nf3 = nf_codebook(3);
  ASSERT_EQ(nf4.size(), 16u);
  ASSERT_EQ(nf3.size(), 8u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(nf4[i], kNf4Derived[i], 1e-6) << i;
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(nf3[i], kNf3Derived[i], 1e-6) << i;
  for (auto cb : {nf4, nf3}) {
    EXPECT_EQ(cb.front(), -1.0);
    EXPECT_EQ(cb.back(), 1.0);
    EXPECT_NE(std::find(cb.begin(), cb.end(), 0.0), cb.end());
    EXPECT_TRUE(std::is_sorted(cb.begin(), cb.end()));
  }
  EXPECT_THROW(nf_codebook(5), ValueError);
}

TEST(Codebook, MaxGap) {
  EXPECT_DOUBLE_EQ(codebook_max_gap(4), 1.0 - 0.6961928009986877);
  EXPECT_DOUBLE_EQ(codebook_max_gap(3), 1.0 - 0.4786291718482971);
}

TEST(Fp16, RoundToNearestEvenConversions) {
  EXPECT_EQ(fp16_from_float(1.0f), 0x3c00);
  EXPECT_EQ(fp16_from_float(-2.0f), 0xc000);
  EXPECT_EQ(fp16_from_float(65504.0f), 0x7bff);
  EXPECT_EQ(fp16_from_float(1.0f / 3.0f), 0x3555);
  EXPECT_EQ(fp16_to_float(0x3555), 0.333251953125f);
  EXPECT_EQ(fp16_to_float(0x0001), std::ldexp(1.0f, -24));
}

TEST(Fp16, RoundUpIsSmallestUpperBound) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> mag(-20.0f, 15.0f);
  for (int i = 0; i < 5000; ++i) {
    const float x = std::exp2(mag(rng));
    const std::uint16_t b = fp16_round_up(x);
    EXPECT_GE(fp16_to_float(b), x);
    if (b > 0) {
      EXPECT_LT(fp16_to_float(static_cast<std::uint16_t>(b - 1)), x);
    }
  }
  EXPECT_EQ(fp16_round_up(0.0f), 0);
  EXPECT_EQ(fp16_round_up(0.5f), 0x3800);
}

TEST(QuantLayout, BlockBytesAndRatios) {
  EXPECT_EQ(quant_block_bytes(4, 768), 386u);
  EXPECT_EQ(quant_block_bytes(3, 128), 50u);
  EXPECT_EQ(quant_block_bytes(3, 5), 4u);  // 15 bits round up to 2 bytes
  EXPECT_NEAR(compression_ratio(4, 768), 386.0 / 1536.0, 1e-15);
  EXPECT_NEAR(compression_ratio(4, 768), 0.2513, 1e-4);
  EXPECT_NEAR(compression_ratio(3, 128), 50.0 / 256.0, 1e-15);
  EXPECT_NEAR(compression_ratio(3, 128), 0.1953, 1e-4);
  EXPECT_THROW(compression_ratio(16, 64), ValueError);
  EXPECT_THROW(compression_ratio(4, 0), ValueError);
}

TEST(NearestCode, TiesGoToLowerIndex) {
  const auto cb = nf_codebook(4);
  const double mid = (cb[7] + cb[8]) / 2.0;
  EXPECT_EQ(nearest_code(cb, mid), 7);
  EXPECT_EQ(nearest_code(cb, -1.0), 0);
  EXPECT_EQ(nearest_code(cb, 1.0), 15);
  EXPECT_EQ(nearest_code(cb, 0.0), 7);
}

TEST(Quantize, ZeroBlockIsExact) {
  const std::vector<float> z(64, 0.0f);
  for (int bits : {3, 4}) {
    const auto blocks = quantize_row(z, bits, 32);
    for (const auto& b : blocks) EXPECT_EQ(b.scale_bits, 0);
    for (float v : dequantize_row(blocks, bits, 32)) EXPECT_EQ(v, 0.0f);
  }
}

TEST(Quantize, ConstantBlockOfRepresentableValueIsExact) {
  for (float c : {0.75f, -2.5f, 1024.0f}) {
    const std::vector<float> row(16, c);
    for (int bits : {3, 4}) {
      for (float v : dequantize_row(quantize_row(row, bits, 8), bits, 8)) EXPECT_EQ(v, c);
    }
  }
}

TEST(Quantize, MatchesExhaustiveOracleAndErrorBound) {
  struct Layout {
    int bits;
    std::size_t d, block;
  };
  for (const Layout& lay : {Layout{4, 768, 768}, Layout{3, 768, 128}, Layout{4, 96, 32},
                            Layout{3, 40, 8}}) {
    const auto cb = nf_codebook(lay.bits);
    const double half_gap = codebook_max_gap(lay.bits) / 2.0;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      const auto row = gaussian_row(lay.d, seed * 31 + lay.bits, 0.5f + static_cast<float>(seed));
      const auto blocks = quantize_row(row, lay.bits, lay.block);
      ASSERT_EQ(blocks.size(), lay.d / lay.block);
      const auto back = dequantize_row(blocks, lay.bits, lay.block);
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        float absmax = 0.0f;
        for (std::size_t i = 0; i < lay.block; ++i)
          absmax = std::max(absmax, std::abs(row[b * lay.block + i]));
        EXPECT_EQ(blocks[b].scale_bits, fp16_round_up(absmax));
        const double scale = blocks[b].scale();
        for (std::size_t i = 0; i < lay.block; ++i) {
          const std::size_t k = b * lay.block + i;
          const std::uint8_t code = oracle_code(cb, row[k] / scale);
          EXPECT_EQ(back[k], static_cast<float>(cb[code] * scale)) << k;
          EXPECT_LE(std::abs(back[k] - row[k]), scale * half_gap + 1e-6);
          EXPECT_LE(std::abs(back[k]), scale);
        }
      }
    }
  }
}

TEST(Quantize, InvalidInputs) {
  const std::vector<float> row(10, 1.0f);
  EXPECT_THROW(quantize_row(row, 4, 3), ValueError);
  EXPECT_THROW(quantize_row(row, 4, 0), ValueError);
  auto bad = row;
  bad[4] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(quantize_row(bad, 4, 5), NumericError);
  bad[4] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(quantize_row(bad, 3, 5), NumericError);
}

TEST(Packing, CodesAreLsbFirst) {
  // Pick values landing on known codes with scale 1.
  const auto cb4 = nf_codebook(4);
  std::vector<float> row{static_cast<float>(cb4[3]), static_cast<float>(cb4[10]), 1.0f,
                         static_cast<float>(cb4[0])};
  const auto blocks = quantize_row(row, 4, 4);
  ASSERT_EQ(blocks.size(), 1u);
  EXPECT_EQ(blocks[0].scale_bits, 0x3c00);
  ASSERT_EQ(blocks[0].packed.size(), 2u);
  EXPECT_EQ(blocks[0].packed[0], 0xA3);  // code 3 low nibble, code 10 high nibble
  EXPECT_EQ(blocks[0].packed[1], 0x0F);

  const auto cb3 = nf_codebook(3);
  const std::uint8_t codes[8] = {1, 7, 0, 5, 3, 2, 6, 4};
  std::vector<float> row3;
  for (auto c : codes) row3.push_back(static_cast<float>(cb3[c]));
  const auto b3 = quantize_row(row3, 3, 8);
  std::vector<std::uint8_t> expect(3, 0);
  for (std::size_t i = 0; i < 8; ++i)
    for (int bit = 0; bit < 3; ++bit)
      if (codes[i] >> bit & 1) expect[(3 * i + bit) / 8] |= std::uint8_t(1u << ((3 * i + bit) % 8));
  EXPECT_EQ(b3[0].packed, expect);

  std::vector<std::uint8_t> bytes;
  encode_blocks(b3, bytes);
  ASSERT_EQ(bytes.size(), quant_block_bytes(3, 8));
  EXPECT_EQ(bytes[0], 0x00);  // scale 1.0 = 0x3c00, little-endian
  EXPECT_EQ(bytes[1], 0x3c);
  EXPECT_EQ(decode_blocks(bytes, 3, 8, 1), b3);
}

TEST(Packing, RoundTripProperty) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int bits = seed % 2 ? 3 : 4;
    const std::size_t block = 8 + 8 * (seed % 5);
    const auto row = gaussian_row(block * 3, seed, 3.0f);
    const auto blocks = quantize_row(row, bits, block);
    std::vector<std::uint8_t> bytes;
    encode_blocks(blocks, bytes);
    EXPECT_EQ(bytes.size(), 3 * quant_block_bytes(bits, block));
    EXPECT_EQ(decode_blocks(bytes, bits, block, 3), blocks);
  }
}

}  // namespace
}  // namespace mole
