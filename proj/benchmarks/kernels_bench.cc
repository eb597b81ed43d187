// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <random>

#include "mole/kernels.h"
#include "mole/nf_quant.h"

namespace mole {
namespace {

Tensor<float> random_tensor(Shape shape, std::uint64_t seed) {
  Tensor<float> t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_tensor({n, n}, 1);
  const auto b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_QuantizeRow(benchmark::State& state) {
  const int bits = static_cast<int>(state.range(0));
  const auto block = static_cast<std::size_t>(state.range(1));
  const auto row = random_tensor({768}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(quantize_row(row.values(), bits, block));
  state.SetItemsProcessed(state.iterations() * 768);
}
BENCHMARK(BM_QuantizeRow)->Args({4, 768})->Args({3, 128});

void BM_DequantizeRow(benchmark::State& state) {
  const int bits = static_cast<int>(state.range(0));
  const auto block = static_cast<std::size_t>(state.range(1));
  const auto blocks = quantize_row(random_tensor({768}, 4).values(), bits, block);
  for (auto _ : state) benchmark::DoNotOptimize(dequantize_row(blocks, bits, block));
  state.SetItemsProcessed(state.iterations() * 768);
}
BENCHMARK(BM_DequantizeRow)->Args({4, 768})->Args({3, 128});

}  // namespace
}  // namespace mole
