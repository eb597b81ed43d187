// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <filesystem>
#include <unistd.h>

#include "mole/lut_file.h"
#include "mole/reparam.h"

namespace mole {
namespace {

ModelConfig bench_config() {
  ModelConfig c;
  c.variant = Variant::kMole;
  c.n_layers = 2;
  c.d_model = 128;
  c.n_heads = 8;
  c.d_shared = 256;
  c.d_routed = 256;
  c.n_experts = 4;
  c.vocab = 512;
  c.max_seq = 128;
  return c;
}

// One LUT file per dtype, written once per process.
const std::filesystem::path& lut_path(LutDtype dtype) {
  static const auto tables = reparameterize(init_params<float>(bench_config(), 1)).tables;
  static std::filesystem::path paths[4];
  auto& p = paths[static_cast<int>(dtype)];
  if (p.empty()) {
    p = std::filesystem::temp_directory_path() /
        ("mole_bench_" + std::to_string(::getpid()) + "_" + std::string(lut_dtype_name(dtype)) +
         ".lut");
    write_lut(tables, p, dtype, is_quantized(dtype) ? 128 : 0);
  }
  return p;
}

void BM_LutGather(benchmark::State& state) {
  const auto dtype = static_cast<LutDtype>(state.range(0));
  const auto batch = static_cast<std::size_t>(state.range(1));
  const auto lut = open_lut(lut_path(dtype));
  const auto ids = random_prompts(1, 512, batch, batch, 7).front();
  for (auto _ : state) benchmark::DoNotOptimize(lut->gather(1, ids));
  state.SetBytesProcessed(static_cast<std::int64_t>(lut->bytes_transferred()));
  state.SetLabel(std::string(lut_dtype_name(dtype)));
}
BENCHMARK(BM_LutGather)
    ->ArgsProduct({{static_cast<int>(LutDtype::kF16), static_cast<int>(LutDtype::kNF4),
                    static_cast<int>(LutDtype::kNF3)},
                   {1, 32}});

void BM_Reparameterize(benchmark::State& state) {
  const auto params = init_params<float>(bench_config(), 2);
  for (auto _ : state) benchmark::DoNotOptimize(reparameterize(params));
}
BENCHMARK(BM_Reparameterize)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace mole
