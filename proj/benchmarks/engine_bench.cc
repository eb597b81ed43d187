// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <optional>

#include "mole/engine.h"
#include "mole/reparam.h"

namespace mole {
namespace {

ModelConfig toy(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.n_layers = 2;
  c.d_model = 64;
  c.n_heads = 8;
  c.vocab = 256;
  c.max_seq = 128;
  c.d_shared = v == Variant::kMoe ? 0 : 128;
  c.d_routed = v == Variant::kDense ? 0 : 128;
  c.n_experts = v == Variant::kDense ? 0 : 4;
  c.top_k = v == Variant::kMoe ? 2 : 0;
  return c;
}

// 32 generated tokens per lane, train-form MoLE vs LUT-form MoLE vs MoE.
void BM_Decode(benchmark::State& state) {
  const auto runtime = static_cast<Runtime>(state.range(0));
  const auto lanes = static_cast<std::size_t>(state.range(1));
  const Variant v = runtime == Runtime::kMoeOffload ? Variant::kMoe : Variant::kMole;
  const auto params = init_params<float>(toy(v), 1);
  std::optional<InferenceBundle<float>> bundle;
  std::optional<InMemoryLut> lut;
  if (runtime == Runtime::kMoleLut) {
    bundle.emplace(reparameterize(params));
    lut.emplace(bundle->tables);
  }
  EngineOptions o;
  o.runtime = runtime;
  Engine<float> engine(bundle ? bundle->params : params, lut ? &*lut : nullptr, o);
  const auto prompts = random_prompts(lanes, 256, 16, 16, 3);
  for (auto _ : state) benchmark::DoNotOptimize(engine.decode(prompts, 32));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(32 * lanes));
  state.SetLabel(runtime == Runtime::kResident ? "mole train form" : std::string(runtime_name(runtime)));
}
BENCHMARK(BM_Decode)
    ->ArgsProduct({{static_cast<int>(Runtime::kResident), static_cast<int>(Runtime::kMoleLut),
                    static_cast<int>(Runtime::kMoeOffload)},
                   {1, 8}})
    ->Unit(benchmark::kMillisecond);

void BM_SimulateMoeOffload(benchmark::State& state) {
  ModelConfig c = toy(Variant::kMoe);
  c.n_experts = 10;
  const auto batch = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(simulate_moe_offload(c, batch, 1000, BandwidthModel{}, 1));
  }
}
BENCHMARK(BM_SimulateMoeOffload)->Arg(1)->Arg(32);

}  // namespace
}  // namespace mole

// The packaged benchmark_main archive carries LTO bytecode from another
// compiler release, so the entry point is defined here.
BENCHMARK_MAIN();
