// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mole/analyst.h"
#include "mole/engine.h"
#include "mole/lut_file.h"
#include "mole/nf_quant.h"
#include "mole/reparam.h"
#include "mole/trainer.h"
#include "test_support.h"

namespace mole {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// 1. Train form and fp32 LUT form agree on logits and greedy tokens.
Outcome reparam_equivalence() {
  struct Shape {
    std::size_t layers, d, n;
  };
  const std::vector<Shape> shapes{{2, 32, 2}, {2, 64, 4}, {4, 32, 16}, {4, 64, 2}, {2, 32, 16},
                                  {4, 64, 4}};
  const auto t0 = Clock::now();
  Outcome o;
  double worst = 0.0;
  std::size_t token_mismatch = 0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& s = shapes[i];
    const auto cfg = testing::tiny_config(Variant::kMole, s.layers, s.d, s.n, 64);
    const auto params = init_params<float>(cfg, 100 + i, InitOptions{0.1, false});
    const auto bundle = reparameterize(params);
    InMemoryLut lut(bundle.tables);
    const auto prompts = random_prompts(100, cfg.vocab, 1, 32, 200 + i);
    const auto report = verify_equivalence(params, bundle.params, lut, prompts, 1e-5);
    worst = std::max(worst, report.max_rel_error);
    if (!report.pass) o.pass = false;
    for (const auto& p : report.prompts) token_mismatch += p.tokens_match ? 0 : 1;

    Engine<float> train_form(params, nullptr, EngineOptions{});
    EngineOptions lo;
    lo.runtime = Runtime::kMoleLut;
    Engine<float> lut_form(bundle.params, &lut, lo);
    for (std::size_t p = 0; p < prompts.size(); p += 10) {
      const std::span<const std::vector<TokenId>> lanes(prompts.data() + p, 10);
      if (train_form.decode(lanes, 16).generated != lut_form.decode(lanes, 16).generated) {
        ++token_mismatch;
      }
    }
  }
  const double secs = seconds_since(t0);
  if (token_mismatch != 0 || secs >= 60.0) o.pass = false;
  o.detail = std::to_string(shapes.size()) + " models x 100 prompts, max_rel_error=" +
             fmt("%.2e", worst) + " (tol 1e-05), token mismatches=" +
             std::to_string(token_mismatch) + ", " + fmt("%.1f", secs) + " s";
  return o;
}

// 2. Offloaded and loaded counts against the published table.
Outcome published_table() {
  Outcome o;
  int pass = 0, warn = 0, fail = 0;
  std::string warned;
  for (const auto& c : published_table_check()) {
    switch (c.status) {
      case CellStatus::kPass:
        ++pass;
        break;
      case CellStatus::kWarn:
        ++warn;
        warned = c.config + " " + c.column + " computed " + c.computed + " (" +
                 std::to_string(c.exact) + ") vs published " + c.published;
        break;
      case CellStatus::kFail:
        ++fail;
        o.detail += c.config + " " + c.column + " FAIL; ";
        break;
    }
  }
  o.pass = fail == 0 && pass == 19 && warn == 1;
  o.detail += std::to_string(pass) + " PASS, " + std::to_string(warn) + " WARN [" + warned +
              "], " + std::to_string(fail) + " FAIL";
  return o;
}

// 3. Monte Carlo expert loads under uniform routing and the cache policy.
Outcome expert_loads() {
  struct Case {
    std::size_t n, batch;
    double published;
  };
  const std::vector<Case> cases{{10, 1, 1.6},  {10, 8, 6.7},   {10, 32, 8.0},
                                {34, 1, 1.9},  {34, 8, 12.3},  {34, 32, 27.4}};
  const std::size_t k = 2, trials = 20000;
  Outcome o;
  for (const auto& c : cases) {
    const auto est = expected_expert_loads(c.n, k, c.batch, cache_capacity(k, c.batch), trials,
                                           1000 + c.n * 100 + c.batch);
    bool ok = std::abs(est.mean - c.published) <= 0.2;
    if (c.batch == 1) {
      // k - k^2 / N = k (N - k) / N, rounded once.
      const double exact = static_cast<double>(k * (c.n - k)) / static_cast<double>(c.n);
      ok = ok && est.closed_form && *est.closed_form == exact &&
           std::abs(est.mean - exact) <= 3.0 * est.std_error;
    }
    if (!ok) o.pass = false;
    o.detail += "N=" + std::to_string(c.n) + "/B=" + std::to_string(c.batch) + ": " +
                fmt("%.3f", est.mean) + " vs " + fmt("%.1f", c.published) + (ok ? "" : " (off)") +
                "; ";
  }
  o.detail += std::to_string(trials) + " steps each; batch-1 closed form 1.600 / " +
              fmt("%.3f", 2.0 - 4.0 / 34.0);
  return o;
}

// 4. Quantized layout ratios, per-step sizes, relaxed-tolerance verification.
Outcome quantization() {
  Outcome o;
  const double r4 = compression_ratio(4, 768), r3 = compression_ratio(3, 128);
  if (std::abs(r4 - 0.2513) > 1e-4 || std::abs(r3 - 0.1953) > 1e-4) o.pass = false;

  const auto preset = find_preset("160M MoLE-4E").config;
  const double fp16_bytes =
      static_cast<double>(preset.d_model * preset.n_experts * preset.n_layers * 2);
  const double kb16 = fp16_bytes / 1024.0, kb4 = fp16_bytes * r4 / 1024.0,
               kb3 = fp16_bytes * r3 / 1024.0;
  for (const auto& [got, want] : std::vector<std::pair<double, double>>{{kb16, 72.0},
                                                                        {kb4, 18.0},
                                                                        {kb3, 14.0}}) {
    if (std::abs(got / want - 1.0) > 0.03) o.pass = false;
  }

  const auto cfg = testing::tiny_config(Variant::kMole, 2, 64, 4, 64);
  const auto params = init_params<float>(cfg, 17, InitOptions{0.1, false});
  const auto bundle = reparameterize(params);
  const auto dir = testing::scratch_dir("accept_quant");
  const auto prompts = random_prompts(100, cfg.vocab, 1, 32, 5);
  std::string verdicts;
  for (const auto& [dtype, block] :
       std::vector<std::pair<LutDtype, std::size_t>>{{LutDtype::kNF4, 64}, {LutDtype::kNF3, 32}}) {
    const auto path = dir / (std::string(lut_dtype_name(dtype)) + ".lut");
    write_lut(bundle.tables, path, dtype, block);
    const auto lut = open_lut(path);
    const double tol = lut_tolerance(dtype);
    const auto rep = verify_equivalence(params, bundle.params, *lut, prompts, tol);
    if (!rep.pass) o.pass = false;
    verdicts += std::string(lut_dtype_name(dtype)) + " err " + fmt("%.3f", rep.max_rel_error) +
                " <= " + fmt("%.4f", tol) + (rep.pass ? " ok" : " FAILED") + "; ";
  }
  o.detail = "ratios " + fmt("%.4f", r4) + " / " + fmt("%.4f", r3) + "; 160M MoLE-4E per step " +
             fmt("%.1f", kb16) + "KB -> " + fmt("%.2f", kb4) + "KB -> " + fmt("%.2f", kb3) +
             "KB; " + verdicts;
  return o;
}

// 5. Analytic gradients against central differences.
Outcome gradients() {
  const auto t0 = Clock::now();
  Outcome o;
  std::string parts;
  for (const Variant v : {Variant::kMole, Variant::kMoe}) {
    const auto cfg = testing::gradcheck_config(v);
    const auto params = init_params<double>(cfg, 3, InitOptions{0.2, false});
    TrainConfig tc;
    if (v == Variant::kMoe) {
      tc.z_loss_coeff = 0.1;
      tc.balance_loss_coeff = 0.5;
    } else {
      tc.z_loss_coeff = 0.0;
      tc.balance_loss_coeff = 0.0;
    }
    const auto batch = testing::random_batch(3, 8, cfg.vocab, 5);
    double worst = 0.0;
    std::string worst_name;
    std::size_t tensors = 0;
    for (const auto& t : testing::gradient_check(params, batch, tc)) {
      ++tensors;
      if (t.rel_error > worst || worst_name.empty()) {
        worst = std::max(worst, t.rel_error);
        worst_name = t.name;
      }
      if (!(t.rel_error < 1e-4) || t.analytic_norm == 0.0) o.pass = false;
    }
    parts += std::string(variant_name(v)) + ": " + std::to_string(tensors) + " tensors, worst " +
             fmt("%.2e", worst) + " (" + worst_name + "); ";
  }
  const double secs = seconds_since(t0);
  if (secs >= 120.0) o.pass = false;
  o.detail = parts + fmt("%.1f", secs) + " s";
  return o;
}

// 6. 200-step toy training lowers LM loss by at least 20% for each variant.
Outcome training() {
  const auto t0 = Clock::now();
  Outcome o;
  const auto corpus = pattern_corpus(65536, 97, 256, 1);
  for (const Variant v : {Variant::kDense, Variant::kMoe, Variant::kMole}) {
    ModelConfig cfg = testing::tiny_config(v, 2, 64, 4, 256);
    cfg.max_seq = 128;
    TrainConfig tc;
    tc.peak_lr = 3e-3;
    tc.total_steps = 200;
    tc.batch = 4;
    tc.seq_len = 64;
    tc.seed = 11;
    if (v != Variant::kMoe) {
      tc.z_loss_coeff = 0.0;
      tc.balance_loss_coeff = 0.0;
    }
    const auto result = train(init_params<float>(cfg, 21), corpus, tc);
    bool finite = true;
    for (const auto& s : result.trace) finite = finite && std::isfinite(s.loss.total);
    const double before = result.initial_eval.lm, after = result.final_eval.lm;
    const double drop = 1.0 - after / before;
    if (!finite || !(drop >= 0.2)) o.pass = false;
    o.detail += std::string(variant_name(v)) + " " + fmt("%.3f", before) + " -> " +
                fmt("%.3f", after) + " (-" + fmt("%.0f", 100.0 * drop) + "%); ";
  }
  const double secs = seconds_since(t0);
  if (secs >= 300.0) o.pass = false;
  o.detail += fmt("%.1f", secs) + " s";
  return o;
}

// 7. Simulated transfer at 410M shapes and composition-independent LUT bytes.
Outcome bandwidth() {
  Outcome o;
  const BandwidthModel bw{16e9, 0.0};
  const std::vector<Preset> presets{find_preset("410M MoE-10E"), find_preset("410M MoLE-4E")};
  std::map<std::pair<std::string, std::size_t>, double> t;
  for (const auto& r : latency_report(presets, bw, {1, 8, 32})) t[{r.config, r.batch}] = r.transfer_seconds;
  for (std::size_t b : {1u, 8u, 32u}) {
    const double moe = t[{"410M MoE-10E", b}], mole = t[{"410M MoLE-4E", b}];
    const double share = mole / moe;
    if (!(share < 0.01)) o.pass = false;
    o.detail += "B=" + std::to_string(b) + " MoLE/MoE " + fmt("%.2e", mole) + "/" +
                fmt("%.2e", moe) + " s (" + fmt("%.3f", 100.0 * share) + "%); ";
  }

  const auto cfg = testing::tiny_config(Variant::kMole, 2, 32, 4, 64);
  const auto bundle = reparameterize(init_params<float>(cfg, 9));
  const auto dir = testing::scratch_dir("accept_bw");
  write_lut(bundle.tables, dir / "a.lut", LutDtype::kF16);
  const auto lut = open_lut(dir / "a.lut");
  EngineOptions lo;
  lo.runtime = Runtime::kMoleLut;
  lo.bandwidth = bw;
  Engine<float> engine(bundle.params, lut.get(), lo);
  bool identical = true;
  std::vector<StepRecord> ref;
  for (std::uint64_t composition = 0; composition < 4; ++composition) {
    const auto prompts = random_prompts(6, cfg.vocab, 8, 8, 300 + composition);
    const auto recs = engine.decode(prompts, 12).meter.records();
    if (composition == 0) {
      ref = recs;
    } else {
      for (std::size_t s = 0; s < recs.size(); ++s) {
        identical = identical && recs[s].bytes == ref[s].bytes &&
                    recs[s].sim_seconds == ref[s].sim_seconds;
      }
    }
  }
  const std::uint64_t expect = 6ULL * cfg.n_experts * cfg.d_model * cfg.n_layers * 2;
  if (!identical || ref.back().bytes != expect) o.pass = false;
  o.detail += std::string("LUT bytes across 4 compositions of 6 lanes ") +
              (identical ? "identical" : "DIFFER") + " (" + std::to_string(ref.back().bytes) +
              " per decode step)";
  return o;
}

// 8. Golden LUT fixtures.
Outcome format_stability() {
  using Kind = LutFormatError::Kind;
  Outcome o;
  const fs::path data = testing::data_dir();
  const auto dir = testing::scratch_dir("accept_golden");
  testing::write_golden_set(dir);
  std::string notes;
  for (const char* name : {testing::kGoldenFp16, testing::kGoldenNf3, testing::kGoldenBadMagic,
                           testing::kGoldenTruncated}) {
    if (testing::read_bytes(dir / name) != testing::read_bytes(data / name)) {
      o.pass = false;
      notes += std::string(name) + " regenerates differently; ";
    }
  }
  for (const char* name : {testing::kGoldenFp16, testing::kGoldenNf3}) {
    const auto src = open_lut(data / name);
    const auto out = dir / (std::string("rt_") + name);
    write_lut(*src, out, src->header().dtype, src->header().block_size);
    if (testing::read_bytes(out) != testing::read_bytes(data / name)) {
      o.pass = false;
      notes += std::string(name) + " does not round-trip; ";
    }
  }
  auto kind_of = [&](const char* name) -> std::string {
    try {
      open_lut(data / name);
    } catch (const LutFormatError& e) {
      return e.kind() == Kind::kBadMagic        ? "bad-magic"
             : e.kind() == Kind::kPayloadLength ? "payload-length"
                                                : "other";
    }
    return "accepted";
  };
  const std::string magic = kind_of(testing::kGoldenBadMagic);
  const std::string trunc = kind_of(testing::kGoldenTruncated);
  if (magic != "bad-magic" || trunc != "payload-length") o.pass = false;
  o.detail = notes + "fp16 and nf3 round-trip bit-exactly; corrupt header -> " + magic +
             ", truncated payload -> " + trunc;
  return o;
}

}  // namespace
}  // namespace mole

int main() {
  using Check = std::pair<const char*, std::function<mole::Outcome()>>;
  const std::vector<Check> checks{
      {"reparameterization equivalence", mole::reparam_equivalence},
      {"published table reproduction", mole::published_table},
      {"expert-load averages", mole::expert_loads},
      {"quantization accounting", mole::quantization},
      {"gradient correctness", mole::gradients},
      {"training sanity", mole::training},
      {"bandwidth simulation", mole::bandwidth},
      {"format stability", mole::format_stability},
  };
  int failed = 0;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    mole::Outcome o;
    try {
      o = checks[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::printf("criterion %zu %s: %s: %s\n", i + 1, o.pass ? "PASS" : "FAIL", checks[i].first,
                o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(checks.size()) - failed,
              checks.size());
  return failed == 0 ? 0 : 1;
}
