// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "test_support.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <unistd.h>

#include "mole/reparam.h"

namespace mole::testing {

ModelConfig gradcheck_config(Variant variant) {
  ModelConfig c;
  c.variant = variant;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.vocab = 11;
  c.max_seq = 16;
  c.rotary_fraction = 0.25;
  switch (variant) {
    case Variant::kDense:
      c.d_shared = 8;
      c.d_routed = 0;
      c.n_experts = 0;
      c.top_k = 0;
      break;
    case Variant::kMoe:
      c.d_shared = 0;
      c.d_routed = 8;
      c.n_experts = 3;
      c.top_k = 2;
      break;
    case Variant::kMole:
      c.d_shared = 8;
      c.d_routed = 8;
      c.n_experts = 3;
      c.top_k = 0;
      break;
  }
  return c;
}

ModelConfig tiny_config(Variant variant, std::size_t n_layers, std::size_t d,
                        std::size_t n_experts, std::size_t vocab) {
  ModelConfig c;
  c.variant = variant;
  c.n_layers = n_layers;
  c.d_model = d;
  c.n_heads = std::max<std::size_t>(1, d / 8);
  c.vocab = vocab;
  c.max_seq = 64;
  c.rotary_fraction = 0.25;
  c.d_shared = variant == Variant::kMoe ? 0 : 2 * d;
  c.d_routed = variant == Variant::kDense ? 0 : 2 * d;
  c.n_experts = variant == Variant::kDense ? 0 : n_experts;
  c.top_k = variant == Variant::kMoe ? 2 : 0;
  return c;
}

Batch random_batch(std::size_t batch, std::size_t seq_len, std::size_t vocab,
                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> id(0, static_cast<TokenId>(vocab - 1));
  Batch b;
  for (std::size_t s = 0; s < batch; ++s) {
    std::vector<TokenId> seq(seq_len + 1);
    for (auto& t : seq) t = id(rng);
    b.inputs.emplace_back(seq.begin(), seq.end() - 1);
    b.targets.emplace_back(seq.begin() + 1, seq.end());
  }
  return b;
}

std::vector<TensorCheck> gradient_check(const ModelParams<double>& params, const Batch& batch,
                                        const TrainConfig& config, double rel_step) {
  GradientSet<double> grads;
  backward(params, batch, config, grads);
  ModelParams<double> probe = params;
  auto probe_tensors = named_tensors(probe);
  auto grad_tensors = named_tensors(grads);
  std::vector<TensorCheck> out;
  for (std::size_t t = 0; t < probe_tensors.size(); ++t) {
    Tensor<double>& theta = *probe_tensors[t].tensor;
    const Tensor<double>& g = *grad_tensors[t].tensor;
    double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double orig = theta[i];
      const double h = rel_step * std::max(1.0, std::abs(orig));
      theta[i] = orig + h;
      const double up = evaluate_loss(probe, batch, config).total;
      theta[i] = orig - h;
      const double down = evaluate_loss(probe, batch, config).total;
      theta[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      diff_sq += (g[i] - numeric) * (g[i] - numeric);
      a_sq += g[i] * g[i];
      n_sq += numeric * numeric;
    }
    TensorCheck c;
    c.name = probe_tensors[t].name;
    c.analytic_norm = std::sqrt(a_sq);
    c.numeric_norm = std::sqrt(n_sq);
    const double denom = std::max({c.analytic_norm, c.numeric_norm, 1e-300});
    c.rel_error = (a_sq == 0.0 && n_sq == 0.0) ? 0.0 : std::sqrt(diff_sq) / denom;
    out.push_back(c);
  }
  return out;
}

std::filesystem::path scratch_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("mole_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::filesystem::path data_dir() { return MOLE_TEST_DATA_DIR; }

std::vector<LutTable> golden_tables() {
  const auto params =
      init_params<float>(tiny_config(Variant::kMole, 2, 16, 2, 16), 2026, InitOptions{0.1, false});
  return reparameterize(params).tables;
}

void write_golden_set(const std::filesystem::path& dir) {
  const auto tables = golden_tables();
  write_lut(tables, dir / kGoldenFp16, LutDtype::kF16);
  write_lut(tables, dir / kGoldenNf3, LutDtype::kNF3, 8);
  auto bytes = read_bytes(dir / kGoldenFp16);
  auto bad = bytes;
  bad[0] = 'X';
  write_bytes(dir / kGoldenBadMagic, bad);
  bytes.resize(bytes.size() - 100);
  write_bytes(dir / kGoldenTruncated, bytes);
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
}

}  // namespace mole::testing
