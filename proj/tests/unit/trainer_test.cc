// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "mole/trainer.h"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "mole/checkpoint.h"
#include "test_support.h"

namespace mole {
namespace {

using testing::gradcheck_config;
using testing::random_batch;

Tensor<double> random_logits(std::size_t rows, std::size_t cols, std::uint64_t seed,
                             double scale = 2.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t({rows, cols});
  for (auto& v : t.values()) v = n(rng);
  return t;
}

TrainConfig lm_only() {
  TrainConfig t;
  t.z_loss_coeff = 0.0;
  t.balance_loss_coeff = 0.0;
  return t;
}

// ---- losses ------------------------------------------------------------------

TEST(LmLoss, UniformLogitsGiveLogVocab) {
  Tensor<double> logits({3, 7});
  const std::vector<TokenId> t{0, 3, 6};
  EXPECT_NEAR(lm_loss(logits, t), std::log(7.0), 1e-14);
}

TEST(LmLoss, LargeMarginApproachesZero) {
  Tensor<double> logits({2, 5});
  logits.at(0, 1) = 100.0;
  logits.at(1, 4) = 100.0;
  const std::vector<TokenId> t{1, 4};
  EXPECT_LT(lm_loss(logits, t), 1e-40);
}

TEST(LmLoss, MatchesEnumerationOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto logits = random_logits(6, 9, seed);
    std::vector<TokenId> t(6);
    for (std::size_t i = 0; i < 6; ++i) t[i] = static_cast<TokenId>((seed + 3 * i) % 9);
    long double total = 0.0L;
    for (std::size_t r = 0; r < 6; ++r) {
      long double z = 0.0L;
      for (std::size_t c = 0; c < 9; ++c) z += std::exp(static_cast<long double>(logits.at(r, c)));
      total += -std::log(std::exp(static_cast<long double>(logits.at(r, t[r]))) / z);
    }
    EXPECT_NEAR(lm_loss(logits, t), static_cast<double>(total / 6.0L), 1e-10);
  }
}

TEST(LmLoss, OutOfRangeTargetThrows) {
  Tensor<double> logits({1, 4});
  const std::vector<TokenId> t{4};
  EXPECT_THROW(lm_loss(logits, t), ValueError);
}

TEST(BalanceLoss, UniformAndBalancedIsOne) {
  const std::size_t n = 4, k = 2;
  Tensor<double> probs({4, n});
  probs.fill(0.25);
  const std::vector<std::vector<std::uint32_t>> sel{{0, 1}, {2, 3}, {0, 1}, {2, 3}};
  EXPECT_NEAR(balance_loss(probs, std::span(sel), n, k), 1.0, 1e-15);
}

TEST(BalanceLoss, CollapsedRoutingGivesN) {
  const std::size_t n = 5;
  Tensor<double> probs({3, n});
  for (std::size_t r = 0; r < 3; ++r) probs.at(r, 0) = 1.0;
  const std::vector<std::vector<std::uint32_t>> sel{{0}, {0}, {0}};
  EXPECT_NEAR(balance_loss(probs, std::span(sel), n, 1), 5.0, 1e-15);
}

TEST(BalanceLoss, MatchesCountingOracle) {
  std::mt19937_64 rng(3);
  const std::size_t rows = 10, n = 6, k = 2;
  Tensor<double> probs({rows, n});
  std::vector<std::vector<std::uint32_t>> sel(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> s(n);
    for (auto& v : s) v = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
    double z = 0.0;
    for (double v : s) z += v;
    for (std::size_t j = 0; j < n; ++j) probs.at(r, j) = s[j] / z;
    std::vector<std::uint32_t> idx{0, 1, 2, 3, 4, 5};
    std::shuffle(idx.begin(), idx.end(), rng);
    sel[r] = {std::min(idx[0], idx[1]), std::max(idx[0], idx[1])};
  }
  double expect = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double count = 0.0, p = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      for (auto e : sel[r]) count += e == j ? 1.0 : 0.0;
      p += probs.at(r, j);
    }
    expect += (count / (rows * k)) * (p / rows);
  }
  expect *= n;
  EXPECT_NEAR(balance_loss(probs, std::span(sel), n, k), expect, 1e-10);
}

TEST(BalanceLoss, RejectsNonTopKRouting) {
  Tensor<double> probs({1, 2});
  const std::vector<std::vector<std::uint32_t>> sel{{0, 1}};
  EXPECT_THROW(balance_loss(probs, std::span(sel), 2, 0), ValueError);
}

TEST(ZLoss, AnalyticCases) {
  Tensor<double> zeros({3, 4});
  EXPECT_NEAR(z_loss(zeros), std::log(4.0) * std::log(4.0), 1e-14);
  Tensor<double> single({2, 1}, {1.5, -0.5});
  EXPECT_NEAR(z_loss(single), (1.5 * 1.5 + 0.25) / 2.0, 1e-14);
}

TEST(ZLoss, MatchesOracle) {
  const auto logits = random_logits(8, 5, 11);
  long double total = 0.0L;
  for (std::size_t r = 0; r < 8; ++r) {
    long double z = 0.0L;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(static_cast<long double>(logits.at(r, c)));
    total += std::log(z) * std::log(z);
  }
  EXPECT_NEAR(z_loss(logits), static_cast<double>(total / 8.0L), 1e-10);
}

// ---- gradients -------------------------------------------------------------------

class GradCheck : public ::testing::TestWithParam<Variant> {};

TEST_P(GradCheck, AnalyticMatchesCentralDifferences) {
  const Variant v = GetParam();
  const auto c = gradcheck_config(v);
  InitOptions init;
  init.stddev = 0.3;
  const auto p = init_params<double>(c, 11, init);
  ASSERT_LE(parameter_count(p), 5000u);
  TrainConfig t;
  if (v == Variant::kMoe) {
    // Large coefficients keep the auxiliary gradients well above FD noise.
    t.z_loss_coeff = 0.1;
    t.balance_loss_coeff = 0.5;
  }
  const auto batch = random_batch(3, 8, c.vocab, 5);
  for (const auto& r : testing::gradient_check(p, batch, t)) {
    EXPECT_LT(r.rel_error, 1e-4) << r.name << " analytic " << r.analytic_norm << " numeric "
                                 << r.numeric_norm;
    EXPECT_GT(r.analytic_norm + r.numeric_norm, 0.0) << r.name << " is never exercised";
  }
}

INSTANTIATE_TEST_SUITE_P(AllVariants, GradCheck,
                         ::testing::Values(Variant::kDense, Variant::kMoe, Variant::kMole),
                         [](const auto& info) { return std::string(variant_name(info.param)); });

TEST(Backward, ZeroRoutedExpertsForceDeadPathZeros) {
  const auto c = gradcheck_config(Variant::kMole);
  InitOptions init;
  init.stddev = 0.3;
  init.zero_routed = true;
  const auto p = init_params<double>(c, 2, init);
  Batch b;
  b.inputs = {{1, 2, 3, 1}};
  b.targets = {{2, 3, 1, 2}};
  GradientSet<double> g;
  backward(p, b, lm_only(), g);
  for (const auto& layer : g.layers) {
    for (double v : layer.router.values()) EXPECT_EQ(v, 0.0);
    for (double v : layer.expert_norm.values()) EXPECT_EQ(v, 0.0);
    for (const auto& f : layer.routed) {
      for (double v : f.w_in.values()) EXPECT_EQ(v, 0.0);
      for (double v : f.b_in.values()) EXPECT_EQ(v, 0.0);
      for (double v : f.w_out.values()) EXPECT_EQ(v, 0.0);
    }
  }
  // Embedding rows of ids absent from the inputs receive no gradient.
  for (TokenId id = 0; id < c.vocab; ++id) {
    const bool used = id >= 1 && id <= 3;
    double norm = 0.0;
    for (double v : g.embedding.row(id)) norm += v * v;
    if (used) {
      EXPECT_GT(norm, 0.0) << id;
    } else {
      EXPECT_EQ(norm, 0.0) << id;
    }
  }
}

TEST(Backward, ZeroAuxCoefficientsReproduceLmPathExactly) {
  const auto batch = random_batch(2, 6, 11, 9);
  {
    const auto p = init_params<double>(gradcheck_config(Variant::kMoe), 4, InitOptions{0.3, false});
    GradientSet<double> g;
    const auto loss = backward(p, batch, lm_only(), g);
    // The auxiliary values are still reported but excluded from the total.
    EXPECT_EQ(loss.total, loss.lm);
    EXPECT_GT(loss.z, 0.0);
  }
  {
    const auto p = init_params<double>(gradcheck_config(Variant::kMole), 4, InitOptions{0.3, false});
    GradientSet<double> a, b;
    const auto la = backward(p, batch, lm_only(), a);
    const auto lb = backward(p, batch, TrainConfig{}, b);  // aux terms never apply to MoLE
    EXPECT_EQ(la.total, lb.total);
    EXPECT_EQ(la.total, la.lm);
    auto an = named_tensors(a), bn = named_tensors(b);
    for (std::size_t i = 0; i < an.size(); ++i) EXPECT_EQ(*an[i].tensor, *bn[i].tensor) << an[i].name;
  }
}

TEST(Backward, EvaluateLossMatchesBackwardLoss) {
  const auto p = init_params<double>(gradcheck_config(Variant::kMoe), 4, InitOptions{0.3, false});
  const auto batch = random_batch(3, 5, 11, 2);
  GradientSet<double> g;
  const auto a = backward(p, batch, TrainConfig{}, g);
  const auto b = evaluate_loss(p, batch, TrainConfig{});
  EXPECT_NEAR(a.total, b.total, 1e-12);
  EXPECT_GT(a.z, 0.0);
  EXPECT_GT(a.balance, 0.0);
}

// ---- optimizer ------------------------------------------------------------------

TEST(LrSchedule, WarmupPeakMidpointAndFloor) {
  TrainConfig t;
  t.total_steps = 1000;
  t.warmup_fraction = 0.01;
  t.peak_lr = 6e-4;
  t.min_lr_fraction = 0.1;
  EXPECT_EQ(lr_at(0, t), 0.0);
  EXPECT_NEAR(lr_at(5, t), 3e-4, 1e-18);
  EXPECT_DOUBLE_EQ(lr_at(10, t), 6e-4);
  EXPECT_NEAR(lr_at(505, t), (6e-4 + 6e-5) / 2.0, 1e-12);
  EXPECT_NEAR(lr_at(1000, t), 6e-5, 1e-18);
  EXPECT_THROW(lr_at(1001, t), ValueError);
  double prev = lr_at(10, t);
  for (std::size_t s = 11; s <= 1000; ++s) {
    const double cur = lr_at(s, t);
    EXPECT_LE(cur, prev);
    prev = cur;
  }
}

TEST(TrainConfig, ValidationNamesField) {
  TrainConfig t;
  t.warmup_fraction = 0.0;
  try {
    t.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "warmup_fraction");
  }
  t = TrainConfig{};
  t.betas = {0.9, 1.0};
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.grad_clip = 0.0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Adam, ZeroGradientsOnlyDecay) {
  auto p = init_params<double>(gradcheck_config(Variant::kDense), 1, InitOptions{0.3, false});
  const auto orig = p;
  auto state = make_adam_state(p);
  auto g = zeros_like(p);
  TrainConfig t;
  adam_step(p, g, state, 1e-2, t);
  auto pn = named_tensors(p), on = named_tensors(const_cast<ModelParams<double>&>(orig));
  for (std::size_t i = 0; i < pn.size(); ++i)
    for (std::size_t j = 0; j < pn[i].tensor->size(); ++j)
      EXPECT_NEAR((*pn[i].tensor)[j], (*on[i].tensor)[j] * (1.0 - 1e-2 * 0.01), 1e-15);
}

TEST(Adam, FirstStepWithUnitGradientMovesByLr) {
  auto p = init_params<double>(gradcheck_config(Variant::kDense), 1, InitOptions{0.3, false});
  const auto orig = p;
  auto state = make_adam_state(p);
  auto g = zeros_like(p);
  for (auto& nt : named_tensors(g)) nt.tensor->fill(1.0);
  TrainConfig t;
  t.grad_clip = 1e9;  // no clipping
  const double lr = 1e-3;
  adam_step(p, g, state, lr, t);
  auto pn = named_tensors(p), on = named_tensors(const_cast<ModelParams<double>&>(orig));
  for (std::size_t i = 0; i < pn.size(); ++i) {
    for (std::size_t j = 0; j < pn[i].tensor->size(); ++j) {
      const double o = (*on[i].tensor)[j];
      EXPECT_NEAR((*pn[i].tensor)[j], o - lr * (1.0 / (1.0 + 1e-8) + 0.01 * o), 1e-15);
    }
  }
}

TEST(Adam, ClippingBoundsGlobalNormProperty) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    auto g = zeros_like(init_params<double>(gradcheck_config(Variant::kMoe), 1));
    for (auto& nt : named_tensors(g))
      for (auto& v : nt.tensor->values()) v = n(rng);
    const double clip = 0.1 + trial;
    const double before = global_norm(g);
    const double reported = clip_global_norm(g, clip);
    EXPECT_EQ(reported, before);
    EXPECT_LE(global_norm(g), clip + 1e-9);
    if (before <= clip) {
      EXPECT_NEAR(global_norm(g), before, 1e-12);
    }
  }
}

// ---- loop -------------------------------------------------------------------------

TEST(Sampler, TargetsAreShiftedInputsAndSeeded) {
  const auto corpus = pattern_corpus(1000, 13, 256, 2);
  BatchSampler a(corpus, 3, 8, 5), b(corpus, 3, 8, 5);
  for (int i = 0; i < 4; ++i) {
    const auto x = a.next();
    const auto y = b.next();
    EXPECT_EQ(x.inputs, y.inputs);
    for (std::size_t s = 0; s < 3; ++s) {
      ASSERT_EQ(x.inputs[s].size(), 8u);
      for (std::size_t t = 0; t + 1 < 8; ++t) EXPECT_EQ(x.targets[s][t], x.inputs[s][t + 1]);
    }
  }
}

TEST(PatternCorpus, RepeatsWithPeriod) {
  const auto c = pattern_corpus(500, 17, 256, 1);
  ASSERT_EQ(c.size(), 500u);
  for (std::size_t i = 17; i < c.size(); ++i) EXPECT_EQ(c[i], c[i - 17]);
  for (TokenId id : c) EXPECT_LT(id, 256u);
}

TrainConfig short_run() {
  TrainConfig t;
  t.total_steps = 50;
  t.batch = 2;
  t.seq_len = 16;
  t.peak_lr = 3e-3;
  t.warmup_fraction = 0.1;
  return t;
}

TEST(Train, DeterministicAcrossRuns) {
  const auto c = testing::tiny_config(Variant::kMoe, 1, 16, 4, 32);
  const auto corpus = pattern_corpus(2000, 11, 32, 3);
  const auto a = train(init_params<float>(c, 7), corpus, short_run());
  const auto b = train(init_params<float>(c, 7), corpus, short_run());
  EXPECT_EQ(encode_checkpoint(to_checkpoint(a.params)),
            encode_checkpoint(to_checkpoint(b.params)));
  ASSERT_EQ(a.trace.size(), 50u);
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    EXPECT_EQ(a.trace[i].loss.total, b.trace[i].loss.total);
    EXPECT_EQ(a.trace[i].lr, lr_at(i + 1, short_run()));
  }
}

TEST(Train, ZeroLearningRateLeavesParamsAndLossConstant) {
  const auto c = testing::tiny_config(Variant::kMole, 1, 16, 2, 32);
  const std::vector<TokenId> corpus(500, 7);  // every window identical
  auto t = short_run();
  t.peak_lr = 0.0;
  const auto init = init_params<float>(c, 3);
  const auto r = train(init, corpus, t);
  EXPECT_EQ(encode_checkpoint(to_checkpoint(r.params)), encode_checkpoint(to_checkpoint(init)));
  for (const auto& s : r.trace) EXPECT_EQ(s.loss.total, r.trace.front().loss.total);
}

TEST(Train, NonFiniteLossAbortsNamingTheStep) {
  const auto c = testing::tiny_config(Variant::kDense, 1, 16, 0, 32);
  auto p = init_params<float>(c, 3);
  p.lm_head.fill(std::numeric_limits<float>::quiet_NaN());
  const auto corpus = pattern_corpus(200, 5, 32, 1);
  EXPECT_THROW(train(p, corpus, short_run()), NumericError);
}

TEST(Train, WritesCheckpointAndLossCsv) {
  const auto dir = testing::scratch_dir("train");
  const auto c = testing::tiny_config(Variant::kMole, 1, 16, 2, 32);
  const auto corpus = pattern_corpus(2000, 11, 32, 3);
  auto t = short_run();
  t.total_steps = 5;
  const auto r = train(init_params<float>(c, 1), corpus, t,
                       TrainOutputs{dir / "ck.mole", dir / "loss.csv"});
  const auto back = load_checkpoint<float>(dir / "ck.mole");
  EXPECT_EQ(encode_checkpoint(to_checkpoint(back)), encode_checkpoint(to_checkpoint(r.params)));
  const auto csv = read_file_bytes(dir / "loss.csv");
  const std::string text(csv.begin(), csv.end());
  EXPECT_EQ(text.rfind("step,lr,lm_loss,z_loss,balance_loss,total\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 6);
}

}  // namespace
}  // namespace mole
