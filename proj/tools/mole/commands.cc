// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "commands.h"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "config_io.h"
#include "manifest.h"
#include "mole/analyst.h"
#include "mole/checkpoint.h"
#include "mole/engine.h"
#include "mole/lut_file.h"
#include "mole/nf_quant.h"
#include "mole/reparam.h"
#include "mole/trainer.h"

namespace mole::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

/// Raised for a failed verification (exit 1) after the report is printed.
struct VerificationFailed {};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<TokenId> parse_ids(const std::string& text) {
  std::vector<TokenId> ids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      throw ConfigError("prompt", "expected comma-separated token ids, got '" + item + "'");
    }
    if (used != item.size()) throw ConfigError("prompt", "bad token id '" + item + "'");
    ids.push_back(static_cast<TokenId>(v));
  }
  return ids;
}

std::string join_ids(const std::vector<TokenId>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(ids[i]);
  }
  return s;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out_dir = "run";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, batch;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  RunConfig rc = load_run_config(a.config);
  // Flags take precedence over file values.
  if (a.seed) rc.train.seed = *a.seed;
  if (a.steps) rc.train.total_steps = *a.steps;
  if (a.batch) rc.train.batch = *a.batch;
  rc.train.validate();

  fs::create_directories(a.out_dir);
  const fs::path ckpt = fs::path(a.out_dir) / "checkpoint.mole";
  const fs::path csv = fs::path(a.out_dir) / "loss.csv";
  const auto corpus = build_corpus(rc.data, rc.model.vocab);
  auto init = init_params<float>(rc.model, rc.train.seed);
  const auto result = train(std::move(init), corpus, rc.train, TrainOutputs{ckpt, csv});

  Manifest m("train", argv);
  m.set("seed", rc.train.seed);
  m.set("model", to_json(rc.model));
  m.set("train", to_json(rc.train));
  m.set("data", to_json(rc.data));
  m.add_input("config", a.config);
  if (rc.data.kind == "file") m.add_input("corpus", rc.data.path);
  m.add_output("checkpoint", ckpt);
  m.add_output("loss_csv", csv);
  m.set("initial_eval_lm", result.initial_eval.lm);
  m.set("final_eval_lm", result.final_eval.lm);
  m.write(fs::path(a.out_dir) / "manifest.json");

  out << "variant " << variant_name(rc.model.variant) << ", " << rc.train.total_steps
      << " steps\n";
  out << "eval lm loss " << fmt("%.6f", result.initial_eval.lm) << " -> "
      << fmt("%.6f", result.final_eval.lm) << '\n';
  out << "checkpoint " << ckpt.string() << '\n';
  return std::isfinite(result.final_eval.total) ? kExitOk : kExitVerifyFailed;
}

// ---- reparam ------------------------------------------------------------------

struct ReparamArgs {
  std::string checkpoint, out_path;
  std::string dtype = "fp32";
  std::size_t block_size = 0;
};

std::size_t resolve_block(LutDtype dtype, std::size_t block) {
  if (is_quantized(dtype) && block == 0) {
    throw ConfigError("block-size", "required for quantized dtypes");
  }
  return is_quantized(dtype) ? block : 0;
}

void print_header(std::ostream& out, const LutFileHeader& h) {
  out << "lut layers=" << h.dims.n_layers << " vocab=" << h.dims.vocab
      << " experts=" << h.dims.n_experts << " d=" << h.dims.d_model
      << " dtype=" << lut_dtype_name(h.dtype) << " block=" << h.block_size
      << " payload_bytes=" << h.payload_bytes() << " file_bytes=" << h.file_bytes() << '\n';
}

int cmd_reparam(const ReparamArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  const LutDtype dtype = parse_lut_dtype(a.dtype);
  const std::size_t block = resolve_block(dtype, a.block_size);
  const auto params = load_checkpoint<float>(a.checkpoint);
  if (params.config.variant != Variant::kMole) {
    throw ConfigError("checkpoint", "reparameterization needs a MoLE checkpoint, got variant '" +
                                        std::string(variant_name(params.config.variant)) +
                                        "' (only MoLE experts consume the token embedding)");
  }
  const auto bundle = reparameterize(params);
  const auto header = write_lut(bundle.tables, a.out_path, dtype, block);

  Manifest m("reparam", argv);
  m.set("model", to_json(params.config));
  m.set("dtype", std::string(lut_dtype_name(dtype)));
  m.set("block_size", block);
  m.add_input("checkpoint", a.checkpoint);
  m.add_output("lut", a.out_path);
  m.write(a.out_path + ".manifest.json");

  print_header(out, header);
  out << "parameters dropped " << reparam_parameter_drop(params.config) << '\n';
  return kExitOk;
}

// ---- verify ---------------------------------------------------------------------

struct VerifyArgs {
  std::string checkpoint, lut;
  std::optional<double> tolerance;
  std::size_t prompts = 100;
  std::size_t max_len = 32;
  std::uint64_t seed = 0;
  std::string format = "csv";
};

ModelParams<float> lookup_form(const ModelParams<float>& p) {
  ModelParams<float> q = p;
  for (auto& layer : q.layers) {
    layer.routed.clear();
    layer.expert_norm = Tensor<float>();
  }
  return q;
}

int cmd_verify(const VerifyArgs& a, std::ostream& out) {
  const auto params = load_checkpoint<float>(a.checkpoint);
  if (params.config.variant != Variant::kMole || params.is_lookup_form()) {
    throw ConfigError("checkpoint", "verification needs a training-form MoLE checkpoint");
  }
  const auto lut = open_lut(a.lut);
  const ModelConfig& c = params.config;
  const LutDims expect{c.n_layers, c.vocab, c.n_experts, c.d_model};
  if (!(lut->dims() == expect)) {
    throw ShapeError("LUT dims do not match the checkpoint config");
  }
  const double tol = a.tolerance ? *a.tolerance : lut_tolerance(lut->header().dtype);
  const std::size_t max_len = std::min(a.max_len, c.max_seq);
  const auto prompts = random_prompts(a.prompts, c.vocab, 1, max_len, a.seed);
  const auto report = verify_equivalence(params, lookup_form(params), *lut, prompts, tol);

  if (a.format == "json") {
    ojson j;
    j["status"] = report.pass ? "PASS" : "FAIL";
    j["tolerance"] = tol;
    j["max_rel_error"] = report.max_rel_error;
    j["worst_prompt"] = report.worst_prompt;
    j["first_bad_layer"] = report.first_bad_layer ? ojson(*report.first_bad_layer) : ojson();
    j["prompts"] = prompts.size();
    out << j.dump(2) << '\n';
  } else {
    out << (report.pass ? "PASS" : "FAIL") << " max_rel_error=" << fmt("%.3e", report.max_rel_error)
        << " tolerance=" << fmt("%.3e", tol) << " prompts=" << prompts.size()
        << " worst_prompt=" << report.worst_prompt;
    if (report.first_bad_layer) out << " first_bad_layer=" << *report.first_bad_layer;
    out << '\n';
  }
  if (!report.pass) throw VerificationFailed{};
  return kExitOk;
}

// ---- infer --------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, lut, text;
  std::vector<std::string> prompts;
  std::size_t steps = 16;
};

int cmd_infer(const InferArgs& a, std::ostream& out) {
  const auto params = load_checkpoint<float>(a.checkpoint);
  std::vector<std::vector<TokenId>> prompts;
  for (const auto& p : a.prompts) prompts.push_back(parse_ids(p));
  if (!a.text.empty()) prompts.emplace_back(a.text.begin(), a.text.end());
  if (prompts.empty()) throw ConfigError("prompt", "give --prompt ids or --text");

  std::unique_ptr<LutFile> lut;
  EngineOptions opts;
  if (!a.lut.empty()) {
    lut = open_lut(a.lut);
    opts.runtime = Runtime::kMoleLut;
  }
  Engine<float> engine(params, lut.get(), opts);
  const auto result = engine.decode(prompts, a.steps);
  for (const auto& g : result.generated) out << join_ids(g) << '\n';
  return kExitOk;
}

// ---- bench --------------------------------------------------------------------

struct BenchArgs {
  std::string runtime = "mole-lut";
  std::string config;
  std::string checkpoint, lut, out_csv;
  std::size_t batch = 1;
  std::size_t steps = 32;
  std::size_t prompt_len = 8;
  double bandwidth_gbps = 16.0;
  std::uint64_t seed = 0;
  std::string format = "csv";
};

std::optional<Preset> preset_named(const std::string& name) {
  for (const auto& p : reference_presets()) {
    if (p.name == name) return p;
  }
  return std::nullopt;
}

void require_runtime_match(Runtime rt, Variant v) {
  if (rt == Runtime::kMoeOffload && v != Variant::kMoe) {
    throw ConfigError("runtime", "moe-offload needs a moe config");
  }
  if (rt == Runtime::kMoleLut && v != Variant::kMole) {
    throw ConfigError("runtime", "mole-lut needs a mole config");
  }
}

int cmd_bench(const BenchArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  const Runtime rt = parse_runtime(a.runtime);
  BandwidthModel bw;
  bw.bytes_per_second = a.bandwidth_gbps * 1e9;
  bw.validate();
  if (a.batch == 0) throw ConfigError("batch", "must be at least 1");
  if (a.steps == 0) throw ConfigError("steps", "must be at least 1");

  StepMeter meter;
  ModelConfig cfg;
  double compute = 0.0;
  bool measured = false;
  Manifest m("bench", argv);
  if (auto preset = preset_named(a.config)) {
    cfg = preset->config;
    require_runtime_match(rt, cfg.variant);
    switch (rt) {
      case Runtime::kResident:
        for (std::size_t s = 0; s < a.steps; ++s) {
          StepRecord r;
          r.step = s;
          r.prefill = s == 0;
          r.lanes = a.batch;
          r.sim_seconds = step_latency(0, bw);
          meter.push(r);
        }
        break;
      case Runtime::kMoeOffload:
        meter = simulate_moe_offload(cfg, a.batch, a.steps, bw, a.seed);
        break;
      case Runtime::kMoleLut:
        meter = simulate_mole_lut(cfg, a.batch, a.steps, bw);
        break;
    }
    m.set("preset", preset->name);
  } else {
    ModelParams<float> params;
    if (!a.checkpoint.empty()) {
      params = load_checkpoint<float>(a.checkpoint);
      m.add_input("checkpoint", a.checkpoint);
    } else {
      if (a.config.empty()) throw ConfigError("config", "give a preset name or a config file");
      params = init_params<float>(load_run_config(a.config).model, a.seed);
      m.add_input("config", a.config);
    }
    cfg = params.config;
    require_runtime_match(rt, cfg.variant);
    std::unique_ptr<LutSource> lut;
    if (rt == Runtime::kMoleLut) {
      if (!a.lut.empty()) {
        lut = open_lut(a.lut);
        m.add_input("lut", a.lut);
      } else {
        lut = std::make_unique<InMemoryLut>(reparameterize(params).tables);
      }
    }
    EngineOptions opts;
    opts.runtime = rt;
    opts.bandwidth = bw;
    opts.seed = a.seed;
    Engine<float> engine(params, lut.get(), opts);
    const auto prompts = random_prompts(a.batch, cfg.vocab, a.prompt_len, a.prompt_len, a.seed);
    auto result = engine.decode(prompts, a.steps);
    meter = std::move(result.meter);
    for (double s : result.compute_seconds) compute += s;
    measured = true;
  }

  const MeterSummary sum = summarize(meter, cfg.n_layers);
  const double transfer = meter.total_seconds();
  m.set("runtime", std::string(runtime_name(rt)));
  m.set("model", to_json(cfg));
  m.set("batch", a.batch);
  m.set("steps", a.steps);
  m.set("bandwidth_gbps", a.bandwidth_gbps);
  m.set("seed", a.seed);

  ojson js;
  js["runtime"] = std::string(runtime_name(rt));
  js["batch"] = a.batch;
  js["decode_steps"] = sum.decode_steps;
  js["mean_bytes_per_step"] = sum.mean_bytes_per_step;
  js["mean_experts_per_layer"] = sum.mean_experts_per_layer;
  js["mean_sim_seconds"] = sum.mean_sim_seconds;
  js["total_bytes"] = sum.total_bytes;
  if (measured) {
    js["compute_seconds"] = compute;
    js["transfer_share"] = transfer + compute > 0 ? transfer / (transfer + compute) : 0.0;
  }

  if (!a.out_csv.empty()) {
    std::ostringstream csv;
    meter.write_csv(csv);
    write_text(a.out_csv, csv.str());
    m.add_output("meter_csv", a.out_csv);
    m.write(a.out_csv + ".manifest.json");
  }
  if (a.format == "json") {
    ojson doc;
    doc["summary"] = js;
    ojson rows = ojson::array();
    for (const auto& r : meter.records()) {
      rows.push_back({{"step", r.step},
                      {"prefill", r.prefill},
                      {"lanes", r.lanes},
                      {"bytes", r.bytes},
                      {"experts_loaded", r.experts_loaded},
                      {"sim_seconds", r.sim_seconds}});
    }
    doc["records"] = rows;
    out << doc.dump(2) << '\n';
    return kExitOk;
  }
  if (a.out_csv.empty()) meter.write_csv(out);
  out << "# runtime=" << runtime_name(rt) << " batch=" << a.batch
      << " decode_steps=" << sum.decode_steps
      << " mean_bytes_per_step=" << fmt("%.1f", sum.mean_bytes_per_step)
      << " mean_experts_per_layer=" << fmt("%.3f", sum.mean_experts_per_layer)
      << " mean_sim_seconds=" << fmt("%.6e", sum.mean_sim_seconds);
  if (measured) {
    out << " transfer_share=" << fmt("%.4f", js["transfer_share"].get<double>());
  }
  out << '\n';
  return kExitOk;
}

// ---- quantize -------------------------------------------------------------------

struct QuantizeArgs {
  std::string lut, out_path;
  std::string dtype = "nf4";
  std::size_t block_size = 64;
};

int cmd_quantize(const QuantizeArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  const LutDtype dtype = parse_lut_dtype(a.dtype);
  const std::size_t block = resolve_block(dtype, a.block_size);
  const auto src = open_lut(a.lut);
  const auto header = write_lut(*src, a.out_path, dtype, block);

  Manifest m("quantize", argv);
  m.set("dtype", std::string(lut_dtype_name(dtype)));
  m.set("block_size", block);
  m.add_input("lut", a.lut);
  m.add_output("lut", a.out_path);
  m.write(a.out_path + ".manifest.json");

  print_header(out, header);
  LutFileHeader fp16 = header;
  fp16.dtype = LutDtype::kF16;
  fp16.block_size = 0;
  out << "payload ratio vs fp16 "
      << fmt("%.4f", static_cast<double>(header.payload_bytes()) /
                         static_cast<double>(fp16.payload_bytes()))
      << '\n';
  return kExitOk;
}

// ---- report -------------------------------------------------------------------

struct ReportArgs {
  std::string kind = "paper-check";
  std::string config;
  std::string format = "csv";
  double bandwidth_gbps = 16.0;
  std::vector<std::size_t> batches{1, 8, 32};
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  const bool json = a.format == "json";
  if (a.kind == "paper-check") {
    const auto cells = published_table_check();
    const auto ratios = loaded_ratio_check();
    std::size_t pass = 0, warn = 0, fail = 0;
    for (const auto& c : cells) {
      (c.status == CellStatus::kPass ? pass : c.status == CellStatus::kWarn ? warn : fail)++;
    }
    if (json) {
      ojson doc;
      ojson rows = ojson::array();
      for (const auto& c : cells) {
        rows.push_back({{"config", c.config},
                        {"column", c.column},
                        {"exact", c.exact},
                        {"computed", c.computed},
                        {"published", c.published},
                        {"status", cell_status_name(c.status)},
                        {"note", c.note}});
      }
      doc["cells"] = rows;
      ojson rr = ojson::array();
      for (const auto& r : ratios) {
        rr.push_back({{"scale", r.scale},
                      {"ratio", r.ratio},
                      {"published", r.published},
                      {"status", cell_status_name(r.status)},
                      {"note", r.note}});
      }
      doc["loaded_ratios"] = rr;
      doc["summary"] = {{"pass", pass}, {"warn", warn}, {"fail", fail}};
      out << doc.dump(2) << '\n';
    } else {
      write_published_check_csv(out, cells);
      out << "# ratio checks (MoE-10E / MoLE-4E loaded per token)\n";
      for (const auto& r : ratios) {
        out << "# " << r.scale << " ratio=" << fmt("%.1f", r.ratio)
            << " published=" << fmt("%.0f", r.published) << ' ' << cell_status_name(r.status);
        if (!r.note.empty()) out << " (" << r.note << ')';
        out << '\n';
      }
      out << "# " << pass << " PASS, " << warn << " WARN, " << fail << " FAIL\n";
    }
    return fail == 0 ? kExitOk : kExitVerifyFailed;
  }
  if (a.kind == "costs") {
    std::vector<CostReport> rows;
    if (!a.config.empty()) {
      const auto preset = preset_named(a.config);
      const ModelConfig cfg = preset ? preset->config : load_run_config(a.config).model;
      rows.push_back(cost_report(preset ? preset->name : a.config, cfg));
    } else {
      for (const auto& p : reference_presets()) rows.push_back(cost_report(p.name, p.config));
    }
    if (json) {
      ojson arr = ojson::array();
      for (const auto& r : rows) {
        arr.push_back({{"config", r.name},
                       {"variant", std::string(variant_name(r.config.variant))},
                       {"flops_per_token", r.flops_per_token},
                       {"params_in_vram", r.params_in_vram},
                       {"offloaded", r.offloaded},
                       {"loaded", r.loaded},
                       {"offloaded_display", r.offloaded_display},
                       {"loaded_display", r.loaded_display}});
      }
      out << arr.dump(2) << '\n';
    } else {
      write_cost_csv(out, rows);
    }
    return kExitOk;
  }
  if (a.kind == "symbolic") {
    const auto rows = symbolic_rows();
    if (json) {
      ojson arr = ojson::array();
      for (const auto& r : rows) {
        arr.push_back({{"architecture", r.architecture},
                       {"flops", r.flops},
                       {"params_in_vram", r.params_in_vram},
                       {"offloaded", r.offloaded},
                       {"loaded", r.loaded}});
      }
      out << arr.dump(2) << '\n';
    } else {
      out << "architecture,flops,params_in_vram,offloaded,loaded\n";
      for (const auto& r : rows) {
        out << r.architecture << ',' << r.flops << ',' << r.params_in_vram << ',' << r.offloaded
            << ',' << r.loaded << '\n';
      }
    }
    return kExitOk;
  }
  if (a.kind == "latency") {
    BandwidthModel bw;
    bw.bytes_per_second = a.bandwidth_gbps * 1e9;
    std::vector<Preset> presets;
    if (!a.config.empty()) {
      presets.push_back(find_preset(a.config));
    } else {
      presets = reference_presets();
    }
    const auto rows = latency_report(presets, bw, a.batches);
    if (json) {
      ojson arr = ojson::array();
      for (const auto& r : rows) {
        arr.push_back({{"config", r.config},
                       {"batch", r.batch},
                       {"experts_per_layer", r.experts_per_layer},
                       {"bytes_per_step", r.bytes_per_step},
                       {"transfer_seconds", r.transfer_seconds}});
      }
      out << arr.dump(2) << '\n';
    } else {
      write_latency_csv(out, rows);
    }
    return kExitOk;
  }
  throw ConfigError("report", "unknown report '" + a.kind +
                                  "' (paper-check, costs, symbolic, latency)");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mixture-of-Lookup-Experts toolkit", "mole"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  const std::vector<std::string> formats{"csv", "json"};

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
  train_cmd->add_option("--config", ta.config, "run configuration (JSON)")->required();
  train_cmd->add_option("--out", ta.out_dir, "output directory");
  train_cmd->add_option("--seed", ta.seed, "overrides train.seed");
  train_cmd->add_option("--steps", ta.steps, "overrides train.total_steps");
  train_cmd->add_option("--batch", ta.batch, "overrides train.batch");

  ReparamArgs ra;
  auto* reparam_cmd = app.add_subcommand("reparam", "fold MoLE experts into a LUT file");
  reparam_cmd->add_option("--checkpoint", ra.checkpoint)->required();
  reparam_cmd->add_option("--out", ra.out_path)->required();
  reparam_cmd->add_option("--dtype", ra.dtype, "fp32, fp16, nf4 or nf3");
  reparam_cmd->add_option("--block-size", ra.block_size, "quantization block size");

  VerifyArgs va;
  auto* verify_cmd = app.add_subcommand("verify", "check LUT form against training form");
  verify_cmd->add_option("--checkpoint", va.checkpoint)->required();
  verify_cmd->add_option("--lut", va.lut)->required();
  verify_cmd->add_option("--tolerance", va.tolerance, "default depends on the LUT dtype");
  verify_cmd->add_option("--prompts", va.prompts, "number of random prompts");
  verify_cmd->add_option("--max-len", va.max_len, "longest prompt");
  verify_cmd->add_option("--seed", va.seed);
  verify_cmd->add_option("--format", va.format)->check(CLI::IsMember(formats));

  InferArgs ia;
  auto* infer_cmd = app.add_subcommand("infer", "greedy decoding");
  infer_cmd->add_option("--checkpoint", ia.checkpoint)->required();
  infer_cmd->add_option("--lut", ia.lut, "decode with the lookup tables");
  infer_cmd->add_option("--prompt", ia.prompts, "comma-separated token ids (repeatable)");
  infer_cmd->add_option("--text", ia.text, "prompt as raw bytes");
  infer_cmd->add_option("--steps", ia.steps, "tokens to generate");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "meter per-step transfer");
  bench_cmd->add_option("--runtime", ba.runtime, "dense, moe-offload or mole-lut");
  bench_cmd->add_option("--config", ba.config, "preset name or config file");
  bench_cmd->add_option("--checkpoint", ba.checkpoint);
  bench_cmd->add_option("--lut", ba.lut);
  bench_cmd->add_option("--batch", ba.batch);
  bench_cmd->add_option("--steps", ba.steps);
  bench_cmd->add_option("--prompt-len", ba.prompt_len);
  bench_cmd->add_option("--bandwidth-gbps", ba.bandwidth_gbps);
  bench_cmd->add_option("--seed", ba.seed);
  bench_cmd->add_option("--out", ba.out_csv, "meter CSV path");
  bench_cmd->add_option("--format", ba.format)->check(CLI::IsMember(formats));

  QuantizeArgs qa;
  auto* quant_cmd = app.add_subcommand("quantize", "re-encode a LUT file as NF4/NF3");
  quant_cmd->add_option("--lut", qa.lut)->required();
  quant_cmd->add_option("--out", qa.out_path)->required();
  quant_cmd->add_option("--dtype", qa.dtype);
  quant_cmd->add_option("--block-size", qa.block_size);

  ReportArgs pa;
  auto* report_cmd = app.add_subcommand("report", "cost accounting reports");
  report_cmd->add_option("kind", pa.kind, "paper-check, costs, symbolic or latency");
  report_cmd->add_option("--config", pa.config, "preset name or config file");
  report_cmd->add_option("--format", pa.format)->check(CLI::IsMember(formats));
  report_cmd->add_option("--bandwidth-gbps", pa.bandwidth_gbps);
  report_cmd->add_option("--batch", pa.batches, "batch sizes (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const std::vector<std::string> args(argv, argv + argc);
  try {
    if (*train_cmd) return cmd_train(ta, args, out);
    if (*reparam_cmd) return cmd_reparam(ra, args, out);
    if (*verify_cmd) return cmd_verify(va, out);
    if (*infer_cmd) return cmd_infer(ia, out);
    if (*bench_cmd) return cmd_bench(ba, args, out);
    if (*quant_cmd) return cmd_quantize(qa, args, out);
    if (*report_cmd) return cmd_report(pa, out);
  } catch (const VerificationFailed&) {
    return kExitVerifyFailed;
  } catch (const ConfigError& e) {
    err << "config error in '" << e.field() << "': " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ValueError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitVerifyFailed;
  }
  return kExitUsage;
}

}  // namespace mole::cli
