// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "config_io.h"

#include <fstream>

#include "mole/checkpoint.h"
#include "mole/error.h"

namespace mole::cli {

using nlohmann::json;

namespace {

const json& field(const json& obj, const std::string& section, const char* name) {
  const std::string path = section + "." + name;
  if (!obj.is_object() || !obj.contains(name)) {
    throw ConfigError(path, "missing required field");
  }
  return obj.at(name);
}

template <typename T>
T get_number(const json& obj, const std::string& section, const char* name) {
  const json& v = field(obj, section, name);
  if (!v.is_number()) throw ConfigError(section + "." + name, "expected a number");
  if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      throw ConfigError(section + "." + name, "expected a non-negative integer");
    }
  }
  return v.get<T>();
}

std::string get_string(const json& obj, const std::string& section, const char* name) {
  const json& v = field(obj, section, name);
  if (!v.is_string()) throw ConfigError(section + "." + name, "expected a string");
  return v.get<std::string>();
}

const json& section(const json& root, const char* name) {
  if (!root.is_object() || !root.contains(name)) {
    throw ConfigError(name, "missing required section");
  }
  const json& s = root.at(name);
  if (!s.is_object()) throw ConfigError(name, "expected an object");
  return s;
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  const std::string s = "model";
  ModelConfig c;
  try {
    c.variant = parse_variant(get_string(j, s, "variant"));
  } catch (const ValueError& e) {
    throw ConfigError("model.variant", e.what());
  }
  c.n_layers = get_number<std::size_t>(j, s, "n_layers");
  c.d_model = get_number<std::size_t>(j, s, "d_model");
  c.n_heads = get_number<std::size_t>(j, s, "n_heads");
  c.d_shared = get_number<std::size_t>(j, s, "d_shared");
  c.d_routed = get_number<std::size_t>(j, s, "d_routed");
  c.n_experts = get_number<std::size_t>(j, s, "n_experts");
  c.top_k = get_number<std::size_t>(j, s, "top_k");
  c.vocab = get_number<std::size_t>(j, s, "vocab");
  c.rotary_fraction = get_number<double>(j, s, "rotary_fraction");
  c.max_seq = get_number<std::size_t>(j, s, "max_seq");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("model." + e.field(), e.what());
  }
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  const std::string s = "train";
  TrainConfig c;
  c.peak_lr = get_number<double>(j, s, "peak_lr");
  c.min_lr_fraction = get_number<double>(j, s, "min_lr_fraction");
  const json& betas = field(j, s, "betas");
  if (!betas.is_array() || betas.size() != 2 || !betas[0].is_number() ||
      !betas[1].is_number()) {
    throw ConfigError("train.betas", "expected two numbers");
  }
  c.betas = {betas[0].get<double>(), betas[1].get<double>()};
  c.eps = get_number<double>(j, s, "eps");
  c.weight_decay = get_number<double>(j, s, "weight_decay");
  c.grad_clip = get_number<double>(j, s, "grad_clip");
  c.warmup_fraction = get_number<double>(j, s, "warmup_fraction");
  c.total_steps = get_number<std::size_t>(j, s, "total_steps");
  c.batch = get_number<std::size_t>(j, s, "batch");
  c.seq_len = get_number<std::size_t>(j, s, "seq_len");
  c.z_loss_coeff = get_number<double>(j, s, "z_loss_coeff");
  c.balance_loss_coeff = get_number<double>(j, s, "balance_loss_coeff");
  c.seed = get_number<std::uint64_t>(j, s, "seed");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("train." + e.field(), e.what());
  }
  return c;
}

DataConfig data_config_from_json(const json& j) {
  const std::string s = "data";
  DataConfig d;
  d.kind = get_string(j, s, "kind");
  if (d.kind == "pattern") {
    d.length = get_number<std::size_t>(j, s, "length");
    d.period = get_number<std::size_t>(j, s, "period");
    d.seed = get_number<std::uint64_t>(j, s, "seed");
  } else if (d.kind == "file") {
    d.path = get_string(j, s, "path");
  } else {
    throw ConfigError("data.kind", "expected \"pattern\" or \"file\"");
  }
  return d;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig r;
  r.model = model_config_from_json(section(j, "model"));
  if (j.contains("train")) r.train = train_config_from_json(section(j, "train"));
  if (j.contains("data")) r.data = data_config_from_json(section(j, "data"));
  return r;
}

json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(load_json(path));
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["variant"] = std::string(variant_name(c.variant));
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_shared"] = c.d_shared;
  j["d_routed"] = c.d_routed;
  j["n_experts"] = c.n_experts;
  j["top_k"] = c.top_k;
  j["vocab"] = c.vocab;
  j["rotary_fraction"] = c.rotary_fraction;
  j["max_seq"] = c.max_seq;
  return j;
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["peak_lr"] = c.peak_lr;
  j["min_lr_fraction"] = c.min_lr_fraction;
  j["betas"] = {c.betas.first, c.betas.second};
  j["eps"] = c.eps;
  j["weight_decay"] = c.weight_decay;
  j["grad_clip"] = c.grad_clip;
  j["warmup_fraction"] = c.warmup_fraction;
  j["total_steps"] = c.total_steps;
  j["batch"] = c.batch;
  j["seq_len"] = c.seq_len;
  j["z_loss_coeff"] = c.z_loss_coeff;
  j["balance_loss_coeff"] = c.balance_loss_coeff;
  j["seed"] = c.seed;
  return j;
}

nlohmann::ordered_json to_json(const DataConfig& c) {
  nlohmann::ordered_json j;
  j["kind"] = c.kind;
  if (c.kind == "file") {
    j["path"] = c.path;
  } else {
    j["length"] = c.length;
    j["period"] = c.period;
    j["seed"] = c.seed;
  }
  return j;
}

std::vector<TokenId> build_corpus(const DataConfig& data, std::size_t vocab) {
  if (data.kind == "file") {
    const auto bytes = read_file_bytes(data.path);
    std::vector<TokenId> ids(bytes.begin(), bytes.end());
    for (TokenId id : ids) {
      if (id >= vocab) throw ConfigError("data.path", "byte value exceeds the model vocab");
    }
    return ids;
  }
  return pattern_corpus(data.length, data.period, vocab, data.seed);
}

}  // namespace mole::cli
