// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "mole/checkpoint.h"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "byte_io.h"

namespace mole {

namespace {

using detail::get_array;
using detail::get_le;
using detail::put_array;
using detail::put_le;

constexpr const char* kConfigName = "config";
constexpr const char* kRotaryName = "config.rotary_fraction";

template <typename T>
CheckpointTensor make_tensor(std::string name, const Shape& shape, std::span<const T> values) {
  CheckpointTensor out;
  out.name = std::move(name);
  out.shape = shape;
  if constexpr (std::is_same_v<T, float>) {
    out.dtype = CheckpointDtype::kF32;
  } else if constexpr (std::is_same_v<T, double>) {
    out.dtype = CheckpointDtype::kF64;
  } else {
    out.dtype = CheckpointDtype::kI64;
  }
  put_array(out.raw, values);
  return out;
}

template <typename T>
std::vector<T> decode_values(const CheckpointTensor& t) {
  const std::size_t n = element_count(t.shape);
  if (t.raw.size() != n * dtype_size(t.dtype)) {
    throw IoError("tensor '" + t.name + "' has " + std::to_string(t.raw.size()) +
                  " bytes for shape " + shape_string(t.shape));
  }
  std::vector<T> out(n);
  switch (t.dtype) {
    case CheckpointDtype::kF32: {
      std::vector<float> v(n);
      get_array<float>(t.raw, v);
      std::copy(v.begin(), v.end(), out.begin());
      break;
    }
    case CheckpointDtype::kF64: {
      std::vector<double> v(n);
      get_array<double>(t.raw, v);
      std::transform(v.begin(), v.end(), out.begin(), [](double x) { return static_cast<T>(x); });
      break;
    }
    case CheckpointDtype::kI64: {
      std::vector<std::int64_t> v(n);
      get_array<std::int64_t>(t.raw, v);
      std::transform(v.begin(), v.end(), out.begin(),
                     [](std::int64_t x) { return static_cast<T>(x); });
      break;
    }
    default:
      throw IoError("tensor '" + t.name + "' has an unsupported dtype");
  }
  return out;
}

}  // namespace

std::size_t dtype_size(CheckpointDtype dtype) {
  switch (dtype) {
    case CheckpointDtype::kF32:
      return 4;
    case CheckpointDtype::kF16:
      return 2;
    case CheckpointDtype::kF64:
    case CheckpointDtype::kI64:
      return 8;
  }
  throw IoError("unknown checkpoint dtype " + std::to_string(static_cast<int>(dtype)));
}

std::vector<std::uint8_t> encode_checkpoint(std::span<const CheckpointTensor> tensors) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw ValueError("tensor name too long: " + t.name);
    if (t.shape.size() > 0xff) throw ValueError("tensor rank too large: " + t.name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.dtype));
    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t e : t.shape) put_le<std::uint64_t>(out, e);
    out.insert(out.end(), t.raw.begin(), t.raw.end());
  }
  return out;
}

std::vector<CheckpointTensor> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic),
                                       reinterpret_cast<const char*>(bytes.data()))) {
    throw IoError("not a checkpoint file (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(bytes, 8);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get_le<std::uint32_t>(bytes, 12);
  std::size_t pos = 16;
  std::vector<CheckpointTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const auto name_len = get_le<std::uint16_t>(bytes, pos);
    pos += 2;
    if (pos + name_len + 2 > bytes.size()) throw IoError("truncated checkpoint tensor header");
    t.name.assign(reinterpret_cast<const char*>(bytes.data()) + pos, name_len);
    pos += name_len;
    t.dtype = static_cast<CheckpointDtype>(bytes[pos++]);
    const std::size_t rank = bytes[pos++];
    for (std::size_t r = 0; r < rank; ++r) {
      t.shape.push_back(static_cast<std::size_t>(get_le<std::uint64_t>(bytes, pos)));
      pos += 8;
    }
    const std::size_t n = element_count(t.shape) * dtype_size(t.dtype);
    if (pos + n > bytes.size()) throw IoError("truncated checkpoint payload for " + t.name);
    t.raw.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                 bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    out.push_back(std::move(t));
  }
  if (pos != bytes.size()) throw IoError("trailing bytes after checkpoint payload");
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_checkpoint_file(const std::filesystem::path& path,
                           std::span<const CheckpointTensor> tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<CheckpointTensor> read_checkpoint_file(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

template <typename T>
std::vector<CheckpointTensor> to_checkpoint(const ModelParams<T>& params) {
  const ModelConfig& c = params.config;
  const std::vector<std::int64_t> cfg = {
      static_cast<std::int64_t>(c.variant), static_cast<std::int64_t>(c.n_layers),
      static_cast<std::int64_t>(c.d_model), static_cast<std::int64_t>(c.n_heads),
      static_cast<std::int64_t>(c.d_shared), static_cast<std::int64_t>(c.d_routed),
      static_cast<std::int64_t>(c.n_experts), static_cast<std::int64_t>(c.top_k),
      static_cast<std::int64_t>(c.vocab), static_cast<std::int64_t>(c.max_seq),
      params.is_lookup_form() ? 1 : 0};
  const std::vector<double> rotary = {c.rotary_fraction};
  std::vector<CheckpointTensor> out;
  out.push_back(make_tensor<std::int64_t>(kConfigName, {cfg.size()}, cfg));
  out.push_back(make_tensor<double>(kRotaryName, {1}, rotary));
  for (const auto& nt : named_tensors(const_cast<ModelParams<T>&>(params))) {
    out.push_back(make_tensor<T>(nt.name, nt.tensor->shape(), nt.tensor->values()));
  }
  return out;
}

template <typename T>
ModelParams<T> from_checkpoint(std::span<const CheckpointTensor> tensors) {
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  auto find = [&](const std::string& name) -> const CheckpointTensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint is missing tensor '" + name + "'");
    return *it->second;
  };
  const auto cfg = decode_values<double>(find(kConfigName));
  if (cfg.size() != 11) throw IoError("checkpoint config tensor has the wrong length");
  ModelConfig c;
  c.variant = static_cast<Variant>(static_cast<int>(cfg[0]));
  c.n_layers = static_cast<std::size_t>(cfg[1]);
  c.d_model = static_cast<std::size_t>(cfg[2]);
  c.n_heads = static_cast<std::size_t>(cfg[3]);
  c.d_shared = static_cast<std::size_t>(cfg[4]);
  c.d_routed = static_cast<std::size_t>(cfg[5]);
  c.n_experts = static_cast<std::size_t>(cfg[6]);
  c.top_k = static_cast<std::size_t>(cfg[7]);
  c.vocab = static_cast<std::size_t>(cfg[8]);
  c.max_seq = static_cast<std::size_t>(cfg[9]);
  c.rotary_fraction = decode_values<double>(find(kRotaryName)).at(0);
  c.validate();

  ModelParams<T> params = allocate_params<T>(c, cfg[10] != 0.0);
  for (auto& nt : named_tensors(params)) {
    const CheckpointTensor& src = find(nt.name);
    if (src.shape != nt.tensor->shape()) {
      throw IoError("tensor '" + nt.name + "' has shape " + shape_string(src.shape) +
                    ", expected " + shape_string(nt.tensor->shape()));
    }
    *nt.tensor = Tensor<T>(src.shape, decode_values<T>(src));
  }
  return params;
}

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path) {
  write_checkpoint_file(path, to_checkpoint(params));
}

template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path) {
  return from_checkpoint<T>(read_checkpoint_file(path));
}

template std::vector<CheckpointTensor> to_checkpoint(const ModelParams<float>&);
template std::vector<CheckpointTensor> to_checkpoint(const ModelParams<double>&);
template ModelParams<float> from_checkpoint(std::span<const CheckpointTensor>);
template ModelParams<double> from_checkpoint(std::span<const CheckpointTensor>);
template void save_checkpoint(const ModelParams<float>&, const std::filesystem::path&);
template void save_checkpoint(const ModelParams<double>&, const std::filesystem::path&);
template ModelParams<float> load_checkpoint(const std::filesystem::path&);
template ModelParams<double> load_checkpoint(const std::filesystem::path&);

}  // namespace mole
