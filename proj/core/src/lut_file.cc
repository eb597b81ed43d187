// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "mole/lut_file.h"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

#include "byte_io.h"
#include "mole/nf_quant.h"

namespace mole {

namespace {

using Kind = LutFormatError::Kind;

constexpr std::uint64_t kMaxU32 = std::numeric_limits<std::uint32_t>::max();

bool mul_overflows(std::uint64_t a, std::uint64_t b, std::uint64_t& out) {
  return __builtin_mul_overflow(a, b, &out);
}

}  // namespace

std::string_view lut_dtype_name(LutDtype dtype) {
  switch (dtype) {
    case LutDtype::kF32:
      return "fp32";
    case LutDtype::kF16:
      return "fp16";
    case LutDtype::kNF4:
      return "nf4";
    case LutDtype::kNF3:
      return "nf3";
  }
  return "unknown";
}

LutDtype parse_lut_dtype(std::string_view name) {
  if (name == "fp32") return LutDtype::kF32;
  if (name == "fp16") return LutDtype::kF16;
  if (name == "nf4") return LutDtype::kNF4;
  if (name == "nf3") return LutDtype::kNF3;
  throw ValueError("unknown LUT dtype '" + std::string(name) + "' (fp32, fp16, nf4, nf3)");
}

bool is_quantized(LutDtype dtype) { return dtype == LutDtype::kNF4 || dtype == LutDtype::kNF3; }

int lut_dtype_bits(LutDtype dtype) {
  switch (dtype) {
    case LutDtype::kF32:
      return 32;
    case LutDtype::kF16:
      return 16;
    case LutDtype::kNF4:
      return 4;
    case LutDtype::kNF3:
      return 3;
  }
  throw LutFormatError(Kind::kDtype, "unknown LUT dtype " + std::to_string(static_cast<int>(dtype)));
}

void LutFileHeader::validate() const {
  if (version != kLutVersion) {
    throw LutFormatError(Kind::kVersion, "LUT version mismatch: file has version " +
                                             std::to_string(version) + ", reader supports " +
                                             std::to_string(kLutVersion));
  }
  lut_dtype_bits(dtype);
  if (dims.n_layers == 0 || dims.vocab == 0 || dims.n_experts == 0 || dims.d_model == 0) {
    throw LutFormatError(Kind::kDimensionOverflow, "LUT dimensions must all be positive");
  }
  for (std::size_t v : {dims.n_layers, dims.vocab, dims.n_experts, dims.d_model}) {
    if (v > kMaxU32) throw LutFormatError(Kind::kDimensionOverflow, "LUT dimension overflow");
  }
  if (is_quantized(dtype)) {
    if (block_size == 0 || dims.d_model % block_size != 0) {
      throw LutFormatError(Kind::kBlockSize, "invalid block size " + std::to_string(block_size) +
                                                 " for rows of " +
                                                 std::to_string(dims.d_model));
    }
  } else if (block_size != 0) {
    throw LutFormatError(Kind::kBlockSize, "unquantized LUTs must declare block size 0");
  }
  std::uint64_t total = 0;
  if (mul_overflows(dims.n_layers, dims.vocab, total) ||
      mul_overflows(total, dims.n_experts, total) || mul_overflows(total, row_bytes(), total) ||
      total > std::numeric_limits<std::uint64_t>::max() - kLutHeaderBytes) {
    throw LutFormatError(Kind::kDimensionOverflow, "LUT dimension overflow: payload exceeds 2^64");
  }
}

std::uint64_t LutFileHeader::row_bytes() const {
  const std::uint64_t d = dims.d_model;
  switch (dtype) {
    case LutDtype::kF32:
      return 4 * d;
    case LutDtype::kF16:
      return 2 * d;
    case LutDtype::kNF4:
    case LutDtype::kNF3:
      if (block_size == 0) return 0;
      return (d / block_size) * quant_block_bytes(lut_dtype_bits(dtype), block_size);
  }
  return 0;
}

std::uint64_t LutFileHeader::payload_bytes() const {
  return static_cast<std::uint64_t>(dims.n_layers) * dims.vocab * dims.n_experts * row_bytes();
}

std::uint64_t LutFileHeader::token_offset(std::size_t layer, TokenId token) const {
  return kLutHeaderBytes +
         ((static_cast<std::uint64_t>(layer) * dims.vocab + token) * dims.n_experts) * row_bytes();
}

std::vector<std::uint8_t> LutFileHeader::encode() const {
  validate();
  std::vector<std::uint8_t> out(std::begin(kLutMagic), std::end(kLutMagic));
  detail::put_le<std::uint32_t>(out, version);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dims.n_layers));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dims.vocab));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dims.n_experts));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dims.d_model));
  out.push_back(static_cast<std::uint8_t>(dtype));
  detail::put_le<std::uint32_t>(out, block_size);
  out.resize(kLutHeaderBytes, 0);
  return out;
}

LutFileHeader LutFileHeader::decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kLutMagic) ||
      !std::equal(std::begin(kLutMagic), std::end(kLutMagic),
                  reinterpret_cast<const char*>(bytes.data()))) {
    throw LutFormatError(Kind::kBadMagic, "not a LUT file (bad magic)");
  }
  if (bytes.size() < kLutHeaderBytes) {
    throw LutFormatError(Kind::kPayloadLength, "payload length mismatch: header is truncated");
  }
  LutFileHeader h;
  h.version = detail::get_le<std::uint32_t>(bytes, 8);
  if (h.version != kLutVersion) h.validate();
  h.dims.n_layers = detail::get_le<std::uint32_t>(bytes, 12);
  h.dims.vocab = detail::get_le<std::uint32_t>(bytes, 16);
  h.dims.n_experts = detail::get_le<std::uint32_t>(bytes, 20);
  h.dims.d_model = detail::get_le<std::uint32_t>(bytes, 24);
  h.dtype = static_cast<LutDtype>(bytes[28]);
  h.block_size = detail::get_le<std::uint32_t>(bytes, 29);
  h.validate();
  return h;
}

void encode_lut_row(std::span<const float> row, LutDtype dtype, std::size_t block_size,
                    std::vector<std::uint8_t>& out) {
  switch (dtype) {
    case LutDtype::kF32:
      detail::put_array<float>(out, row);
      return;
    case LutDtype::kF16:
      for (float v : row) {
        if (!std::isfinite(v) || std::abs(v) > 65504.0f) {
          throw NumericError("LUT value " + std::to_string(v) + " does not fit fp16");
        }
        detail::put_le<std::uint16_t>(out, fp16_from_float(v));
      }
      return;
    case LutDtype::kNF4:
    case LutDtype::kNF3:
      encode_blocks(quantize_row(row, lut_dtype_bits(dtype), block_size), out);
      return;
  }
}

void decode_lut_row(std::span<const std::uint8_t> bytes, LutDtype dtype, std::size_t block_size,
                    std::span<float> row) {
  switch (dtype) {
    case LutDtype::kF32:
      detail::get_array<float>(bytes, row);
      return;
    case LutDtype::kF16:
      for (std::size_t i = 0; i < row.size(); ++i) {
        row[i] = fp16_to_float(detail::get_le<std::uint16_t>(bytes, 2 * i));
      }
      return;
    case LutDtype::kNF4:
    case LutDtype::kNF3: {
      const int bits = lut_dtype_bits(dtype);
      const auto blocks = decode_blocks(bytes, bits, block_size, row.size() / block_size);
      dequantize_row(blocks, bits, block_size, row);
      return;
    }
  }
}

namespace {

template <typename RowsOf>
LutFileHeader write_rows(const LutDims& dims, const std::filesystem::path& path, LutDtype dtype,
                         std::size_t block_size, RowsOf&& rows_of) {
  LutFileHeader header;
  header.dims = dims;
  header.dtype = dtype;
  header.block_size = static_cast<std::uint32_t>(block_size);
  if (block_size > kMaxU32) throw LutFormatError(Kind::kBlockSize, "block size overflow");
  header.validate();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  auto put = [&](const std::vector<std::uint8_t>& bytes) {
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
  };
  put(header.encode());
  const std::size_t row_width = dims.n_experts * dims.d_model;
  std::vector<std::uint8_t> buf;
  for (std::size_t l = 0; l < dims.n_layers; ++l) {
    rows_of(l, [&](std::span<const float> token_rows) {
      if (token_rows.size() != row_width) throw ShapeError("LUT token row has the wrong width");
      buf.clear();
      for (std::size_t j = 0; j < dims.n_experts; ++j) {
        encode_lut_row(token_rows.subspan(j * dims.d_model, dims.d_model), dtype, block_size,
                       buf);
      }
      put(buf);
    });
  }
  out.flush();
  if (!out) throw IoError("short write to " + path.string());
  return header;
}

}  // namespace

LutFileHeader write_lut(std::span<const LutTable> tables, const std::filesystem::path& path,
                        LutDtype dtype, std::size_t block_size) {
  if (tables.empty()) throw ValueError("write_lut needs at least one table");
  const Shape& s = tables.front().values.shape();
  if (s.size() != 3) throw ShapeError("LUT tables must be (vocab x N x d)");
  const LutDims dims{tables.size(), s[0], s[1], s[2]};
  for (std::size_t l = 0; l < tables.size(); ++l) {
    if (tables[l].values.shape() != s) throw ShapeError("LUT tables from different models");
    if (tables[l].layer != l) throw ValueError("LUT tables must be ordered by layer");
  }
  return write_rows(dims, path, dtype, block_size, [&](std::size_t l, auto&& emit) {
    const Tensor<float>& v = tables[l].values;
    for (std::size_t i = 0; i < dims.vocab; ++i) emit(v.row(i));
  });
}

LutFileHeader write_lut(const LutSource& source, const std::filesystem::path& path,
                        LutDtype dtype, std::size_t block_size) {
  const LutDims dims = source.dims();
  constexpr std::size_t kChunk = 256;
  return write_rows(dims, path, dtype, block_size, [&](std::size_t l, auto&& emit) {
    std::vector<TokenId> ids;
    for (std::size_t start = 0; start < dims.vocab; start += kChunk) {
      ids.clear();
      for (std::size_t i = start; i < std::min(dims.vocab, start + kChunk); ++i) {
        ids.push_back(static_cast<TokenId>(i));
      }
      const Tensor<float> rows = source.gather(l, ids);
      for (std::size_t r = 0; r < ids.size(); ++r) emit(rows.row(r));
    }
  });
}

LutFile::LutFile(std::filesystem::path path, int fd, LutFileHeader header)
    : path_(std::move(path)), fd_(fd), header_(header) {}

LutFile::~LutFile() {
  if (fd_ >= 0) ::close(fd_);
}

void LutFile::read_at(std::uint64_t offset, std::span<std::uint8_t> out) const {
  std::size_t done = 0;
  while (done < out.size()) {
    const ssize_t n = ::pread(fd_, out.data() + done, out.size() - done,
                              static_cast<off_t>(offset + done));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("read failed on " + path_.string() + ": " + std::strerror(errno));
    }
    if (n == 0) throw IoError("unexpected end of file in " + path_.string());
    done += static_cast<std::size_t>(n);
  }
  bytes_.fetch_add(out.size());
}

Tensor<float> LutFile::gather(std::size_t layer, std::span<const TokenId> ids) const {
  check_request(layer, ids);
  const std::size_t n_exp = header_.dims.n_experts;
  const std::size_t d = header_.dims.d_model;
  const std::uint64_t row_bytes = header_.row_bytes();
  Tensor<float> out({ids.size(), n_exp, d});
  std::vector<std::uint8_t> buf(n_exp * row_bytes);
  std::map<TokenId, std::size_t> seen;
  for (std::size_t r = 0; r < ids.size(); ++r) {
    float* dst = out.data() + r * n_exp * d;
    if (dedup_) {
      auto [it, fresh] = seen.emplace(ids[r], r);
      if (!fresh) {
        const float* src = out.data() + it->second * n_exp * d;
        std::copy(src, src + n_exp * d, dst);
        continue;
      }
    }
    read_at(header_.token_offset(layer, ids[r]), buf);
    for (std::size_t j = 0; j < n_exp; ++j) {
      decode_lut_row(std::span<const std::uint8_t>(buf).subspan(j * row_bytes, row_bytes),
                     header_.dtype, header_.block_size, std::span<float>(dst + j * d, d));
    }
  }
  return out;
}

std::unique_ptr<LutFile> open_lut(const std::filesystem::path& path) {
  const int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) throw IoError("cannot open " + path.string() + ": " + std::strerror(errno));
  try {
    struct stat st {};
    if (::fstat(fd, &st) != 0) throw IoError("cannot stat " + path.string());
    const auto size = static_cast<std::uint64_t>(st.st_size);
    std::vector<std::uint8_t> head(std::min<std::uint64_t>(size, kLutHeaderBytes));
    std::size_t done = 0;
    while (done < head.size()) {
      const ssize_t n = ::pread(fd, head.data() + done, head.size() - done, static_cast<off_t>(done));
      if (n <= 0) throw IoError("cannot read header of " + path.string());
      done += static_cast<std::size_t>(n);
    }
    const LutFileHeader header = LutFileHeader::decode(head);
    if (size != header.file_bytes()) {
      throw LutFormatError(Kind::kPayloadLength,
                           "payload length mismatch: " + path.string() + " holds " +
                               std::to_string(size) + " bytes, header implies " +
                               std::to_string(header.file_bytes()));
    }
    return std::unique_ptr<LutFile>(new LutFile(path, fd, header));
  } catch (...) {
    ::close(fd);
    throw;
  }
}

}  // namespace mole
