// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// LUT file format, version 1, little-endian:
//
//   offset  size  field
//        0     8  magic "MOLELUT1"
//        8     4  version (1)
//       12     4  n_layers
//       16     4  vocab
//       20     4  n_experts
//       24     4  d
//       28     1  dtype (fp32=0, fp16=1, nf4=2, nf3=3)
//       29     4  block_size (0 unless quantized)
//       33    31  zero padding
//       64     -  payload
//
// The payload is ordered layer, token, expert, dimension. Each (token, expert)
// row of d values is stored as d raw elements (fp32/fp16) or as d/block_size
// consecutive quantized blocks: an fp16 scale then the packed codes.

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mole/error.h"
#include "mole/lut_source.h"
#include "mole/tensor.h"

namespace mole {

inline constexpr char kLutMagic[8] = {'M', 'O', 'L', 'E', 'L', 'U', 'T', '1'};
inline constexpr std::uint32_t kLutVersion = 1;
inline constexpr std::size_t kLutHeaderBytes = 64;

enum class LutDtype : std::uint8_t { kF32 = 0, kF16 = 1, kNF4 = 2, kNF3 = 3 };

std::string_view lut_dtype_name(LutDtype dtype);
/// "fp32" / "fp16" / "nf4" / "nf3". Throws ValueError.
LutDtype parse_lut_dtype(std::string_view name);
bool is_quantized(LutDtype dtype);
int lut_dtype_bits(LutDtype dtype);

/// One layer's table of pre-computed expert outputs, (vocab x N x d).
struct LutTable {
  std::size_t layer = 0;
  Tensor<float> values;
};

/// Format violations found while opening a LUT file.
class LutFormatError : public IoError {
 public:
  enum class Kind { kBadMagic, kVersion, kPayloadLength, kDimensionOverflow, kBlockSize, kDtype };

  LutFormatError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct LutFileHeader {
  std::uint32_t version = kLutVersion;
  LutDims dims;
  LutDtype dtype = LutDtype::kF32;
  std::uint32_t block_size = 0;

  /// Throws LutFormatError on invalid dims, dtype or block size.
  void validate() const;

  std::vector<std::uint8_t> encode() const;
  /// Parses and validates the first 64 bytes.
  static LutFileHeader decode(std::span<const std::uint8_t> bytes);

  /// Stored bytes of one (token, expert) row.
  std::uint64_t row_bytes() const;
  std::uint64_t payload_bytes() const;
  std::uint64_t file_bytes() const { return kLutHeaderBytes + payload_bytes(); }
  /// Byte offset of row (layer, token, expert 0).
  std::uint64_t token_offset(std::size_t layer, TokenId token) const;

  friend bool operator==(const LutFileHeader&, const LutFileHeader&) = default;
};

/// Serializes one (token, expert) row into its stored form.
void encode_lut_row(std::span<const float> row, LutDtype dtype, std::size_t block_size,
                    std::vector<std::uint8_t>& out);
/// Inverse of encode_lut_row.
void decode_lut_row(std::span<const std::uint8_t> bytes, LutDtype dtype, std::size_t block_size,
                    std::span<float> row);

/// Writes `tables` (one per layer, in order) to `path`.
LutFileHeader write_lut(std::span<const LutTable> tables, const std::filesystem::path& path,
                        LutDtype dtype, std::size_t block_size = 0);

/// Re-encodes every row of `source` (e.g. an fp16 file into NF3).
LutFileHeader write_lut(const LutSource& source, const std::filesystem::path& path,
                        LutDtype dtype, std::size_t block_size = 0);

/// Random-access reader. Rows are read with positional reads on demand; the
/// payload is never loaded wholesale. Shareable across threads.
class LutFile final : public LutSource {
 public:
  ~LutFile() override;
  LutFile(const LutFile&) = delete;
  LutFile& operator=(const LutFile&) = delete;

  const LutFileHeader& header() const { return header_; }
  const std::filesystem::path& path() const { return path_; }

  LutDims dims() const override { return header_.dims; }
  Tensor<float> gather(std::size_t layer, std::span<const TokenId> ids) const override;
  std::uint64_t bytes_transferred() const override { return bytes_.load(); }

  /// Read each distinct id once per gather. Off by default.
  void set_dedup(bool on) { dedup_ = on; }

 private:
  friend std::unique_ptr<LutFile> open_lut(const std::filesystem::path& path);
  LutFile(std::filesystem::path path, int fd, LutFileHeader header);

  void read_at(std::uint64_t offset, std::span<std::uint8_t> out) const;

  std::filesystem::path path_;
  int fd_ = -1;
  LutFileHeader header_;
  bool dedup_ = false;
  mutable std::atomic<std::uint64_t> bytes_{0};
};

/// Validates the header and the exact file length. Throws LutFormatError
/// for format violations and IoError when the file cannot be read.
std::unique_ptr<LutFile> open_lut(const std::filesystem::path& path);

}  // namespace mole
