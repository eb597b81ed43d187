// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <future>
#include <span>
#include <vector>

#include "mole/tensor.h"

namespace mole {

struct LutDims {
  std::size_t n_layers = 0;
  std::size_t vocab = 0;
  std::size_t n_experts = 0;
  std::size_t d_model = 0;

  friend bool operator==(const LutDims&, const LutDims&) = default;
};

/// How prefetch requests are serviced. All three produce identical rows.
enum class FetchMode : std::uint8_t {
  kSync,      // read before prefetch returns
  kAsync,     // background worker, bounded by MOLE_RT_THREADS
  kDeferred,  // read when the ticket is awaited
};

/// Completion handle for one prefetch. Single owner; awaiting twice throws.
class FetchTicket {
 public:
  FetchTicket() = default;
  FetchTicket(std::size_t layer, std::vector<TokenId> ids,
              std::future<Tensor<float>> rows)
      : layer_(layer), ids_(std::move(ids)), rows_(std::move(rows)) {}

  FetchTicket(FetchTicket&&) noexcept = default;
  FetchTicket& operator=(FetchTicket&&) noexcept = default;

  std::size_t layer() const { return layer_; }
  const std::vector<TokenId>& ids() const { return ids_; }
  bool consumed() const { return !rows_.valid(); }

  /// Rows for exactly the requested ids, in request order: (|ids| x N x d).
  Tensor<float> await();

 private:
  std::size_t layer_ = 0;
  std::vector<TokenId> ids_;
  std::future<Tensor<float>> rows_;
};

/// Read-only access to per-layer expert lookup tables.
class LutSource {
 public:
  virtual ~LutSource() = default;

  virtual LutDims dims() const = 0;

  /// (|ids| x N x d) rows for one layer. Repeated ids yield identical rows.
  virtual Tensor<float> gather(std::size_t layer, std::span<const TokenId> ids) const = 0;

  /// Bytes moved out of the backing store so far.
  virtual std::uint64_t bytes_transferred() const = 0;

  FetchTicket prefetch(std::size_t layer, std::span<const TokenId> ids) const;

  void set_fetch_mode(FetchMode mode) { mode_ = mode; }
  FetchMode fetch_mode() const { return mode_; }

 protected:
  /// Validates (layer, ids) against dims(); throws ValueError.
  void check_request(std::size_t layer, std::span<const TokenId> ids) const;

 private:
  FetchMode mode_ = default_fetch_mode();

  static FetchMode default_fetch_mode();
};

/// Worker cap from MOLE_RT_THREADS (unset: hardware concurrency; 0: sync only).
std::size_t runtime_thread_cap();

}  // namespace mole
