// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "mole/lut_source.h"

#include <cstdlib>
#include <string>
#include <thread>

namespace mole {

namespace {

std::atomic<std::size_t> g_active_workers{0};

struct WorkerSlot {
  ~WorkerSlot() { g_active_workers.fetch_sub(1); }
};

}  // namespace

std::size_t runtime_thread_cap() {
  static const std::size_t cap = [] {
    if (const char* env = std::getenv("MOLE_RT_THREADS")) {
      try {
        return static_cast<std::size_t>(std::stoul(env));
      } catch (const std::exception&) {
        // Unparseable values fall back to the hardware default.
      }
    }
    return static_cast<std::size_t>(std::max(1u, std::thread::hardware_concurrency()));
  }();
  return cap;
}

FetchMode LutSource::default_fetch_mode() {
  return runtime_thread_cap() == 0 ? FetchMode::kSync : FetchMode::kAsync;
}

Tensor<float> FetchTicket::await() {
  if (!rows_.valid()) {
    throw ValueError("fetch ticket for layer " + std::to_string(layer_) +
                     " was already consumed");
  }
  return rows_.get();
}

void LutSource::check_request(std::size_t layer, std::span<const TokenId> ids) const {
  const LutDims d = dims();
  if (layer >= d.n_layers) {
    throw ValueError("LUT layer " + std::to_string(layer) + " out of range (" +
                     std::to_string(d.n_layers) + " layers)");
  }
  for (TokenId id : ids) {
    if (id >= d.vocab) {
      throw ValueError("LUT token id " + std::to_string(id) + " out of range for vocab " +
                       std::to_string(d.vocab));
    }
  }
}

FetchTicket LutSource::prefetch(std::size_t layer, std::span<const TokenId> ids) const {
  check_request(layer, ids);
  std::vector<TokenId> owned(ids.begin(), ids.end());
  auto task = [this, layer, owned]() { return gather(layer, owned); };
  switch (mode_) {
    case FetchMode::kSync: {
      std::promise<Tensor<float>> done;
      try {
        done.set_value(task());
      } catch (...) {
        done.set_exception(std::current_exception());
      }
      return FetchTicket(layer, std::move(owned), done.get_future());
    }
    case FetchMode::kDeferred:
      return FetchTicket(layer, owned, std::async(std::launch::deferred, task));
    case FetchMode::kAsync:
      if (g_active_workers.fetch_add(1) < runtime_thread_cap()) {
        return FetchTicket(layer, owned, std::async(std::launch::async, [task]() {
                             WorkerSlot slot;
                             return task();
                           }));
      }
      g_active_workers.fetch_sub(1);
      return FetchTicket(layer, owned, std::async(std::launch::deferred, task));
  }
  throw ValueError("unknown fetch mode");
}

}  // namespace mole
