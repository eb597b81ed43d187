// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

// Run manifests: the resolved configuration, the command line and a SHA-256
// digest of every input and output file.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace mole::cli {

inline constexpr const char* kToolVersion = "0.1.0";

/// Lower-case hex SHA-256 of a file's bytes. Throws IoError.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_hex(const void* data, std::size_t size);

class Manifest {
 public:
  Manifest(std::string command, std::vector<std::string> argv);

  void set(const std::string& key, nlohmann::ordered_json value);
  void add_input(const std::string& role, const std::filesystem::path& path);
  void add_output(const std::string& role, const std::filesystem::path& path);

  const nlohmann::ordered_json& json() const { return doc_; }
  /// Writes pretty-printed JSON. Throws IoError.
  void write(const std::filesystem::path& path) const;

 private:
  nlohmann::ordered_json doc_;
};

}  // namespace mole::cli
