// Copyright 2026 The MoLE-RT Authors
// SPDX-License-Identifier: Apache-2.0

#include "manifest.h"

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <memory>

#include "mole/error.h"

namespace mole::cli {

namespace {

struct MdCtxDeleter {
  void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};
using MdCtx = std::unique_ptr<EVP_MD_CTX, MdCtxDeleter>;

std::string to_hex(const unsigned char* digest, unsigned len) {
  std::string out(2 * len, '0');
  for (unsigned i = 0; i < len; ++i) std::snprintf(&out[2 * i], 3, "%02x", digest[i]);
  return out;
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  return to_hex(digest, len);
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for hashing");
  MdCtx ctx(EVP_MD_CTX_new());
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 init failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = in.gcount();
    if (got > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(got));
  }
  if (in.bad()) throw IoError("read failed while hashing " + path.string());
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  return to_hex(digest, len);
}

Manifest::Manifest(std::string command, std::vector<std::string> argv) {
  doc_["tool"] = "mole";
  doc_["version"] = kToolVersion;
  doc_["command"] = std::move(command);
  doc_["argv"] = std::move(argv);
  doc_["inputs"] = nlohmann::ordered_json::object();
  doc_["outputs"] = nlohmann::ordered_json::object();
}

void Manifest::set(const std::string& key, nlohmann::ordered_json value) {
  doc_[key] = std::move(value);
}

void Manifest::add_input(const std::string& role, const std::filesystem::path& path) {
  doc_["inputs"][role] = {{"path", path.string()}, {"sha256", sha256_file(path)}};
}

void Manifest::add_output(const std::string& role, const std::filesystem::path& path) {
  doc_["outputs"][role] = {{"path", path.string()}, {"sha256", sha256_file(path)}};
}

void Manifest::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << doc_.dump(2) << '\n';
  if (!out) throw IoError("write failed for manifest " + path.string());
}

}  // namespace mole::cli
