// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <memory>

#include "quadapter/checkpoint.hpp"
#include "quadapter/error.hpp"

namespace quadapter {

std::string git_blob_sha1(std::string_view bytes) {
  const std::string prefix = "blob " + std::to_string(bytes.size()) + '\0';
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  require(ctx != nullptr, ErrorKind::kIo, "cannot allocate a digest context");
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  const bool ok = EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx.get(), prefix.data(), prefix.size()) == 1 &&
                  EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx.get(), md.data(), &len) == 1;
  require(ok, ErrorKind::kIo, "SHA-1 digest failed");
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    char buf[3];
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

std::string file_blob_sha1(const std::filesystem::path& path) { return git_blob_sha1(read_file(path)); }

void Manifest::add_input(const std::filesystem::path& path) { inputs[path.string()] = file_blob_sha1(path); }

void Manifest::add_artifact(const std::filesystem::path& output_dir, const std::string& relative) {
  artifacts[relative] = file_blob_sha1(output_dir / relative);
}

json Manifest::to_json() const {
  json in = json::object();
  for (const auto& [k, v] : inputs) in[k] = v;
  json out = json::object();
  for (const auto& [k, v] : artifacts) out[k] = v;
  return json{{"command", command}, {"seed", seed}, {"config", config}, {"inputs", in}, {"artifacts", out}};
}

Manifest Manifest::from_json(const json& j) {
  Manifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.at("config");
    for (const auto& [k, v] : j.at("inputs").items()) m.inputs[k] = v.get<std::string>();
    for (const auto& [k, v] : j.at("artifacts").items()) m.artifacts[k] = v.get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kIo, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

std::filesystem::path Manifest::write(const std::filesystem::path& output_dir) const {
  const std::filesystem::path path = output_dir / (command + ".manifest.json");
  write_file(path, to_json().dump(2) + "\n");
  return path;
}

}  // namespace quadapter
