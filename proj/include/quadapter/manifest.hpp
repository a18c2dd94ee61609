// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "quadapter/config.hpp"

namespace quadapter {

/// SHA-1 of "blob <size>\0" + bytes, as git computes object ids.
std::string git_blob_sha1(std::string_view bytes);
std::string file_blob_sha1(const std::filesystem::path& path);

/// Provenance record written next to every command's outputs.
struct Manifest {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;     // path -> blob hash
  std::map<std::string, std::string> artifacts;  // path relative to the output dir -> blob hash

  void add_input(const std::filesystem::path& path);
  /// Hashes a file that already exists under output_dir.
  void add_artifact(const std::filesystem::path& output_dir, const std::string& relative);
  json to_json() const;
  static Manifest from_json(const json& j);
  /// Writes <output_dir>/<command>.manifest.json and returns its path.
  std::filesystem::path write(const std::filesystem::path& output_dir) const;
};

}  // namespace quadapter
