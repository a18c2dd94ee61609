// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "quadapter/config.hpp"
#include "quadapter/model.hpp"

namespace quadapter {

// Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
// the tensors as little-endian f64 in header order. Nothing time-dependent is
// stored, so equal inputs give equal bytes.
inline constexpr std::string_view kCheckpointMagic = "QDPTCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ToyTransformer model;
  std::optional<QuantizedView> view;
  json meta = json::object();
};

std::string encode_checkpoint(const ToyTransformer& model, const QuantizedView* view,
                              const json& meta = json::object());
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const ToyTransformer& model, const QuantizedView* view,
                     const json& meta = json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary file and renames it into place.
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace quadapter
