// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace quadapter::csv {

/// Header plus string cells. Numbers are written with 17 significant digits
/// so doubles survive a round trip.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
  double number(std::size_t row, const std::string& name) const;
};

std::string format_number(double v);
std::string to_string(const Table& table);
Table parse(const std::string& text);

void write(const std::filesystem::path& path, const Table& table);
/// Appends rows; writes the header first when the file is new or empty.
void append(const std::filesystem::path& path, const Table& table);
Table read(const std::filesystem::path& path);

}  // namespace quadapter::csv
