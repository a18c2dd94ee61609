// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "quadapter/error.hpp"

namespace quadapter::csv {

std::size_t Table::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  fail(ErrorKind::kData, "CSV has no column '" + name + "'");
}

double Table::number(std::size_t row, const std::string& name) const {
  const std::string& cell = rows.at(row).at(column(name));
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == cell.size() && !cell.empty(), ErrorKind::kData, "CSV cell '" + cell + "' is not a number");
  return v;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

void write_row(std::ostream& os, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    require(cells[i].find_first_of(",\n\"") == std::string::npos, ErrorKind::kData,
            "CSV cell '" + cells[i] + "' needs quoting, which is not supported");
    os << (i ? "," : "") << cells[i];
  }
  os << '\n';
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

std::string to_string(const Table& table) {
  std::ostringstream os;
  write_row(os, table.header);
  for (const auto& r : table.rows) {
    require(r.size() == table.header.size(), ErrorKind::kData, "CSV row width differs from header");
    write_row(os, r);
  }
  return os.str();
}

Table parse(const std::string& text) {
  Table t;
  std::istringstream is(text);
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      t.header = split(line);
      first = false;
      continue;
    }
    auto cells = split(line);
    require(cells.size() == t.header.size(), ErrorKind::kData, "CSV row width differs from header: " + line);
    t.rows.push_back(std::move(cells));
  }
  require(!first, ErrorKind::kData, "CSV text has no header");
  return t;
}

void write(const std::filesystem::path& path, const Table& table) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
  os << to_string(table);
}

void append(const std::filesystem::path& path, const Table& table) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  if (!fresh) {
    const Table existing = read(path);
    require(existing.header == table.header, ErrorKind::kData, "CSV header mismatch when appending to " + path.string());
  }
  std::ofstream os(path, std::ios::binary | std::ios::app);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot append to " + path.string());
  if (fresh) write_row(os, table.header);
  for (const auto& r : table.rows) write_row(os, r);
}

Table read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

}  // namespace quadapter::csv
