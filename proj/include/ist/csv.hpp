// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal CSV for the files this library writes: no quoting, no embedded
// commas. Doubles are printed with 17 significant digits so they round-trip.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ist/error.hpp"

namespace ist {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvTable {
 public:
  CsvTable() = default;
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  const std::vector<std::string>& header() const noexcept { return header_; }
  const std::vector<std::vector<std::string>>& rows() const noexcept { return rows_; }
  std::size_t size() const noexcept { return rows_.size(); }

  void add_row(std::vector<std::string> row) {
    if (row.size() != header_.size()) {
      throw UsageError("csv row has " + std::to_string(row.size()) + " fields, header has " +
                       std::to_string(header_.size()));
    }
    rows_.push_back(std::move(row));
  }

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header_.size(); ++i) {
      if (header_[i] == name) return i;
    }
    throw DataError("csv has no column '" + name + "'");
  }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& fields) {
      for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += fields[i];
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write '" + path.string() + "'");
    f << str();
  }

  static CsvTable parse(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    auto split = [](const std::string& s) {
      std::vector<std::string> out;
      std::string field;
      std::istringstream ls(s);
      while (std::getline(ls, field, ',')) out.push_back(field);
      if (!s.empty() && s.back() == ',') out.emplace_back();
      return out;
    };
    if (!std::getline(in, line)) throw DataError("csv is empty");
    CsvTable t(split(line));
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto row = split(line);
      if (row.size() != t.header_.size()) throw DataError("csv row width mismatch");
      t.rows_.push_back(std::move(row));
    }
    return t;
  }

  static CsvTable read(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read '" + path.string() + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace ist
