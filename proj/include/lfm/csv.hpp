#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lfm/errors.hpp"

// Small CSV layer: schema validated on read and write, malformed rows
// reported with line numbers.

namespace lfm::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  int col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline Table read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  Table t;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.push_back("");
    if (line_no == 1) {
      t.header = cells;
      continue;
    }
    if (cells.size() != t.header.size())
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(t.header.size()) + " columns, found " +
                      std::to_string(cells.size()));
    std::vector<double> row(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      try {
        std::size_t used = 0;
        row[i] = std::stod(cells[i], &used);
        if (used != cells[i].size()) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw DataError(path + ":" + std::to_string(line_no) + ": bad numeric value '" +
                        cells[i] + "'");
      }
    }
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw DataError(path + ": empty file");
  return t;
}

inline void write(const std::string& path, const Table& t) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (std::size_t i = 0; i < t.header.size(); ++i)
    out << (i ? "," : "") << t.header[i];
  out << "\n";
  out.precision(17);
  for (const auto& row : t.rows) {
    if (row.size() != t.header.size())
      throw DataError(path + ": row width does not match header");
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace lfm::csv
