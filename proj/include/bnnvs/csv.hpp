#pragma once

#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "bnnvs/error.hpp"
#include "bnnvs/net.hpp"

namespace bnnvs {

/// Numeric CSV with a header row.
struct CsvTable {
  std::vector<std::string> header;
  Matrix data;

  Eigen::Index column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<Eigen::Index>(i);
    return -1;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable read_csv(std::istream& in) {
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty CSV input");
  t.header = split_csv_line(line);
  std::vector<std::vector<double>> rows;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != t.header.size())
      throw ConfigError("CSV line " + std::to_string(lineno) + " has " +
                        std::to_string(cells.size()) + " fields, expected " +
                        std::to_string(t.header.size()));
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& c : cells) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(c, &used));
        if (used != c.size()) throw std::invalid_argument(c);
      } catch (const std::exception&) {
        throw ConfigError("CSV line " + std::to_string(lineno) + ": not a number: \"" + c + "\"");
      }
    }
    rows.push_back(std::move(row));
  }
  t.data.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      t.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return t;
}

/// Splits a dataset table into the x* columns (in header order) and y, if present.
inline Dataset dataset_from_csv(const CsvTable& t, double noise_sd) {
  std::vector<Eigen::Index> xs;
  for (std::size_t i = 0; i < t.header.size(); ++i)
    if (!t.header[i].empty() && t.header[i][0] == 'x') xs.push_back(static_cast<Eigen::Index>(i));
  if (xs.empty()) throw ConfigError("dataset CSV has no x columns");
  Dataset d;
  d.noise_sd = noise_sd;
  d.X.resize(t.data.rows(), static_cast<Eigen::Index>(xs.size()));
  for (std::size_t j = 0; j < xs.size(); ++j) d.X.col(static_cast<Eigen::Index>(j)) = t.data.col(xs[j]);
  const Eigen::Index yc = t.column("y");
  d.y = yc >= 0 ? Vector(t.data.col(yc)) : Vector::Zero(t.data.rows());
  return d;
}

}  // namespace bnnvs
