#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <boost/algorithm/string/trim.hpp>

#include "stg/error.hpp"

namespace stg::csv {

struct Row {
  std::size_t line = 0;  // 1-based line number in the source file
  std::vector<std::string> cells;
};

/// Reads a comma-separated file, skipping blank lines. Cells are trimmed.
inline std::vector<Row> read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<Row> rows;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (boost::algorithm::trim_copy(line).empty()) continue;
    Row r{no, {}};
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      r.cells.push_back(boost::algorithm::trim_copy(line.substr(start, comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::optional<double> try_number(std::string_view s) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) return std::nullopt;
  return v;
}

inline double number(const std::filesystem::path& path, const Row& row, std::size_t col) {
  if (col >= row.cells.size()) {
    throw InputError(path.string() + ":" + std::to_string(row.line) + ": missing column " + std::to_string(col + 1));
  }
  auto v = try_number(row.cells[col]);
  if (!v || !std::isfinite(*v)) {
    throw InputError(path.string() + ":" + std::to_string(row.line) + ": column " + std::to_string(col + 1) +
                     " is not a finite number: '" + row.cells[col] + "'");
  }
  return *v;
}

/// Shortest representation that parses back to the same double.
inline std::string format(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace stg::csv
