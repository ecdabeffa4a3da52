#pragma once

// CSV ingestion of distance tables, edge lists and POI profiles, and
// export of constructed graphs as a CSV matrix plus JSON sidecar.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stg/csv.hpp"
#include "stg/graph/construct.hpp"

namespace stg::graph {

/// Maps node identifiers in files to indices. With no names, identifiers
/// must be integer indices below `n`.
class NodeIndex {
 public:
  explicit NodeIndex(std::size_t n) : n_(n) {}
  explicit NodeIndex(const std::vector<std::string>& names) : n_(names.size()) {
    for (std::size_t i = 0; i < names.size(); ++i) by_name_.emplace(names[i], i);
  }

  std::size_t size() const { return n_; }

  std::size_t lookup(const std::filesystem::path& path, const csv::Row& row, std::size_t col) const {
    const std::string& id = row.cells.at(col);
    if (!by_name_.empty()) {
      auto it = by_name_.find(id);
      if (it == by_name_.end()) {
        throw InputError(path.string() + ":" + std::to_string(row.line) + ": unknown node '" + id + "'");
      }
      return it->second;
    }
    auto v = csv::try_number(id);
    if (!v || *v < 0 || *v != std::floor(*v) || *v >= static_cast<double>(n_)) {
      throw InputError(path.string() + ":" + std::to_string(row.line) + ": node index '" + id + "' out of range for " +
                       std::to_string(n_) + " nodes");
    }
    return static_cast<std::size_t>(*v);
  }

 private:
  std::size_t n_;
  std::map<std::string, std::size_t> by_name_;
};

namespace detail {

// A leading row whose numeric column does not parse is treated as a header.
inline std::vector<csv::Row> body(std::vector<csv::Row> rows, std::size_t numeric_col) {
  if (!rows.empty() && (rows.front().cells.size() <= numeric_col ||
                        !csv::try_number(rows.front().cells[numeric_col]))) {
    rows.erase(rows.begin());
  }
  return rows;
}

}  // namespace detail

/// Rows `from,to,distance`. Unlisted pairs stay unknown (no edge).
inline DistanceTable read_distance_csv(const std::filesystem::path& path, const NodeIndex& nodes) {
  const std::size_t n = nodes.size();
  Tensor d({n, n});
  std::vector<bool> known(n * n, false);
  for (std::size_t i = 0; i < n; ++i) known[i * n + i] = true;
  for (const auto& row : detail::body(csv::read(path), 2)) {
    const std::size_t i = nodes.lookup(path, row, 0), j = nodes.lookup(path, row, 1);
    const double v = csv::number(path, row, 2);
    if (v < 0) throw InputError(path.string() + ":" + std::to_string(row.line) + ": negative distance");
    if (i == j) continue;
    d.at(i, j) = v;
    known[i * n + j] = true;
  }
  return DistanceTable(std::move(d), std::move(known));
}

/// Rows `from,to[,value]`; the value column, when present, is ignored.
inline std::vector<Edge> read_edge_csv(const std::filesystem::path& path, const NodeIndex& nodes) {
  auto rows = csv::read(path);
  if (!rows.empty()) {
    const auto& f = rows.front().cells;
    bool header = f.size() < 2;
    if (!header) {
      try {
        nodes.lookup(path, rows.front(), 0);
        nodes.lookup(path, rows.front(), 1);
      } catch (const InputError&) {
        header = true;
      }
    }
    if (header) rows.erase(rows.begin());
  }
  std::vector<Edge> edges;
  for (const auto& row : rows) edges.push_back({nodes.lookup(path, row, 0), nodes.lookup(path, row, 1)});
  return edges;
}

/// Rows `node,category,count`. Categories are ordered by name.
inline PoiProfile read_poi_csv(const std::filesystem::path& path, const NodeIndex& nodes) {
  std::map<std::string, std::size_t> categories;
  const auto rows = detail::body(csv::read(path), 2);
  for (const auto& row : rows) {
    if (row.cells.size() < 3) throw InputError(path.string() + ":" + std::to_string(row.line) + ": expected 3 columns");
    categories.emplace(row.cells[1], 0);
  }
  std::size_t k = 0;
  for (auto& [name, idx] : categories) idx = k++;
  if (categories.empty()) throw InputError(path.string() + ": no POI rows");
  Tensor p({nodes.size(), categories.size()});
  for (const auto& row : rows) {
    const double c = csv::number(path, row, 2);
    if (c < 0) throw InputError(path.string() + ":" + std::to_string(row.line) + ": negative POI count");
    p.at(nodes.lookup(path, row, 0), categories.at(row.cells[1])) += c;
  }
  return PoiProfile(std::move(p));
}

/// Writes `<stem>.csv` (n rows of n weights) and `<stem>.json`.
inline void write_graph(const std::filesystem::path& stem, const AdjMatrix& a, const nlohmann::json& parameters,
                        std::optional<std::uint64_t> seed = std::nullopt) {
  auto csv_path = stem;
  csv_path += ".csv";
  auto json_path = stem;
  json_path += ".json";
  {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw InputError("cannot write " + csv_path.string());
    for (std::size_t i = 0; i < a.n; ++i) {
      for (std::size_t j = 0; j < a.n; ++j) out << (j ? "," : "") << csv::format(a(i, j));
      out << '\n';
    }
  }
  nlohmann::json side{{"kind", to_string(a.kind)},
                      {"directed", a.directed},
                      {"nodes", a.n},
                      {"parameters", parameters},
                      {"seed", seed ? nlohmann::json(*seed) : nlohmann::json(nullptr)}};
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + json_path.string());
  out << side.dump(2) << '\n';
}

inline AdjMatrix read_graph(const std::filesystem::path& stem) {
  auto csv_path = stem;
  csv_path += ".csv";
  auto json_path = stem;
  json_path += ".json";
  std::ifstream js(json_path);
  if (!js) throw StateError("graph sidecar not found: " + json_path.string());
  const auto side = nlohmann::json::parse(js);
  const auto rows = csv::read(csv_path);
  const std::size_t n = side.at("nodes").get<std::size_t>();
  if (rows.size() != n) throw StateError(csv_path.string() + ": expected " + std::to_string(n) + " rows");
  Tensor w({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].cells.size() != n) {
      throw StateError(csv_path.string() + ":" + std::to_string(rows[i].line) + ": expected " + std::to_string(n) +
                       " columns");
    }
    for (std::size_t j = 0; j < n; ++j) w.at(i, j) = csv::number(csv_path, rows[i], j);
  }
  return AdjMatrix::make(std::move(w), parse_graph_kind(side.at("kind").get<std::string>()),
                         side.at("directed").get<bool>());
}

}  // namespace stg::graph
