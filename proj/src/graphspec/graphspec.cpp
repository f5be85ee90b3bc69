#include "graphspec/graphspec.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "common/config.hpp"
#include "common/error.hpp"

namespace tel2veh::graph {

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + ids[i];
  return out;
}

}  // namespace

GraphSpec::GraphSpec(std::vector<std::string> node_ids, std::vector<double> weights, bool self_loops)
    : node_ids_(std::move(node_ids)), weights_(std::move(weights)), self_loops_(self_loops) {
  const std::size_t n = node_ids_.size();
  if (n == 0) fail(ErrorKind::data, "graph has no nodes");
  if (weights_.size() != n * n) {
    fail(ErrorKind::data, "adjacency has " + std::to_string(weights_.size()) + " entries, expected " +
                              std::to_string(n) + "x" + std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double w = weights_[i * n + j];
      if (!std::isfinite(w) || w < 0.0) {
        fail(ErrorKind::data, "adjacency weight (" + node_ids_[i] + ", " + node_ids_[j] + ") = " + std::to_string(w) +
                                  " is not a finite non-negative number");
      }
    }
    if (self_loops_) weights_[i * n + i] = 1.0;
  }
}

bool GraphSpec::symmetric() const {
  const std::size_t n = size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (weight(i, j) != weight(j, i)) return false;
    }
  }
  return true;
}

std::size_t GraphSpec::edge_count() const {
  std::size_t count = 0;
  for (std::size_t i = 0; i < size(); ++i) {
    for (std::size_t j = 0; j < size(); ++j) {
      if (i != j && weight(i, j) != 0.0) ++count;
    }
  }
  return count;
}

GraphSpec GraphSpec::subgraph(const std::vector<std::size_t>& nodes) const {
  std::vector<std::string> ids;
  std::vector<double> w(nodes.size() * nodes.size());
  for (std::size_t a = 0; a < nodes.size(); ++a) {
    ids.push_back(node_ids_.at(nodes[a]));
    for (std::size_t b = 0; b < nodes.size(); ++b) w[a * nodes.size() + b] = weight(nodes[a], nodes[b]);
  }
  GraphSpec g(std::move(ids), std::move(w), false);
  g.self_loops_ = self_loops_;
  return g;
}

GraphSpec GraphSpec::permuted(const std::vector<std::size_t>& order) const {
  if (order.size() != size()) fail(ErrorKind::invalid_argument, "permutation length differs from graph size");
  return subgraph(order);
}

void GraphSpec::require_order(const std::vector<std::string>& ids) const {
  if (ids != node_ids_) {
    fail(ErrorKind::data, "graph node order [" + join_ids(node_ids_) + "] does not match flow order [" +
                              join_ids(ids) + "]");
  }
}

double haversine_m(double lat1, double lon1, double lat2, double lon2) {
  constexpr double r = 6371008.8;
  const double deg = std::numbers::pi / 180.0;
  const double dlat = (lat2 - lat1) * deg;
  const double dlon = (lon2 - lon1) * deg;
  const double s1 = std::sin(dlat / 2.0);
  const double s2 = std::sin(dlon / 2.0);
  const double a = s1 * s1 + std::cos(lat1 * deg) * std::cos(lat2 * deg) * s2 * s2;
  return 2.0 * r * std::asin(std::min(1.0, std::sqrt(a)));
}

GraphSpec build_distance_graph(const std::vector<flow::RoadSegment>& segments, double sigma_m, double threshold) {
  if (segments.size() < 2) fail(ErrorKind::invalid_argument, "distance graph needs at least two segments");
  if (!(sigma_m > 0.0)) fail(ErrorKind::invalid_argument, "sigma_m must be positive");
  if (!(threshold > 0.0 && threshold <= 1.0)) fail(ErrorKind::invalid_argument, "threshold must be in (0, 1]");
  const std::size_t n = segments.size();
  std::vector<std::string> ids;
  for (const auto& s : segments) ids.push_back(std::to_string(s.segment_id));
  std::vector<double> w(n * n, 0.0);
  std::vector<std::string> warnings;
  for (std::size_t i = 0; i < n; ++i) {
    w[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = haversine_m(segments[i].center_lat, segments[i].center_lon, segments[j].center_lat,
                                   segments[j].center_lon);
      if (d == 0.0) warnings.push_back("segments " + ids[i] + " and " + ids[j] + " share coordinates");
      double v = std::exp(-(d * d) / (sigma_m * sigma_m));
      if (v < threshold) v = 0.0;
      w[i * n + j] = v;
      w[j * n + i] = v;
    }
  }
  GraphSpec g(std::move(ids), std::move(w), true);
  g.warnings = std::move(warnings);
  return g;
}

GraphSpec load_adjacency(const std::string& path, const std::vector<std::string>& node_ids) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open adjacency file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::parse, path + ": missing header");
  auto header = split(line, ',');
  for (auto& h : header) h = trim(h);
  bool row_labels = !header.empty() && header[0].empty();
  if (row_labels) header.erase(header.begin());
  if (header != node_ids) {
    fail(ErrorKind::data, path + ": header order [" + join_ids(header) + "] differs from flow order [" +
                              join_ids(node_ids) + "]");
  }
  const std::size_t n = header.size();
  std::vector<double> w;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto f = split(line, ',');
    if (row_labels && !f.empty()) f.erase(f.begin());
    if (f.size() != n) {
      fail(ErrorKind::data, path + ": row " + std::to_string(rows + 1) + " has " + std::to_string(f.size()) +
                                " weights, matrix is not square (" + std::to_string(n) + " ids)");
    }
    for (const auto& cell : f) {
      try {
        std::size_t used = 0;
        const auto t = trim(cell);
        const double v = std::stod(t, &used);
        if (used != t.size()) throw std::invalid_argument(t);
        w.push_back(v);
      } catch (const std::exception&) {
        fail(ErrorKind::parse, path + ": bad weight '" + cell + "' in row " + std::to_string(rows + 1));
      }
    }
    ++rows;
  }
  if (rows != n) {
    fail(ErrorKind::data, path + ": " + std::to_string(rows) + " rows for " + std::to_string(n) +
                              " ids, matrix is not square");
  }
  bool loops = true;
  for (std::size_t i = 0; i < n; ++i) loops = loops && w[i * n + i] == 1.0;
  return GraphSpec(header, std::move(w), loops);
}

void save_adjacency(const GraphSpec& g, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write adjacency file '" + path + "'");
  out << join_ids(g.node_ids()) << '\n';
  char buf[32];
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", g.weight(i, j));
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  }
}

GraphSpec row_normalize(const GraphSpec& g) {
  const std::size_t n = g.size();
  std::vector<double> w(g.weights());
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += w[i * n + j];
    if (!(total > 0.0)) fail(ErrorKind::data, "row_normalize: row '" + g.node_ids()[i] + "' sums to zero");
    for (std::size_t j = 0; j < n; ++j) w[i * n + j] /= total;
  }
  return GraphSpec(g.node_ids(), std::move(w), false);
}

}  // namespace tel2veh::graph
