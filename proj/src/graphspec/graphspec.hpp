#pragma once

#include <string>
#include <vector>

#include "flowdata/flowdata.hpp"

namespace tel2veh::graph {

// Dense non-negative adjacency over the GCT nodes, in flow-matrix column
// order.
class GraphSpec {
 public:
  GraphSpec() = default;
  GraphSpec(std::vector<std::string> node_ids, std::vector<double> weights, bool self_loops);

  std::size_t size() const { return node_ids_.size(); }
  const std::vector<std::string>& node_ids() const { return node_ids_; }
  const std::vector<double>& weights() const { return weights_; }
  bool self_loops() const { return self_loops_; }
  double weight(std::size_t i, std::size_t j) const { return weights_[i * node_ids_.size() + j]; }

  bool symmetric() const;
  std::size_t edge_count() const;  // nonzero off-diagonal entries
  GraphSpec subgraph(const std::vector<std::size_t>& nodes) const;
  GraphSpec permuted(const std::vector<std::size_t>& order) const;

  // Throws unless node_ids equals `ids` element for element.
  void require_order(const std::vector<std::string>& ids) const;

  std::vector<std::string> warnings;

 private:
  std::vector<std::string> node_ids_;
  std::vector<double> weights_;
  bool self_loops_ = true;
};

double haversine_m(double lat1, double lon1, double lat2, double lon2);

// w_ij = exp(-d^2 / sigma^2), zeroed below threshold, diagonal 1.
GraphSpec build_distance_graph(const std::vector<flow::RoadSegment>& segments, double sigma_m = 1000.0,
                               double threshold = 0.1);

// adjacency.csv: header row of node ids, then N rows of N weights. An
// optional leading id column is accepted when the header starts with an
// empty cell.
GraphSpec load_adjacency(const std::string& path, const std::vector<std::string>& node_ids);
void save_adjacency(const GraphSpec& g, const std::string& path);

GraphSpec row_normalize(const GraphSpec& g);

}  // namespace tel2veh::graph
