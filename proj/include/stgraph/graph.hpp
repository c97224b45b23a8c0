#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stgraph/common.hpp"
#include "stgraph/ingest.hpp"

namespace stgraph {

constexpr int kNumTimeBins = 48;

struct GraphNode {
  int node_index = 0;
  std::string location_key;
  int category = 0;

  /// One-hot category feature of length num_classes.
  std::vector<double> feature(int num_classes) const {
    std::vector<double> f(num_classes, 0.0);
    f[category] = 1.0;
    return f;
  }
};

struct GraphEdge {
  int src = 0;
  int dst = 0;
  int departure_bin = 0;
  int arrival_bin = 0;
  int frequency = 1;
  double distance_m = 0.0;
  double duration_min = 0.0;

  /// The binary transit vector: ones at departure and arrival bins.
  std::vector<double> transit_vector(int num_bins = kNumTimeBins) const {
    std::vector<double> v(num_bins, 0.0);
    v[departure_bin] = 1.0;
    v[arrival_bin] = 1.0;
    return v;
  }
};

/// Ones at the departure and arrival bins (a single 1 when they coincide).
inline std::vector<double> encode_transit_vector(int departure_bin, int arrival_bin,
                                                 int num_bins = kNumTimeBins) {
  if (departure_bin < 0 || arrival_bin < departure_bin || arrival_bin >= num_bins) {
    throw std::invalid_argument("encode_transit_vector: need 0 <= departure <= arrival < " +
                                std::to_string(num_bins));
  }
  std::vector<double> v(num_bins, 0.0);
  v[departure_bin] = 1.0;
  v[arrival_bin] = 1.0;
  return v;
}

/// Per-user weighted directed spatial-temporal trajectory graph.
struct MobilityGraph {
  std::string user_id;
  int num_classes = 10;
  int num_bins = kNumTimeBins;
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
  // Per-edge (frequency, distance, duration) min-max scaled to [0,1].
  std::vector<std::array<double, 3>> normalized_weights;
};

/// Great-circle distance in meters, Earth radius 6,371,000 m.
inline double haversine(double lat1, double lon1, double lat2, double lon2) {
  constexpr double kEarthRadiusM = 6371000.0;
  constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
  const double phi1 = lat1 * kDegToRad, phi2 = lat2 * kDegToRad;
  const double dphi = (lat2 - lat1) * kDegToRad;
  const double dlam = (lon2 - lon1) * kDegToRad;
  const double s1 = std::sin(dphi / 2.0), s2 = std::sin(dlam / 2.0);
  const double a = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(a)));
}

/// Min-max scales each weight channel to [0,1] within the graph. A channel
/// whose edges all agree maps to 1.0 so it still carries signal.
inline void normalize_weights(MobilityGraph& g) {
  if (g.edges.empty()) throw std::invalid_argument("normalize_weights: graph has no edges");
  std::array<double, 3> lo{}, hi{};
  for (int c = 0; c < 3; ++c) {
    lo[c] = std::numeric_limits<double>::infinity();
    hi[c] = -std::numeric_limits<double>::infinity();
  }
  auto channel = [](const GraphEdge& e, int c) {
    return c == 0 ? static_cast<double>(e.frequency) : c == 1 ? e.distance_m : e.duration_min;
  };
  for (const GraphEdge& e : g.edges) {
    for (int c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], channel(e, c));
      hi[c] = std::max(hi[c], channel(e, c));
    }
  }
  g.normalized_weights.assign(g.edges.size(), {});
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      g.normalized_weights[i][c] =
          hi[c] == lo[c] ? 1.0 : (channel(g.edges[i], c) - lo[c]) / (hi[c] - lo[c]);
    }
  }
}

/// Builds the graph: one node per distinct location key, one edge per
/// distinct (src, dst, transit vector) across all consecutive visit pairs.
/// Merged duplicates carry the occurrence count as frequency and the mean
/// transit minutes as duration.
inline MobilityGraph build_graph(const UserHistory& history, int num_classes = 10) {
  MobilityGraph g;
  g.user_id = history.user_id;
  g.num_classes = num_classes;

  std::map<std::string, int> node_of;
  auto node_index = [&](const Visit& v) {
    auto it = node_of.find(v.location_key);
    if (it != node_of.end()) return it->second;
    const int idx = static_cast<int>(g.nodes.size());
    node_of[v.location_key] = idx;
    g.nodes.push_back(GraphNode{idx, v.location_key, v.category});
    return idx;
  };

  struct Accum {
    int count = 0;
    double total_minutes = 0.0;
  };
  std::map<std::array<int, 4>, Accum> merged;  // (src, dst, dep, arr)

  for (const DailyTrajectory& t : history.trajectories) {
    for (std::size_t i = 0; i + 1 < t.visits.size(); ++i) {
      const Visit& a = t.visits[i];
      const Visit& b = t.visits[i + 1];
      const int src = node_index(a);
      const int dst = node_index(b);
      const int dep = time_bin(a.timestamp);
      const int arr = time_bin(b.timestamp);
      Accum& acc = merged[{src, dst, dep, arr}];
      acc.count += 1;
      acc.total_minutes +=
          static_cast<double>(b.timestamp.epoch_seconds() - a.timestamp.epoch_seconds()) / 60.0;
    }
  }
  if (merged.empty()) {
    throw DataError("build_graph: user " + history.user_id + " has no movements");
  }

  for (const auto& [key, acc] : merged) {
    GraphEdge e;
    e.src = key[0];
    e.dst = key[1];
    e.departure_bin = key[2];
    e.arrival_bin = key[3];
    e.frequency = acc.count;
    e.duration_min = acc.total_minutes / acc.count;
    const auto& ca = history.coordinates.at(g.nodes[e.src].location_key);
    const auto& cb = history.coordinates.at(g.nodes[e.dst].location_key);
    e.distance_m = haversine(ca.latitude, ca.longitude, cb.latitude, cb.longitude);
    g.edges.push_back(e);
  }
  normalize_weights(g);
  return g;
}

// ----------------------------------------------------------------------------
// Statistics
// ----------------------------------------------------------------------------

struct GraphStats {
  std::size_t graph_count = 0;
  std::size_t edge_count = 0;
  std::map<std::size_t, std::size_t> node_count_histogram;
  std::map<std::size_t, std::size_t> max_outdegree_histogram;
};

inline GraphStats graph_stats(const std::vector<MobilityGraph>& graphs) {
  GraphStats s;
  s.graph_count = graphs.size();
  for (const MobilityGraph& g : graphs) {
    s.edge_count += g.edges.size();
    s.node_count_histogram[g.nodes.size()] += 1;
    std::vector<std::size_t> outdeg(g.nodes.size(), 0);
    for (const GraphEdge& e : g.edges) outdeg[e.src] += 1;
    std::size_t mx = 0;
    for (std::size_t d : outdeg) mx = std::max(mx, d);
    s.max_outdegree_histogram[mx] += 1;
  }
  return s;
}

/// Two-column "value count" table, ready for external plotting.
inline std::string histogram_table(const std::map<std::size_t, std::size_t>& hist,
                                   const std::string& value_name) {
  std::ostringstream out;
  out << value_name << ",count\n";
  for (const auto& [v, c] : hist) out << v << "," << c << "\n";
  return out.str();
}

// ----------------------------------------------------------------------------
// Serialization (line-oriented text, bit-exact reals)
// ----------------------------------------------------------------------------

inline std::string serialize_graph(const MobilityGraph& g) {
  for (const GraphNode& n : g.nodes) {
    if (n.location_key.find_first_of(" \t") != std::string::npos) {
      throw DataError("serialize_graph: location_key contains whitespace: '" + n.location_key +
                      "'");
    }
  }
  std::ostringstream out;
  out << "STGRAPH 1 " << g.user_id << " " << g.num_classes << " " << g.num_bins << "\n";
  for (const GraphNode& n : g.nodes) {
    out << "N " << n.node_index << " " << n.location_key << " " << n.category << "\n";
  }
  for (const GraphEdge& e : g.edges) {
    out << "E " << e.src << " " << e.dst << " " << e.departure_bin << " " << e.arrival_bin << " "
        << e.frequency << " " << format_real(e.distance_m) << " " << format_real(e.duration_min)
        << "\n";
  }
  return out.str();
}

inline MobilityGraph deserialize_graph(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("graph file: empty");
  auto head = split_ws(line);
  if (head.size() != 5 || head[0] != "STGRAPH" || head[1] != "1") {
    throw DataError("graph file: bad header");
  }
  MobilityGraph g;
  g.user_id = head[2];
  g.num_classes = static_cast<int>(parse_int(head[3]));
  g.num_bins = static_cast<int>(parse_int(head[4]));
  while (std::getline(in, line)) {
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "N") {
      if (tok.size() != 4) throw DataError("graph file: bad node line (want index key category)");
      GraphNode n;
      n.node_index = static_cast<int>(parse_int(tok[1]));
      n.location_key = tok[2];
      n.category = static_cast<int>(parse_int(tok[3]));
      if (n.node_index != static_cast<int>(g.nodes.size())) {
        throw DataError("graph file: node_index out of order");
      }
      if (n.category < 0 || n.category >= g.num_classes) {
        throw DataError("graph file: category out of range");
      }
      g.nodes.push_back(std::move(n));
    } else if (tok[0] == "E") {
      if (tok.size() != 8) {
        throw DataError("graph file: bad edge line (want src dst dep arr freq dist dur)");
      }
      GraphEdge e;
      e.src = static_cast<int>(parse_int(tok[1]));
      e.dst = static_cast<int>(parse_int(tok[2]));
      e.departure_bin = static_cast<int>(parse_int(tok[3]));
      e.arrival_bin = static_cast<int>(parse_int(tok[4]));
      e.frequency = static_cast<int>(parse_int(tok[5]));
      e.distance_m = parse_real(tok[6]);
      e.duration_min = parse_real(tok[7]);
      if (e.src < 0 || e.src >= static_cast<int>(g.nodes.size()) || e.dst < 0 ||
          e.dst >= static_cast<int>(g.nodes.size())) {
        throw DataError("graph file: edge references missing node");
      }
      if (e.departure_bin < 0 || e.arrival_bin < e.departure_bin || e.arrival_bin >= g.num_bins) {
        throw DataError("graph file: edge bins violate departure <= arrival");
      }
      if (e.frequency < 1) throw DataError("graph file: frequency must be positive");
      g.edges.push_back(e);
    } else {
      throw DataError("graph file: unknown record '" + tok[0] + "'");
    }
  }
  if (g.edges.empty()) throw DataError("graph file: no edges");
  normalize_weights(g);
  return g;
}

}  // namespace stgraph
