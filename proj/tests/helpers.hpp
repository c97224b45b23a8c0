#pragma once

// Shared generators for tests: random mobility graphs, node relabelings.

#include <map>
#include <string>
#include <vector>

#include "stgraph/common.hpp"
#include "stgraph/graph.hpp"
#include "stgraph/ingest.hpp"

namespace stgraph::testing {

inline Timestamp make_ts(int day, int hour, int minute) {
  Timestamp t;
  t.year = 2020;
  t.month = 3;
  t.day = day;
  t.hour = hour;
  t.minute = minute;
  return t;
}

/// Random valid user history: 3-6 days, 2-6 visits per day.
inline UserHistory random_history(Rng& rng, const std::string& user_id = "u",
                                  int num_locations = 5, int num_classes = 10) {
  UserHistory h;
  h.user_id = user_id;
  std::vector<int> loc_cat(num_locations);
  for (int& c : loc_cat) c = static_cast<int>(rng.below(num_classes));
  const int days = 3 + static_cast<int>(rng.below(4));
  for (int d = 0; d < days; ++d) {
    DailyTrajectory t;
    t.user_id = user_id;
    t.date = CivilDate{2020, 3, d + 1};
    int minute = 5 * 60 + static_cast<int>(rng.below(180));
    const int visits = 2 + static_cast<int>(rng.below(5));
    for (int i = 0; i < visits; ++i) {
      const int loc = static_cast<int>(rng.below(num_locations));
      Visit v;
      v.location_key = "L" + std::to_string(loc);
      v.category = loc_cat[loc];
      v.timestamp = make_ts(d + 1, minute / 60, minute % 60);
      t.visits.push_back(v);
      minute += 20 + static_cast<int>(rng.below(150));
      if (minute >= 24 * 60) break;
    }
    if (t.visits.size() >= 2) h.trajectories.push_back(t);
  }
  for (int l = 0; l < num_locations; ++l) {
    h.coordinates["L" + std::to_string(l)] =
        Coordinates{35.0 + 0.01 * l, 139.0 + 0.02 * l};
  }
  return h;
}

inline MobilityGraph random_graph(Rng& rng, const std::string& user_id = "u",
                                  int num_classes = 10) {
  while (true) {
    UserHistory h = random_history(rng, user_id, 5, num_classes);
    std::size_t movements = 0;
    for (const auto& t : h.trajectories) movements += t.visits.size() - 1;
    if (h.trajectories.size() >= 3 && movements >= 1) return build_graph(h, num_classes);
  }
}

/// Relabels node indices by a random permutation and shuffles the edge list.
inline MobilityGraph permute_graph(const MobilityGraph& g, Rng& rng) {
  std::vector<std::size_t> perm(g.nodes.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);  // perm[old] = new index

  MobilityGraph out;
  out.user_id = g.user_id;
  out.num_classes = g.num_classes;
  out.num_bins = g.num_bins;
  out.nodes.resize(g.nodes.size());
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    GraphNode n = g.nodes[i];
    n.node_index = static_cast<int>(perm[i]);
    out.nodes[perm[i]] = n;
  }
  std::vector<std::size_t> edge_order(g.edges.size());
  for (std::size_t i = 0; i < edge_order.size(); ++i) edge_order[i] = i;
  rng.shuffle(edge_order);
  for (std::size_t i : edge_order) {
    GraphEdge e = g.edges[i];
    e.src = static_cast<int>(perm[e.src]);
    e.dst = static_cast<int>(perm[e.dst]);
    out.edges.push_back(e);
    out.normalized_weights.push_back(g.normalized_weights[i]);
  }
  return out;
}

}  // namespace stgraph::testing
