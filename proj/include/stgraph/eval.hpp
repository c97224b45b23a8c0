#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stgraph/common.hpp"
#include "stgraph/graph.hpp"
#include "stgraph/ingest.hpp"

namespace stgraph {

// ----------------------------------------------------------------------------
// Multi-label prediction metrics (example-based)
// ----------------------------------------------------------------------------

struct UserMetrics {
  std::string user_id;
  double accuracy = 0.0;   // |P n T| / |P u T|
  double precision = 0.0;  // |P n T| / |P|, 0 when P empty
  double recall = 0.0;     // |P n T| / |T|
  double f1 = 0.0;
};

struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<UserMetrics> per_user;
  std::size_t excluded_empty_target = 0;
};

inline UserMetrics example_metrics(const std::vector<double>& probabilities,
                                   const std::vector<double>& targets, double threshold) {
  UserMetrics m;
  std::size_t np = 0, nt = 0, inter = 0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const bool p = probabilities[i] >= threshold;
    const bool t = targets[i] > 0.5;
    np += p;
    nt += t;
    inter += p && t;
  }
  const std::size_t uni = np + nt - inter;
  m.accuracy = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
  m.precision = np == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(np);
  m.recall = nt == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(nt);
  m.f1 = m.precision + m.recall == 0.0 ? 0.0
                                       : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

/// Corpus means of per-user set-overlap scores. Users with an empty target
/// set are excluded and counted.
inline MetricsReport multilabel_metrics(const std::vector<std::vector<double>>& probabilities,
                                        const std::vector<std::vector<double>>& targets,
                                        double threshold,
                                        const std::vector<std::string>* user_ids = nullptr) {
  if (probabilities.size() != targets.size()) {
    throw std::invalid_argument("multilabel_metrics: user count mismatch");
  }
  MetricsReport rep;
  for (std::size_t u = 0; u < probabilities.size(); ++u) {
    if (probabilities[u].size() != targets[u].size()) {
      throw std::invalid_argument("multilabel_metrics: label count mismatch");
    }
    bool any_target = false;
    for (double t : targets[u]) any_target = any_target || t > 0.5;
    if (!any_target) {
      ++rep.excluded_empty_target;
      continue;
    }
    UserMetrics m = example_metrics(probabilities[u], targets[u], threshold);
    m.user_id = user_ids ? (*user_ids)[u] : "user" + std::to_string(u);
    rep.per_user.push_back(m);
  }
  if (rep.per_user.empty()) throw DataError("multilabel_metrics: no users with targets");
  for (const UserMetrics& m : rep.per_user) {
    rep.accuracy += m.accuracy;
    rep.precision += m.precision;
    rep.recall += m.recall;
    rep.f1 += m.f1;
  }
  const double n = static_cast<double>(rep.per_user.size());
  rep.accuracy /= n;
  rep.precision /= n;
  rep.recall /= n;
  rep.f1 /= n;
  return rep;
}

// ----------------------------------------------------------------------------
// Distribution distances and correlation
// ----------------------------------------------------------------------------

/// Jensen-Shannon distance with base-2 logarithm: a metric in [0, 1].
/// Inputs are non-negative weight vectors, normalized internally.
inline double jensen_distance(const std::vector<double>& p_in, const std::vector<double>& q_in) {
  if (p_in.size() != q_in.size()) throw std::invalid_argument("jensen_distance: length mismatch");
  double ps = 0.0, qs = 0.0;
  for (double v : p_in) {
    if (v < 0.0) throw std::invalid_argument("jensen_distance: negative mass");
    ps += v;
  }
  for (double v : q_in) {
    if (v < 0.0) throw std::invalid_argument("jensen_distance: negative mass");
    qs += v;
  }
  if (ps <= 0.0 || qs <= 0.0) throw std::invalid_argument("jensen_distance: all-zero vector");
  double div = 0.0;
  for (std::size_t i = 0; i < p_in.size(); ++i) {
    const double p = p_in[i] / ps;
    const double q = q_in[i] / qs;
    const double m = 0.5 * (p + q);
    if (p > 0.0) div += 0.5 * p * std::log2(p / m);
    if (q > 0.0) div += 0.5 * q * std::log2(q / m);
  }
  // Clamp the tiny negative roundoff that can appear when p == q.
  return std::sqrt(std::max(0.0, div));
}

inline double euclidean_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("euclidean_distance: length mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(sq);
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("pearson: bad input");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw NumericError("pearson: correlation undefined for a constant vector");
  }
  return sxy / std::sqrt(sxx * syy);
}

struct CorrelationReport {
  double r = 0.0;
  std::size_t pair_count = 0;
  // (d_rep, d_true) per unordered user pair, in (i, j) index order.
  std::vector<std::pair<double, double>> pairs;
};

/// Pearson correlation between embedding Euclidean distances and Jensen
/// distances of per-user frequency distributions, over all unordered pairs.
inline CorrelationReport similarity_correlation(
    const std::vector<std::vector<double>>& embeddings,
    const std::vector<std::vector<double>>& distributions) {
  if (embeddings.size() != distributions.size()) {
    throw std::invalid_argument("similarity_correlation: user count mismatch");
  }
  if (embeddings.size() < 3) {
    throw std::invalid_argument("similarity_correlation: need at least 3 users");
  }
  CorrelationReport rep;
  std::vector<double> d_rep, d_true;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    for (std::size_t j = i + 1; j < embeddings.size(); ++j) {
      d_rep.push_back(euclidean_distance(embeddings[i], embeddings[j]));
      d_true.push_back(jensen_distance(distributions[i], distributions[j]));
      rep.pairs.emplace_back(d_rep.back(), d_true.back());
    }
  }
  rep.pair_count = d_rep.size();
  rep.r = pearson(d_rep, d_true);
  return rep;
}

// ----------------------------------------------------------------------------
// Per-user frequency distributions (the d_true side)
// ----------------------------------------------------------------------------

/// Visit counts per category over all visits.
inline std::vector<double> category_frequencies(const UserHistory& h, int num_classes) {
  std::vector<double> f(num_classes, 0.0);
  for (const auto& t : h.trajectories) {
    for (const auto& v : t.visits) f[v.category] += 1.0;
  }
  return f;
}

/// Movement activity per half-hour bin: each movement adds one at its
/// departure bin and one at its arrival bin.
inline std::vector<double> bin_frequencies(const UserHistory& h, int num_bins = kNumTimeBins) {
  std::vector<double> f(num_bins, 0.0);
  for (const auto& t : h.trajectories) {
    for (std::size_t i = 0; i + 1 < t.visits.size(); ++i) {
      f[time_bin(t.visits[i].timestamp)] += 1.0;
      f[time_bin(t.visits[i + 1].timestamp)] += 1.0;
    }
  }
  return f;
}

/// Movement counts per (destination category, arrival bin) cell, laid out as
/// the joint target vector.
inline std::vector<double> joint_frequencies(const UserHistory& h, int num_classes,
                                             int num_bins = kNumTimeBins) {
  std::vector<double> f(static_cast<std::size_t>(num_classes) * num_bins, 0.0);
  for (const auto& t : h.trajectories) {
    for (std::size_t i = 0; i + 1 < t.visits.size(); ++i) {
      const Visit& dst = t.visits[i + 1];
      f[static_cast<std::size_t>(dst.category) * num_bins + time_bin(dst.timestamp)] += 1.0;
    }
  }
  return f;
}

// ----------------------------------------------------------------------------
// Mobility indexes
// ----------------------------------------------------------------------------

struct IndexNormalization {
  double movements_min = 0.0, movements_max = 1.0;
  double categories_min = 0.0, categories_max = 1.0;
};

/// Raw inputs of the diversity index: average daily movement count and
/// average daily number of distinct visited categories.
inline std::pair<double, double> diversity_inputs(const UserHistory& h) {
  if (h.trajectories.empty()) throw std::invalid_argument("diversity_inputs: empty history");
  double movements = 0.0, categories = 0.0;
  for (const auto& t : h.trajectories) {
    movements += static_cast<double>(t.visits.size() - 1);
    std::vector<int> seen;
    for (const auto& v : t.visits) {
      if (std::find(seen.begin(), seen.end(), v.category) == seen.end()) seen.push_back(v.category);
    }
    categories += static_cast<double>(seen.size());
  }
  const double days = static_cast<double>(h.trajectories.size());
  return {movements / days, categories / days};
}

inline IndexNormalization diversity_normalization(const std::vector<UserHistory>& users) {
  if (users.empty()) throw std::invalid_argument("diversity_normalization: empty corpus");
  IndexNormalization n;
  n.movements_min = n.categories_min = std::numeric_limits<double>::infinity();
  n.movements_max = n.categories_max = -std::numeric_limits<double>::infinity();
  for (const UserHistory& h : users) {
    auto [m, c] = diversity_inputs(h);
    n.movements_min = std::min(n.movements_min, m);
    n.movements_max = std::max(n.movements_max, m);
    n.categories_min = std::min(n.categories_min, c);
    n.categories_max = std::max(n.categories_max, c);
  }
  return n;
}

/// Diversity index: sqrt(n_t^2 + n_s^2) on corpus min-max normalized inputs.
inline double index_st1(const UserHistory& h, const IndexNormalization& norm) {
  auto [m, c] = diversity_inputs(h);
  auto scale = [](double v, double lo, double hi) { return hi == lo ? 0.0 : (v - lo) / (hi - lo); };
  const double nt = scale(m, norm.movements_min, norm.movements_max);
  const double ns = scale(c, norm.categories_min, norm.categories_max);
  return std::sqrt(nt * nt + ns * ns);
}

/// Movement feature for the regularity index: origin one-hot, destination
/// one-hot, transit vector.
inline std::vector<std::vector<double>> movement_features(const UserHistory& h, int num_classes,
                                                          int num_bins = kNumTimeBins) {
  std::vector<std::vector<double>> out;
  for (const auto& t : h.trajectories) {
    for (std::size_t i = 0; i + 1 < t.visits.size(); ++i) {
      std::vector<double> f(2 * num_classes + num_bins, 0.0);
      f[t.visits[i].category] = 1.0;
      f[num_classes + t.visits[i + 1].category] = 1.0;
      const int dep = time_bin(t.visits[i].timestamp);
      const int arr = time_bin(t.visits[i + 1].timestamp);
      f[2 * num_classes + dep] = 1.0;
      f[2 * num_classes + arr] = 1.0;
      out.push_back(std::move(f));
    }
  }
  return out;
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

/// Regularity index: log of the mean over movements of mean cosine
/// similarity to the other movements, clamped below at 1e-6.
inline double index_st2(const UserHistory& h, int num_classes) {
  auto feats = movement_features(h, num_classes);
  const std::size_t n = feats.size();
  if (n < 2) throw std::invalid_argument("index_st2: need at least 2 movements");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) acc += cosine_similarity(feats[i], feats[j]);
    }
    total += acc / static_cast<double>(n - 1);
  }
  const double mean = total / static_cast<double>(n);
  return std::log(std::max(mean, 1e-6));
}

// ----------------------------------------------------------------------------
// Latent-response matrix and embedding statistics
// ----------------------------------------------------------------------------

/// Users binned by equal-width index intervals; cell (b, j) is the mean of
/// min-max scaled embedding dimension j over the bin's users. Empty bins are
/// missing (NaN), not zero.
inline std::vector<std::vector<double>> response_matrix(
    const std::vector<std::vector<double>>& embeddings, const std::vector<double>& index_values,
    std::size_t num_bins) {
  if (embeddings.empty() || embeddings.size() != index_values.size()) {
    throw std::invalid_argument("response_matrix: size mismatch");
  }
  if (num_bins < 1) throw std::invalid_argument("response_matrix: need at least one bin");
  const std::size_t dims = embeddings[0].size();
  double lo = index_values[0], hi = index_values[0];
  for (double v : index_values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) throw NumericError("response_matrix: constant index values");

  // Per-dimension min-max scaling across the corpus; a constant dimension
  // maps to the midpoint.
  std::vector<double> dlo(dims, std::numeric_limits<double>::infinity());
  std::vector<double> dhi(dims, -std::numeric_limits<double>::infinity());
  for (const auto& e : embeddings) {
    for (std::size_t j = 0; j < dims; ++j) {
      dlo[j] = std::min(dlo[j], e[j]);
      dhi[j] = std::max(dhi[j], e[j]);
    }
  }
  std::vector<std::vector<double>> sums(num_bins, std::vector<double>(dims, 0.0));
  std::vector<std::size_t> counts(num_bins, 0);
  const double width = (hi - lo) / static_cast<double>(num_bins);
  for (std::size_t u = 0; u < embeddings.size(); ++u) {
    std::size_t b = static_cast<std::size_t>((index_values[u] - lo) / width);
    if (b >= num_bins) b = num_bins - 1;  // the max lands in the last bin
    counts[b] += 1;
    for (std::size_t j = 0; j < dims; ++j) {
      const double scaled =
          dhi[j] == dlo[j] ? 0.5 : (embeddings[u][j] - dlo[j]) / (dhi[j] - dlo[j]);
      sums[b][j] += scaled;
    }
  }
  std::vector<std::vector<double>> out(num_bins, std::vector<double>(dims));
  for (std::size_t b = 0; b < num_bins; ++b) {
    for (std::size_t j = 0; j < dims; ++j) {
      out[b][j] = counts[b] == 0 ? std::numeric_limits<double>::quiet_NaN()
                                 : sums[b][j] / static_cast<double>(counts[b]);
    }
  }
  return out;
}

struct DimensionStats {
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0, mean = 0.0;
  std::vector<std::size_t> outliers;  // user indices beyond 1.5 IQR
};

/// Linearly interpolated quantile of sorted values (the common "type 7").
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile: empty input");
  if (sorted.size() == 1) return sorted[0];
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t k = static_cast<std::size_t>(pos);
  if (k + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(k);
  return sorted[k] + frac * (sorted[k + 1] - sorted[k]);
}

inline std::vector<DimensionStats> embedding_stats(
    const std::vector<std::vector<double>>& embeddings) {
  if (embeddings.empty()) throw std::invalid_argument("embedding_stats: empty input");
  const std::size_t dims = embeddings[0].size();
  std::vector<DimensionStats> out(dims);
  for (std::size_t j = 0; j < dims; ++j) {
    std::vector<double> col;
    col.reserve(embeddings.size());
    double mean = 0.0;
    for (const auto& e : embeddings) {
      col.push_back(e[j]);
      mean += e[j];
    }
    std::sort(col.begin(), col.end());
    DimensionStats& s = out[j];
    s.min = col.front();
    s.max = col.back();
    s.q1 = quantile_sorted(col, 0.25);
    s.median = quantile_sorted(col, 0.5);
    s.q3 = quantile_sorted(col, 0.75);
    s.mean = mean / static_cast<double>(embeddings.size());
    const double iqr = s.q3 - s.q1;
    const double lo = s.q1 - 1.5 * iqr, hi = s.q3 + 1.5 * iqr;
    for (std::size_t u = 0; u < embeddings.size(); ++u) {
      if (embeddings[u][j] < lo || embeddings[u][j] > hi) s.outliers.push_back(u);
    }
  }
  return out;
}

}  // namespace stgraph
