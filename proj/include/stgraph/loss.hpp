#pragma once

#include <cmath>
#include <vector>

#include "stgraph/common.hpp"
#include "stgraph/graph.hpp"
#include "stgraph/model.hpp"
#include "stgraph/tensor.hpp"

namespace stgraph {

/// Binary occurrence targets of one user: visited categories, active bins,
/// and (category, arrival-bin) joint cells.
struct DistributionTargets {
  std::vector<double> spatial;   // C_s
  std::vector<double> temporal;  // C_t
  std::vector<double> joint;     // C_s * C_t, cell (c, t) at index c * C_t + t
};

/// y_s from node categories, y_t from the union of edge transit bins, y_st
/// marks (destination category, arrival bin) per edge.
inline DistributionTargets build_targets(const MobilityGraph& g) {
  DistributionTargets t;
  t.spatial.assign(g.num_classes, 0.0);
  t.temporal.assign(g.num_bins, 0.0);
  t.joint.assign(static_cast<std::size_t>(g.num_classes) * g.num_bins, 0.0);
  for (const GraphNode& n : g.nodes) t.spatial[n.category] = 1.0;
  for (const GraphEdge& e : g.edges) {
    t.temporal[e.departure_bin] = 1.0;
    t.temporal[e.arrival_bin] = 1.0;
    const int dst_cat = g.nodes[e.dst].category;
    t.joint[static_cast<std::size_t>(dst_cat) * g.num_bins + e.arrival_bin] = 1.0;
  }
  return t;
}

/// Per-label empirical positive rates over a corpus of targets.
struct ClassPriors {
  std::vector<double> spatial;
  std::vector<double> temporal;
  std::vector<double> joint;
};

inline ClassPriors compute_priors(const std::vector<DistributionTargets>& corpus) {
  if (corpus.empty()) throw std::invalid_argument("compute_priors: empty corpus");
  ClassPriors p;
  p.spatial.assign(corpus[0].spatial.size(), 0.0);
  p.temporal.assign(corpus[0].temporal.size(), 0.0);
  p.joint.assign(corpus[0].joint.size(), 0.0);
  for (const DistributionTargets& t : corpus) {
    for (std::size_t i = 0; i < p.spatial.size(); ++i) p.spatial[i] += t.spatial[i];
    for (std::size_t i = 0; i < p.temporal.size(); ++i) p.temporal[i] += t.temporal[i];
    for (std::size_t i = 0; i < p.joint.size(); ++i) p.joint[i] += t.joint[i];
  }
  const double n = static_cast<double>(corpus.size());
  for (double& v : p.spatial) v /= n;
  for (double& v : p.temporal) v /= n;
  for (double& v : p.joint) v /= n;
  return p;
}

struct DBLossConfig {
  double lambda = 2.0;          // negative-tolerance scale
  double kappa = 0.05;          // class-bias scale
  double rebalance_alpha = 0.1; // smoothing floor of the re-balancing weight
  double rebalance_beta = 10.0; // sharpness
  double rebalance_mu = 0.3;    // center
};

namespace detail {

inline double clamp_prior(double p) { return std::min(1.0 - 1e-4, std::max(1e-4, p)); }

inline double stable_log1pexp(double t) {
  // log(1 + e^t) without overflow on either tail.
  return std::max(t, 0.0) + std::log1p(std::exp(-std::fabs(t)));
}

}  // namespace detail

/// Class bias v_i = -kappa * log(1/p_i - 1) with clamped priors.
inline std::vector<double> class_biases(const std::vector<double>& priors, double kappa) {
  std::vector<double> v(priors.size());
  for (std::size_t i = 0; i < priors.size(); ++i) {
    const double p = detail::clamp_prior(priors[i]);
    v[i] = -kappa * std::log(1.0 / p - 1.0);
  }
  return v;
}

/// Instance re-balancing weights r̂_i = clamp(alpha + sigmoid(beta (r_i - mu)))
/// with r_i = (1/p_i) / sum over the instance's positive labels of 1/p_j.
inline std::vector<double> rebalance_weights(const std::vector<double>& targets,
                                             const std::vector<double>& priors,
                                             const DBLossConfig& cfg) {
  if (targets.size() != priors.size()) {
    throw std::invalid_argument("rebalance_weights: length mismatch");
  }
  double denom = 0.0;
  for (std::size_t j = 0; j < targets.size(); ++j) {
    if (targets[j] > 0.5) denom += 1.0 / detail::clamp_prior(priors[j]);
  }
  std::vector<double> r(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double ri = denom > 0.0 ? (1.0 / detail::clamp_prior(priors[i])) / denom : 1.0;
    const double smoothed =
        cfg.rebalance_alpha + 1.0 / (1.0 + std::exp(-cfg.rebalance_beta * (ri - cfg.rebalance_mu)));
    r[i] = std::min(1.0 + cfg.rebalance_alpha, std::max(cfg.rebalance_alpha, smoothed));
  }
  return r;
}

/// Distribution-balanced multi-label loss on logits, with explicit per-label
/// re-balancing weights and class biases:
///   (1/C) sum_i r_i [ y_i log(1+e^{-(z_i - v_i)})
///                     + (1/lambda)(1-y_i) log(1+e^{lambda (z_i - v_i)}) ].
/// Differentiable in z; weights, biases and targets are constants.
inline Tensor db_loss(const Tensor& logits, const std::vector<double>& targets,
                      const std::vector<double>& weights, const std::vector<double>& biases,
                      double lambda) {
  const std::size_t n = logits.numel();
  if (n == 0) throw std::invalid_argument("db_loss: empty input");
  if (targets.size() != n || weights.size() != n || biases.size() != n) {
    throw std::invalid_argument("db_loss: length mismatch");
  }
  const auto& z = logits.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = z[i] - biases[i];
    const double pos = detail::stable_log1pexp(-t);
    const double neg = detail::stable_log1pexp(lambda * t) / lambda;
    acc += weights[i] * (targets[i] * pos + (1.0 - targets[i]) * neg);
  }
  acc /= static_cast<double>(n);
  return make_op(
      {1}, {acc}, {logits}, [n, targets, weights, biases, lambda](detail::TensorNode& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double t = p.values[i] - biases[i];
          // d/dz of the positive term is -sigmoid(-t); of the negative term,
          // sigmoid(lambda t).
          const double dpos = -1.0 / (1.0 + std::exp(t));
          const double dneg = 1.0 / (1.0 + std::exp(-lambda * t));
          p.grad[i] += g * weights[i] * (targets[i] * dpos + (1.0 - targets[i]) * dneg);
        }
      });
}

/// Convenience form computing r̂ and v from priors and the instance targets.
inline Tensor db_loss(const Tensor& logits, const std::vector<double>& targets,
                      const DBLossConfig& cfg, const std::vector<double>& priors) {
  return db_loss(logits, targets, rebalance_weights(targets, priors, cfg),
                 class_biases(priors, cfg.kappa), cfg.lambda);
}

// Head weights of the combined objective: spatial, temporal, joint.
constexpr double kSpatialLossWeight = 0.1;
constexpr double kTemporalLossWeight = 0.1;
constexpr double kJointLossWeight = 1.0;

/// Weighted sum of the three head losses on their logits.
inline Tensor total_loss(const ForwardState& state, const DistributionTargets& targets,
                         const DBLossConfig& cfg, const ClassPriors& priors) {
  Tensor ls = db_loss(state.phi_spatial, targets.spatial, cfg, priors.spatial);
  Tensor lt = db_loss(state.phi_temporal, targets.temporal, cfg, priors.temporal);
  Tensor lst = db_loss(state.phi_joint, targets.joint, cfg, priors.joint);
  return add(add(scale(ls, kSpatialLossWeight), scale(lt, kTemporalLossWeight)),
             scale(lst, kJointLossWeight));
}

}  // namespace stgraph
