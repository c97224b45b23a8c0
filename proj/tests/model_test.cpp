#include "stgraph/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "stgraph/common.hpp"
#include "stgraph/tensor.hpp"

using namespace stgraph;
using stgraph::testing::make_ts;
using stgraph::testing::permute_graph;
using stgraph::testing::random_graph;

namespace {

ModelDims tiny_dims() {
  ModelDims d;
  d.num_classes = 3;
  d.num_bins = 48;
  d.hidden = 4;
  d.embed = 6;
  d.attn_hidden = 3;
  d.dec_hidden = 8;
  d.gat_heads = 2;
  return d;
}

// A 2-node / 1-edge graph: A(cat 0) -> B(cat 1), bins 17 -> 20.
MobilityGraph two_node_graph(int num_classes = 3) {
  MobilityGraph g;
  g.user_id = "t";
  g.num_classes = num_classes;
  g.nodes = {GraphNode{0, "A", 0}, GraphNode{1, "B", 1}};
  GraphEdge e;
  e.src = 0;
  e.dst = 1;
  e.departure_bin = 17;
  e.arrival_bin = 20;
  e.frequency = 1;
  e.distance_m = 120.0;
  e.duration_min = 90.0;
  g.edges = {e};
  normalize_weights(g);
  return g;
}

void fill(Tensor& t, const std::vector<double>& v) { t.mutable_values() = v; }

}  // namespace

TEST(InitParams, DeterministicPerSeed) {
  ModelParams a = init_params(7), b = init_params(7), c = init_params(8);
  auto an = a.named_tensors(), bn = b.named_tensors(), cn = c.named_tensors();
  ASSERT_EQ(an.size(), bn.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < an.size(); ++i) {
    EXPECT_EQ(an[i].second.values(), bn[i].second.values()) << an[i].first;
    if (an[i].second.values() != cn[i].second.values()) any_diff = true;
  }
  EXPECT_TRUE(any_diff);
}

TEST(InitParams, XavierBoundForSquareMatrix) {
  ModelParams p = init_params(3);
  // fan_in = fan_out = 64 for the fusion node MLP.
  const double bound = std::sqrt(6.0 / 128.0);
  EXPECT_NEAR(bound, 0.2165, 5e-4);
  for (double v : p.fusion[0].node_update.l1.w.values()) {
    EXPECT_LE(std::fabs(v), bound);
  }
  // Biases start at zero, gains at one.
  for (double v : p.temporal.l1.b.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(p.fusion[0].beta.value(), 1.0);
  EXPECT_EQ(p.fusion[0].s.value(), 1.0);
}

TEST(SpatialBlock, IsolatedNodeIsTransformedFeature) {
  ModelParams p = init_params(11, tiny_dims());
  MobilityGraph g;
  g.user_id = "iso";
  g.num_classes = 3;
  g.nodes = {GraphNode{0, "A", 2}};
  Tensor v = spatial_block(g, p);
  ASSERT_EQ(v.rows(), 1u);
  ASSERT_EQ(v.cols(), 4u);
  // Self-attention weight is 1, so the row is W . onehot per head, concatenated.
  std::size_t col = 0;
  for (const GatHead& head : p.gat_heads) {
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_NEAR(v.at(0, col++), head.w.at(2, j), 1e-14);
    }
  }
}

TEST(SpatialBlock, SymmetricNodesGetIdenticalRows) {
  ModelParams p = init_params(13, tiny_dims());
  MobilityGraph g;
  g.user_id = "sym";
  g.num_classes = 3;
  g.nodes = {GraphNode{0, "A", 1}, GraphNode{1, "B", 1}};
  GraphEdge e1, e2;
  e1.src = 0; e1.dst = 1; e1.departure_bin = 10; e1.arrival_bin = 11;
  e2.src = 1; e2.dst = 0; e2.departure_bin = 10; e2.arrival_bin = 11;
  g.edges = {e1, e2};
  normalize_weights(g);
  Tensor v = spatial_block(g, p);
  for (std::size_t j = 0; j < v.cols(); ++j) EXPECT_NEAR(v.at(0, j), v.at(1, j), 1e-14);
}

TEST(SpatialBlock, MatchesHandComputedTrace) {
  // One head, 2 classes, head_dim 2: small enough to trace by hand.
  ModelDims d;
  d.num_classes = 2;
  d.hidden = 2;
  d.gat_heads = 1;
  d.embed = 4;
  d.attn_hidden = 2;
  d.dec_hidden = 4;
  ModelParams p = init_params(1, d);
  fill(p.gat_heads[0].w, {0.1, -0.2,   // class 0 row
                          0.3, 0.05}); // class 1 row
  fill(p.gat_heads[0].a, {0.2, -0.1,   // rows: head_dim, cols: (center, neighbor)
                          0.4, 0.3});

  MobilityGraph g = two_node_graph(2);
  Tensor v = spatial_block(g, p);

  // Wh rows: node A (cat 0) -> (0.1, -0.2); node B (cat 1) -> (0.3, 0.05).
  const double whA0 = 0.1, whA1 = -0.2, whB0 = 0.3, whB1 = 0.05;
  // Score of pair (center, neighbor) = a_col0 . wh_center + a_col1 . wh_neighbor.
  auto center_score = [&](double x0, double x1) { return 0.2 * x0 + 0.4 * x1; };
  auto neighbor_score = [&](double x0, double x1) { return -0.1 * x0 + 0.3 * x1; };
  auto lrelu = [](double x) { return x > 0 ? x : 0.2 * x; };
  // Node A attends only to itself -> output = Wh_A.
  EXPECT_NEAR(v.at(0, 0), whA0, 1e-10);
  EXPECT_NEAR(v.at(0, 1), whA1, 1e-10);
  // Node B attends to {B (self), A (in-neighbor)}.
  const double eBB = lrelu(center_score(whB0, whB1) + neighbor_score(whB0, whB1));
  const double eBA = lrelu(center_score(whB0, whB1) + neighbor_score(whA0, whA1));
  const double mx = std::max(eBB, eBA);
  const double wBB = std::exp(eBB - mx), wBA = std::exp(eBA - mx);
  const double aBB = wBB / (wBB + wBA), aBA = wBA / (wBB + wBA);
  EXPECT_NEAR(v.at(1, 0), aBB * whB0 + aBA * whA0, 1e-10);
  EXPECT_NEAR(v.at(1, 1), aBB * whB1 + aBA * whA1, 1e-10);
}

TEST(TemporalBlock, EqualTransitVectorsEmbedEqually) {
  ModelParams p = init_params(17, tiny_dims());
  MobilityGraph g = two_node_graph();
  GraphEdge e = g.edges[0];
  e.src = 1;
  e.dst = 0;  // different endpoints, same bins
  g.edges.push_back(e);
  normalize_weights(g);
  Tensor emb = temporal_block(g, p);
  ASSERT_EQ(emb.rows(), 2u);
  for (std::size_t j = 0; j < emb.cols(); ++j) EXPECT_EQ(emb.at(0, j), emb.at(1, j));
}

TEST(TemporalBlock, MatchesMatrixOracle) {
  ModelDims dims = tiny_dims();
  ModelParams p = init_params(19, dims);
  MobilityGraph g = two_node_graph();
  Tensor emb = temporal_block(g, p);

  // Direct arithmetic: two-hot input picks rows 17 and 20 of W1.
  const int D = dims.hidden;
  std::vector<double> h1(D), out(D);
  for (int j = 0; j < D; ++j) {
    double x = p.temporal.l1.w.at(17, j) + p.temporal.l1.w.at(20, j) + p.temporal.l1.b.value(j);
    h1[j] = std::max(0.0, x);
  }
  for (int j = 0; j < D; ++j) {
    double x = p.temporal.l2.b.value(j);
    for (int k = 0; k < D; ++k) x += h1[k] * p.temporal.l2.w.at(k, j);
    out[j] = x;
  }
  for (int j = 0; j < D; ++j) EXPECT_NEAR(emb.at(0, j), out[j], 1e-12);
}

TEST(TemporalBlock, ZeroInputPropagatesBiasOnly) {
  ModelDims dims = tiny_dims();
  ModelParams p = init_params(23, dims);
  Tensor zero_in = Tensor::zeros({1, static_cast<std::size_t>(dims.num_bins)});
  Tensor out = detail::apply_mlp2(zero_in, p.temporal);
  std::vector<double> h1(dims.hidden);
  for (int j = 0; j < dims.hidden; ++j) h1[j] = std::max(0.0, p.temporal.l1.b.value(j));
  for (int j = 0; j < dims.hidden; ++j) {
    double x = p.temporal.l2.b.value(j);
    for (int k = 0; k < dims.hidden; ++k) x += h1[k] * p.temporal.l2.w.at(k, j);
    EXPECT_NEAR(out.at(0, j), x, 1e-14);
  }
}

TEST(Heads, SpatialMeanPoolInvariances) {
  ModelDims dims;  // defaults: C_s = 10
  ModelParams p = init_params(29, dims);
  Rng rng(5);
  std::vector<double> row(dims.hidden);
  for (double& v : row) v = rng.uniform(-1, 1);
  std::vector<double> three_rows, six_rows;
  for (int r = 0; r < 3; ++r) three_rows.insert(three_rows.end(), row.begin(), row.end());
  for (int r = 0; r < 6; ++r) six_rows.insert(six_rows.end(), row.begin(), row.end());
  Tensor v3({3, static_cast<std::size_t>(dims.hidden)}, three_rows);
  Tensor v6({6, static_cast<std::size_t>(dims.hidden)}, six_rows);

  Tensor phi3 = head_spatial(v3, p);
  Tensor phi6 = head_spatial(v6, p);
  EXPECT_EQ(phi3.numel(), 10u);
  for (std::size_t i = 0; i < phi3.numel(); ++i) EXPECT_NEAR(phi3.value(i), phi6.value(i), 1e-12);

  // Identical embeddings: meanpool equals any row.
  Tensor single = head_spatial(Tensor({1, static_cast<std::size_t>(dims.hidden)}, row), p);
  for (std::size_t i = 0; i < phi3.numel(); ++i) EXPECT_NEAR(phi3.value(i), single.value(i), 1e-12);
}

TEST(Heads, TemporalGateAndSum) {
  ModelDims dims;
  ModelParams p = init_params(31, dims);
  Rng rng(6);
  std::vector<double> row(dims.hidden);
  for (double& v : row) v = rng.uniform(-1, 1);
  Tensor e1({1, static_cast<std::size_t>(dims.hidden)}, row);

  // Zero gate annihilates everything except the head bias.
  fill(p.time_gate, std::vector<double>(dims.hidden, 0.0));
  Tensor phi0 = head_temporal(e1, p);
  EXPECT_EQ(phi0.numel(), 48u);
  for (std::size_t i = 0; i < phi0.numel(); ++i) {
    EXPECT_NEAR(phi0.value(i), p.head_temporal.b.value(i), 1e-14);
  }

  // Unit gate on a single edge: the head applied to the raw row.
  fill(p.time_gate, std::vector<double>(dims.hidden, 1.0));
  Tensor phi1 = head_temporal(e1, p);
  Tensor direct = detail::apply_linear(Tensor({static_cast<std::size_t>(dims.hidden)}, row),
                                       p.head_temporal);
  for (std::size_t i = 0; i < phi1.numel(); ++i) EXPECT_NEAR(phi1.value(i), direct.value(i), 1e-12);
}

TEST(FusionAggregation, SingletonReturnsTheMessage) {
  Tensor msg({1, 3}, {0.4, 0.2, 0.9});
  for (double beta : {0.1, 1.0, 57.0}) {
    Tensor out = aggregate_messages(msg, {0}, 1, Tensor::scalar(beta));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.at(0, j), msg.at(0, j), 1e-15);
  }
}

TEST(FusionAggregation, EqualMessagesAggregateToEither) {
  Tensor msg({2, 3}, {0.4, 0.2, 0.9, 0.4, 0.2, 0.9});
  Tensor out = aggregate_messages(msg, {0, 0}, 1, Tensor::scalar(1.0));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.at(0, j), msg.at(0, j), 1e-15);
}

TEST(FusionAggregation, LargeBetaApproachesMaxScoreMessage) {
  // Message 1 has the larger mean, so beta -> 1e3 selects it.
  Tensor msg({2, 3}, {0.1, 0.2, 0.3, 0.5, 0.6, 0.7});
  Tensor out = aggregate_messages(msg, {0, 0}, 1, Tensor::scalar(1e3));
  EXPECT_NEAR(out.at(0, 0), 0.5, 1e-3);
  EXPECT_NEAR(out.at(0, 1), 0.6, 1e-3);
  EXPECT_NEAR(out.at(0, 2), 0.7, 1e-3);
}

TEST(FusionLayer, MatchesStraightLineOracle) {
  // 2 nodes, 2 edges both into node 1, D = 2, beta = 1, fixed tiny params.
  const std::size_t D = 2;
  Tensor nodes({2, D}, {0.1, -0.3, 0.25, 0.15});
  Tensor edges({2, D}, {0.05, 0.2, -0.1, 0.3});
  Tensor hw({2, D}, {0.02, 0.01, 0.03, -0.02});
  std::vector<std::size_t> src = {0, 0}, dst = {1, 1};

  FusionLayerParams layer;
  layer.node_update.l1 = {Tensor({D, D}, {0.2, -0.1, 0.4, 0.3}, true), Tensor({D}, {0.01, -0.02}, true)};
  layer.node_update.l2 = {Tensor({D, D}, {0.5, 0.1, -0.2, 0.6}, true), Tensor({D}, {0.0, 0.05}, true)};
  layer.edge_message = {Tensor({2 * D, D}, {0.1, 0.2, -0.3, 0.4, 0.25, -0.15, 0.05, 0.35}, true),
                        Tensor({D}, {0.02, 0.03}, true)};
  layer.edge_update.l1 = {Tensor({D, D}, {-0.1, 0.2, 0.3, 0.15}, true), Tensor({D}, {0.0, 0.01}, true)};
  layer.edge_update.l2 = {Tensor({D, D}, {0.45, -0.05, 0.2, 0.3}, true), Tensor({D}, {0.02, 0.0}, true)};
  layer.beta = Tensor::scalar(1.0, true);
  layer.s = Tensor::scalar(1.0, true);

  auto [nodes_out, edges_out] = fusion_layer(nodes, edges, hw, src, dst, layer);

  // Independent straight-line evaluation with plain doubles.
  auto relu_s = [](double x) { return x > 0 ? x : 0.0; };
  const double eps = 1e-7;
  double m0[D], m1[D];
  for (std::size_t j = 0; j < D; ++j) {
    m0[j] = relu_s(nodes.at(0, j) + edges.at(0, j) + hw.at(0, j)) + eps;
    m1[j] = relu_s(nodes.at(0, j) + edges.at(1, j) + hw.at(1, j)) + eps;
  }
  const double s0 = (m0[0] + m0[1]) / 2.0, s1 = (m1[0] + m1[1]) / 2.0;
  const double mx = std::max(s0, s1);
  const double w0 = std::exp(s0 - mx), w1 = std::exp(s1 - mx);
  const double a0 = w0 / (w0 + w1), a1 = w1 / (w0 + w1);
  double agg[D];
  for (std::size_t j = 0; j < D; ++j) agg[j] = a0 * m0[j] + a1 * m1[j];

  auto mlp2_s = [&](const detail::Mlp2& m, const double* x, double* out) {
    double h[D];
    for (std::size_t j = 0; j < D; ++j) {
      double acc = m.l1.b.value(j);
      for (std::size_t k = 0; k < D; ++k) acc += x[k] * m.l1.w.at(k, j);
      h[j] = relu_s(acc);
    }
    for (std::size_t j = 0; j < D; ++j) {
      double acc = m.l2.b.value(j);
      for (std::size_t k = 0; k < D; ++k) acc += h[k] * m.l2.w.at(k, j);
      out[j] = acc;
    }
  };

  // Node 0 receives no messages: update of h with zero message.
  double in0[D] = {nodes.at(0, 0), nodes.at(0, 1)};
  double out0[D];
  mlp2_s(layer.node_update, in0, out0);
  // Node 1: h + (|h|/|agg|) * agg.
  const double hn = std::hypot(nodes.at(1, 0), nodes.at(1, 1));
  const double mn = std::max(std::hypot(agg[0], agg[1]), 1e-12);
  double in1[D], out1[D];
  for (std::size_t j = 0; j < D; ++j) in1[j] = nodes.at(1, j) + (hn / mn) * agg[j];
  mlp2_s(layer.node_update, in1, out1);
  for (std::size_t j = 0; j < D; ++j) {
    EXPECT_NEAR(nodes_out.at(0, j), out0[j], 1e-10);
    EXPECT_NEAR(nodes_out.at(1, j), out1[j], 1e-10);
  }

  // Edges: message = Linear(concat(h_dst, h_src)), then the same update form.
  for (std::size_t e = 0; e < 2; ++e) {
    double cat[2 * D] = {nodes.at(1, 0), nodes.at(1, 1), nodes.at(0, 0), nodes.at(0, 1)};
    double em[D];
    for (std::size_t j = 0; j < D; ++j) {
      double acc = layer.edge_message.b.value(j);
      for (std::size_t k = 0; k < 2 * D; ++k) acc += cat[k] * layer.edge_message.w.at(k, j);
      em[j] = acc;
    }
    const double he = std::hypot(edges.at(e, 0), edges.at(e, 1));
    const double me = std::max(std::hypot(em[0], em[1]), 1e-12);
    double ein[D], eout[D];
    for (std::size_t j = 0; j < D; ++j) ein[j] = edges.at(e, j) + (he / me) * em[j];
    mlp2_s(layer.edge_update, ein, eout);
    for (std::size_t j = 0; j < D; ++j) EXPECT_NEAR(edges_out.at(e, j), eout[j], 1e-10);
  }
}

TEST(FusionLayer, NoInEdgesReducesToPlainMlp) {
  ModelDims dims = tiny_dims();
  ModelParams p = init_params(37, dims);
  Rng rng(9);
  const std::size_t D = dims.hidden;
  std::vector<double> nv(2 * D), ev(D);
  for (double& v : nv) v = rng.uniform(-1, 1);
  for (double& v : ev) v = rng.uniform(-1, 1);
  Tensor nodes({2, D}, nv);
  Tensor edges({1, D}, ev);
  Tensor hw = Tensor::zeros({1, D});
  // Single edge 0 -> 1: node 0 has no in-edges.
  auto [out, eout] = fusion_layer(nodes, edges, hw, {0}, {1}, p.fusion[0]);
  Tensor direct = detail::apply_mlp2(Tensor({1, D}, std::vector<double>(nv.begin(), nv.begin() + D)),
                                     p.fusion[0].node_update);
  for (std::size_t j = 0; j < D; ++j) EXPECT_EQ(out.at(0, j), direct.at(0, j));
}

TEST(Readout, SingleEdgeAttentionIsOne) {
  ModelDims dims = tiny_dims();
  ModelParams p = init_params(41, dims);
  MobilityGraph g = two_node_graph();
  ForwardState st = forward(g, p);
  ASSERT_EQ(st.readout_attention.numel(), 1u);
  EXPECT_DOUBLE_EQ(st.readout_attention.value(), 1.0);
  EXPECT_EQ(st.embedding.numel(), static_cast<std::size_t>(dims.embed));
}

TEST(Readout, DefaultEmbeddingWidthIs24) {
  ModelParams p = init_params(43);
  Rng rng(43);
  MobilityGraph g = random_graph(rng);
  ForwardState st = forward(g, p);
  EXPECT_EQ(st.embedding.numel(), 24u);
  // Attention sums to one over edges.
  double sum = 0;
  for (double a : st.readout_attention.values()) sum += a;
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(Decode, JointLogitLengthIsClassesTimesBins) {
  ModelParams p = init_params(47);
  Rng rng(47);
  MobilityGraph g = random_graph(rng);
  ForwardState st = forward(g, p);
  EXPECT_EQ(st.phi_joint.numel(), 480u);
}

TEST(Decode, AllZeroWeightsYieldFinalBias) {
  ModelDims dims = tiny_dims();
  ModelParams p = init_params(53, dims);
  for (auto& [name, t] : p.named_tensors()) {
    if (name.rfind("decoder.", 0) == 0) {
      t.mutable_values().assign(t.numel(), 0.0);
    }
  }
  std::vector<double> bias(p.decoder_out.b.numel());
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = 0.01 * static_cast<double>(i % 7);
  fill(p.decoder_out.b, bias);
  Tensor h = Tensor::zeros({static_cast<std::size_t>(dims.embed)});
  Tensor ps = Tensor::zeros({static_cast<std::size_t>(dims.num_classes)});
  Tensor pt = Tensor::zeros({static_cast<std::size_t>(dims.num_bins)});
  Tensor out = decode(h, ps, pt, p);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.value(i), bias[i]);
}

TEST(Decode, MatchesStraightLineOracle) {
  // Minimal widths so the oracle is a short hand computation.
  ModelDims d;
  d.num_classes = 2;
  d.num_bins = 2;
  d.hidden = 2;
  d.embed = 2;
  d.attn_hidden = 2;
  d.dec_hidden = 2;
  d.gat_heads = 1;
  ModelParams p = init_params(59, d);
  Tensor h({2}, {0.1, -0.2});
  Tensor ps({2}, {0.3, 0.05});
  Tensor pt({2}, {-0.15, 0.25});
  Tensor out = decode(h, ps, pt, p);

  auto relu_s = [](double x) { return x > 0 ? x : 0.0; };
  double z[6] = {0.1, -0.2, 0.3, 0.05, -0.15, 0.25};
  double x[2];
  for (int j = 0; j < 2; ++j) {
    double acc = p.decoder_in.b.value(j);
    for (int k = 0; k < 6; ++k) acc += z[k] * p.decoder_in.w.at(k, j);
    x[j] = acc;
  }
  for (const auto& unit : p.decoder_units) {
    double hmid[2], upd[2];
    for (int j = 0; j < 2; ++j) {
      double acc = unit.l1.b.value(j);
      for (int k = 0; k < 2; ++k) acc += x[k] * unit.l1.w.at(k, j);
      hmid[j] = relu_s(acc);
    }
    for (int j = 0; j < 2; ++j) {
      double acc = unit.l2.b.value(j);
      for (int k = 0; k < 2; ++k) acc += hmid[k] * unit.l2.w.at(k, j);
      upd[j] = acc;
    }
    for (int j = 0; j < 2; ++j) x[j] += upd[j];
  }
  for (int i = 0; i < 4; ++i) {
    double acc = p.decoder_out.b.value(i);
    for (int k = 0; k < 2; ++k) acc += x[k] * p.decoder_out.w.at(k, i);
    EXPECT_NEAR(out.value(i), acc, 1e-12);
  }
}

TEST(Forward, DeterministicAndFinite) {
  ModelParams p = init_params(61, tiny_dims());
  MobilityGraph g = two_node_graph();
  ForwardState a = forward(g, p);
  ForwardState b = forward(g, p);
  EXPECT_EQ(a.phi_joint.values(), b.phi_joint.values());
  EXPECT_EQ(a.embedding.values(), b.embedding.values());
  for (double v : a.phi_joint.values()) EXPECT_TRUE(std::isfinite(v));
  for (double v : a.embedding.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, PermutationInvariance) {
  ModelParams p = init_params(67);
  Rng rng(67);
  for (int rep = 0; rep < 5; ++rep) {
    MobilityGraph g = random_graph(rng);
    MobilityGraph pg = permute_graph(g, rng);
    NoGradGuard ng;
    ForwardState a = forward(g, p);
    ForwardState b = forward(pg, p);
    for (std::size_t i = 0; i < a.embedding.numel(); ++i) {
      EXPECT_NEAR(a.embedding.value(i), b.embedding.value(i), 1e-9);
    }
    for (std::size_t i = 0; i < a.phi_joint.numel(); ++i) {
      EXPECT_NEAR(a.phi_joint.value(i), b.phi_joint.value(i), 1e-9);
    }
    for (std::size_t i = 0; i < a.phi_spatial.numel(); ++i) {
      EXPECT_NEAR(a.phi_spatial.value(i), b.phi_spatial.value(i), 1e-9);
    }
    for (std::size_t i = 0; i < a.phi_temporal.numel(); ++i) {
      EXPECT_NEAR(a.phi_temporal.value(i), b.phi_temporal.value(i), 1e-9);
    }
  }
}

// Finite differences over every parameter tensor on a 3-node graph. Reduced
// widths keep the sweep fast; the acceptance suite runs the same check.
TEST(Forward, FullModelGradientCheck) {
  ModelDims dims;
  dims.num_classes = 3;
  dims.hidden = 16;
  dims.embed = 8;
  dims.attn_hidden = 8;
  dims.dec_hidden = 16;
  ModelParams p = init_params(71, dims);
  MobilityGraph g;
  g.user_id = "gc";
  g.num_classes = dims.num_classes;
  g.nodes = {GraphNode{0, "A", 0}, GraphNode{1, "B", 1}, GraphNode{2, "C", 2}};
  GraphEdge e1, e2, e3;
  e1.src = 0; e1.dst = 1; e1.departure_bin = 14; e1.arrival_bin = 16; e1.frequency = 2;
  e1.distance_m = 500; e1.duration_min = 60;
  e2.src = 2; e2.dst = 1; e2.departure_bin = 18; e2.arrival_bin = 19; e2.frequency = 1;
  e2.distance_m = 1500; e2.duration_min = 30;
  e3.src = 1; e3.dst = 2; e3.departure_bin = 20; e3.arrival_bin = 24; e3.frequency = 3;
  e3.distance_m = 800; e3.duration_min = 120;
  g.edges = {e1, e2, e3};
  normalize_weights(g);

  Rng rng(72);
  std::vector<double> probe(dims.joint_size());
  for (double& v : probe) v = rng.uniform(-1, 1);
  Tensor probe_t({static_cast<std::size_t>(dims.joint_size())}, probe);

  auto fn = [&] {
    ForwardState st = forward(g, p);
    return reduce_all(mul(st.phi_joint, probe_t), Reduce::kSum);
  };
  double err = grad_check(fn, p.all_tensors(), 1e-5);
  EXPECT_LT(err, 1e-4);
}

TEST(Checkpoint, RoundTripBitExact) {
  ModelParams p = init_params(73, tiny_dims());
  std::string text = serialize_params(p);
  ModelParams q = deserialize_params(text);
  auto pn = p.named_tensors(), qn = q.named_tensors();
  ASSERT_EQ(pn.size(), qn.size());
  for (std::size_t i = 0; i < pn.size(); ++i) {
    EXPECT_EQ(pn[i].first, qn[i].first);
    EXPECT_EQ(pn[i].second.values(), qn[i].second.values()) << pn[i].first;
  }
  EXPECT_EQ(serialize_params(q), text);
}

TEST(Checkpoint, MismatchedDimsNamesTensor) {
  ModelParams p = init_params(79, tiny_dims());
  std::string text = serialize_params(p);
  // Corrupt the shape of one tensor.
  auto pos = text.find("head_spatial.w 2 4 3");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 20, "head_spatial.w 2 4 2");
  try {
    deserialize_params(text);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("head_spatial"), std::string::npos);
  }
}
