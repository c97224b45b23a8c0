#pragma once

#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stgraph/common.hpp"
#include "stgraph/graph.hpp"
#include "stgraph/tensor.hpp"

namespace stgraph {

struct ModelDims {
  int num_classes = 10;  // C_s
  int num_bins = 48;     // C_t
  int hidden = 64;       // D: node/edge embedding width
  int embed = 24;        // d: final user representation width
  int attn_hidden = 16;  // readout attention MLP hidden width
  int dec_hidden = 128;  // decoder hidden width
  int gat_heads = 4;

  int head_dim() const { return hidden / gat_heads; }
  int joint_size() const { return num_classes * num_bins; }
};

namespace detail {

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]; undefined = bias-free layer
};

// Two-layer perceptron: linear, ReLU, linear.
struct Mlp2 {
  Linear l1;
  Linear l2;
};

inline Tensor apply_linear(const Tensor& x, const Linear& lin) {
  if (x.ndim() == 1) {
    Tensor row = reshape(x, {1, x.numel()});
    Tensor out = matmul(row, lin.w);
    if (lin.b.defined()) out = add_rows(out, lin.b);
    return reshape(out, {lin.w.cols()});
  }
  Tensor out = matmul(x, lin.w);
  return lin.b.defined() ? add_rows(out, lin.b) : out;
}

inline Tensor apply_mlp2(const Tensor& x, const Mlp2& mlp) {
  return apply_linear(relu(apply_linear(x, mlp.l1)), mlp.l2);
}

}  // namespace detail

struct GatHead {
  Tensor w;  // [C_s, head_dim]
  Tensor a;  // [head_dim, 2]: column 0 scores the center node, column 1 the neighbor
};

struct FusionLayerParams {
  detail::Mlp2 node_update;
  detail::Linear edge_message;  // [2D -> D]
  detail::Mlp2 edge_update;
  Tensor beta;  // aggregation temperature, learnable scalar
  Tensor s;     // message-norm scale, learnable scalar
};

/// All trainable tensors of the two-stage encoder and the decoder.
struct ModelParams {
  ModelDims dims;

  std::vector<GatHead> gat_heads;
  detail::Mlp2 temporal;        // transit vector -> D
  detail::Linear weight_proj;   // (freq, dist, dur) -> D
  detail::Linear head_spatial;  // D -> C_s
  detail::Linear head_temporal; // D -> C_t
  Tensor time_gate;             // w_t, D-dim
  std::vector<FusionLayerParams> fusion;  // 3 layers
  detail::Mlp2 readout_attention;         // 3 -> h -> 1
  detail::Linear readout_triple;          // 3D -> d
  detail::Linear decoder_in;              // (d + C_s + C_t) -> h_dec
  std::vector<detail::Mlp2> decoder_units;  // 3 residual units
  detail::Linear decoder_out;             // h_dec -> C_s * C_t

  /// Canonical (name, tensor) listing; defines checkpoint order.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto lin = [&](const std::string& p, const detail::Linear& l) {
      out.emplace_back(p + ".w", l.w);
      if (l.b.defined()) out.emplace_back(p + ".b", l.b);
    };
    auto mlp = [&](const std::string& p, const detail::Mlp2& m) {
      lin(p + ".l1", m.l1);
      lin(p + ".l2", m.l2);
    };
    for (std::size_t h = 0; h < gat_heads.size(); ++h) {
      out.emplace_back("gat.head" + std::to_string(h) + ".w", gat_heads[h].w);
      out.emplace_back("gat.head" + std::to_string(h) + ".a", gat_heads[h].a);
    }
    mlp("temporal", temporal);
    lin("weight_proj", weight_proj);
    lin("head_spatial", head_spatial);
    lin("head_temporal", head_temporal);
    out.emplace_back("time_gate", time_gate);
    for (std::size_t l = 0; l < fusion.size(); ++l) {
      const std::string p = "fusion" + std::to_string(l);
      mlp(p + ".node", fusion[l].node_update);
      lin(p + ".edge_message", fusion[l].edge_message);
      mlp(p + ".edge", fusion[l].edge_update);
      out.emplace_back(p + ".beta", fusion[l].beta);
      out.emplace_back(p + ".s", fusion[l].s);
    }
    mlp("readout.attention", readout_attention);
    lin("readout.triple", readout_triple);
    lin("decoder.in", decoder_in);
    for (std::size_t u = 0; u < decoder_units.size(); ++u) {
      mlp("decoder.unit" + std::to_string(u), decoder_units[u]);
    }
    lin("decoder.out", decoder_out);
    return out;
  }

  std::vector<Tensor> all_tensors() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_tensors()) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (Tensor t : all_tensors()) t.zero_grad();
  }

  /// Deep copy: fresh storage, identical values, gradients dropped.
  ModelParams clone() const;
};

// Fixed constants of the fusion stage.
constexpr double kFusionEpsilon = 1e-7;
constexpr double kNormClamp = 1e-12;
constexpr double kLeakySlope = 0.2;

inline ModelParams init_params(std::uint64_t seed, const ModelDims& dims = {}) {
  if (dims.hidden % dims.gat_heads != 0) {
    throw std::invalid_argument("init_params: hidden width must split across heads");
  }
  Rng rng(derive_seed(seed, 0x9a7a));
  auto weight = [&](std::size_t fan_in, std::size_t fan_out, std::vector<std::size_t> shape) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
  };
  auto linear = [&](std::size_t in, std::size_t out) {
    detail::Linear l;
    l.w = weight(in, out, {in, out});
    l.b = Tensor::zeros({out}, true);
    return l;
  };
  auto linear_nobias = [&](std::size_t in, std::size_t out) {
    detail::Linear l;
    l.w = weight(in, out, {in, out});
    return l;
  };
  auto mlp2 = [&](std::size_t in, std::size_t mid, std::size_t out) {
    return detail::Mlp2{linear(in, mid), linear(mid, out)};
  };

  const auto cs = static_cast<std::size_t>(dims.num_classes);
  const auto ct = static_cast<std::size_t>(dims.num_bins);
  const auto d = static_cast<std::size_t>(dims.hidden);
  const auto hd = static_cast<std::size_t>(dims.head_dim());

  ModelParams p;
  p.dims = dims;
  for (int h = 0; h < dims.gat_heads; ++h) {
    GatHead head;
    head.w = weight(cs, hd, {cs, hd});
    head.a = weight(2 * hd, 1, {hd, 2});
    p.gat_heads.push_back(std::move(head));
  }
  p.temporal = mlp2(ct, d, d);
  p.weight_proj = linear(3, d);
  p.head_spatial = linear(d, cs);
  p.head_temporal = linear(d, ct);
  p.time_gate = weight(d, d, {d});
  for (int l = 0; l < 3; ++l) {
    FusionLayerParams f;
    f.node_update = mlp2(d, d, d);
    f.edge_message = linear(2 * d, d);
    f.edge_update = mlp2(d, d, d);
    f.beta = Tensor::scalar(1.0, true);
    f.s = Tensor::scalar(1.0, true);
    p.fusion.push_back(std::move(f));
  }
  // Bias-free scorer: the edge softmax is invariant to uniform logit shifts,
  // so biases here would be unidentifiable.
  p.readout_attention = detail::Mlp2{linear_nobias(3, static_cast<std::size_t>(dims.attn_hidden)),
                                     linear_nobias(static_cast<std::size_t>(dims.attn_hidden), 1)};
  p.readout_triple = linear(3 * d, static_cast<std::size_t>(dims.embed));
  p.decoder_in = linear(static_cast<std::size_t>(dims.embed) + cs + ct,
                        static_cast<std::size_t>(dims.dec_hidden));
  for (int u = 0; u < 3; ++u) {
    p.decoder_units.push_back(mlp2(static_cast<std::size_t>(dims.dec_hidden),
                                   static_cast<std::size_t>(dims.dec_hidden),
                                   static_cast<std::size_t>(dims.dec_hidden)));
  }
  p.decoder_out = linear(static_cast<std::size_t>(dims.dec_hidden), cs * ct);
  return p;
}

inline ModelParams ModelParams::clone() const {
  ModelParams copy = *this;  // copies handles; now replace storage
  auto fresh = [](Tensor& t) {
    if (t.defined()) t = Tensor(t.shape(), t.values(), t.requires_grad());
  };
  auto lin = [&](detail::Linear& l) {
    fresh(l.w);
    fresh(l.b);
  };
  auto mlp = [&](detail::Mlp2& m) {
    lin(m.l1);
    lin(m.l2);
  };
  for (auto& h : copy.gat_heads) {
    fresh(h.w);
    fresh(h.a);
  }
  mlp(copy.temporal);
  lin(copy.weight_proj);
  lin(copy.head_spatial);
  lin(copy.head_temporal);
  fresh(copy.time_gate);
  for (auto& f : copy.fusion) {
    mlp(f.node_update);
    lin(f.edge_message);
    mlp(f.edge_update);
    fresh(f.beta);
    fresh(f.s);
  }
  mlp(copy.readout_attention);
  lin(copy.readout_triple);
  lin(copy.decoder_in);
  for (auto& u : copy.decoder_units) mlp(u);
  lin(copy.decoder_out);
  return copy;
}

// ----------------------------------------------------------------------------
// Forward pass
// ----------------------------------------------------------------------------

/// Per-graph activations, kept alive so backward can run on any of them.
struct ForwardState {
  Tensor node_embeddings;   // [V, D] after fusion
  Tensor edge_embeddings;   // [E, D] after fusion
  Tensor weight_embeddings; // [E, D]
  Tensor phi_spatial;       // [C_s] logits
  Tensor phi_temporal;      // [C_t] logits
  Tensor readout_attention; // [E], sums to 1
  Tensor embedding;         // H, [d]
  Tensor phi_joint;         // [C_s * C_t] logits
};

namespace detail {

inline Tensor node_features(const MobilityGraph& g, int num_classes) {
  std::vector<double> feat(g.nodes.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    feat[i * num_classes + g.nodes[i].category] = 1.0;
  }
  return Tensor({g.nodes.size(), static_cast<std::size_t>(num_classes)}, std::move(feat));
}

inline Tensor edge_features(const MobilityGraph& g, int num_bins) {
  std::vector<double> feat(g.edges.size() * num_bins, 0.0);
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    feat[i * num_bins + g.edges[i].departure_bin] = 1.0;
    feat[i * num_bins + g.edges[i].arrival_bin] = 1.0;
  }
  return Tensor({g.edges.size(), static_cast<std::size_t>(num_bins)}, std::move(feat));
}

inline Tensor weight_features(const MobilityGraph& g) {
  std::vector<double> w(g.edges.size() * 3);
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    w[i * 3 + 0] = g.normalized_weights[i][0];
    w[i * 3 + 1] = g.normalized_weights[i][1];
    w[i * 3 + 2] = g.normalized_weights[i][2];
  }
  return Tensor({g.edges.size(), 3}, std::move(w));
}

}  // namespace detail

/// One graph-attention layer over in-neighbors plus self; heads concatenate
/// to the hidden width.
inline Tensor spatial_block(const MobilityGraph& g, const ModelParams& p) {
  const std::size_t num_nodes = g.nodes.size();
  Tensor features = detail::node_features(g, p.dims.num_classes);

  // Attention pairs (center, neighbor): deduplicated in-edges plus self loops.
  std::set<std::pair<std::size_t, std::size_t>> pair_set;
  for (std::size_t i = 0; i < num_nodes; ++i) pair_set.insert({i, i});
  for (const GraphEdge& e : g.edges) {
    pair_set.insert({static_cast<std::size_t>(e.dst), static_cast<std::size_t>(e.src)});
  }
  std::vector<std::size_t> center, neighbor;
  for (const auto& [c, n] : pair_set) {
    center.push_back(c);
    neighbor.push_back(n);
  }

  static const Tensor sel0({2, 1}, {1.0, 0.0});
  static const Tensor sel1({2, 1}, {0.0, 1.0});
  std::vector<Tensor> head_outputs;
  for (const GatHead& head : p.gat_heads) {
    Tensor wh = matmul(features, head.w);      // [V, hd]
    Tensor scores2 = matmul(wh, head.a);        // [V, 2]
    Tensor score_center = matmul(scores2, sel0);  // [V, 1]
    Tensor score_neighbor = matmul(scores2, sel1);
    Tensor e = add(rows_gather(score_center, center), rows_gather(score_neighbor, neighbor));
    Tensor att = segment_softmax(leaky_relu(reshape(e, {center.size()}), kLeakySlope), center);
    head_outputs.push_back(
        segment_sum_rows(row_scale(rows_gather(wh, neighbor), att), center, num_nodes));
  }
  return concat(head_outputs, 1);  // [V, D]
}

/// Per-edge embedding of the transit vector; equal vectors embed equally.
inline Tensor temporal_block(const MobilityGraph& g, const ModelParams& p) {
  return detail::apply_mlp2(detail::edge_features(g, p.dims.num_bins), p.temporal);
}

/// Mean-pool over nodes, then the spatial squeeze head.
inline Tensor head_spatial(const Tensor& node_embeddings, const ModelParams& p) {
  if (node_embeddings.rows() == 0) throw std::invalid_argument("head_spatial: empty input");
  return detail::apply_linear(reduce_axis(node_embeddings, Reduce::kMean, 0), p.head_spatial);
}

/// Gate each edge row by w_t, sum over edges, then the temporal squeeze head.
inline Tensor head_temporal(const Tensor& edge_embeddings, const ModelParams& p) {
  if (edge_embeddings.rows() == 0) throw std::invalid_argument("head_temporal: empty input");
  return detail::apply_linear(
      reduce_axis(mul_rows(edge_embeddings, p.time_gate), Reduce::kSum, 0), p.head_temporal);
}

/// Softmax aggregation of per-edge messages into their destination nodes.
/// Each message gets one scalar score (the mean of its components) scaled by
/// the temperature; destinations without messages aggregate to zero rows.
inline Tensor aggregate_messages(const Tensor& messages, const std::vector<std::size_t>& dst,
                                 std::size_t num_nodes, const Tensor& beta) {
  Tensor score = mul(reduce_axis(messages, Reduce::kMean, 1), beta);
  Tensor att = segment_softmax(score, dst);
  return segment_sum_rows(row_scale(messages, att), dst, num_nodes);
}

/// One fusion layer: joint node/edge update via softmax-aggregated messages
/// and norm-scaled residual MLPs.
inline std::pair<Tensor, Tensor> fusion_layer(const Tensor& nodes, const Tensor& edges,
                                              const Tensor& weight_embeddings,
                                              const std::vector<std::size_t>& src,
                                              const std::vector<std::size_t>& dst,
                                              const FusionLayerParams& layer) {
  const std::size_t num_nodes = nodes.rows();

  // Node messages: ReLU(h_u + h_e + h_w) + eps per incoming edge.
  Tensor h_src = rows_gather(nodes, src);
  Tensor msg = add_const(relu(add(add(h_src, edges), weight_embeddings)), kFusionEpsilon);
  Tensor aggregated = aggregate_messages(msg, dst, num_nodes, layer.beta);

  // h' = MLP(h + s * (|h| / |m|) * m); zero message leaves MLP(h).
  auto norm_update = [&layer](const Tensor& h, const Tensor& m, const detail::Mlp2& mlp) {
    Tensor ratio = divide(rows_l2norm(h), rows_l2norm(m, kNormClamp));
    return detail::apply_mlp2(add(h, row_scale(m, mul(ratio, layer.s))), mlp);
  };
  Tensor nodes_out = norm_update(nodes, aggregated, layer.node_update);

  // Edge messages from the endpoint pair (center, neighbor).
  Tensor h_dst = rows_gather(nodes, dst);
  Tensor edge_msg = detail::apply_linear(concat({h_dst, h_src}, 1), layer.edge_message);
  Tensor edges_out = norm_update(edges, edge_msg, layer.edge_update);
  return {nodes_out, edges_out};
}

/// Edge-attention weighted sum of node-edge-node triples: the d-dim user
/// representation.
inline std::pair<Tensor, Tensor> readout(const Tensor& nodes, const Tensor& edges,
                                         const Tensor& weight_features,
                                         const std::vector<std::size_t>& src,
                                         const std::vector<std::size_t>& dst,
                                         const ModelParams& p) {
  if (edges.rows() == 0) throw std::invalid_argument("readout: empty edge set");
  Tensor logits = detail::apply_mlp2(weight_features, p.readout_attention);  // [E, 1]
  Tensor att = softmax(reshape(logits, {edges.rows()}));
  Tensor triple = concat({rows_gather(nodes, dst), edges, rows_gather(nodes, src)}, 1);
  Tensor m = detail::apply_linear(triple, p.readout_triple);  // [E, d]
  Tensor h = segment_sum_rows(row_scale(m, att), std::vector<std::size_t>(edges.rows(), 0), 1);
  return {reshape(h, {static_cast<std::size_t>(p.dims.embed)}), att};
}

/// Residual-MLP decoder from (H, spatial logits, temporal logits) to the
/// joint distribution logits.
inline Tensor decode(const Tensor& embedding, const Tensor& phi_spatial, const Tensor& phi_temporal,
                     const ModelParams& p) {
  const std::size_t want = static_cast<std::size_t>(p.dims.embed + p.dims.num_classes +
                                                    p.dims.num_bins);
  Tensor z = concat({embedding, phi_spatial, phi_temporal}, 0);
  if (z.numel() != want) throw std::invalid_argument("decode: component shape mismatch");
  Tensor x = detail::apply_linear(z, p.decoder_in);
  for (const detail::Mlp2& unit : p.decoder_units) {
    x = add(x, detail::apply_mlp2(x, unit));
  }
  return detail::apply_linear(x, p.decoder_out);
}

/// Full pass: decouple (spatial GAT, temporal MLP), squeeze heads, three
/// fusion layers, readout, decode.
inline ForwardState forward(const MobilityGraph& g, const ModelParams& p) {
  if (g.nodes.empty() || g.edges.empty()) throw std::invalid_argument("forward: empty graph");
  if (g.num_classes != p.dims.num_classes || g.num_bins != p.dims.num_bins) {
    throw std::invalid_argument("forward: graph dims disagree with model dims");
  }
  std::vector<std::size_t> src, dst;
  src.reserve(g.edges.size());
  dst.reserve(g.edges.size());
  for (const GraphEdge& e : g.edges) {
    src.push_back(static_cast<std::size_t>(e.src));
    dst.push_back(static_cast<std::size_t>(e.dst));
  }

  ForwardState state;
  Tensor nodes = spatial_block(g, p);
  Tensor edges = temporal_block(g, p);
  state.phi_spatial = head_spatial(nodes, p);
  state.phi_temporal = head_temporal(edges, p);

  Tensor wfeat = detail::weight_features(g);
  state.weight_embeddings = detail::apply_linear(wfeat, p.weight_proj);
  for (const FusionLayerParams& layer : p.fusion) {
    auto [n2, e2] = fusion_layer(nodes, edges, state.weight_embeddings, src, dst, layer);
    nodes = n2;
    edges = e2;
  }
  state.node_embeddings = nodes;
  state.edge_embeddings = edges;
  auto [h, att] = readout(nodes, edges, wfeat, src, dst, p);
  state.embedding = h;
  state.readout_attention = att;
  state.phi_joint = decode(state.embedding, state.phi_spatial, state.phi_temporal, p);
  return state;
}

// ----------------------------------------------------------------------------
// Parameter checkpoints
// ----------------------------------------------------------------------------

inline std::string serialize_params(const ModelParams& p) {
  std::ostringstream out;
  out << "STPARAMS 1\n";
  for (const auto& [name, t] : p.named_tensors()) {
    out << name << " " << t.ndim();
    for (std::size_t e : t.shape()) out << " " << e;
    for (double v : t.values()) out << " " << format_real(v);
    out << "\n";
  }
  return out.str();
}

inline ModelParams deserialize_params(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "STPARAMS 1") {
    throw DataError("checkpoint: bad header");
  }
  std::map<std::string, Tensor> tensors;
  while (std::getline(in, line)) {
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() < 3) throw DataError("checkpoint: short tensor line for '" + tok[0] + "'");
    const std::string name = tok[0];
    const int nd = static_cast<int>(parse_int(tok[1]));
    if (nd < 1 || static_cast<int>(tok.size()) < 2 + nd) {
      throw DataError("checkpoint: bad shape for tensor " + name);
    }
    std::vector<std::size_t> shape;
    std::size_t n = 1;
    for (int i = 0; i < nd; ++i) {
      shape.push_back(static_cast<std::size_t>(parse_int(tok[2 + i])));
      n *= shape.back();
    }
    if (tok.size() != 2 + static_cast<std::size_t>(nd) + n) {
      throw DataError("checkpoint: value count mismatch for tensor " + name);
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = parse_real(tok[2 + nd + i]);
    tensors.emplace(name, Tensor(std::move(shape), std::move(values), true));
  }

  auto need = [&](const std::string& name) -> const Tensor& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("checkpoint: missing tensor " + name);
    return it->second;
  };

  // Dims are implied by the stored shapes.
  ModelDims dims;
  dims.num_classes = static_cast<int>(need("head_spatial.b").numel());
  dims.num_bins = static_cast<int>(need("head_temporal.b").numel());
  dims.hidden = static_cast<int>(need("time_gate").numel());
  dims.embed = static_cast<int>(need("readout.triple.b").numel());
  dims.attn_hidden = static_cast<int>(need("readout.attention.l1.w").shape().at(1));
  dims.dec_hidden = static_cast<int>(need("decoder.in.b").numel());
  int heads = 0;
  while (tensors.count("gat.head" + std::to_string(heads) + ".w")) ++heads;
  if (heads == 0 || dims.hidden % heads != 0) throw DataError("checkpoint: bad attention heads");
  dims.gat_heads = heads;

  ModelParams p = init_params(0, dims);
  for (auto& [name, t] : p.named_tensors()) {
    const Tensor& stored = need(name);
    if (stored.shape() != t.shape()) {
      throw DataError("checkpoint: tensor " + name + " has mismatched shape");
    }
    t.mutable_values() = stored.values();
  }
  if (tensors.size() != p.named_tensors().size()) {
    throw DataError("checkpoint: unexpected extra tensors");
  }
  return p;
}

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  write_file(path, serialize_params(p));
}

inline ModelParams load_checkpoint(const std::string& path) {
  return deserialize_params(read_file(path));
}

}  // namespace stgraph
