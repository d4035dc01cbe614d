#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "timecheat/autodiff.hpp"
#include "timecheat/data.hpp"
#include "timecheat/params.hpp"
#include "timecheat/patcher.hpp"

namespace timecheat {

/// Edge between a channel node and a time node carrying the enhanced edge
/// attribute (value, indicator): (x, 1) when observed, (0, 0) for reference edges.
struct GraphEdge {
  std::size_t channel = 0;
  std::size_t time_node = 0;  // index into BipartiteGraph::times
  double value = 0.0;
  double indicator = 0.0;
};

/// Bipartite graph of one patch.
///
/// Node numbering: channel nodes are 0..C-1, time node j is C + j. Time nodes
/// hold the distinct observed timestamps in increasing order followed by the K
/// reference timestamps. Edges list observed edges ordered by (time, channel)
/// followed by the C*K reference edges ordered by (channel, k).
struct BipartiteGraph {
  std::size_t channels = 0;
  std::size_t ref_points = 0;
  double start = 0.0;
  double end = 1.0;
  std::vector<double> times;
  std::size_t observed_time_nodes = 0;
  std::vector<GraphEdge> edges;

  std::size_t node_count() const noexcept { return channels + times.size(); }
  std::size_t observed_edge_count() const noexcept { return edges.size() - channels * ref_points; }
  std::size_t reference_edge(std::size_t c, std::size_t k) const noexcept {
    return observed_edge_count() + c * ref_points + k;
  }
  std::size_t time_node_id(std::size_t j) const noexcept { return channels + j; }
};

inline BipartiteGraph build_graph(const Patch& patch, const ReferenceGrid& grid, std::size_t channels) {
  BipartiteGraph g;
  g.channels = channels;
  g.ref_points = grid.tau.size();
  g.start = patch.start;
  g.end = patch.end;

  std::vector<double> observed;
  observed.reserve(patch.observations.size());
  for (const auto& o : patch.observations) {
    if (o.channel >= channels) throw RangeError("build_graph: channel " + std::to_string(o.channel) + " >= C");
    observed.push_back(o.time);
  }
  std::sort(observed.begin(), observed.end());
  observed.erase(std::unique(observed.begin(), observed.end()), observed.end());
  g.times = observed;
  g.observed_time_nodes = observed.size();
  g.times.insert(g.times.end(), grid.tau.begin(), grid.tau.end());

  std::vector<Observation> sorted = patch.observations;
  std::sort(sorted.begin(), sorted.end(), [](const Observation& a, const Observation& b) {
    return a.time < b.time || (a.time == b.time && a.channel < b.channel);
  });
  for (const auto& o : sorted) {
    const auto j = static_cast<std::size_t>(std::lower_bound(observed.begin(), observed.end(), o.time) - observed.begin());
    g.edges.push_back({o.channel, j, o.value, 1.0});
  }
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t k = 0; k < g.ref_points; ++k) g.edges.push_back({c, g.observed_time_nodes + k, 0.0, 0.0});
  return g;
}

/// Neighbourhood structure used by the node update. Incidence j pairs a
/// centre node with one neighbour through one edge; incidences are grouped by
/// centre node so the attention pattern keys are simply 0..nnz-1.
struct GraphIncidence {
  std::vector<std::size_t> neighbour;
  std::vector<std::size_t> edge;
  std::shared_ptr<const AttentionPattern> pattern;
  std::vector<bool> has_neighbours;
  bool any_isolated = false;
};

inline GraphIncidence incidence(const BipartiteGraph& g) {
  const std::size_t n = g.node_count();
  std::vector<std::vector<std::size_t>> by_node(n);
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    by_node[g.edges[e].channel].push_back(e);
    by_node[g.time_node_id(g.edges[e].time_node)].push_back(e);
  }
  GraphIncidence inc;
  auto pattern = std::make_shared<AttentionPattern>();
  inc.has_neighbours.resize(n);
  for (std::size_t u = 0; u < n; ++u) {
    for (auto e : by_node[u]) {
      const auto& edge = g.edges[e];
      inc.neighbour.push_back(u < g.channels ? g.time_node_id(edge.time_node) : edge.channel);
      inc.edge.push_back(e);
      pattern->keys.push_back(pattern->keys.size());
    }
    pattern->offsets.push_back(pattern->keys.size());
    inc.has_neighbours[u] = !by_node[u].empty();
    inc.any_isolated = inc.any_isolated || by_node[u].empty();
  }
  pattern->num_keys = pattern->keys.size();
  inc.pattern = std::move(pattern);
  return inc;
}

struct EmbedderConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t hidden = 32;     // d_h
  std::size_t ref_points = 8;  // K
  std::size_t patch_dim = 32;  // T_P
  bool node_residual = true;
  bool patch_relative_time = true;
  bool freeze_channel_matrix = false;
};

struct GnnLayerParams {
  std::size_t query = 0, key = 0, value = 0, output = 0;
  Dense edge_ffn;
};

/// Parameter slots of the bipartite graph embedder.
struct EmbedderParams {
  EmbedderConfig config;
  std::size_t channels = 0;
  std::size_t channel_matrix = 0;  // CM, C x C
  Dense channel_ffn, time_ffn, edge_ffn, readout;
  std::vector<GnnLayerParams> layers;

  static EmbedderParams create(ParamStore& store, std::size_t channels, const EmbedderConfig& cfg,
                               std::mt19937_64& rng) {
    if (channels == 0) throw ConfigError("embedder: channel count must be positive");
    if (cfg.hidden == 0 || cfg.heads == 0 || cfg.hidden % cfg.heads != 0) {
      throw ConfigError("embedder: heads must divide the hidden width");
    }
    if (cfg.ref_points == 0 || cfg.patch_dim == 0) throw ConfigError("embedder: K and T_P must be positive");
    EmbedderParams p;
    p.config = cfg;
    p.channels = channels;
    const std::size_t d = cfg.hidden;
    const bool frozen = cfg.freeze_channel_matrix;
    p.channel_matrix = store.add("embedder.channel_matrix", Tensor::identity(channels), frozen);
    p.channel_ffn.weight = store.add("embedder.channel_ffn.weight", init::glorot(channels, d, rng), frozen);
    p.channel_ffn.bias = store.add("embedder.channel_ffn.bias", init::zeros(d), frozen);
    // Spread initial frequencies of the learned sinusoid over a few cycles per patch.
    p.time_ffn.weight = store.add("embedder.time_ffn.weight", init::uniform(Shape{1, d}, -6.0, 6.0, rng));
    p.time_ffn.bias = store.add("embedder.time_ffn.bias", init::uniform(Shape{1, d}, -std::numbers::pi, std::numbers::pi, rng));
    p.edge_ffn = Dense::create(store, "embedder.edge_ffn", 2, d, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string pre = "embedder.layer" + std::to_string(l) + ".";
      GnnLayerParams lp;
      lp.query = store.add(pre + "attn.query", init::glorot(d, d, rng));
      lp.key = store.add(pre + "attn.key", init::glorot(2 * d, d, rng));
      lp.value = store.add(pre + "attn.value", init::glorot(2 * d, d, rng));
      lp.output = store.add(pre + "attn.output", init::glorot(d, d, rng));
      lp.edge_ffn = Dense::create(store, pre + "edge_ffn", 3 * d, d, rng);
      p.layers.push_back(lp);
    }
    p.readout = Dense::create(store, "embedder.readout", cfg.ref_points * d, cfg.patch_dim, rng);
    return p;
  }
};

/// Node and edge features at one GNN depth.
struct GraphFeatures {
  Var nodes;  // node_count x d_h
  Var edges;  // edge_count x d_h
  std::size_t layer = 0;
};

/// Initial features: channel nodes FFN(CM(c)), time nodes sin(FFN(t)), edges FFN(e, i).
inline GraphFeatures encode_initial(Tape& tape, const ParamStore& store, const EmbedderParams& p,
                                    const BipartiteGraph& g) {
  if (g.channels != p.channels) throw ShapeError("encode_initial: graph has a different channel count");
  Var cm = store.bind(tape, p.channel_matrix);
  Var channel_feats = p.channel_ffn(tape, store, cm);

  Tensor t(Shape{g.times.size(), 1});
  const double width = g.end - g.start;
  for (std::size_t j = 0; j < g.times.size(); ++j) {
    t[j] = p.config.patch_relative_time ? (g.times[j] - g.start) / width : g.times[j];
  }
  Var time_feats = ops::sin(p.time_ffn(tape, store, tape.constant(std::move(t))));
  Var nodes = ops::concat_rows(std::vector<Var>{channel_feats, time_feats});

  Tensor ei(Shape{g.edges.size(), 2});
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    ei(e, 0) = g.edges[e].value;
    ei(e, 1) = g.edges[e].indicator;
  }
  Var edges = p.edge_ffn(tape, store, tape.constant(std::move(ei)));
  return {nodes, edges, 0};
}

/// One message-passing step: attention-based node update over [node || edge]
/// neighbour rows, and residual edge update from the edge's own endpoints,
/// both reading layer-l features.
inline GraphFeatures gnn_layer(Tape& tape, const ParamStore& store, const EmbedderParams& p, const BipartiteGraph& g,
                               const GraphIncidence& inc, const GraphFeatures& in, AttentionTrace* trace = nullptr) {
  if (in.layer >= p.layers.size()) throw UsageError("gnn_layer: features are already at the final layer");
  const GnnLayerParams& lp = p.layers[in.layer];

  Var q = ops::matmul(in.nodes, store.bind(tape, lp.query));
  Var rows = ops::concat_cols({ops::gather_rows(in.nodes, inc.neighbour), ops::gather_rows(in.edges, inc.edge)});
  Var k = ops::matmul(rows, store.bind(tape, lp.key));
  Var v = ops::matmul(rows, store.bind(tape, lp.value));
  Var att = ops::sparse_attention(q, k, v, inc.pattern, p.config.heads, trace);
  Var update = ops::matmul(att, store.bind(tape, lp.output));
  Var nodes = p.config.node_residual ? ops::add(in.nodes, update) : update;
  if (inc.any_isolated) nodes = ops::select_rows(inc.has_neighbours, nodes, in.nodes);

  std::vector<std::size_t> ends_c, ends_t;
  ends_c.reserve(g.edges.size());
  ends_t.reserve(g.edges.size());
  for (const auto& e : g.edges) {
    ends_c.push_back(e.channel);
    ends_t.push_back(g.time_node_id(e.time_node));
  }
  Var edge_in = ops::concat_cols(
      {ops::gather_rows(in.nodes, std::move(ends_c)), ops::gather_rows(in.nodes, std::move(ends_t)), in.edges});
  Var edges = ops::relu(ops::add(in.edges, lp.edge_ffn(tape, store, edge_in)));
  return {nodes, edges, in.layer + 1};
}

/// Gathers each channel's K reference-edge features in grid order and
/// projects the concatenation to T_P: output is C x T_P.
inline Var readout(Tape& tape, const ParamStore& store, const EmbedderParams& p, const BipartiteGraph& g,
                   const GraphFeatures& feats) {
  std::vector<std::size_t> ref;
  ref.reserve(g.channels * g.ref_points);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t k = 0; k < g.ref_points; ++k) ref.push_back(g.reference_edge(c, k));
  Var gathered = ops::gather_rows(feats.edges, std::move(ref));
  Var flat = ops::reshape(gathered, Shape{g.channels, g.ref_points * p.config.hidden});
  return p.readout(tape, store, flat);
}

/// Embedding of one patch, C x T_P.
inline Var embed_patch(Tape& tape, const ParamStore& store, const EmbedderParams& p, const Patch& patch) {
  const ReferenceGrid grid = reference_grid(patch, p.config.ref_points);
  const BipartiteGraph g = build_graph(patch, grid, p.channels);
  const GraphIncidence inc = incidence(g);
  GraphFeatures f = encode_initial(tape, store, p, g);
  for (std::size_t l = 0; l < p.layers.size(); ++l) f = gnn_layer(tape, store, p, g, inc, f);
  return readout(tape, store, p, g, f);
}

/// Embeds every patch and returns the tokens in channel-major order: row
/// c * P + p holds H[p, c, :].
inline Var embed_series_tokens(Tape& tape, const ParamStore& store, const EmbedderParams& p, const Instance& inst,
                               std::size_t patches) {
  if (inst.channels() != p.channels) {
    throw ShapeError("embed_series: instance has " + std::to_string(inst.channels()) + " channels, model expects " +
                     std::to_string(p.channels));
  }
  std::vector<Var> per_patch;
  for (const Patch& patch : segment(inst, patches)) per_patch.push_back(embed_patch(tape, store, p, patch));
  Var stacked = ops::concat_rows(per_patch);  // row p * C + c
  std::vector<std::size_t> order;
  order.reserve(patches * p.channels);
  for (std::size_t c = 0; c < p.channels; ++c)
    for (std::size_t q = 0; q < patches; ++q) order.push_back(q * p.channels + c);
  return ops::gather_rows(stacked, std::move(order));
}

}  // namespace timecheat
