#include "ege/entity_graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ege/error.hpp"

namespace ege {

std::optional<std::size_t> EntityQueue::find(const EntityKey& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

EntityQueue build_entity_queue(std::span<const std::vector<EntityKey>> corpus_entities, std::size_t capacity) {
  if (capacity == 0) raise(ErrorCode::config, "entity queue capacity must be >= 1");
  std::vector<EntityKey> order;
  std::map<EntityKey, std::size_t> first_seen;
  std::vector<std::size_t> counts;
  for (const auto& sample : corpus_entities) {
    for (const auto& e : sample) {
      if (e.empty()) continue;
      auto [it, inserted] = first_seen.emplace(e, order.size());
      if (inserted) {
        order.push_back(e);
        counts.push_back(0);
      }
      ++counts[it->second];
    }
  }
  if (order.empty()) raise(ErrorCode::empty_input, "entity queue: corpus contains no entities");
  std::vector<std::size_t> keep(order.size());
  std::iota(keep.begin(), keep.end(), 0);
  if (keep.size() > capacity) {
    std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
    keep.resize(capacity);
    std::sort(keep.begin(), keep.end());
  }
  EntityQueue q;
  q.capacity = capacity;
  for (std::size_t i : keep) {
    q.index_.emplace(order[i], q.entries.size());
    q.entries.push_back(order[i]);
    q.frequency.push_back(counts[i]);
  }
  return q;
}

Tensor embed_queue(const ModelState& state, const EntityQueue& queue) {
  if (queue.entries.empty()) raise(ErrorCode::empty_input, "embed_queue: queue is empty");
  const auto& c = state.config();
  NoGradGuard no_grad;
  std::vector<Tensor> rows;
  rows.reserve(queue.size());
  for (const auto& key : queue.entries) {
    Sample s;
    s.id = "entity";
    s.proposals = Tensor::zeros({1, c.prop_dim});
    s.positions = Tensor::zeros({1, c.pos_dim});
    s.caption = {kPadToken};
    s.entities = {key};
    rows.push_back(reshape(forward(state, s).f_e, {1, c.hidden}));
  }
  return l2_normalize(concat(rows, 0)).detach();
}

namespace {

std::vector<double> unit_rows(const Tensor& x, const char* op) {
  if (x.rank() != 2) raise(ErrorCode::dimension, std::string(op) + ": expected a matrix");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += out[i * d + j] * out[i * d + j];
    const double norm = std::sqrt(s);
    if (!(norm > 0.0)) raise(ErrorCode::degenerate, std::string(op) + ": zero row " + std::to_string(i));
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= norm;
  }
  return out;
}

}  // namespace

GraphBuild build_graph(const Tensor& node_features, std::size_t k, std::size_t smoothing_steps) {
  const auto unit = unit_rows(node_features, "build_graph");
  const std::size_t n = node_features.dim(0), d = node_features.dim(1);
  if (k < 1 || k >= n) {
    raise(ErrorCode::config, "build_graph: need 1 <= k < n, got k=" + std::to_string(k) + " n=" + std::to_string(n));
  }
  std::vector<double> dist(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) s += unit[i * d + t] * unit[j * d + t];
      dist[i * n + j] = 1.0 - s;
    }

  GraphBuild out;
  EntityGraph& g = out.graph;
  g.k = k;
  g.neighbors.resize(n);
  g.weights.resize(n);
  std::vector<double> directed(n * n, 0.0);
  std::vector<std::size_t> cand(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) cand[c++] = j;
    std::stable_sort(cand.begin(), cand.end(),
                     [&](std::size_t a, std::size_t b) { return dist[i * n + a] < dist[i * n + b]; });
    g.neighbors[i].assign(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k));
    const double sigma = std::max(dist[i * n + g.neighbors[i].back()], 1e-12);
    double mx = -HUGE_VAL;
    for (std::size_t j : g.neighbors[i]) mx = std::max(mx, -dist[i * n + j] / sigma);
    double total = 0.0;
    for (std::size_t j : g.neighbors[i]) {
      const double w = std::exp(-dist[i * n + j] / sigma - mx);
      g.weights[i].push_back(w);
      total += w;
    }
    for (std::size_t t = 0; t < k; ++t) {
      g.weights[i][t] /= total;
      directed[i * n + g.neighbors[i][t]] = g.weights[i][t];
    }
  }

  std::vector<double> sym(n * n), adj(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sym[i * n + j] = 0.5 * (directed[i * n + j] + directed[j * n + i]);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) row += sym[i * n + j];
    for (std::size_t j = 0; j < n; ++j) adj[i * n + j] = sym[i * n + j] / row;
  }
  g.symmetric = Tensor({n, n}, sym);
  g.adjacency = Tensor({n, n}, adj);

  std::vector<double> feats(node_features.data().begin(), node_features.data().end());
  for (std::size_t step = 0; step < smoothing_steps; ++step) {
    std::vector<double> next(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double a = adj[i * n + j];
        if (a == 0.0) continue;
        for (std::size_t t = 0; t < d; ++t) next[i * d + t] += a * feats[j * d + t];
      }
    feats = std::move(next);
  }
  out.graph_features = Tensor({n, d}, unit_rows(Tensor({n, d}, std::move(feats)), "build_graph"));
  return out;
}

Tensor graph_similarity(const Tensor& graph_features) {
  const auto unit = unit_rows(graph_features, "graph_similarity");
  const std::size_t n = graph_features.dim(0), d = graph_features.dim(1);
  std::vector<double> s(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double v = 0.0;
      for (std::size_t t = 0; t < d; ++t) v += unit[i * d + t] * unit[j * d + t];
      s[i * n + j] = s[j * n + i] = v;
    }
  return Tensor({n, n}, std::move(s));
}

std::size_t sample_negative(std::size_t anchor, std::span<const std::size_t> batch, const Tensor& similarity,
                            std::size_t k_tail, std::mt19937_64& rng) {
  if (similarity.rank() != 2 || similarity.dim(0) != similarity.dim(1)) {
    raise(ErrorCode::dimension, "sample_negative: similarity must be square");
  }
  const std::size_t n = similarity.dim(0);
  if (anchor >= n) raise(ErrorCode::contract, "sample_negative: anchor out of range");
  std::vector<std::size_t> cand;
  bool anchor_in_batch = false;
  for (std::size_t b : batch) {
    if (b >= n) raise(ErrorCode::contract, "sample_negative: batch entity out of range");
    if (b == anchor)
      anchor_in_batch = true;
    else if (std::find(cand.begin(), cand.end(), b) == cand.end())
      cand.push_back(b);
  }
  // The batch (anchor included when present) must outnumber k_tail, and the
  // tail must be drawable from the non-anchor candidates.
  const std::size_t batch_size = cand.size() + (anchor_in_batch ? 1 : 0);
  if (k_tail < 1 || batch_size <= k_tail || cand.size() < k_tail) {
    raise(ErrorCode::contract, "sample_negative: batch of " + std::to_string(batch_size) +
                                   " entities is too small for k_tail=" + std::to_string(k_tail));
  }
  const auto s = similarity.data();
  std::sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
    const double sa = s[anchor * n + a], sb = s[anchor * n + b];
    return sa != sb ? sa > sb : a < b;
  });
  return cand[cand.size() - k_tail + static_cast<std::size_t>(rng() % k_tail)];
}

Tensor subgraph_embedding(std::size_t node, const EntityGraph& graph, const Tensor& node_embeddings) {
  if (node_embeddings.rank() != 2) raise(ErrorCode::dimension, "subgraph_embedding: embeddings must be a matrix");
  if (node >= node_embeddings.dim(0)) raise(ErrorCode::contract, "subgraph_embedding: node index out of range");
  std::vector<std::size_t> members{node};
  if (graph.k > 0) {
    if (node >= graph.neighbors.size()) raise(ErrorCode::contract, "subgraph_embedding: graph has no such node");
    members.insert(members.end(), graph.neighbors[node].begin(), graph.neighbors[node].end());
  }
  return sum_axis(select_rows(node_embeddings, members), 0);
}

std::size_t default_k_tail(std::size_t batch_entities) { return std::max<std::size_t>(1, (batch_entities + 3) / 4); }

EntityGraph refresh_queue(EntityQueue& queue, const ModelState& state, std::size_t k, std::size_t smoothing_steps) {
  queue.node_features = embed_queue(state, queue);
  const std::size_t n = queue.size();
  EntityGraph graph;
  if (n >= 2 && k >= 1) {
    GraphBuild built = build_graph(queue.node_features, std::min(k, n - 1), smoothing_steps);
    graph = std::move(built.graph);
    queue.graph_features = built.graph_features;
  } else {
    queue.graph_features = queue.node_features;
  }
  queue.similarity = graph_similarity(queue.graph_features);
  return graph;
}

}  // namespace ege
