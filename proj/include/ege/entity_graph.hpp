#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ege/model.hpp"
#include "ege/tensor.hpp"

namespace ege {

using EntityKey = std::vector<TokenId>;

inline constexpr std::size_t kDefaultQueueCapacity = 12000;

/// Deduplicated dictionary of corpus entities with their embeddings.
struct EntityQueue {
  std::vector<EntityKey> entries;
  std::vector<std::size_t> frequency;
  std::size_t capacity = kDefaultQueueCapacity;
  Tensor node_features;   // l_f [n x d], unit rows
  Tensor graph_features;  // l_g [n x d], unit rows
  Tensor similarity;      // S_g [n x n]

  std::size_t size() const noexcept { return entries.size(); }
  std::optional<std::size_t> find(const EntityKey& key) const;

 private:
  friend EntityQueue build_entity_queue(std::span<const std::vector<EntityKey>>, std::size_t);
  std::map<EntityKey, std::size_t> index_;
};

/// Adaptive-bandwidth k-NN graph over the queue. `neighbors`/`weights` are the
/// directed k-NN lists (weights softmax(-dist/sigma_i), sum to one); `adjacency`
/// is the symmetrised (mean of both directions) then row-normalised matrix used
/// for smoothing. `symmetric` keeps the pre-normalisation matrix.
struct EntityGraph {
  std::size_t k = 0;
  std::vector<std::vector<std::size_t>> neighbors;
  std::vector<std::vector<double>> weights;
  Tensor symmetric;
  Tensor adjacency;
};

struct GraphBuild {
  EntityGraph graph;
  Tensor graph_features;
};

// Entities in first-seen order; beyond `capacity` the most frequent survive
// (ties: first seen), still listed in first-seen order.
EntityQueue build_entity_queue(std::span<const std::vector<EntityKey>> corpus_entities, std::size_t capacity);

// Each entity encoded standalone (PAD caption, one zero visual region); rows are
// the pooled co-modal entity features, L2-normalised.
Tensor embed_queue(const ModelState& state, const EntityQueue& queue);

// Stand-in for a learned graph autoencoder: k-NN by cosine distance with
// self-tuning bandwidth, followed by `smoothing_steps` propagation rounds.
GraphBuild build_graph(const Tensor& node_features, std::size_t k, std::size_t smoothing_steps);

Tensor graph_similarity(const Tensor& graph_features);

// Ranks the candidates (anchor removed) by descending similarity to the anchor,
// then draws uniformly among the last `k_tail`.
std::size_t sample_negative(std::size_t anchor, std::span<const std::size_t> batch, const Tensor& similarity,
                            std::size_t k_tail, std::mt19937_64& rng);

// Global-add pooling of a node with its k nearest neighbours.
Tensor subgraph_embedding(std::size_t node, const EntityGraph& graph, const Tensor& node_embeddings);

// ceil(n / 4), at least one.
std::size_t default_k_tail(std::size_t batch_entities);

// embed_queue + build_graph + graph_similarity, storing results on the queue.
EntityGraph refresh_queue(EntityQueue& queue, const ModelState& state, std::size_t k, std::size_t smoothing_steps);

}  // namespace ege
