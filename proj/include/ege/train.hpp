#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "ege/config.hpp"
#include "ege/corpus.hpp"
#include "ege/entity_graph.hpp"
#include "ege/model.hpp"
#include "ege/objectives.hpp"

namespace ege {

using LossTerms = std::array<Tensor, kLossCount>;

/// Every enabled loss for one batch. Masking and negative sampling draw from a
/// generator seeded with `seed`, so repeated calls with the same inputs build the
/// same graph. Graph losses are left undefined when the batch holds no entity
/// besides the anchor.
LossTerms compute_losses(const ModelState& state, std::span<const Sample> batch, const RunConfig& cfg,
                         const EntityQueue& queue, const EntityGraph& graph, std::uint64_t seed);

struct StepLog {
  std::size_t step = 0;
  LossReport report;
  double lr = 0.0;
};

void write_loss_header(std::ostream& out);
void write_loss_row(std::ostream& out, const StepLog& row);

/// Adam with optional linear decay to zero over the configured step count.
class Trainer {
 public:
  Trainer(const RunConfig& cfg, std::vector<Sample> samples);
  Trainer(const RunConfig& cfg, std::vector<Sample> samples, ModelState initial);

  StepLog step();
  std::size_t steps_done() const noexcept { return step_; }
  const ModelState& state() const noexcept { return state_; }
  const EntityQueue& queue() const noexcept { return queue_; }
  const EntityGraph& graph() const noexcept { return graph_; }
  void refresh_graph();

 private:
  std::vector<std::size_t> next_batch();
  bool graph_losses_enabled() const;

  RunConfig cfg_;
  std::vector<Sample> samples_;
  ModelState state_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> m_, v_;
  EntityQueue queue_;
  EntityGraph graph_;
  std::mt19937_64 order_rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t step_ = 0;
  std::size_t batches_per_epoch_ = 1;
};

struct TrainResult {
  ModelState state;
  std::vector<StepLog> log;
};

TrainResult train_model(const RunConfig& cfg, std::vector<Sample> samples,
                        const std::function<void(const StepLog&)>& on_step = {});

// L2-normalised retrieval embedding of one sample (no gradient tape).
std::vector<double> embed_sample(const ModelState& state, const Sample& sample);
// Row per sample in input order; `workers` threads, output independent of the count.
EmbeddingMatrix embed_samples(const ModelState& state, std::span<const Sample> samples, std::size_t workers = 1);

// Per-entity key list of every sample, for building the entity queue.
std::vector<std::vector<EntityKey>> corpus_entities(std::span<const Sample> samples);

}  // namespace ege
