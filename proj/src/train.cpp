#include "ege/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <thread>

#include "ege/error.hpp"

namespace ege {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Tensor batch_mean(const std::vector<Tensor>& terms) {
  if (terms.empty()) return {};
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return terms.size() == 1 ? total : scale(total, 1.0 / static_cast<double>(terms.size()));
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  std::vector<Tensor> parts;
  parts.reserve(rows.size());
  for (const auto& r : rows) parts.push_back(reshape(r, {1, r.numel()}));
  return concat(parts, 0);
}

Tensor row_of(const Tensor& m, std::size_t i) { return reshape(slice(m, 0, i, 1), {m.dim(1)}); }

// Runs `build`, renaming a numeric failure after the loss being built.
template <typename F>
Tensor guarded(std::size_t loss, F&& build) {
  try {
    return build();
  } catch (const Error& e) {
    if (e.code() != ErrorCode::numeric) throw;
    raise(ErrorCode::numeric, std::string("loss '") + kLossNames[loss] + "' diverged: " + e.what());
  }
}

}  // namespace

std::vector<std::vector<EntityKey>> corpus_entities(std::span<const Sample> samples) {
  std::vector<std::vector<EntityKey>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.entities);
  return out;
}

LossTerms compute_losses(const ModelState& state, std::span<const Sample> batch, const RunConfig& cfg,
                         const EntityQueue& queue, const EntityGraph& graph, std::uint64_t seed) {
  if (batch.empty()) raise(ErrorCode::empty_input, "compute_losses: empty batch");
  const auto& mc = state.config();
  const auto& w = cfg.weights;
  std::mt19937_64 rng(seed);
  const MaskStreams streams{w[kMlm] > 0.0, w[kMrp] > 0.0, w[kMem] > 0.0};
  const bool contrastive = w[kVt] > 0.0 || w[kEt] > 0.0;
  const bool ranking = (w[kNode] > 0.0 || w[kSubgraph] > 0.0) && queue.size() >= 2 && queue.similarity.defined() &&
                       queue.graph_features.defined();

  // Queue index of every entity in the batch; the candidate pool for negatives.
  std::vector<std::size_t> pool;
  if (ranking) {
    for (const auto& s : batch)
      for (const auto& e : s.entities)
        if (auto idx = queue.find(e); idx && std::find(pool.begin(), pool.end(), *idx) == pool.end()) {
          pool.push_back(*idx);
        }
  }

  std::vector<Tensor> mlm, mrp, mem, node, subgraph, vis, cap, ent;
  for (const auto& sample : batch) {
    MaskPlan plan = make_mask_plan(sample, rng, cfg.mask, mc.vocab_size, mc.max_seq, streams);
    const Sample masked = apply_mask(sample, plan, mc.max_seq);
    const ModelOutputs out = forward(state, masked);
    if (streams.text) mlm.push_back(guarded(kMlm, [&] { return mlm_loss(out.text_states, plan, state.mlm_head); }));
    if (streams.region) mrp.push_back(guarded(kMrp, [&] { return mrp_loss(out.visual_states, plan, state.mrp_head); }));
    if (streams.entity) mem.push_back(guarded(kMem, [&] { return mem_loss(out.entity_states, plan, state.mem_head); }));
    if (contrastive) {
      ContrastiveViews views = contrastive_views(out, state);
      vis.push_back(views.visual);
      cap.push_back(views.caption);
      ent.push_back(views.entity);
    }
    if (!ranking) continue;
    // Spans line up with the non-empty entities that survived truncation.
    std::vector<const EntityKey*> keys;
    for (const auto& e : sample.entities)
      if (!e.empty()) keys.push_back(&e);
    for (std::size_t j = 0; j < out.entity_spans.size() && j < keys.size(); ++j) {
      const auto idx = queue.find(*keys[j]);
      if (!idx) continue;
      const std::size_t candidates = pool.size() - 1;
      if (candidates < 1) continue;
      std::size_t k_tail = cfg.graph.k_tail ? cfg.graph.k_tail : default_k_tail(pool.size());
      k_tail = std::min(k_tail, candidates);
      const std::size_t neg = sample_negative(*idx, pool, queue.similarity, k_tail, rng);
      const auto [b, e] = out.entity_spans[j];
      const Tensor anchor = mean(slice(out.entity_states, 0, b, e - b), 0);
      if (w[kNode] > 0.0) {
        node.push_back(guarded(kNode, [&] {
          return node_ranking_loss(cosine_similarity(anchor, row_of(queue.graph_features, *idx)),
                                   cosine_similarity(anchor, row_of(queue.graph_features, neg)), cfg.ranking.y,
                                   cfg.ranking.margin);
        }));
      }
      if (w[kSubgraph] > 0.0) {
        subgraph.push_back(guarded(kSubgraph, [&] {
          return subgraph_ranking_loss(
              cosine_similarity(anchor, subgraph_embedding(*idx, graph, queue.graph_features)),
              cosine_similarity(anchor, subgraph_embedding(neg, graph, queue.graph_features)), cfg.ranking.y,
              cfg.ranking.margin);
        }));
      }
    }
  }

  LossTerms terms;
  terms[kMlm] = batch_mean(mlm);
  terms[kMrp] = batch_mean(mrp);
  terms[kMem] = batch_mean(mem);
  if (w[kVt] > 0.0) terms[kVt] = guarded(kVt, [&] { return contrastive_vt(stack_rows(vis), stack_rows(cap), cfg.train.tau); });
  if (w[kEt] > 0.0) terms[kEt] = guarded(kEt, [&] { return contrastive_et(stack_rows(ent), stack_rows(cap), cfg.train.tau); });
  terms[kNode] = batch_mean(node);
  terms[kSubgraph] = batch_mean(subgraph);
  return terms;
}

void write_loss_header(std::ostream& out) {
  out << "step";
  for (const char* name : kLossNames) out << ',' << name;
  out << ",total,lr\n";
}

void write_loss_row(std::ostream& out, const StepLog& row) {
  char buf[64];
  out << row.step;
  for (double v : row.report.values) {
    std::snprintf(buf, sizeof buf, ",%.9g", v);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, ",%.9g,%.9g\n", row.report.total, row.lr);
  out << buf;
}

Trainer::Trainer(const RunConfig& cfg, std::vector<Sample> samples)
    : Trainer(cfg, std::move(samples), ModelState::initialize(cfg.model, cfg.seed)) {}

Trainer::Trainer(const RunConfig& cfg, std::vector<Sample> samples, ModelState initial)
    : cfg_(cfg), samples_(std::move(samples)), state_(std::move(initial)), order_rng_(splitmix(cfg.seed ^ 0x6f72646572ULL)) {
  cfg_.validate();
  if (!(state_.config() == cfg_.model)) raise(ErrorCode::consistency, "trainer: initial model does not match the config");
  if (samples_.empty()) raise(ErrorCode::empty_input, "trainer: no training samples");
  for (const auto& s : samples_) validate_sample(s, cfg_.model);
  state_.set_requires_grad(true);
  params_ = state_.parameters();
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
  const std::size_t b = cfg_.train.batch_size;
  batches_per_epoch_ = (samples_.size() + b - 1) / b;
  if (graph_losses_enabled()) {
    queue_ = build_entity_queue(corpus_entities(samples_), cfg_.graph.queue_capacity);
  }
}

bool Trainer::graph_losses_enabled() const { return cfg_.weights[kNode] > 0.0 || cfg_.weights[kSubgraph] > 0.0; }

void Trainer::refresh_graph() {
  if (!graph_losses_enabled()) return;
  graph_ = refresh_queue(queue_, state_, cfg_.graph.k, cfg_.graph.smoothing_steps);
}

std::vector<std::size_t> Trainer::next_batch() {
  if (cursor_ >= order_.size()) {
    order_.resize(samples_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::swap(order_[i - 1], order_[static_cast<std::size_t>(order_rng_() % i)]);
    }
    cursor_ = 0;
  }
  const std::size_t end = std::min(order_.size(), cursor_ + cfg_.train.batch_size);
  std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  return batch;
}

StepLog Trainer::step() {
  const std::size_t t = step_;
  const std::size_t cadence = cfg_.graph.refresh_steps ? cfg_.graph.refresh_steps : batches_per_epoch_;
  if (t % cadence == 0) refresh_graph();

  std::vector<Sample> batch;
  for (std::size_t i : next_batch()) batch.push_back(samples_[i]);
  const LossTerms terms = compute_losses(state_, batch, cfg_, queue_, graph_, splitmix(cfg_.seed + 0x9e37 * (t + 1)));
  StepLog row;
  row.step = t;
  const Tensor total = total_loss(terms, cfg_.weights, &row.report);

  const auto& tc = cfg_.train;
  double lr = tc.lr;
  if (tc.linear_decay && tc.steps > 0) lr *= std::max(0.0, 1.0 - static_cast<double>(t) / static_cast<double>(tc.steps));
  row.lr = lr;

  if (total.requires_grad()) {
    backward(total);
    const double c1 = 1.0 - std::pow(tc.beta1, static_cast<double>(t + 1));
    const double c2 = 1.0 - std::pow(tc.beta2, static_cast<double>(t + 1));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      Tensor& param = params_[p].second;
      if (!param.has_grad()) continue;
      const auto g = param.grad();
      for (double x : g) {
        if (!std::isfinite(x)) {
          std::string values;
          for (std::size_t i = 0; i < kLossCount; ++i) {
            values += std::string(i ? ", " : "") + kLossNames[i] + "=" + std::to_string(row.report.values[i]);
          }
          raise(ErrorCode::numeric, "step " + std::to_string(t) + ": gradient of '" + params_[p].first +
                                        "' is not finite (" + values + ")");
        }
      }
      auto data = param.mutable_data();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < data.size(); ++i) {
        m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g[i];
        v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g[i] * g[i];
        data[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + tc.adam_eps);
      }
    }
    if (tc.precision == Precision::f32) state_.round_to_float();
  }
  ++step_;
  return row;
}

TrainResult train_model(const RunConfig& cfg, std::vector<Sample> samples,
                        const std::function<void(const StepLog&)>& on_step) {
  Trainer trainer(cfg, std::move(samples));
  TrainResult result{trainer.state(), {}};
  for (std::size_t s = 0; s < cfg.train.steps; ++s) {
    result.log.push_back(trainer.step());
    if (on_step) on_step(result.log.back());
  }
  result.state = trainer.state();
  result.state.set_requires_grad(false);
  return result;
}

std::vector<double> embed_sample(const ModelState& state, const Sample& sample) {
  NoGradGuard no_grad;
  const ModelOutputs out = forward(state, sample);
  return retrieval_embedding(out, state).to_vector();
}

EmbeddingMatrix embed_samples(const ModelState& state, std::span<const Sample> samples, std::size_t workers) {
  if (samples.empty()) raise(ErrorCode::empty_input, "embed: no samples");
  const std::size_t dim = state.config().embedding_dim();
  std::vector<double> rows(samples.size() * dim);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto e = embed_sample(state, samples[i]);
      std::copy(e.begin(), e.end(), rows.begin() + static_cast<std::ptrdiff_t>(i * dim));
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, samples.size()));
  if (workers == 1) {
    work(0, samples.size());
  } else {
    // Exceptions are carried back to the caller in input order.
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> threads;
    const std::size_t chunk = (samples.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk, end = std::min(samples.size(), begin + chunk);
      if (begin >= end) break;
      threads.emplace_back([&, w, begin, end] {
        try {
          work(begin, end);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return make_embeddings(samples.size(), dim, rows);
}

}  // namespace ege
