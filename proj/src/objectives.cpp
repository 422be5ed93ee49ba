#include "ege/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>

#include "ege/error.hpp"

namespace ege {

const std::array<const char*, kLossCount> kLossNames = {"mlm", "mrp", "mem", "vt", "et", "node", "subgraph"};

namespace {

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t below(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

// First `k` entries of a seeded Fisher-Yates shuffle of [0, n), sorted.
std::vector<std::size_t> choose(std::mt19937_64& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + below(rng, n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void check_rate(double r, const char* what) {
  if (!(r >= 0.0 && r <= 1.0)) raise(ErrorCode::config, std::string("mask rate for ") + what + " must lie in [0, 1]");
}

}  // namespace

std::size_t mask_count(std::size_t n, double rate) {
  if (n == 0) return 0;
  auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

MaskPlan make_mask_plan(const Sample& sample, std::mt19937_64& rng, const MaskRates& rates, std::size_t vocab_size,
                        std::size_t max_seq, MaskStreams streams) {
  check_rate(rates.text, "text");
  check_rate(rates.region, "regions");
  check_rate(rates.entity, "entities");
  if (vocab_size <= static_cast<std::size_t>(kFirstRegularToken)) {
    raise(ErrorCode::config, "mask plan: vocabulary has no regular tokens");
  }
  MaskPlan plan;
  if (streams.text) {
    const std::size_t n = sample.caption.size();
    plan.text_idx = choose(rng, n, mask_count(n, rates.text));
    for (std::size_t i : plan.text_idx) {
      const TokenId original = sample.caption[i];
      const double u = unit_uniform(rng);
      TokenId replacement = original;
      if (u < 0.8) {
        replacement = kMaskToken;
      } else if (u < 0.9) {
        replacement = kFirstRegularToken +
                      static_cast<TokenId>(below(rng, vocab_size - static_cast<std::size_t>(kFirstRegularToken)));
      }
      plan.text_original.push_back(original);
      plan.text_replacement.push_back(replacement);
    }
  }
  if (streams.region && sample.proposals.defined()) {
    const std::size_t m = sample.proposals.dim(0);
    const std::size_t width = sample.proposals.dim(1);
    plan.region_idx = choose(rng, m, mask_count(m, rates.region));
    const auto data = sample.proposals.data();
    for (std::size_t i : plan.region_idx) {
      plan.region_original.emplace_back(data.begin() + static_cast<std::ptrdiff_t>(i * width),
                                        data.begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
    }
  }
  if (streams.entity) {
    const EntitySequence seq = entity_sequence(sample.entities, max_seq);
    std::vector<std::size_t> candidates;
    for (const auto& [b, e] : seq.spans)
      for (std::size_t i = b; i < e; ++i) candidates.push_back(i);
    for (std::size_t c : choose(rng, candidates.size(), mask_count(candidates.size(), rates.entity))) {
      plan.entity_idx.push_back(candidates[c]);
      plan.entity_original.push_back(seq.tokens[candidates[c]]);
    }
  }
  return plan;
}

Sample apply_mask(const Sample& sample, const MaskPlan& plan, std::size_t max_seq) {
  Sample out = sample;
  for (std::size_t k = 0; k < plan.text_idx.size(); ++k) {
    if (plan.text_idx[k] >= out.caption.size()) raise(ErrorCode::contract, "mask plan does not fit the caption");
    out.caption[plan.text_idx[k]] = plan.text_replacement[k];
  }
  if (!plan.region_idx.empty()) {
    const std::size_t width = sample.proposals.dim(1);
    auto data = sample.proposals.to_vector();
    for (std::size_t i : plan.region_idx) {
      if (i >= sample.proposals.dim(0)) raise(ErrorCode::contract, "mask plan does not fit the proposals");
      std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(i * width), width, 0.0);
    }
    out.proposals = Tensor(sample.proposals.shape(), std::move(data));
  }
  if (!plan.entity_idx.empty()) {
    EntitySequence seq = entity_sequence(sample.entities, max_seq);
    for (std::size_t i : plan.entity_idx) {
      if (i >= seq.tokens.size()) raise(ErrorCode::contract, "mask plan does not fit the entities");
      seq.tokens[i] = kMaskToken;
    }
    out.entities.clear();
    for (const auto& [b, e] : seq.spans) out.entities.emplace_back(seq.tokens.begin() + static_cast<std::ptrdiff_t>(b),
                                                                   seq.tokens.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

namespace {

Tensor masked_token_loss(const char* name, const Tensor& states, const std::vector<std::size_t>& idx,
                         const std::vector<TokenId>& original, const Projection& head) {
  if (idx.empty()) raise(ErrorCode::contract, std::string(name) + ": empty mask set");
  Tensor logits = linear(select_rows(states, idx), head.w, head.b);
  std::vector<std::size_t> targets(original.begin(), original.end());
  return cross_entropy(logits, targets);
}

}  // namespace

Tensor mlm_loss(const Tensor& text_states, const MaskPlan& plan, const Projection& head) {
  return masked_token_loss("mlm_loss", text_states, plan.text_idx, plan.text_original, head);
}

Tensor mem_loss(const Tensor& entity_states, const MaskPlan& plan, const Projection& head) {
  return masked_token_loss("mem_loss", entity_states, plan.entity_idx, plan.entity_original, head);
}

Tensor mrp_loss(const Tensor& visual_states, const MaskPlan& plan, const Projection& head) {
  if (plan.region_idx.empty()) raise(ErrorCode::contract, "mrp_loss: empty mask set");
  Tensor predicted = linear(select_rows(visual_states, plan.region_idx), head.w, head.b);
  const std::size_t width = predicted.dim(1);
  std::vector<double> target;
  for (const auto& row : plan.region_original) {
    if (row.size() != width) raise(ErrorCode::dimension, "mrp_loss: regression head width differs from features");
    target.insert(target.end(), row.begin(), row.end());
  }
  Tensor diff = sub(predicted, Tensor(predicted.shape(), std::move(target)));
  return scale(sum_squares(diff), 1.0 / (2.0 * static_cast<double>(plan.region_idx.size())));
}

namespace {

struct ContrastiveSetup {
  Tensor sim;  // [2N x 2N] cosine / tau
  std::vector<std::size_t> targets;
  std::vector<std::uint8_t> keep;  // self-similarity excluded
};

ContrastiveSetup contrastive_setup(const Tensor& first, const Tensor& second, double tau) {
  if (!(tau > 0.0)) raise(ErrorCode::contract, "contrastive loss: temperature must be positive");
  if (first.rank() != 2 || first.shape() != second.shape()) {
    raise(ErrorCode::dimension, "contrastive loss: paired batches must share a [N x D] shape");
  }
  const std::size_t n = first.dim(0);
  Tensor z = l2_normalize(concat({first, second}, 0));
  const std::size_t points = 2 * n;
  ContrastiveSetup s{scale(matmul(z, transpose(z)), 1.0 / tau), std::vector<std::size_t>(points),
                     std::vector<std::uint8_t>(points * points, 1)};
  for (std::size_t i = 0; i < points; ++i) {
    s.keep[i * points + i] = 0;
    s.targets[i] = i < n ? i + n : i - n;
  }
  return s;
}

}  // namespace

Tensor contrastive_loss(const Tensor& first, const Tensor& second, double tau) {
  auto s = contrastive_setup(first, second, tau);
  return cross_entropy(s.sim, s.targets, s.keep);
}

std::vector<double> contrastive_anchor_terms(const Tensor& first, const Tensor& second, double tau) {
  NoGradGuard off;
  auto s = contrastive_setup(first, second, tau);
  const std::size_t points = s.targets.size();
  std::vector<double> terms(points);
  for (std::size_t i = 0; i < points; ++i) {
    const std::size_t row[] = {i};
    const std::size_t target[] = {s.targets[i]};
    std::span<const std::uint8_t> keep(s.keep.data() + i * points, points);
    terms[i] = cross_entropy(select_rows(s.sim, row), target, keep).item();
  }
  return terms;
}

Tensor ranking_hinge(const Tensor& pos_score, const Tensor& neg_score, double y, double margin) {
  if (pos_score.rank() != 0 || neg_score.rank() != 0) raise(ErrorCode::dimension, "ranking loss expects scalar scores");
  return relu(add(scale(sub(pos_score, neg_score), -y), Tensor::scalar(margin)));
}

double ranking_hinge(double pos_score, double neg_score, double y, double margin) {
  return std::max(0.0, -y * (pos_score - neg_score) + margin);
}

Tensor total_loss(const std::array<Tensor, kLossCount>& components, const LossWeights& weights, LossReport* report) {
  Tensor total;
  LossReport r;
  r.weights = weights;
  for (std::size_t i = 0; i < kLossCount; ++i) {
    if (!std::isfinite(weights[i]) || weights[i] < 0.0) {
      raise(ErrorCode::config, std::string("loss weight for ") + kLossNames[i] + " must be finite and >= 0");
    }
    if (!components[i].defined()) continue;
    const double v = components[i].item();
    if (!std::isfinite(v)) raise(ErrorCode::numeric, std::string("loss '") + kLossNames[i] + "' is not finite");
    r.values[i] = v;
    if (weights[i] == 0.0) continue;
    Tensor term = weights[i] == 1.0 ? components[i] : scale(components[i], weights[i]);
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) total = Tensor::scalar(0.0);
  r.total = total.item();
  if (report) *report = r;
  return total;
}

}  // namespace ege
