#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "ege/model.hpp"
#include "ege/tensor.hpp"

namespace ege {

struct MaskRates {
  double text = 0.15;
  double region = 0.15;
  double entity = 0.15;
};

struct MaskStreams {
  bool text = true;
  bool region = true;
  bool entity = true;
};

/// Which positions of a sample are hidden from the encoder, and what they were.
/// Entity indices address the separator-joined entity sequence.
struct MaskPlan {
  std::vector<std::size_t> text_idx;
  std::vector<TokenId> text_original;
  std::vector<TokenId> text_replacement;  // [MASK], a random token, or the original (80/10/10)
  std::vector<std::size_t> region_idx;
  std::vector<std::vector<double>> region_original;
  std::vector<std::size_t> entity_idx;
  std::vector<TokenId> entity_original;
};

// Number of positions selected from `n` at `rate`: round(rate*n), at least one.
std::size_t mask_count(std::size_t n, double rate);

MaskPlan make_mask_plan(const Sample& sample, std::mt19937_64& rng, const MaskRates& rates, std::size_t vocab_size,
                        std::size_t max_seq, MaskStreams streams = {});

// Copy of `sample` with the plan applied: caption tokens replaced, masked region
// features zeroed, masked entity tokens set to [MASK].
Sample apply_mask(const Sample& sample, const MaskPlan& plan, std::size_t max_seq);

Tensor mlm_loss(const Tensor& text_states, const MaskPlan& plan, const Projection& head);
Tensor mrp_loss(const Tensor& visual_states, const MaskPlan& plan, const Projection& head);
Tensor mem_loss(const Tensor& entity_states, const MaskPlan& plan, const Projection& head);

/// Symmetric InfoNCE over 2N points: rows of `first` pair with the same rows of
/// `second`; every other point in the batch is a negative. Cosine similarity.
Tensor contrastive_loss(const Tensor& first, const Tensor& second, double tau);
// The 2N per-anchor terms whose mean is contrastive_loss; anchors are ordered
// rows of `first`, then rows of `second`.
std::vector<double> contrastive_anchor_terms(const Tensor& first, const Tensor& second, double tau);
inline Tensor contrastive_vt(const Tensor& image, const Tensor& text, double tau) {
  return contrastive_loss(image, text, tau);
}
inline Tensor contrastive_et(const Tensor& entity, const Tensor& text, double tau) {
  return contrastive_loss(entity, text, tau);
}

// max(0, -y * (pos - neg) + margin)
Tensor ranking_hinge(const Tensor& pos_score, const Tensor& neg_score, double y = 1.0, double margin = 0.0);
inline Tensor node_ranking_loss(const Tensor& s_pos, const Tensor& s_neg, double y = 1.0, double margin = 0.0) {
  return ranking_hinge(s_pos, s_neg, y, margin);
}
inline Tensor subgraph_ranking_loss(const Tensor& g_pos, const Tensor& g_neg, double y = 1.0, double margin = 0.0) {
  return ranking_hinge(g_pos, g_neg, y, margin);
}
double ranking_hinge(double pos_score, double neg_score, double y = 1.0, double margin = 0.0);

enum LossIndex : std::size_t { kMlm, kMrp, kMem, kVt, kEt, kNode, kSubgraph, kLossCount };
extern const std::array<const char*, kLossCount> kLossNames;

using LossWeights = std::array<double, kLossCount>;
inline constexpr LossWeights kDefaultLossWeights = {1, 1, 1, 1, 1, 1, 1};

struct LossReport {
  std::array<double, kLossCount> values{};
  LossWeights weights = kDefaultLossWeights;
  double total = 0.0;
};

/// Weighted sum of the (scalar) components. Components with zero weight are left
/// out of the graph entirely; undefined components count as zero.
Tensor total_loss(const std::array<Tensor, kLossCount>& components, const LossWeights& weights,
                  LossReport* report = nullptr);

}  // namespace ege
