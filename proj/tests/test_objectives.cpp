#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "ege/objectives.hpp"
#include "support.hpp"

using namespace ege;
using testing::random_tensor;

namespace {

Sample token_sample(std::size_t caption_len, std::size_t regions = 4) {
  Sample s;
  s.id = "x";
  std::mt19937_64 rng(1);
  s.proposals = random_tensor({regions, 3}, rng);
  s.positions = random_tensor({regions, 5}, rng);
  for (std::size_t i = 0; i < caption_len; ++i) s.caption.push_back(static_cast<TokenId>(4 + i % 20));
  s.entities = {{5, 6}, {7}};
  return s;
}

Projection zero_head(std::size_t in, std::size_t out) { return {Tensor::zeros({in, out}), Tensor::zeros({out})}; }

// Per-anchor InfoNCE written out from the definition.
double anchor_term_oracle(const std::vector<std::vector<double>>& pts, std::size_t anchor, std::size_t positive,
                          double tau) {
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i], na += a[i] * a[i], nb += b[i] * b[i];
    return d / std::sqrt(na * nb);
  };
  double denom = 0;
  for (std::size_t k = 0; k < pts.size(); ++k)
    if (k != anchor) denom += std::exp(cosine(pts[anchor], pts[k]) / tau);
  return -std::log(std::exp(cosine(pts[anchor], pts[positive]) / tau) / denom);
}

}  // namespace

TEST_CASE("mask plan: rate, replay, forced selection, full selection") {
  Sample s = token_sample(36);
  std::mt19937_64 a(7), b(7);
  MaskPlan p = make_mask_plan(s, a, {}, 64, 64);
  MaskPlan q = make_mask_plan(s, b, {}, 64, 64);
  CHECK(p.text_idx.size() == 5);
  CHECK(p.text_idx == q.text_idx);
  CHECK(p.text_replacement == q.text_replacement);
  CHECK(p.region_idx == q.region_idx);
  CHECK(p.entity_idx == q.entity_idx);

  std::mt19937_64 rng(3);
  MaskPlan z = make_mask_plan(s, rng, {0.0, 0.0, 0.0}, 64, 64);
  CHECK(z.text_idx.size() == 1);
  CHECK(z.region_idx.size() == 1);
  CHECK(z.entity_idx.size() == 1);

  MaskPlan all = make_mask_plan(s, rng, {1.0, 1.0, 1.0}, 64, 64);
  CHECK(all.text_idx.size() == 36);
  CHECK(all.region_idx.size() == 4);

  Sample one = token_sample(1);
  MaskPlan f = make_mask_plan(one, rng, {}, 64, 64);
  CHECK(f.text_idx == std::vector<std::size_t>{0});
}

TEST_CASE("mask plan: replacement mix and entity masking never touches separators") {
  Sample s = token_sample(36);
  std::mt19937_64 rng(11);
  std::size_t masked = 0, random_tok = 0, kept = 0;
  for (int t = 0; t < 2000; ++t) {
    MaskPlan p = make_mask_plan(s, rng, {}, 64, 64);
    for (std::size_t i = 0; i < p.text_idx.size(); ++i) {
      if (p.text_replacement[i] == kMaskToken)
        ++masked;
      else if (p.text_replacement[i] == p.text_original[i])
        ++kept;
      else
        ++random_tok;
    }
    auto seq = entity_sequence(s.entities, 64);
    for (std::size_t i : p.entity_idx) CHECK(seq.tokens[i] != kSepToken);
  }
  const double total = double(masked + random_tok + kept);
  CHECK(masked / total == doctest::Approx(0.8).epsilon(0.03));
  // A random draw can coincide with the original, so "kept" runs slightly above 10%.
  CHECK(kept / total == doctest::Approx(0.1).epsilon(0.15));
  CHECK(random_tok / total == doctest::Approx(0.1).epsilon(0.15));

  std::mt19937_64 r2(5);
  MaskPlan p = make_mask_plan(s, r2, {}, 64, 64);
  Sample m = apply_mask(s, p, 64);
  for (std::size_t i = 0; i < p.text_idx.size(); ++i) CHECK(m.caption[p.text_idx[i]] == p.text_replacement[i]);
  for (std::size_t r : p.region_idx)
    for (std::size_t c = 0; c < 3; ++c) CHECK(m.proposals.at(r, c) == 0.0);
}

TEST_CASE("masked token losses: perfect head, uniform head, empty mask") {
  const std::size_t v = 24, d = 6;
  std::mt19937_64 rng(2);
  Tensor states = random_tensor({5, d}, rng);
  MaskPlan plan;
  plan.text_idx = {0, 3};
  plan.text_original = {7, 11};
  plan.entity_idx = {1};
  plan.entity_original = {9};
  CHECK(mlm_loss(states, plan, zero_head(d, v)).item() == doctest::Approx(std::log(double(v))).epsilon(1e-12));
  CHECK(mem_loss(states, plan, zero_head(d, v)).item() == doctest::Approx(std::log(double(v))).epsilon(1e-12));

  // A head whose bias overwhelms everything else: probability 1 in double precision.
  Projection sharp = zero_head(d, v);
  Tensor one_hot_states = Tensor::zeros({5, d});
  auto w = sharp.w.mutable_data();
  MaskPlan single;
  single.text_idx = {2};
  single.text_original = {7};
  auto st = one_hot_states.mutable_data();
  st[2 * d + 0] = 1.0;
  w[0 * v + 7] = 1000.0;
  CHECK(mlm_loss(one_hot_states, single, sharp).item() == 0.0);

  MaskPlan empty;
  CHECK(testing::error_code_of([&] { mlm_loss(states, empty, zero_head(d, v)); }) == ErrorCode::contract);
  CHECK(testing::error_code_of([&] { mem_loss(states, empty, zero_head(d, v)); }) == ErrorCode::contract);
  CHECK(testing::error_code_of([&] { mrp_loss(states, empty, zero_head(d, 2)); }) == ErrorCode::contract);
}

TEST_CASE("mrp: zero error, hand example, per-mask normalisation") {
  Tensor states = Tensor::zeros({3, 2});
  MaskPlan plan;
  plan.region_idx = {1};
  plan.region_original = {{3.0, 4.0}};
  CHECK(mrp_loss(states, plan, zero_head(2, 2)).item() == 12.5);

  plan.region_original = {{0.0, 0.0}};
  CHECK(mrp_loss(states, plan, zero_head(2, 2)).item() == 0.0);

  MaskPlan two;
  two.region_idx = {0, 2};
  two.region_original = {{3.0, 4.0}, {3.0, 4.0}};
  CHECK(mrp_loss(states, two, zero_head(2, 2)).item() == 12.5);
}

TEST_CASE("contrastive: N=1 is zero, orthogonal N=2 anchor term, default temperature") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 10; ++t) {
    Tensor a = random_tensor({1, 5}, rng), b = random_tensor({1, 5}, rng);
    CHECK(std::abs(contrastive_vt(a, b, 0.07).item()) <= 1e-12);
    CHECK(std::abs(contrastive_et(a, b, 0.07).item()) <= 1e-12);
  }

  // a1 = b1 = e1, a2 = e2, b2 = e3: sim(a1,b1) = 1, every other pair 0.
  Tensor first({2, 3}, {1, 0, 0, 0, 1, 0});
  Tensor second({2, 3}, {1, 0, 0, 0, 0, 1});
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  CHECK(expected == doctest::Approx(0.5514).epsilon(1e-4));
  auto vt = contrastive_anchor_terms(first, second, 1.0);
  REQUIRE(vt.size() == 4);
  CHECK(std::abs(vt[0] - expected) <= 1e-12);
  CHECK(std::abs(vt[2] - expected) <= 1e-12);
  CHECK(std::abs(vt[1] - std::log(3.0)) <= 1e-12);
  const double mean = std::accumulate(vt.begin(), vt.end(), 0.0) / 4;
  CHECK(std::abs(contrastive_vt(first, second, 1.0).item() - mean) <= 1e-12);
  CHECK(std::abs(contrastive_et(first, second, 1.0).item() - mean) <= 1e-12);

  CHECK(MaskRates{}.text == 0.15);
}

TEST_CASE("contrastive matches the written-out oracle, is permutation and scale invariant") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    Tensor a = random_tensor({4, 6}, rng), b = random_tensor({4, 6}, rng);
    std::vector<std::vector<double>> pts;
    for (const Tensor* m : {&a, &b})
      for (std::size_t r = 0; r < 4; ++r) {
        std::vector<double> row;
        for (std::size_t c = 0; c < 6; ++c) row.push_back(m->at(r, c));
        pts.push_back(row);
      }
    double want = 0;
    for (std::size_t i = 0; i < 8; ++i) want += anchor_term_oracle(pts, i, i < 4 ? i + 4 : i - 4, 0.07);
    want /= 8;
    const double got = contrastive_vt(a, b, 0.07).item();
    CHECK(got == doctest::Approx(want).epsilon(1e-10));

    std::vector<std::size_t> perm{2, 0, 3, 1};
    CHECK(contrastive_et(select_rows(a, perm), select_rows(b, perm), 0.07).item() ==
          doctest::Approx(got).epsilon(1e-12));
    auto scaled = a.to_vector();
    for (std::size_t c = 0; c < 6; ++c) scaled[6 + c] *= 7.5;
    CHECK(contrastive_vt(Tensor({4, 6}, scaled), b, 0.07).item() == doctest::Approx(got).epsilon(1e-12));
    CHECK(got >= 0.0);
  }
  CHECK(testing::error_code_of([] {
          contrastive_vt(Tensor({1, 2}, {0, 0}), Tensor({1, 2}, {1, 0}), 0.07);
        }) == ErrorCode::degenerate);
  CHECK(testing::error_code_of([] { contrastive_vt(Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {1, 0}), 0.0); }) ==
        ErrorCode::contract);
}

TEST_CASE("ranking hinges: examples and shift invariance") {
  CHECK(ranking_hinge(0.4, 0.4) == 0.0);
  CHECK(ranking_hinge(0.9, 0.5) == 0.0);
  CHECK(ranking_hinge(0.2, 0.7) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(subgraph_ranking_loss(Tensor::scalar(0.6), Tensor::scalar(0.3)).item() == 0.0);
  CHECK(subgraph_ranking_loss(Tensor::scalar(0.5), Tensor::scalar(0.75)).item() == doctest::Approx(0.25));
  CHECK(node_ranking_loss(Tensor::scalar(0.2), Tensor::scalar(0.7)).item() == doctest::Approx(0.5));
  CHECK(ranking_hinge(0.5, 0.5, 1.0, 0.2) == doctest::Approx(0.2));

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int t = 0; t < 200; ++t) {
    double p = u(rng), n = u(rng), delta = u(rng);
    CHECK(ranking_hinge(p + delta, n + delta) == doctest::Approx(ranking_hinge(p, n)).epsilon(1e-12));
    CHECK(ranking_hinge(p, n) >= 0.0);
  }
}

TEST_CASE("total loss: sums, weights, numeric guard") {
  std::array<Tensor, kLossCount> zero;
  for (auto& t : zero) t = Tensor::scalar(0.0);
  CHECK(total_loss(zero, kDefaultLossWeights).item() == 0.0);

  std::array<Tensor, kLossCount> parts;
  parts[0] = Tensor::scalar(1);
  parts[1] = Tensor::scalar(2);
  parts[2] = Tensor::scalar(3);
  LossReport report;
  CHECK(total_loss(parts, kDefaultLossWeights, &report).item() == 6.0);
  CHECK(report.total == 6.0);

  std::mt19937_64 rng(8);
  Tensor x = testing::leaf({3}, rng), y = testing::leaf({3}, rng);
  std::array<Tensor, kLossCount> g;
  g[kMlm] = sum_squares(x);
  g[kMrp] = sum_squares(y);
  LossWeights w = kDefaultLossWeights;
  w[kMrp] = 0.0;
  Tensor total = total_loss(g, w, &report);
  backward(total);
  CHECK(x.has_grad());
  CHECK(!y.has_grad());
  CHECK(report.values[kMrp] == doctest::Approx(sum_squares(y).item()));
  CHECK(report.total == doctest::Approx(report.values[kMlm]));

  w[kMrp] = 2.5;
  auto weighted = total_loss(g, w, &report).item();
  CHECK(weighted == doctest::Approx(report.values[kMlm] + 2.5 * report.values[kMrp]).epsilon(1e-12));

  w[kMrp] = -1;
  CHECK(testing::error_code_of([&] { total_loss(g, w); }) == ErrorCode::config);
}

TEST_CASE("every loss matches finite differences over 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    std::mt19937_64 rng(100 + seed);
    Tensor states = testing::leaf({5, 4}, rng);
    Projection head{testing::leaf({4, 9}, rng, 0.5), testing::leaf({9}, rng, 0.5)};
    Projection reg{testing::leaf({4, 3}, rng, 0.5), testing::leaf({3}, rng, 0.5)};
    MaskPlan plan;
    plan.text_idx = {0, 2, 4};
    plan.text_original = {1, 8, 5};
    plan.entity_idx = {1, 3};
    plan.entity_original = {2, 6};
    plan.region_idx = {1, 4};
    plan.region_original = {{0.3, -0.2, 0.9}, {0.1, 0.5, -0.7}};
    Tensor a = testing::leaf({3, 4}, rng), b = testing::leaf({3, 4}, rng);

    auto check = [&](const std::function<Tensor()>& f, std::vector<Tensor> xs) {
      backward(f());
      for (auto& x : xs) {
        std::vector<double> an(x.grad().begin(), x.grad().end());
        auto nu = testing::numeric_grad([&] {
          NoGradGuard off;
          return f().item();
        }, x);
        CHECK(testing::relative_error(an, nu) < 1e-4);
      }
    };
    check([&] { return mlm_loss(states, plan, head); }, {states, head.w, head.b});
    check([&] { return mem_loss(states, plan, head); }, {states, head.w, head.b});
    check([&] { return mrp_loss(states, plan, reg); }, {states, reg.w, reg.b});
    check([&] { return contrastive_vt(a, b, 0.07); }, {a, b});
    check([&] { return contrastive_et(a, b, 0.5); }, {a, b});
    // Hinges on cosine scores, drawn so the hinge is active and away from its kink.
    Tensor anchor = testing::leaf({4}, rng), pos = testing::leaf({4}, rng), neg = testing::leaf({4}, rng);
    auto node = [&] { return node_ranking_loss(cosine_similarity(anchor, pos), cosine_similarity(anchor, neg), 1.0, 2.5); };
    check(node, {anchor, pos, neg});
    auto sub = [&] {
      return subgraph_ranking_loss(cosine_similarity(anchor, add(pos, neg)), cosine_similarity(anchor, neg), 1.0, 2.5);
    };
    check(sub, {anchor, pos, neg});
  }
}

TEST_CASE("no image-text matching objective is exported") {
  for (const char* name : kLossNames) CHECK(std::string(name).find("itm") == std::string::npos);
  CHECK(kLossCount == 7);
}
