// Release gate: one PASS/FAIL line per acceptance criterion, nonzero exit if any
// fails. `acceptance 6` runs a single criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ege/config.hpp"
#include "ege/corpus.hpp"
#include "ege/entity_graph.hpp"
#include "ege/metrics.hpp"
#include "ege/model.hpp"
#include "ege/objectives.hpp"
#include "ege/retrieval.hpp"
#include "ege/selfcheck.hpp"
#include "ege/train.hpp"
#include "metric_oracle.hpp"

using namespace ege;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string num(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

Tensor random_matrix(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = g(rng);
  return Tensor(std::move(shape), std::move(v));
}

// ---- 1 -------------------------------------------------------------------------
Outcome skewed_recall() {
  std::map<std::string, std::string> gallery;
  for (int i = 0; i < 100; ++i) {
    gallery["a" + std::to_string(i)] = "A";
    gallery["b" + std::to_string(i)] = "B";
  }
  GroundTruth gt({{"q", {{"A", 2}, {"B", 3}}}}, gallery);
  auto row = [](std::size_t a, std::size_t b) {
    QueryResult r{"q", {}};
    for (std::size_t i = 0; i < a; ++i) r.hits.push_back({"a" + std::to_string(i), 0.0});
    for (std::size_t i = 0; i < b; ++i) r.hits.push_back({"b" + std::to_string(i), 0.0});
    return r;
  };
  const double skewed = ar_at_n(row(1, 99), gt, 100);
  const double balanced = ar_at_n(row(40, 60), gt, 100);
  char two[16];
  std::snprintf(two, sizeof two, "%.2f", skewed);
  const bool ok = std::abs(skewed - 0.5125) <= 1e-9 && std::string(two) == "0.51" && std::abs(balanced - 1.0) <= 1e-12;
  return {ok, "1A+99B -> " + num(skewed, 10) + " (prints " + two + "), 40A+60B -> " + num(balanced, 12)};
}

// ---- 2 -------------------------------------------------------------------------
Outcome metric_oracle() {
  std::mt19937_64 rng(2024);
  std::size_t instances = 0, mismatches = 0;
  for (; instances < 150; ++instances) {
    auto inst = oracle::random_instance(rng);
    for (std::size_t n : {1u, 5u, 10u}) {
      const auto report = evaluate_run(inst.run, inst.gt, {n});
      double map = 0, mar = 0, prec = 0;
      for (const auto& q : inst.queries) {
        map += oracle::ap(q, n, inst.gallery_counts);
        mar += oracle::ar(q, n, inst.gallery_counts);
        prec += oracle::prec(q, n);
      }
      const auto count = static_cast<double>(inst.queries.size());
      mismatches += report.map.at(n) != map / count;
      mismatches += report.mar.at(n) != mar / count;
      mismatches += report.prec.at(n) != prec / count;
    }
  }
  return {mismatches == 0, std::to_string(instances) + " instances x N in {1,5,10}, " + std::to_string(mismatches) +
                               " mismatches"};
}

// ---- 3 -------------------------------------------------------------------------
Outcome gradients() {
  SelfcheckOptions opt;
  opt.seed = 3;
  opt.gradient_seeds = 20;
  std::size_t checked = 0;
  bool ok = true;
  std::string worst;
  for (const auto& r : run_selfcheck(opt)) {
    if (r.name.rfind("grad.", 0) != 0) continue;
    ++checked;
    if (!r.passed) {
      ok = false;
      worst += " " + r.name + ": " + r.detail;
    }
  }
  const auto c = tiny_model_config();
  ok = ok && checked == kLossCount + 1 && c.hidden == 8 && c.heads == 2 && c.transformer_layers() == 3;
  return {ok, std::to_string(checked) + " gradient probes (7 losses + tiny model d=8) x 20 seeds, h=" + num(kGradStep) +
                  ", tolerance " + num(kGradTolerance) + (worst.empty() ? "" : ";" + worst)};
}

// ---- 4 -------------------------------------------------------------------------
Outcome contrastive() {
  std::mt19937_64 rng(4);
  double single = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Tensor a = random_matrix({1, 6}, rng), b = random_matrix({1, 6}, rng);
    single = std::max({single, std::abs(contrastive_vt(a, b, 0.07).item()), std::abs(contrastive_et(a, b, 0.07).item())});
  }
  // a1 = b1 = e1, a2 = e2, b2 = e3, tau = 1
  const Tensor first({2, 3}, {1, 0, 0, 0, 1, 0});
  const Tensor second({2, 3}, {1, 0, 0, 0, 0, 1});
  const double oracle = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  const double term = contrastive_anchor_terms(first, second, 1.0)[0];
  const bool ok = single <= 1e-12 && std::abs(term - 0.5514) <= 1e-4 && std::abs(term - oracle) <= 1e-12;
  return {ok, "N=1 loss max |.| " + num(single) + ", orthogonal N=2 anchor term " + num(term, 6) + " (oracle " +
                  num(oracle, 6) + ")"};
}

// ---- 5 -------------------------------------------------------------------------
std::vector<Hit> scan_and_sort(const std::vector<std::string>& ids, const std::vector<double>& rows, std::size_t dim,
                               const std::vector<double>& q, std::size_t n) {
  auto norm = [](const double* v, std::size_t d) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) s += v[i] * v[i];
    return std::sqrt(s);
  };
  const double qn = norm(q.data(), dim);
  std::vector<Hit> all;
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const double rn = norm(&rows[r * dim], dim);
    double dot = 0;
    for (std::size_t j = 0; j < dim; ++j) dot += (rows[r * dim + j] / rn) * (q[j] / qn);
    all.push_back({ids[r], dot});
  }
  std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) { return a.score != b.score ? a.score > b.score : a.id < b.id; });
  all.resize(std::min(n, all.size()));
  return all;
}

Outcome retrieval_oracle() {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  std::size_t cases = 0, order_mismatch = 0, parallel_mismatch = 0;
  double score_dev = 0.0;
  for (; cases < 150; ++cases) {
    const std::size_t count = 1 + rng() % 80, dim = 1 + rng() % 16, n = 1 + rng() % 100;
    std::vector<double> rows(count * dim);
    for (auto& v : rows) v = g(rng);
    if (cases % 3 == 0 && count > 3) {  // duplicates and scaled copies tie exactly
      for (std::size_t j = 0; j < dim; ++j) rows[dim + j] = rows[j], rows[2 * dim + j] = 4.0 * rows[j];
    }
    if (cases % 5 == 0) {  // integer grid: many ties
      for (auto& v : rows) v = std::round(v);
      for (std::size_t i = 0; i < count; ++i)
        if (std::all_of(&rows[i * dim], &rows[i * dim] + dim, [](double v) { return v == 0.0; })) rows[i * dim] = 1.0;
    }
    std::vector<std::string> ids(count);
    for (std::size_t i = 0; i < count; ++i) ids[i] = "id" + std::to_string((i * 7919) % 100003);
    const auto index = GalleryIndex::build(ids, rows, dim);
    std::vector<double> q(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(dim));
    if (cases % 2) {
      for (auto& v : q) v = g(rng);
    }
    const auto got = query_topn(index, q, n);
    const auto want = scan_and_sort(ids, rows, dim, q, n);
    if (got.size() != want.size()) {
      ++order_mismatch;
      continue;
    }
    for (std::size_t i = 0; i < got.size(); ++i) {
      // Equal-score groups must come out in id order; scores agree to rounding.
      score_dev = std::max(score_dev, std::abs(got[i].score - want[i].score));
      if (i > 0 && got[i].score == got[i - 1].score && !(got[i - 1].id < got[i].id)) ++order_mismatch;
      if (got[i].id != want[i].id && std::abs(got[i].score - want[i].score) > 1e-12) ++order_mismatch;
    }
    // batch path, serial versus parallel, and against the single-query path
    const std::size_t nq = 1 + rng() % 20;
    std::vector<double> qs(nq * dim);
    for (auto& v : qs) v = g(rng);
    std::vector<std::string> qids(nq);
    for (std::size_t i = 0; i < nq; ++i) qids[i] = "q" + std::to_string(i);
    const auto serial = batch_retrieve(index, qids, qs, n, 1);
    for (std::size_t w : {2u, 4u, 7u}) parallel_mismatch += !(batch_retrieve(index, qids, qs, n, w) == serial);
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> one(qs.begin() + static_cast<std::ptrdiff_t>(i * dim),
                              qs.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
      parallel_mismatch += !(serial[i].hits == query_topn(index, one, n));
    }
  }
  const bool ok = order_mismatch == 0 && parallel_mismatch == 0 && score_dev <= 1e-12;
  return {ok, std::to_string(cases) + " cases with ties: " + std::to_string(order_mismatch) + " ranking mismatches, max score deviation " +
                  num(score_dev) + ", " + std::to_string(parallel_mismatch) + " parallel/serial differences"};
}

// ---- 6 -------------------------------------------------------------------------
Outcome convergence() {
  RunConfig cfg;  // d=32, (L,K,H)=(1,1,1), 300 steps, all seven losses
  cfg.seed = 6;
  cfg.synth.seed = 6;
  const auto corpus = generate_synthetic_corpus(cfg.synth);
  auto samples = [&](const SplitData& split) {
    std::vector<Sample> out;
    const auto& mc = cfg.model;
    for (const auto& r : split.manifest) {
      Sample s;
      s.id = r.id;
      std::vector<double> f(split.features.data.begin() + static_cast<std::ptrdiff_t>(r.features.row_offset * mc.prop_dim),
                            split.features.data.begin() +
                                static_cast<std::ptrdiff_t>((r.features.row_offset + r.features.row_count) * mc.prop_dim));
      std::vector<double> p(split.positions.data.begin() + static_cast<std::ptrdiff_t>(r.positions->row_offset * mc.pos_dim),
                            split.positions.data.begin() +
                                static_cast<std::ptrdiff_t>((r.positions->row_offset + r.positions->row_count) * mc.pos_dim));
      s.proposals = Tensor({r.features.row_count, mc.prop_dim}, std::move(f));
      s.positions = Tensor({r.features.row_count, mc.pos_dim}, std::move(p));
      s.caption = r.caption;
      s.entities = r.entities;
      s.categories = r.categories;
      out.push_back(std::move(s));
    }
    return out;
  };
  const auto train = samples(corpus.train), gallery = samples(corpus.gallery), query = samples(corpus.query);
  if (train.size() != 200 || gallery.size() != 64 || query.size() != 32 || cfg.synth.n_categories != 16 ||
      cfg.train.steps != 300 || cfg.model.hidden != 32) {
    return {false, "unexpected corpus or model shape"};
  }
  const auto result = train_model(cfg, train);
  const double initial = result.log.front().report.total;
  double final_total = 0.0;
  for (std::size_t i = result.log.size() - 10; i < result.log.size(); ++i) final_total += result.log[i].report.total;
  final_total /= 10.0;

  // Embeddings go through the 32-bit file format, as the CLI does.
  const auto ge = embed_samples(result.state, gallery), qe = embed_samples(result.state, query);
  std::vector<std::string> gids, qids;
  for (const auto& s : gallery) gids.push_back(s.id);
  for (const auto& s : query) qids.push_back(s.id);
  const auto index = GalleryIndex::build(gids, std::span<const float>(ge.data), ge.dim);
  const auto run = batch_retrieve(index, qids, qe.widened(), 10, 1);
  const GroundTruth gt(corpus.ground_truth, gallery_labels(corpus.gallery.manifest));
  const double map10 = evaluate_run(run, gt, {10}).map.at(10);

  std::mt19937_64 shuffle(60);
  double baseline = 0.0;
  for (int t = 0; t < 100; ++t) {
    RankedRun random_run;
    for (const auto& q : qids) {
      auto order = gids;
      std::shuffle(order.begin(), order.end(), shuffle);
      QueryResult row{q, {}};
      for (std::size_t i = 0; i < 10; ++i) row.hits.push_back({order[i], 0.0});
      random_run.push_back(std::move(row));
    }
    baseline += evaluate_run(random_run, gt, {10}).map.at(10);
  }
  baseline /= 100.0;
  const double ratio = final_total / initial;
  const bool ok = ratio <= 0.5 && map10 >= 5.0 * baseline;
  return {ok, "total loss " + num(initial) + " -> " + num(final_total) + " (ratio " + num(ratio, 3) + ", need <= 0.5); mAP@10 " +
                  num(map10) + " vs random " + num(baseline) + " (x" + num(map10 / baseline, 3) + ", need >= 5)"};
}

// ---- 7 -------------------------------------------------------------------------
Outcome ablation() {
  RunConfig base;
  base.seed = 7;
  base.synth.seed = 7;
  base.train.steps = 10;
  const auto corpus = generate_synthetic_corpus(base.synth);
  std::vector<Sample> train;
  for (const auto& r : corpus.train.manifest) {
    Sample s;
    s.id = r.id;
    const auto& f = corpus.train.features;
    const auto& p = corpus.train.positions;
    s.proposals = Tensor({r.features.row_count, f.dim},
                         std::vector<double>(f.data.begin() + static_cast<std::ptrdiff_t>(r.features.row_offset * f.dim),
                                             f.data.begin() + static_cast<std::ptrdiff_t>((r.features.row_offset + r.features.row_count) * f.dim)));
    s.positions = Tensor({r.features.row_count, p.dim},
                         std::vector<double>(p.data.begin() + static_cast<std::ptrdiff_t>(r.features.row_offset * p.dim),
                                             p.data.begin() + static_cast<std::ptrdiff_t>((r.features.row_offset + r.features.row_count) * p.dim)));
    s.caption = r.caption;
    s.entities = r.entities;
    train.push_back(std::move(s));
  }
  const std::size_t configs[][3] = {{4, 4, 4}, {6, 0, 6}, {6, 6, 0}, {0, 6, 6}, {2, 2, 2}, {8, 8, 8}};
  std::string detail;
  bool ok = true;
  for (const auto& lkh : configs) {
    RunConfig cfg = base;
    cfg.model.smt_layers = lkh[0];
    cfg.model.cmt_layers = lkh[1];
    cfg.model.comt_layers = lkh[2];
    std::string tag = "(" + std::to_string(lkh[0]) + "," + std::to_string(lkh[1]) + "," + std::to_string(lkh[2]) + ")";
    try {
      const auto r = train_model(cfg, train);
      bool finite = r.log.size() == 10;
      for (const auto& row : r.log) {
        finite = finite && std::isfinite(row.report.total);
        for (double v : row.report.values) finite = finite && std::isfinite(v);
      }
      ok = ok && finite;
      detail += " " + tag + (finite ? " ok" : " NON-FINITE") + " last " + num(r.log.back().report.total, 3) + ";";
    } catch (const std::exception& e) {
      ok = false;
      detail += " " + tag + " raised: " + e.what() + ";";
    }
  }
  return {ok, "10 steps each:" + detail};
}

// ---- 8 -------------------------------------------------------------------------
Outcome graph_invariants() {
  std::mt19937_64 rng(8);
  double row_dev = 0, sym_dev = 0, diag_dev = 0, pool_dev = 0, pre_sym_dev = 0;
  std::size_t self_loops = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng() % 30, d = 2 + rng() % 10, k = 1 + rng() % (n - 1);
    const Tensor feats = random_matrix({n, d}, rng);
    const auto built = build_graph(feats, k, rng() % 4);
    const auto a = built.graph.adjacency.to_vector();
    const auto s = built.graph.symmetric.to_vector();
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        sum += a[i * n + j];
        pre_sym_dev = std::max(pre_sym_dev, std::abs(s[i * n + j] - s[j * n + i]));
      }
      row_dev = std::max(row_dev, std::abs(sum - 1.0));
      self_loops += a[i * n + i] != 0.0;
      for (std::size_t j : built.graph.neighbors[i]) self_loops += j == i;
    }
    const auto sg = graph_similarity(built.graph_features).to_vector();
    for (std::size_t i = 0; i < n; ++i) {
      diag_dev = std::max(diag_dev, std::abs(sg[i * n + i] - 1.0));
      for (std::size_t j = 0; j < n; ++j) sym_dev = std::max(sym_dev, std::abs(sg[i * n + j] - sg[j * n + i]));
    }
    const auto fv = feats.to_vector();
    for (std::size_t node = 0; node < n; ++node) {
      const auto pooled = subgraph_embedding(node, built.graph, feats).to_vector();
      for (std::size_t t = 0; t < d; ++t) {
        double sum = fv[node * d + t];
        for (std::size_t j : built.graph.neighbors[node]) sum += fv[j * d + t];
        pool_dev = std::max(pool_dev, std::abs(sum - pooled[t]));
      }
    }
  }
  // Negative sampling: 1000 seeded draws per anchor stay in the tail-k ranks.
  const std::size_t n = 16, k_tail = 4;
  const Tensor sim = graph_similarity(random_matrix({n, 6}, rng));
  std::vector<std::size_t> batch(n);
  std::iota(batch.begin(), batch.end(), 0);
  std::size_t outside = 0, draws = 0;
  for (std::size_t anchor : {0u, 5u, 15u}) {
    std::vector<std::size_t> ranked;
    for (std::size_t b : batch)
      if (b != anchor) ranked.push_back(b);
    std::sort(ranked.begin(), ranked.end(), [&](std::size_t x, std::size_t y) {
      return sim.at(anchor, x) != sim.at(anchor, y) ? sim.at(anchor, x) > sim.at(anchor, y) : x < y;
    });
    const std::vector<std::size_t> tail(ranked.end() - static_cast<std::ptrdiff_t>(k_tail), ranked.end());
    std::mt19937_64 draw(1000 + anchor);
    for (int i = 0; i < 1000; ++i, ++draws) {
      const std::size_t neg = sample_negative(anchor, batch, sim, k_tail, draw);
      outside += std::find(tail.begin(), tail.end(), neg) == tail.end();
    }
  }
  const bool ok = row_dev <= 1e-9 && self_loops == 0 && sym_dev <= 1e-9 && diag_dev <= 1e-9 && pre_sym_dev <= 1e-9 &&
                  pool_dev <= 1e-12 && outside == 0;
  return {ok, "row sums " + num(row_dev) + ", self-loops " + std::to_string(self_loops) + ", graph similarity asymmetry " + num(sym_dev) +
                  " diagonal " + num(diag_dev) + ", pooling " + num(pool_dev) + ", " + std::to_string(outside) + "/" +
                  std::to_string(draws) + " negatives outside tail"};
}

// ---- 9 -------------------------------------------------------------------------
template <typename Write, typename Read>
bool round_trip(Write write, Read read) {
  std::ostringstream first;
  write(first, nullptr);
  std::istringstream in(first.str());
  auto back = read(in);
  std::ostringstream second;
  write(second, &back);
  return !first.str().empty() && first.str() == second.str();
}

Outcome formats() {
  RunConfig cfg;
  cfg.synth.n_train = 20;
  const auto corpus = generate_synthetic_corpus(cfg.synth);
  const auto state = ModelState::initialize(cfg.model, 9);
  std::mt19937_64 rng(9);
  std::string detail;
  bool ok = true;
  auto note = [&](const char* what, bool passed) {
    ok = ok && passed;
    detail += std::string(" ") + what + (passed ? " ok" : " DIFFERS") + ";";
  };
  note("checkpoint", round_trip(
                         [&](std::ostream& o, const ModelState* s) { write_checkpoint(o, s ? *s : state); },
                         [](std::istream& i) { return read_checkpoint(i); }));
  note("embeddings", round_trip(
                         [&](std::ostream& o, const EmbeddingMatrix* m) { write_embeddings(o, m ? *m : corpus.train.features); },
                         [](std::istream& i) { return read_embeddings(i); }));
  bool manifests = true;
  for (const auto* split : {&corpus.train, &corpus.gallery, &corpus.query}) {
    manifests = manifests && round_trip(
                                 [&](std::ostream& o, const Manifest* m) { write_manifest(o, m ? *m : split->manifest); },
                                 [](std::istream& i) { return read_manifest(i); });
  }
  note("manifests", manifests);
  RankedRun run;
  std::normal_distribution<double> g;
  for (int q = 0; q < 5; ++q) {
    QueryResult row{"q\"" + std::to_string(q), {}};
    for (int h = 0; h < 7; ++h) row.hits.push_back({"g" + std::to_string(h), g(rng)});
    run.push_back(std::move(row));
  }
  note("run file", round_trip([&](std::ostream& o, const RankedRun* r) { write_run(o, r ? *r : run); },
                              [](std::istream& i) { return read_run(i); }));
  return {ok, "write -> read -> write:" + detail};
}

struct Criterion {
  int number;
  const char* name;
  double budget_seconds;  // 0: none stated
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "mAR worked example", 1.0, skewed_recall},
      {2, "metric oracle equivalence", 10.0, metric_oracle},
      {3, "gradient verification", 60.0, gradients},
      {4, "contrastive exactness", 0.0, contrastive},
      {5, "retrieval oracle", 10.0, retrieval_oracle},
      {6, "end-to-end toy convergence", 300.0, convergence},
      {7, "ablation machinery", 120.0, ablation},
      {8, "entity-graph invariants", 0.0, graph_invariants},
      {9, "format round-trips", 0.0, formats},
  };
  const int only = argc > 1 ? std::atoi(argv[1]) : 0;
  int failures = 0;
  for (const auto& c : criteria) {
    if (only && c.number != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("raised: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_seconds == 0.0 || s < c.budget_seconds;
    const bool passed = o.passed && in_time;
    failures += !passed;
    std::printf("%s %d %s: %s [%.2fs%s]\n", passed ? "PASS" : "FAIL", c.number, c.name, o.detail.c_str(), s,
                c.budget_seconds > 0 ? (std::string(in_time ? " within " : " OVER ") + num(c.budget_seconds) + "s").c_str()
                                     : "");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
