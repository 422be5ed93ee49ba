#include "ege/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "ege/entity_graph.hpp"
#include "ege/error.hpp"
#include "ege/metrics.hpp"
#include "ege/objectives.hpp"
#include "ege/retrieval.hpp"
#include "ege/train.hpp"

namespace ege {

namespace {

// Denominator floor for the relative error. Central differences at h=1e-5 on a
// loss of size ~10 carry ~1e-10 of round-off per coordinate, so gradients that
// vanish identically (attention key biases, for one) are compared against this.
constexpr double kGradFloor = 1e-5;

double uniform(std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

std::size_t below(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * uniform(rng);
  return Tensor(std::move(shape), std::move(v));
}

std::vector<std::size_t> pick(std::mt19937_64& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (k == 0 || k >= n) return idx;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + below(rng, n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheck check_gradients(const std::function<Tensor()>& loss, const std::vector<std::pair<std::string, Tensor>>& inputs,
                          std::mt19937_64& rng, std::size_t max_coords, double h) {
  for (const auto& [name, t] : inputs) {
    if (!t.is_leaf()) raise(ErrorCode::contract, "check_gradients: '" + name + "' is not a leaf");
    Tensor(t).set_requires_grad(true);
  }
  const Tensor value = loss();
  if (value.rank() != 0) raise(ErrorCode::dimension, "check_gradients: loss must be a scalar");
  backward(value);
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, t] : inputs) {
    analytic.push_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                    : std::vector<double>(t.numel(), 0.0));
  }
  GradCheck out;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    Tensor t = inputs[p].second;
    auto data = t.mutable_data();
    double diff = 0.0, an = 0.0, nn = 0.0;
    for (std::size_t c : pick(rng, data.size(), max_coords)) {
      const double orig = data[c];
      data[c] = orig + h;
      const double up = loss().item();
      data[c] = orig - h;
      const double down = loss().item();
      data[c] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][c];
      diff += (a - numeric) * (a - numeric);
      an += a * a;
      nn += numeric * numeric;
      ++out.coordinates;
    }
    const double err = std::sqrt(diff) / std::max({std::sqrt(an), std::sqrt(nn), kGradFloor});
    if (out.worst_tensor.empty() || err > out.worst) {
      out.worst = err;
      out.worst_tensor = inputs[p].first;
    }
  }
  return out;
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.smt_layers = c.cmt_layers = c.comt_layers = 1;
  c.hidden = 8;
  c.heads = 2;
  c.vocab_size = 24;
  c.prop_dim = 6;
  c.pos_dim = 5;
  c.max_seq = 8;
  c.max_regions = 4;
  c.head_dim = 4;
  c.ffn_dim = 16;
  c.init_range = 0.3;
  return c;
}

std::vector<Sample> tiny_batch(const ModelConfig& c, std::mt19937_64& rng) {
  const std::size_t first = static_cast<std::size_t>(kFirstRegularToken);
  auto token = [&] { return static_cast<TokenId>(first + below(rng, c.vocab_size - first)); };
  std::vector<Sample> out;
  for (std::size_t i = 0; i < 2; ++i) {
    Sample s;
    s.id = "tiny" + std::to_string(i);
    const std::size_t m = std::min<std::size_t>(3, c.max_regions);
    s.proposals = random_tensor({m, c.prop_dim}, rng);
    std::vector<double> pos(m * c.pos_dim);
    for (auto& x : pos) x = uniform(rng, 0.0, 1.0);
    s.positions = Tensor({m, c.pos_dim}, std::move(pos));
    for (std::size_t t = 0; t < std::min<std::size_t>(5, c.max_seq); ++t) s.caption.push_back(token());
    // Entities are forced apart so the batch always has four distinct ones.
    s.entities = {{static_cast<TokenId>(first + 2 * i), token()}, {static_cast<TokenId>(first + 2 * i + 1), token()}};
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

using Inputs = std::vector<std::pair<std::string, Tensor>>;

struct Probe {
  std::function<Tensor()> loss;
  Inputs inputs;
  std::size_t max_coords = 0;
};

Probe masked_token_probe(std::mt19937_64& rng, bool entity) {
  const std::size_t len = 5, d = 6, vocab = 10;
  Tensor states = random_tensor({len, d}, rng);
  Projection head{random_tensor({d, vocab}, rng, 0.5), random_tensor({vocab}, rng, 0.1)};
  MaskPlan plan;
  auto& idx = entity ? plan.entity_idx : plan.text_idx;
  auto& orig = entity ? plan.entity_original : plan.text_original;
  idx = {0, 2, 3};
  for (std::size_t i = 0; i < idx.size(); ++i) orig.push_back(static_cast<TokenId>(below(rng, vocab)));
  return {[=] { return entity ? mem_loss(states, plan, head) : mlm_loss(states, plan, head); },
          {{"states", states}, {"head.w", head.w}, {"head.b", head.b}}};
}

Probe mrp_probe(std::mt19937_64& rng) {
  Tensor states = random_tensor({4, 6}, rng);
  Projection head{random_tensor({6, 3}, rng, 0.5), random_tensor({3}, rng, 0.1)};
  MaskPlan plan;
  plan.region_idx = {1, 3};
  for (int i = 0; i < 2; ++i) plan.region_original.push_back({uniform(rng), uniform(rng), uniform(rng)});
  return {[=] { return mrp_loss(states, plan, head); }, {{"states", states}, {"head.w", head.w}, {"head.b", head.b}}};
}

Probe contrastive_probe(std::mt19937_64& rng, bool entity) {
  Tensor a = random_tensor({3, 5}, rng), b = random_tensor({3, 5}, rng);
  return {[=] { return entity ? contrastive_et(a, b, 0.07) : contrastive_vt(a, b, 0.07); },
          {{entity ? "entity" : "image", a}, {"text", b}}};
}

// Inputs are redrawn until the hinge is active with a clear margin, so the
// differences never straddle its kink.
Probe node_probe(std::mt19937_64& rng) {
  for (;;) {
    Tensor anchor = random_tensor({6}, rng), pos = random_tensor({6}, rng), neg = random_tensor({6}, rng);
    const double gap = cosine_similarity(anchor, pos).item() - cosine_similarity(anchor, neg).item();
    if (std::abs(gap) < 0.05) continue;
    if (gap > 0) std::swap(pos, neg);
    return {[=] { return node_ranking_loss(cosine_similarity(anchor, pos), cosine_similarity(anchor, neg)); },
            {{"anchor", anchor}, {"positive", pos}, {"negative", neg}}};
  }
}

Probe subgraph_probe(std::mt19937_64& rng) {
  for (;;) {
    Tensor anchor = random_tensor({6}, rng), nodes = random_tensor({6, 6}, rng);
    const EntityGraph graph = build_graph(nodes, 2, 0).graph;
    std::size_t pos = 0, neg = 3;
    auto score = [&](std::size_t n) { return cosine_similarity(anchor, subgraph_embedding(n, graph, nodes)).item(); };
    const double gap = score(pos) - score(neg);
    if (std::abs(gap) < 0.05) continue;
    if (gap > 0) std::swap(pos, neg);
    return {[=] {
              return subgraph_ranking_loss(cosine_similarity(anchor, subgraph_embedding(pos, graph, nodes)),
                                           cosine_similarity(anchor, subgraph_embedding(neg, graph, nodes)));
            },
            {{"anchor", anchor}, {"nodes", nodes}}};
  }
}

Probe model_probe(std::mt19937_64& rng) {
  const ModelConfig c = tiny_model_config();
  auto state = std::make_shared<ModelState>(ModelState::initialize(c, rng()));
  auto batch = std::make_shared<std::vector<Sample>>(tiny_batch(c, rng));
  auto queue = std::make_shared<EntityQueue>(build_entity_queue(corpus_entities(*batch), 64));
  auto graph = std::make_shared<EntityGraph>(refresh_queue(*queue, *state, 2, 1));
  RunConfig rc;
  rc.model = c;
  const std::uint64_t seed = rng();
  Probe p;
  p.loss = [=] {
    return total_loss(compute_losses(*state, *batch, rc, *queue, *graph, seed), rc.weights);
  };
  p.inputs = state->parameters();
  p.max_coords = 2;
  return p;
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

CheckResult gradient_check(const std::string& name, std::size_t seeds, std::uint64_t base,
                           const std::function<Probe(std::mt19937_64&)>& make) {
  Timer timer;
  CheckResult r{name, true, "", 0.0};
  double worst = 0.0;
  std::string where;
  std::size_t coords = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(base * 1000003 + s);
    Probe p = make(rng);
    const GradCheck g = check_gradients(p.loss, p.inputs, rng, p.max_coords);
    coords += g.coordinates;
    if (g.worst >= worst) {
      worst = g.worst;
      where = g.worst_tensor + " (seed " + std::to_string(s) + ")";
    }
  }
  r.passed = worst < kGradTolerance;
  r.detail = "worst relative error " + fmt(worst) + " at " + where + " over " + std::to_string(seeds) + " seeds, " +
             std::to_string(coords) + " coordinates";
  r.seconds = timer.seconds();
  return r;
}

CheckResult softmax_check(std::mt19937_64& rng) {
  Timer timer;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({4, 7}, rng, 5.0);
    const auto p = softmax(x, 1).to_vector();
    std::vector<double> shifted = x.to_vector();
    for (auto& v : shifted) v += 3.5;
    const auto q = softmax(Tensor({4, 7}, shifted), 1).to_vector();
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        s += p[i * 7 + j];
        worst = std::max(worst, std::abs(p[i * 7 + j] - q[i * 7 + j]));
      }
      worst = std::max(worst, std::abs(s - 1.0));
    }
    std::vector<std::uint8_t> keep(7, 1);
    keep[2] = keep[5] = 0;
    const auto m = masked_softmax(x, keep).to_vector();
    for (std::size_t i = 0; i < 4; ++i) worst = std::max({worst, std::abs(m[i * 7 + 2]), std::abs(m[i * 7 + 5])});
  }
  return {"softmax.invariants", worst <= 1e-12, "max deviation " + fmt(worst), timer.seconds()};
}

CheckResult layer_norm_check(std::mt19937_64& rng) {
  Timer timer;
  double worst = 0.0;
  const double eps = 1e-5;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({3, 9}, rng, 4.0);
    const auto y = layer_norm(x, Tensor::filled({9}, 1.0), Tensor::zeros({9}), eps).to_vector();
    const auto xv = x.to_vector();
    for (std::size_t i = 0; i < 3; ++i) {
      double mu = 0.0, var = 0.0, ym = 0.0, yv = 0.0;
      for (std::size_t j = 0; j < 9; ++j) mu += xv[i * 9 + j] / 9.0;
      for (std::size_t j = 0; j < 9; ++j) var += (xv[i * 9 + j] - mu) * (xv[i * 9 + j] - mu) / 9.0;
      for (std::size_t j = 0; j < 9; ++j) ym += y[i * 9 + j] / 9.0;
      for (std::size_t j = 0; j < 9; ++j) yv += (y[i * 9 + j] - ym) * (y[i * 9 + j] - ym) / 9.0;
      worst = std::max({worst, std::abs(ym), std::abs(yv - var / (var + eps))});
    }
  }
  return {"layer_norm.invariants", worst <= 1e-9, "max deviation " + fmt(worst), timer.seconds()};
}

// Full scan, independent normalisation, sort on (score desc, id asc).
std::vector<Hit> naive_topn(const std::vector<std::string>& ids, const std::vector<double>& rows, std::size_t dim,
                            const std::vector<double>& q, std::size_t n) {
  auto unit = [dim](const double* v) {
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) s += v[j] * v[j];
    std::vector<double> out(dim);
    for (std::size_t j = 0; j < dim; ++j) out[j] = v[j] / std::sqrt(s);
    return out;
  };
  const auto qu = unit(q.data());
  std::vector<Hit> all;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto g = unit(&rows[i * dim]);
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) s += g[j] * qu[j];
    all.push_back({ids[i], s});
  }
  std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
  all.resize(std::min(n, all.size()));
  return all;
}

CheckResult retrieval_check(std::mt19937_64& rng) {
  Timer timer;
  std::size_t mismatches = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t g = 1 + below(rng, 40), dim = 1 + below(rng, 8), n = 1 + below(rng, 50);
    std::vector<std::string> ids;
    std::vector<double> rows;
    for (std::size_t i = 0; i < g; ++i) {
      ids.push_back("g" + std::to_string(rng() % 100000) + "_" + std::to_string(i));
      if (i > 0 && below(rng, 4) == 0) {  // duplicate an earlier row to force a tie
        const std::size_t src = below(rng, i);
        for (std::size_t j = 0; j < dim; ++j) rows.push_back(rows[src * dim + j]);
      } else {
        for (std::size_t j = 0; j < dim; ++j) rows.push_back(uniform(rng));
      }
    }
    const auto index = GalleryIndex::build(ids, rows, dim);
    std::vector<std::string> qids;
    std::vector<double> queries;
    for (std::size_t k = 0; k < 9; ++k) {
      qids.push_back("q" + std::to_string(k));
      for (std::size_t j = 0; j < dim; ++j) queries.push_back(uniform(rng));
    }
    const RankedRun serial = batch_retrieve(index, qids, queries, n, 1);
    const RankedRun parallel = batch_retrieve(index, qids, queries, n, 4);
    if (!(serial == parallel)) ++mismatches;
    for (std::size_t k = 0; k < qids.size(); ++k) {
      const std::vector<double> q(queries.begin() + static_cast<std::ptrdiff_t>(k * dim),
                                  queries.begin() + static_cast<std::ptrdiff_t>((k + 1) * dim));
      const auto got = query_topn(index, q, n);
      const auto want = naive_topn(ids, rows, dim, q, n);
      if (got.size() != want.size() || !(serial[k].hits == got)) {
        ++mismatches;
        continue;
      }
      for (std::size_t i = 0; i < got.size(); ++i) {
        if (got[i].id != want[i].id) ++mismatches;
        worst = std::max(worst, std::abs(got[i].score - want[i].score));
      }
    }
  }
  return {"retrieval.oracle", mismatches == 0 && worst <= 1e-9,
          std::to_string(mismatches) + " ordering mismatches, max score deviation " + fmt(worst), timer.seconds()};
}

struct Metrics3 {
  double ap, ar, prec;
};

// Second implementation written directly from the formulas.
Metrics3 brute_metrics(const std::vector<std::string>& retrieved_labels, const CategoryCounts& query,
                       const std::map<std::string, std::size_t>& gallery_counts, std::size_t n) {
  auto relevant = [&](std::size_t k) {
    if (k >= retrieved_labels.size()) return false;
    auto it = query.find(retrieved_labels[k]);
    return it != query.end() && it->second > 0;
  };
  std::size_t correct = 0;
  for (std::size_t k = 0; k < n; ++k) correct += relevant(k);
  const double prec = static_cast<double>(correct) / static_cast<double>(n);

  std::size_t m = 0, total = 0, cq = 0;
  for (const auto& [cat, cnt] : query) {
    if (cnt == 0) continue;
    auto it = gallery_counts.find(cat);
    m += it == gallery_counts.end() ? 0 : it->second;
    total += cnt;
    ++cq;
  }
  double ap = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    if (!relevant(k - 1)) continue;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < k; ++i) hits += relevant(i);
    ap += static_cast<double>(hits) / static_cast<double>(k);
  }
  ap /= static_cast<double>(std::min(m, n));

  double ar = 0.0;
  for (const auto& [cat, cnt] : query) {
    if (cnt == 0) continue;
    std::size_t got = 0;
    for (std::size_t k = 0; k < std::min(n, retrieved_labels.size()); ++k) got += retrieved_labels[k] == cat;
    auto it = gallery_counts.find(cat);
    const std::size_t gc = it == gallery_counts.end() ? 0 : it->second;
    const std::size_t need = std::min(cnt * n / total, gc);
    ar += need == 0 ? 1.0 : std::min(1.0, static_cast<double>(got) / static_cast<double>(need));
  }
  ar /= static_cast<double>(cq);
  return {ap, ar, prec};
}

CheckResult metrics_check(std::mt19937_64& rng) {
  Timer timer;
  std::size_t mismatches = 0, instances = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t q = 1 + below(rng, 20), g = 1 + below(rng, 50), c = 1 + below(rng, 5);
    std::map<std::string, std::string> gallery;
    std::map<std::string, std::size_t> counts;
    std::vector<std::string> gids;
    for (std::size_t i = 0; i < g; ++i) {
      const std::string id = "g" + std::to_string(i);
      const std::string cat = category_name(below(rng, c));
      gallery[id] = cat;
      ++counts[cat];
      gids.push_back(id);
    }
    std::map<std::string, CategoryCounts> queries;
    RankedRun run;
    for (std::size_t k = 0; k < q; ++k) {
      const std::string qid = "q" + std::to_string(k);
      CategoryCounts cc;
      // Categories are drawn from those present in the gallery so m_q >= 1.
      const std::size_t products = 1 + below(rng, 4);
      for (std::size_t p = 0; p < products; ++p) ++cc[gallery[gids[below(rng, g)]]];
      queries[qid] = cc;
      std::vector<std::string> order = gids;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[below(rng, i)]);
      order.resize(below(rng, g + 1));
      QueryResult row{qid, {}};
      for (const auto& id : order) row.hits.push_back({id, 0.0});
      run.push_back(row);
    }
    const GroundTruth gt(queries, gallery);
    for (std::size_t n : {1, 5, 10}) {
      const MetricReport rep = evaluate_run(run, gt, {n});
      double ap = 0.0, ar = 0.0, pr = 0.0;
      for (const auto& row : run) {
        std::vector<std::string> labels;
        for (const auto& h : row.hits) labels.push_back(gallery[h.id]);
        const Metrics3 b = brute_metrics(labels, queries[row.query], counts, n);
        ap += b.ap;
        ar += b.ar;
        pr += b.prec;
      }
      const double qn = static_cast<double>(run.size());
      mismatches += (rep.map.at(n) != ap / qn) + (rep.mar.at(n) != ar / qn) + (rep.prec.at(n) != pr / qn);
      ++instances;
    }
  }
  return {"metrics.oracle", mismatches == 0,
          std::to_string(mismatches) + " mismatching values over " + std::to_string(instances) + " instances",
          timer.seconds()};
}

CheckResult graph_check(std::mt19937_64& rng) {
  Timer timer;
  std::vector<std::string> problems;
  double row_dev = 0.0, sym_dev = 0.0, pool_dev = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 4 + below(rng, 12), d = 2 + below(rng, 6), k = 1 + below(rng, n - 1);
    const Tensor feats = random_tensor({n, d}, rng);
    const GraphBuild built = build_graph(feats, k, 2);
    const auto a = built.graph.adjacency.to_vector();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j];
      row_dev = std::max(row_dev, std::abs(s - 1.0));
      if (a[i * n + i] != 0.0) problems.push_back("self-loop at node " + std::to_string(i));
    }
    const auto sg = graph_similarity(built.graph_features).to_vector();
    for (std::size_t i = 0; i < n; ++i) {
      sym_dev = std::max(sym_dev, std::abs(sg[i * n + i] - 1.0));
      for (std::size_t j = 0; j < n; ++j) sym_dev = std::max(sym_dev, std::abs(sg[i * n + j] - sg[j * n + i]));
    }
    const std::size_t node = below(rng, n);
    const auto pooled = subgraph_embedding(node, built.graph, feats).to_vector();
    const auto fv = feats.to_vector();
    for (std::size_t t = 0; t < d; ++t) {
      double s = fv[node * d + t];
      for (std::size_t j : built.graph.neighbors[node]) s += fv[j * d + t];
      pool_dev = std::max(pool_dev, std::abs(s - pooled[t]));
    }
  }
  // Tail sampling: 1000 draws must stay within the last k_tail ranks.
  const std::size_t n = 12;
  const Tensor sim = graph_similarity(random_tensor({n, 5}, rng));
  std::vector<std::size_t> batch(n);
  std::iota(batch.begin(), batch.end(), 0);
  const std::size_t anchor = 3, k_tail = 3;
  std::vector<std::size_t> ranked;
  for (std::size_t b : batch)
    if (b != anchor) ranked.push_back(b);
  std::sort(ranked.begin(), ranked.end(), [&](std::size_t x, std::size_t y) {
    return sim.at(anchor, x) != sim.at(anchor, y) ? sim.at(anchor, x) > sim.at(anchor, y) : x < y;
  });
  const std::vector<std::size_t> tail(ranked.end() - static_cast<std::ptrdiff_t>(k_tail), ranked.end());
  std::mt19937_64 draw(rng());
  std::size_t outside = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t neg = sample_negative(anchor, batch, sim, k_tail, draw);
    outside += std::find(tail.begin(), tail.end(), neg) == tail.end();
  }
  const bool ok = problems.empty() && row_dev <= 1e-9 && sym_dev <= 1e-12 && pool_dev <= 1e-12 && outside == 0;
  std::string detail = "row-sum deviation " + fmt(row_dev) + ", symmetry deviation " + fmt(sym_dev) +
                       ", pooling deviation " + fmt(pool_dev) + ", " + std::to_string(outside) +
                       " negatives outside the tail";
  if (!problems.empty()) detail += ", " + problems.front();
  return {"graph.invariants", ok, detail, timer.seconds()};
}

struct FaultScope {
  explicit FaultScope(const SelfcheckOptions& o) : active(!o.inject_fault.empty()) {
    if (active) debug::set_gradient_fault(o.inject_fault, o.fault_factor);
  }
  ~FaultScope() {
    if (active) debug::clear_gradient_faults();
  }
  bool active;
};

}  // namespace

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& options,
                                       const std::function<void(const CheckResult&)>& on_result) {
  FaultScope fault(options);
  std::vector<CheckResult> results;
  auto record = [&](const std::string& name, const std::function<CheckResult()>& run) {
    CheckResult r;
    try {
      r = run();
    } catch (const std::exception& e) {
      r = {name, false, std::string("raised: ") + e.what(), 0.0};
    }
    results.push_back(r);
    if (on_result) on_result(r);
  };
  const std::size_t seeds = options.gradient_seeds;
  const std::uint64_t s = options.seed;
  record("grad.mlm", [&] { return gradient_check("grad.mlm", seeds, s, [](auto& r) { return masked_token_probe(r, false); }); });
  record("grad.mrp", [&] { return gradient_check("grad.mrp", seeds, s, mrp_probe); });
  record("grad.mem", [&] { return gradient_check("grad.mem", seeds, s, [](auto& r) { return masked_token_probe(r, true); }); });
  record("grad.vt", [&] { return gradient_check("grad.vt", seeds, s, [](auto& r) { return contrastive_probe(r, false); }); });
  record("grad.et", [&] { return gradient_check("grad.et", seeds, s, [](auto& r) { return contrastive_probe(r, true); }); });
  record("grad.node", [&] { return gradient_check("grad.node", seeds, s, node_probe); });
  record("grad.subgraph", [&] { return gradient_check("grad.subgraph", seeds, s, subgraph_probe); });
  record("grad.model", [&] { return gradient_check("grad.model", seeds, s, model_probe); });
  std::mt19937_64 rng(s);
  record("softmax.invariants", [&] { return softmax_check(rng); });
  record("layer_norm.invariants", [&] { return layer_norm_check(rng); });
  record("retrieval.oracle", [&] { return retrieval_check(rng); });
  record("metrics.oracle", [&] { return metrics_check(rng); });
  record("graph.invariants", [&] { return graph_check(rng); });
  return results;
}

}  // namespace ege
