#include "ege/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <thread>
#include <unordered_set>

#include <json.hpp>

#include "ege/error.hpp"

namespace ege {

namespace {

std::vector<double> normalized(std::span<const double> q) {
  double s = 0.0;
  for (double v : q) s += v * v;
  const double norm = std::sqrt(s);
  if (!(norm > 0.0) || !std::isfinite(norm)) raise(ErrorCode::degenerate, "query embedding has zero norm");
  std::vector<double> out(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = q[i] / norm;
  return out;
}

// Orders candidates by score (desc) then id (asc) and keeps the first n.
std::vector<Hit> select_top(const GalleryIndex& index, const double* scores, std::size_t n) {
  const std::size_t g = index.size();
  const std::size_t keep = std::min(n, g);
  std::vector<std::size_t> order(g);
  std::iota(order.begin(), order.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : index.id_rank(a) < index.id_rank(b);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), better);
  std::vector<Hit> hits;
  hits.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) hits.push_back({index.ids()[order[i]], scores[order[i]]});
  return hits;
}

}  // namespace

GalleryIndex GalleryIndex::build(std::vector<std::string> ids, std::span<const double> rows, std::size_t dim) {
  if (dim == 0) raise(ErrorCode::dimension, "gallery: embedding width must be positive");
  if (ids.empty()) raise(ErrorCode::empty_input, "gallery: no entries");
  if (rows.size() != ids.size() * dim) {
    raise(ErrorCode::dimension, "gallery: " + std::to_string(ids.size()) + " ids but " +
                                    std::to_string(rows.size() / dim) + " rows");
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) raise(ErrorCode::contract, "gallery: duplicate id '" + id + "'");
  }
  GalleryIndex index;
  index.dim_ = dim;
  index.matrix_.resize(rows.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) s += rows[i * dim + j] * rows[i * dim + j];
    const double norm = std::sqrt(s);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      raise(ErrorCode::degenerate, "gallery: row " + std::to_string(i) + " ('" + ids[i] + "') has zero norm");
    }
    for (std::size_t j = 0; j < dim; ++j) index.matrix_[i * dim + j] = rows[i * dim + j] / norm;
  }
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  index.id_rank_.resize(ids.size());
  for (std::size_t r = 0; r < order.size(); ++r) index.id_rank_[order[r]] = r;
  index.ids_ = std::move(ids);
  return index;
}

GalleryIndex GalleryIndex::build(std::vector<std::string> ids, std::span<const float> rows, std::size_t dim) {
  std::vector<double> wide(rows.begin(), rows.end());
  return build(std::move(ids), wide, dim);
}

std::vector<Hit> query_topn(const GalleryIndex& index, std::span<const double> query, std::size_t n) {
  if (n == 0) raise(ErrorCode::contract, "query_topn: N must be >= 1");
  if (query.size() != index.dim()) {
    raise(ErrorCode::consistency, "query width " + std::to_string(query.size()) + " differs from gallery width " +
                                      std::to_string(index.dim()));
  }
  const auto q = normalized(query);
  std::vector<double> scores(index.size());
  for (std::size_t r = 0; r < index.size(); ++r) {
    const auto g = index.row(r);
    double s = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) s += g[j] * q[j];
    scores[r] = s;
  }
  return select_top(index, scores.data(), n);
}

namespace {

constexpr std::size_t kLanes = 8;      // queries per panel
constexpr std::size_t kRows = 4;       // gallery rows per micro-tile
constexpr std::size_t kQueryBlock = 64;  // queries scored per gallery sweep

// Every (query, row) sum runs over j in ascending order with separate multiply
// and add, exactly as query_topn does, so all paths agree bit for bit. The
// vector width only changes how many independent sums advance together.
#if defined(__x86_64__) && defined(__GNUC__) && !defined(__clang__)
#define EGE_KERNEL __attribute__((target_clones("avx512f", "avx2", "default")))
#else
#define EGE_KERNEL
#endif

// One lane per query in the panel.
typedef double Lanes __attribute__((vector_size(kLanes * sizeof(double))));

EGE_KERNEL void tile_rows(const double* rows, std::size_t dim, const double* panel, double* out) {
  Lanes a0 = {}, a1 = {}, a2 = {}, a3 = {};
  const double* r0 = rows;
  const double* r1 = rows + dim;
  const double* r2 = rows + 2 * dim;
  const double* r3 = rows + 3 * dim;
  for (std::size_t j = 0; j < dim; ++j) {
    Lanes q;
    std::memcpy(&q, panel + j * kLanes, sizeof q);
    a0 += r0[j] * q;
    a1 += r1[j] * q;
    a2 += r2[j] * q;
    a3 += r3[j] * q;
  }
  std::memcpy(out, &a0, sizeof a0);
  std::memcpy(out + kLanes, &a1, sizeof a1);
  std::memcpy(out + 2 * kLanes, &a2, sizeof a2);
  std::memcpy(out + 3 * kLanes, &a3, sizeof a3);
}

EGE_KERNEL void tile_row(const double* row, std::size_t dim, const double* panel, double* out) {
  Lanes acc = {};
  for (std::size_t j = 0; j < dim; ++j) {
    Lanes q;
    std::memcpy(&q, panel + j * kLanes, sizeof q);
    acc += row[j] * q;
  }
  std::memcpy(out, &acc, sizeof acc);
}

// Scores up to kQueryBlock queries against the whole gallery; scores[k * g + r].
void score_block(const GalleryIndex& index, const std::vector<double>* qs, std::size_t b, std::vector<double>& panels,
                 std::vector<double>& scores) {
  const std::size_t dim = index.dim(), g = index.size();
  const std::size_t npanels = (b + kLanes - 1) / kLanes;
  panels.assign(npanels * dim * kLanes, 0.0);
  for (std::size_t k = 0; k < b; ++k) {
    double* panel = panels.data() + (k / kLanes) * dim * kLanes;
    for (std::size_t j = 0; j < dim; ++j) panel[j * kLanes + k % kLanes] = qs[k][j];
  }
  scores.resize(b * g);
  double tile[kRows * kLanes];
  std::size_t r = 0;
  for (; r + kRows <= g; r += kRows) {
    const double* rows = index.row(r).data();
    for (std::size_t p = 0; p < npanels; ++p) {
      tile_rows(rows, dim, panels.data() + p * dim * kLanes, tile);
      const std::size_t lanes = std::min(kLanes, b - p * kLanes);
      for (std::size_t i = 0; i < kRows; ++i)
        for (std::size_t k = 0; k < lanes; ++k) scores[(p * kLanes + k) * g + r + i] = tile[i * kLanes + k];
    }
  }
  for (; r < g; ++r) {
    for (std::size_t p = 0; p < npanels; ++p) {
      tile_row(index.row(r).data(), dim, panels.data() + p * dim * kLanes, tile);
      const std::size_t lanes = std::min(kLanes, b - p * kLanes);
      for (std::size_t k = 0; k < lanes; ++k) scores[(p * kLanes + k) * g + r] = tile[k];
    }
  }
}

}  // namespace

RankedRun batch_retrieve(const GalleryIndex& index, std::span<const std::string> query_ids,
                         std::span<const double> queries, std::size_t n, std::size_t workers) {
  if (n == 0) raise(ErrorCode::contract, "batch_retrieve: N must be >= 1");
  const std::size_t dim = index.dim();
  if (queries.size() != query_ids.size() * dim) {
    raise(ErrorCode::consistency, "batch_retrieve: query matrix does not match " + std::to_string(query_ids.size()) +
                                      " queries of width " + std::to_string(dim));
  }
  const std::size_t count = query_ids.size();
  RankedRun run(count);
  if (count == 0) return run;
  // Validate every query up front so failures do not depend on scheduling.
  std::vector<std::vector<double>> unit(count);
  for (std::size_t i = 0; i < count; ++i) unit[i] = normalized(queries.subspan(i * dim, dim));

  auto work = [&](std::size_t begin, std::size_t end) {
    std::vector<double> scores, panels;
    for (std::size_t start = begin; start < end; start += kQueryBlock) {
      const std::size_t b = std::min(end, start + kQueryBlock) - start;
      score_block(index, unit.data() + start, b, panels, scores);
      for (std::size_t k = 0; k < b; ++k) {
        run[start + k].query = query_ids[start + k];
        run[start + k].hits = select_top(index, scores.data() + k * index.size(), n);
      }
    }
  };

  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    work(0, count);
    return run;
  }
  std::vector<std::thread> threads;
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk, end = std::min(count, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back(work, begin, end);
  }
  for (auto& t : threads) t.join();
  return run;
}

std::string format_score(double score) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", score);
  return buf;
}

void write_run(std::ostream& out, const RankedRun& run) {
  for (const auto& q : run) {
    out << "{\"query\":" << nlohmann::json(q.query).dump() << ",\"results\":[";
    for (std::size_t i = 0; i < q.hits.size(); ++i) {
      if (i) out << ',';
      out << "{\"id\":" << nlohmann::json(q.hits[i].id).dump() << ",\"score\":" << format_score(q.hits[i].score) << '}';
    }
    out << "]}\n";
  }
  if (!out) raise(ErrorCode::io, "run file: write failed");
}

RankedRun read_run(std::istream& in) {
  RankedRun run;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      QueryResult q;
      q.query = j.at("query").get<std::string>();
      for (const auto& r : j.at("results")) q.hits.push_back({r.at("id").get<std::string>(), r.at("score").get<double>()});
      run.push_back(std::move(q));
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::format, "run file line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return run;
}

void save_run(const std::string& path, const RankedRun& run) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::io, "cannot open '" + path + "' for writing");
  write_run(out, run);
}

RankedRun load_run(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::io, "cannot open '" + path + "'");
  return read_run(in);
}

}  // namespace ege
