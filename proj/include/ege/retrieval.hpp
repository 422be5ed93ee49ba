#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace ege {

/// Exact cosine-similarity index over single-product embeddings. Rows are
/// L2-normalised at build time; the index is immutable afterwards.
class GalleryIndex {
 public:
  static GalleryIndex build(std::vector<std::string> ids, std::span<const double> rows, std::size_t dim);
  static GalleryIndex build(std::vector<std::string> ids, std::span<const float> rows, std::size_t dim);

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  std::span<const double> row(std::size_t i) const { return {matrix_.data() + i * dim_, dim_}; }
  // Position of ids()[i] in ascending id order; the tie-break key.
  std::size_t id_rank(std::size_t i) const { return id_rank_[i]; }

 private:
  GalleryIndex() = default;
  std::vector<std::string> ids_;
  std::vector<double> matrix_;
  std::vector<std::size_t> id_rank_;
  std::size_t dim_ = 0;
};

struct Hit {
  std::string id;
  double score = 0.0;
  bool operator==(const Hit&) const = default;
};

struct QueryResult {
  std::string query;
  std::vector<Hit> hits;
  bool operator==(const QueryResult&) const = default;
};

using RankedRun = std::vector<QueryResult>;

/// Top-min(n, G) gallery rows by cosine similarity; ties go to the smaller id.
std::vector<Hit> query_topn(const GalleryIndex& index, std::span<const double> query, std::size_t n);

/// query_topn for every row of `queries` ([ids.size() x dim], row-major), split
/// across `workers` threads. Output is independent of the worker count.
RankedRun batch_retrieve(const GalleryIndex& index, std::span<const std::string> query_ids,
                         std::span<const double> queries, std::size_t n, std::size_t workers = 1);

// JSON lines: {"query": id, "results": [{"id": ..., "score": ...}, ...]}, scores
// with 9 significant digits.
void write_run(std::ostream& out, const RankedRun& run);
RankedRun read_run(std::istream& in);
void save_run(const std::string& path, const RankedRun& run);
RankedRun load_run(const std::string& path);
std::string format_score(double score);

}  // namespace ege
