#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "ege/retrieval.hpp"

namespace ege {

using CategoryCounts = std::map<std::string, std::size_t>;

/// Category-level relevance: each query lists its product categories with
/// instance counts; each gallery id carries one category label.
class GroundTruth {
 public:
  GroundTruth() = default;
  GroundTruth(std::map<std::string, CategoryCounts> queries, std::map<std::string, std::string> gallery);

  const CategoryCounts& query(const std::string& id) const;
  bool has_query(const std::string& id) const { return queries_.count(id) != 0; }
  const std::string& gallery_label(const std::string& gallery_id) const;
  std::size_t gallery_count(const std::string& category) const;  // G_c
  std::size_t relevant_total(const std::string& query_id) const;  // m_q

  const std::map<std::string, CategoryCounts>& queries() const { return queries_; }
  const std::map<std::string, std::string>& gallery() const { return gallery_; }

 private:
  std::map<std::string, CategoryCounts> queries_;
  std::map<std::string, std::string> gallery_;
  std::map<std::string, std::size_t> per_category_;
};

double prec_at_n(const QueryResult& row, const GroundTruth& gt, std::size_t n);
double ap_at_n(const QueryResult& row, const GroundTruth& gt, std::size_t n);
double ar_at_n(const QueryResult& row, const GroundTruth& gt, std::size_t n);

inline const std::vector<std::size_t> kDefaultCutoffs = {10, 50, 100};

struct MetricReport {
  std::vector<std::size_t> cutoffs;
  std::map<std::size_t, double> map, mar, prec;
  std::size_t queries = 0;
};

MetricReport evaluate_run(const RankedRun& run, const GroundTruth& gt,
                          const std::vector<std::size_t>& cutoffs = kDefaultCutoffs);

// {"mAP": {"10": v, ...}, "mAR": {...}, "Prec": {...}}
std::string report_json(const MetricReport& report);
// Aligned table with 4-decimal values, followed by the same numbers at 2 decimals.
std::string report_table(const MetricReport& report);

// {query_id: {category: count}}
std::map<std::string, CategoryCounts> read_ground_truth(std::istream& in);
std::map<std::string, CategoryCounts> load_ground_truth(const std::string& path);
void write_ground_truth(std::ostream& out, const std::map<std::string, CategoryCounts>& gt);

}  // namespace ege
