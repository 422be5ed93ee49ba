#include "ege/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ege/error.hpp"

namespace ege {

GroundTruth::GroundTruth(std::map<std::string, CategoryCounts> queries, std::map<std::string, std::string> gallery)
    : queries_(std::move(queries)), gallery_(std::move(gallery)) {
  for (const auto& [qid, counts] : queries_) {
    std::size_t total = 0;
    for (const auto& [cat, n] : counts) total += n;
    if (total == 0) raise(ErrorCode::contract, "ground truth: query '" + qid + "' has no product instances");
  }
  for (const auto& [gid, cat] : gallery_) ++per_category_[cat];
}

const CategoryCounts& GroundTruth::query(const std::string& id) const {
  auto it = queries_.find(id);
  if (it == queries_.end()) raise(ErrorCode::contract, "unknown query id '" + id + "'");
  return it->second;
}

const std::string& GroundTruth::gallery_label(const std::string& gallery_id) const {
  auto it = gallery_.find(gallery_id);
  if (it == gallery_.end()) raise(ErrorCode::contract, "unknown gallery id '" + gallery_id + "'");
  return it->second;
}

std::size_t GroundTruth::gallery_count(const std::string& category) const {
  auto it = per_category_.find(category);
  return it == per_category_.end() ? 0 : it->second;
}

std::size_t GroundTruth::relevant_total(const std::string& query_id) const {
  std::size_t m = 0;
  for (const auto& [cat, n] : query(query_id))
    if (n > 0) m += gallery_count(cat);
  return m;
}

namespace {

void check_cutoff(std::size_t n) {
  if (n == 0) raise(ErrorCode::contract, "metric cutoff N must be >= 1");
}

// Correctness of the first min(n, |row|) predictions.
std::vector<bool> hits(const QueryResult& row, const GroundTruth& gt, std::size_t n) {
  const auto& cats = gt.query(row.query);
  const std::size_t len = std::min(n, row.hits.size());
  std::vector<bool> out(len);
  for (std::size_t i = 0; i < len; ++i) {
    auto it = cats.find(gt.gallery_label(row.hits[i].id));
    out[i] = it != cats.end() && it->second > 0;
  }
  return out;
}

}  // namespace

double prec_at_n(const QueryResult& row, const GroundTruth& gt, std::size_t n) {
  check_cutoff(n);
  const auto h = hits(row, gt, n);
  const auto correct = static_cast<std::size_t>(std::count(h.begin(), h.end(), true));
  return static_cast<double>(correct) / static_cast<double>(n);
}

double ap_at_n(const QueryResult& row, const GroundTruth& gt, std::size_t n) {
  check_cutoff(n);
  const std::size_t m = gt.relevant_total(row.query);
  if (m == 0) raise(ErrorCode::contract, "query '" + row.query + "' has no relevant gallery items; AP is undefined");
  const auto h = hits(row, gt, n);
  double sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t k = 0; k < h.size(); ++k) {
    if (!h[k]) continue;
    ++correct;
    sum += static_cast<double>(correct) / static_cast<double>(k + 1);
  }
  return sum / static_cast<double>(std::min(m, n));
}

double ar_at_n(const QueryResult& row, const GroundTruth& gt, std::size_t n) {
  check_cutoff(n);
  const auto& cats = gt.query(row.query);
  std::size_t instances = 0, present = 0;
  for (const auto& [cat, count] : cats) {
    instances += count;
    if (count > 0) ++present;
  }
  std::map<std::string, std::size_t> retrieved;
  const std::size_t len = std::min(n, row.hits.size());
  for (std::size_t i = 0; i < len; ++i) ++retrieved[gt.gallery_label(row.hits[i].id)];

  double sum = 0.0;
  for (const auto& [cat, count] : cats) {
    if (count == 0) continue;
    // floor(r * N) with r = count / instances, in integers.
    const std::size_t wanted = std::min(count * n / instances, gt.gallery_count(cat));
    if (wanted == 0) {
      sum += 1.0;
      continue;
    }
    auto it = retrieved.find(cat);
    const std::size_t got = it == retrieved.end() ? 0 : it->second;
    sum += std::min(1.0, static_cast<double>(got) / static_cast<double>(wanted));
  }
  return sum / static_cast<double>(present);
}

MetricReport evaluate_run(const RankedRun& run, const GroundTruth& gt, const std::vector<std::size_t>& cutoffs) {
  if (cutoffs.empty()) raise(ErrorCode::contract, "evaluate: no cutoffs given");
  for (std::size_t n : cutoffs) check_cutoff(n);
  if (run.empty()) raise(ErrorCode::empty_input, "evaluate: run has no queries");
  MetricReport r;
  r.cutoffs = cutoffs;
  r.queries = run.size();
  for (const auto& row : run) gt.query(row.query);
  for (std::size_t n : cutoffs) {
    double ap = 0.0, ar = 0.0, pr = 0.0;
    for (const auto& row : run) {
      ap += ap_at_n(row, gt, n);
      ar += ar_at_n(row, gt, n);
      pr += prec_at_n(row, gt, n);
    }
    const auto q = static_cast<double>(run.size());
    r.map[n] = ap / q;
    r.mar[n] = ar / q;
    r.prec[n] = pr / q;
  }
  return r;
}

std::string report_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  auto fill = [&](const char* name, const std::map<std::size_t, double>& values) {
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (std::size_t n : report.cutoffs) m[std::to_string(n)] = values.at(n);
    j[name] = m;
  };
  fill("mAP", report.map);
  fill("mAR", report.mar);
  fill("Prec", report.prec);
  return j.dump(2);
}

std::string report_table(const MetricReport& report) {
  std::ostringstream out;
  auto emit = [&](int decimals) {
    char buf[64];
    out << "metric";
    for (std::size_t n : report.cutoffs) {
      std::snprintf(buf, sizeof buf, "%10s", ("@" + std::to_string(n)).c_str());
      out << buf;
    }
    out << '\n';
    const std::pair<const char*, const std::map<std::size_t, double>*> rows[] = {
        {"mAP", &report.map}, {"mAR", &report.mar}, {"Prec", &report.prec}};
    for (const auto& [name, values] : rows) {
      std::snprintf(buf, sizeof buf, "%-6s", name);
      out << buf;
      for (std::size_t n : report.cutoffs) {
        std::snprintf(buf, sizeof buf, "%10.*f", decimals, values->at(n));
        out << buf;
      }
      out << '\n';
    }
  };
  emit(4);
  out << '\n';
  emit(2);
  return out.str();
}

std::map<std::string, CategoryCounts> read_ground_truth(std::istream& in) {
  std::map<std::string, CategoryCounts> out;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::format, std::string("ground truth: ") + e.what());
  }
  if (!j.is_object()) raise(ErrorCode::format, "ground truth: expected an object keyed by query id");
  for (const auto& [qid, cats] : j.items()) {
    if (!cats.is_object()) raise(ErrorCode::format, "ground truth: entry for '" + qid + "' is not an object");
    CategoryCounts counts;
    for (const auto& [cat, n] : cats.items()) {
      if (!n.is_number_unsigned()) {
        raise(ErrorCode::format, "ground truth: count for '" + qid + "'/'" + cat + "' must be a non-negative integer");
      }
      counts[cat] = n.get<std::size_t>();
    }
    out.emplace(qid, std::move(counts));
  }
  return out;
}

std::map<std::string, CategoryCounts> load_ground_truth(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::io, "cannot open '" + path + "'");
  return read_ground_truth(in);
}

void write_ground_truth(std::ostream& out, const std::map<std::string, CategoryCounts>& gt) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [qid, counts] : gt) {
    nlohmann::ordered_json c = nlohmann::ordered_json::object();
    for (const auto& [cat, n] : counts) c[cat] = n;
    j[qid] = c;
  }
  out << j.dump(1) << '\n';
  if (!out) raise(ErrorCode::io, "ground truth: write failed");
}

}  // namespace ege
