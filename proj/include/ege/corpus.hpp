#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ege/metrics.hpp"
#include "ege/model.hpp"

namespace ege {

// ---- embedding files -------------------------------------------------------------
//
// "EGEV" | u32 version | u32 rows | u32 dim | rows*dim f32, little-endian.

inline constexpr std::uint32_t kEmbeddingVersion = 1;
inline constexpr std::size_t kEmbeddingHeaderBytes = 16;

struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<float> data;  // row-major

  std::vector<double> widened() const { return {data.begin(), data.end()}; }
  bool operator==(const EmbeddingMatrix&) const = default;
};

EmbeddingMatrix make_embeddings(std::size_t rows, std::size_t dim, const std::vector<double>& values);
void write_embeddings(std::ostream& out, const EmbeddingMatrix& m);
EmbeddingMatrix read_embeddings(std::istream& in, const std::string& what = "embedding file");
void save_embeddings(const std::string& path, const EmbeddingMatrix& m);
EmbeddingMatrix load_embeddings(const std::string& path);
// Header only: {rows, dim}.
std::pair<std::size_t, std::size_t> peek_embeddings(const std::string& path);

// ---- manifests ---------------------------------------------------------------------

struct FeatureRef {
  std::string file;  // relative to the manifest's directory
  std::size_t row_offset = 0;
  std::size_t row_count = 0;
  bool operator==(const FeatureRef&) const = default;
};

struct ManifestRecord {
  std::string id;
  std::string kind;  // "single" | "multi"
  std::vector<TokenId> caption;
  std::vector<std::vector<TokenId>> entities;
  std::vector<std::string> categories;
  FeatureRef features;
  std::optional<FeatureRef> positions;  // region boxes; zeros when absent
  bool operator==(const ManifestRecord&) const = default;
};

using Manifest = std::vector<ManifestRecord>;

// Syntax and record-level checks only; feature references are not resolved.
Manifest read_manifest(std::istream& in, const std::string& what = "manifest");
void write_manifest(std::ostream& out, const Manifest& manifest);
// read_manifest plus resolution of every feature reference against the files next
// to the manifest.
Manifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const Manifest& manifest);

// Materialises model inputs. Features must be prop_dim wide and positions pos_dim
// wide, otherwise a consistency error names the record.
std::vector<Sample> load_samples(const Manifest& manifest, const std::string& base_dir, std::size_t prop_dim,
                                 std::size_t pos_dim);

// Gallery id -> first category label.
std::map<std::string, std::string> gallery_labels(const Manifest& gallery);

// ---- vocabulary -------------------------------------------------------------------
// One token per line; the zero-based line index is the token id.

std::vector<std::string> read_vocabulary(std::istream& in);
void write_vocabulary(std::ostream& out, const std::vector<std::string>& vocab);
std::vector<std::string> load_vocabulary(const std::string& path);

// ---- synthetic corpus -----------------------------------------------------------

struct SynthConfig {
  std::size_t n_categories = 16;
  std::size_t n_single = 64;  // gallery size
  std::size_t n_multi = 32;   // query count
  std::size_t n_train = 200;
  std::size_t max_products_per_multi = 4;
  std::size_t regions_per_product = 2;
  std::size_t prop_dim = 32;
  std::size_t pos_dim = 5;
  std::size_t vocab_size = 128;
  std::size_t entity_vocab = 16;
  double noise_sigma = 0.05;
  double train_multi_fraction = 0.25;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

struct SplitData {
  Manifest manifest;
  EmbeddingMatrix features;
  EmbeddingMatrix positions;
};

struct SyntheticCorpus {
  SynthConfig config;
  std::vector<std::string> vocabulary;
  EmbeddingMatrix prototypes;  // [n_categories x prop_dim]
  std::vector<TokenId> entity_tokens;  // per category
  SplitData train, gallery, query;
  std::map<std::string, CategoryCounts> ground_truth;
};

std::string category_name(std::size_t c);

SyntheticCorpus generate_synthetic_corpus(const SynthConfig& config);

// corpus.json, vocab.txt, {train,gallery,query}.jsonl, *_features.egev,
// *_positions.egev, ground_truth.json
void write_corpus(const std::string& dir, const SyntheticCorpus& corpus);

}  // namespace ege
