#include "ege/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "binary_io.hpp"
#include "ege/error.hpp"

namespace ege {

namespace fs = std::filesystem;

namespace {

constexpr char kEmbeddingMagic[4] = {'E', 'G', 'E', 'V'};

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::io, "cannot open '" + path + "' for writing");
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::io, "cannot open '" + path + "'");
  return in;
}

}  // namespace

// ---- embedding files -------------------------------------------------------------

EmbeddingMatrix make_embeddings(std::size_t rows, std::size_t dim, const std::vector<double>& values) {
  if (values.size() != rows * dim) raise(ErrorCode::dimension, "embedding matrix: value count does not match shape");
  EmbeddingMatrix m;
  m.rows = rows;
  m.dim = dim;
  m.data.assign(values.begin(), values.end());
  return m;
}

void write_embeddings(std::ostream& out, const EmbeddingMatrix& m) {
  if (m.rows == 0 || m.dim == 0) raise(ErrorCode::empty_input, "embedding file: refusing to write an empty matrix");
  if (m.data.size() != m.rows * m.dim) raise(ErrorCode::dimension, "embedding file: data size does not match shape");
  if (m.rows > UINT32_MAX || m.dim > UINT32_MAX) raise(ErrorCode::dimension, "embedding file: matrix too large");
  out.write(kEmbeddingMagic, 4);
  binary::put_u32(out, kEmbeddingVersion);
  binary::put_u32(out, static_cast<std::uint32_t>(m.rows));
  binary::put_u32(out, static_cast<std::uint32_t>(m.dim));
  for (float v : m.data) binary::put_f32(out, v);
  if (!out) raise(ErrorCode::io, "embedding file: write failed");
}

namespace {

std::pair<std::size_t, std::size_t> read_header(binary::Reader& r, const std::string& what) {
  char magic[4];
  r.read(magic, 4);
  if (!std::equal(magic, magic + 4, kEmbeddingMagic)) raise(ErrorCode::format, what + ": bad magic at byte offset 0");
  const auto version = r.u32();
  if (version != kEmbeddingVersion) {
    raise(ErrorCode::format, what + ": unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  const std::size_t rows = r.u32();
  const std::size_t dim = r.u32();
  return {rows, dim};
}

}  // namespace

EmbeddingMatrix read_embeddings(std::istream& in, const std::string& what) {
  binary::Reader r(in, what);
  const auto [rows, dim] = read_header(r, what);
  const std::size_t expected = kEmbeddingHeaderBytes + 4 * rows * dim;
  EmbeddingMatrix m;
  m.rows = rows;
  m.dim = dim;
  m.data.resize(rows * dim);
  std::vector<char> body(4 * rows * dim);
  in.read(body.data(), static_cast<std::streamsize>(body.size()));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != body.size()) {
    raise(ErrorCode::format, what + ": truncated body, expected " + std::to_string(expected) + " bytes but file ends at byte offset " +
                                 std::to_string(kEmbeddingHeaderBytes + got));
  }
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 3; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(body[4 * i + static_cast<std::size_t>(b)]);
    m.data[i] = std::bit_cast<float>(bits);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    raise(ErrorCode::format, what + ": trailing bytes after byte offset " + std::to_string(expected) +
                                 " (expected length " + std::to_string(expected) + ")");
  }
  return m;
}

void save_embeddings(const std::string& path, const EmbeddingMatrix& m) {
  auto out = open_out(path);
  write_embeddings(out, m);
}

EmbeddingMatrix load_embeddings(const std::string& path) {
  auto in = open_in(path);
  return read_embeddings(in, "'" + path + "'");
}

std::pair<std::size_t, std::size_t> peek_embeddings(const std::string& path) {
  auto in = open_in(path);
  binary::Reader r(in, "'" + path + "'");
  const auto shape = read_header(r, "'" + path + "'");
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  const std::size_t expected = kEmbeddingHeaderBytes + 4 * shape.first * shape.second;
  if (!ec && size != expected) {
    raise(ErrorCode::format, "'" + path + "': file is " + std::to_string(size) + " bytes, header implies " +
                                 std::to_string(expected));
  }
  return shape;
}

// ---- manifests ---------------------------------------------------------------------

namespace {

using ordered = nlohmann::ordered_json;

ordered ref_json(const FeatureRef& r) {
  ordered j;
  j["file"] = r.file;
  j["row_offset"] = r.row_offset;
  j["row_count"] = r.row_count;
  return j;
}

FeatureRef parse_ref(const nlohmann::json& j) {
  FeatureRef r;
  r.file = j.at("file").get<std::string>();
  r.row_offset = j.at("row_offset").get<std::size_t>();
  r.row_count = j.at("row_count").get<std::size_t>();
  return r;
}

std::vector<TokenId> parse_tokens(const nlohmann::json& j) {
  std::vector<TokenId> out;
  for (const auto& t : j) {
    if (!t.is_number_integer() || t.get<long long>() < 0 || t.get<long long>() > INT32_MAX) {
      throw std::invalid_argument("token ids must be non-negative integers");
    }
    out.push_back(t.get<TokenId>());
  }
  return out;
}

}  // namespace

Manifest read_manifest(std::istream& in, const std::string& what) {
  Manifest out;
  std::unordered_map<std::string, std::size_t> first_line;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = what + " line " + std::to_string(line_no);
    ManifestRecord rec;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw std::invalid_argument("record is not an object");
      for (const auto& [key, _] : j.items()) {
        static const std::set<std::string> known = {"id",         "kind",         "caption",      "entities",
                                                    "categories", "features_ref", "positions_ref"};
        if (!known.count(key)) throw std::invalid_argument("unknown field '" + key + "'");
      }
      rec.id = j.at("id").get<std::string>();
      rec.kind = j.at("kind").get<std::string>();
      rec.caption = parse_tokens(j.at("caption"));
      for (const auto& e : j.at("entities")) rec.entities.push_back(parse_tokens(e));
      if (j.contains("categories")) rec.categories = j.at("categories").get<std::vector<std::string>>();
      rec.features = parse_ref(j.at("features_ref"));
      if (j.contains("positions_ref")) rec.positions = parse_ref(j.at("positions_ref"));
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::format, where + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      raise(ErrorCode::format, where + ": " + e.what());
    }
    if (rec.id.empty()) raise(ErrorCode::format, where + ": empty id");
    if (rec.kind != "single" && rec.kind != "multi") {
      raise(ErrorCode::format, where + ": kind must be \"single\" or \"multi\", got \"" + rec.kind + "\"");
    }
    if (rec.features.row_count == 0) raise(ErrorCode::format, where + ": features_ref.row_count must be >= 1");
    if (rec.positions && rec.positions->row_count != rec.features.row_count) {
      raise(ErrorCode::consistency, where + ": positions_ref and features_ref disagree on row count");
    }
    auto [it, inserted] = first_line.emplace(rec.id, line_no);
    if (!inserted) {
      raise(ErrorCode::contract, where + ": duplicate id '" + rec.id + "' (first seen on line " +
                                     std::to_string(it->second) + ")");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

void write_manifest(std::ostream& out, const Manifest& manifest) {
  for (const auto& r : manifest) {
    ordered j;
    j["id"] = r.id;
    j["kind"] = r.kind;
    j["caption"] = r.caption;
    j["entities"] = r.entities;
    j["categories"] = r.categories;
    j["features_ref"] = ref_json(r.features);
    if (r.positions) j["positions_ref"] = ref_json(*r.positions);
    out << j.dump() << '\n';
  }
  if (!out) raise(ErrorCode::io, "manifest: write failed");
}

Manifest load_manifest(const std::string& path) {
  auto in = open_in(path);
  Manifest m = read_manifest(in, "'" + path + "'");
  const fs::path base = fs::path(path).parent_path();
  std::map<std::string, std::pair<std::size_t, std::size_t>> shapes;
  auto rows_of = [&](const std::string& file) {
    auto it = shapes.find(file);
    if (it == shapes.end()) it = shapes.emplace(file, peek_embeddings((base / file).string())).first;
    return it->second.first;
  };
  // Line numbers are recounted so diagnostics match the file.
  std::size_t line_no = 0, rec = 0;
  in.clear();
  in.seekg(0);
  std::string line;
  while (rec < m.size() && std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto& r = m[rec++];
    for (const FeatureRef* ref : {&r.features, r.positions ? &*r.positions : nullptr}) {
      if (!ref) continue;
      const std::size_t rows = rows_of(ref->file);
      if (ref->row_offset + ref->row_count > rows) {
        raise(ErrorCode::consistency, "'" + path + "' line " + std::to_string(line_no) + ": reference to rows [" +
                                          std::to_string(ref->row_offset) + ", " +
                                          std::to_string(ref->row_offset + ref->row_count) + ") of '" + ref->file +
                                          "' which has " + std::to_string(rows) + " rows");
      }
    }
  }
  return m;
}

void save_manifest(const std::string& path, const Manifest& manifest) {
  auto out = open_out(path);
  write_manifest(out, manifest);
}

std::vector<Sample> load_samples(const Manifest& manifest, const std::string& base_dir, std::size_t prop_dim,
                                 std::size_t pos_dim) {
  std::map<std::string, EmbeddingMatrix> files;
  auto file = [&](const std::string& name) -> const EmbeddingMatrix& {
    auto it = files.find(name);
    if (it == files.end()) it = files.emplace(name, load_embeddings((fs::path(base_dir) / name).string())).first;
    return it->second;
  };
  auto rows = [&](const ManifestRecord& r, const FeatureRef& ref, std::size_t width, const char* what) {
    const auto& m = file(ref.file);
    if (m.dim != width) {
      raise(ErrorCode::consistency, "record '" + r.id + "': " + what + " file '" + ref.file + "' is " +
                                        std::to_string(m.dim) + " wide, model expects " + std::to_string(width));
    }
    if (ref.row_offset + ref.row_count > m.rows) {
      raise(ErrorCode::consistency, "record '" + r.id + "': " + what + " rows out of range in '" + ref.file + "'");
    }
    const auto begin = m.data.begin() + static_cast<std::ptrdiff_t>(ref.row_offset * width);
    return Tensor({ref.row_count, width}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(ref.row_count * width)));
  };
  std::vector<Sample> out;
  out.reserve(manifest.size());
  for (const auto& r : manifest) {
    Sample s;
    s.id = r.id;
    s.proposals = rows(r, r.features, prop_dim, "feature");
    s.positions = r.positions ? rows(r, *r.positions, pos_dim, "position")
                              : Tensor::zeros({r.features.row_count, pos_dim});
    s.caption = r.caption;
    s.entities = r.entities;
    s.categories = r.categories;
    out.push_back(std::move(s));
  }
  return out;
}

std::map<std::string, std::string> gallery_labels(const Manifest& gallery) {
  std::map<std::string, std::string> out;
  for (const auto& r : gallery) {
    if (r.categories.empty()) raise(ErrorCode::contract, "gallery record '" + r.id + "' has no category label");
    out[r.id] = r.categories.front();
  }
  return out;
}

// ---- vocabulary -------------------------------------------------------------------

std::vector<std::string> read_vocabulary(std::istream& in) {
  std::vector<std::string> vocab;
  std::unordered_map<std::string, std::size_t> seen;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) raise(ErrorCode::format, "vocabulary line " + std::to_string(vocab.size() + 1) + ": empty token");
    auto [it, inserted] = seen.emplace(line, vocab.size() + 1);
    if (!inserted) {
      raise(ErrorCode::format, "vocabulary line " + std::to_string(vocab.size() + 1) + ": token '" + line +
                                   "' already defined on line " + std::to_string(it->second));
    }
    vocab.push_back(line);
  }
  return vocab;
}

void write_vocabulary(std::ostream& out, const std::vector<std::string>& vocab) {
  for (const auto& t : vocab) out << t << '\n';
  if (!out) raise(ErrorCode::io, "vocabulary: write failed");
}

std::vector<std::string> load_vocabulary(const std::string& path) {
  auto in = open_in(path);
  return read_vocabulary(in);
}

// ---- synthetic corpus -----------------------------------------------------------

void SynthConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) raise(ErrorCode::config, std::string("synth.") + name + " must be >= 1");
  };
  positive(n_categories, "n_categories");
  positive(n_single, "n_single");
  positive(n_multi, "n_multi");
  positive(n_train, "n_train");
  positive(regions_per_product, "regions_per_product");
  positive(prop_dim, "prop_dim");
  positive(pos_dim, "pos_dim");
  positive(entity_vocab, "entity_vocab");
  if (max_products_per_multi < 2) raise(ErrorCode::config, "synth.max_products_per_multi must be >= 2");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) raise(ErrorCode::config, "synth.noise_sigma must be >= 0");
  if (!(train_multi_fraction >= 0.0 && train_multi_fraction <= 1.0)) {
    raise(ErrorCode::config, "synth.train_multi_fraction must lie in [0, 1]");
  }
  if (entity_vocab < n_categories) {
    raise(ErrorCode::config, "synth.entity_vocab (" + std::to_string(entity_vocab) +
                                 ") cannot host one entity token per category (" + std::to_string(n_categories) + ")");
  }
  // specials + entity tokens + two descriptors per category + one distractor
  const std::size_t needed = static_cast<std::size_t>(kFirstRegularToken) + entity_vocab + 2 * n_categories + 1;
  if (vocab_size < needed) {
    raise(ErrorCode::config, "synth.vocab_size " + std::to_string(vocab_size) + " is too small to host the entity and descriptor tokens (need " +
                                 std::to_string(needed) + ")");
  }
}

std::string category_name(std::size_t c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cat%02zu", c);
  return buf;
}

namespace {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }
  // Box-Muller on raw generator bits so the stream is identical on every platform.
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 gen_;
};

struct Builder {
  const SynthConfig& cfg;
  const SyntheticCorpus& corpus;
  Rng& rng;
  std::string prefix;  // file prefix, e.g. "train"
  SplitData split;
  std::vector<double> features, positions;

  TokenId desc(std::size_t c, std::size_t which) const {
    return kFirstRegularToken + static_cast<TokenId>(cfg.entity_vocab + 2 * c + which);
  }
  TokenId distractor() {
    const std::size_t first = static_cast<std::size_t>(kFirstRegularToken) + cfg.entity_vocab + 2 * cfg.n_categories;
    return static_cast<TokenId>(first + rng.below(cfg.vocab_size - first));
  }
  std::vector<TokenId> entity(std::size_t c) const { return {desc(c, 0), corpus.entity_tokens[c]}; }

  void add_region(std::size_t c) {
    for (std::size_t j = 0; j < cfg.prop_dim; ++j) {
      const double v = static_cast<double>(corpus.prototypes.data[c * cfg.prop_dim + j]) + cfg.noise_sigma * rng.normal();
      features.push_back(v);
    }
    // x1, y1, x2, y2, area in [0, 1]; any extra slots stay zero.
    const double x1 = 0.5 * rng.uniform(), y1 = 0.5 * rng.uniform();
    const double w = 0.2 + 0.3 * rng.uniform(), h = 0.2 + 0.3 * rng.uniform();
    const double box[5] = {x1, y1, x1 + w, y1 + h, w * h};
    for (std::size_t j = 0; j < cfg.pos_dim; ++j) positions.push_back(j < 5 ? box[j] : 0.0);
  }

  void add(ManifestRecord rec, const std::vector<std::size_t>& products) {
    const std::size_t offset = features.size() / cfg.prop_dim;
    for (std::size_t c : products)
      for (std::size_t r = 0; r < cfg.regions_per_product; ++r) add_region(c);
    const std::size_t count = products.size() * cfg.regions_per_product;
    rec.features = {prefix + "_features.egev", offset, count};
    rec.positions = FeatureRef{prefix + "_positions.egev", offset, count};
    split.manifest.push_back(std::move(rec));
  }

  void single(const std::string& id, std::size_t c, bool labelled) {
    ManifestRecord rec;
    rec.id = id;
    rec.kind = "single";
    rec.caption = {desc(c, 0), corpus.entity_tokens[c], desc(c, 1)};
    rec.entities = {entity(c)};
    if (labelled) rec.categories = {category_name(c)};
    add(std::move(rec), {c});
  }

  // Returns the per-category instance counts.
  CategoryCounts multi(const std::string& id, bool labelled) {
    const std::size_t k = 2 + rng.below(cfg.max_products_per_multi - 1);
    std::vector<std::size_t> products(k);
    for (auto& p : products) p = rng.below(cfg.n_categories);
    std::vector<std::size_t> distinct;
    CategoryCounts counts;
    for (std::size_t c : products) {
      if (!counts.count(category_name(c))) distinct.push_back(c);
      ++counts[category_name(c)];
    }
    ManifestRecord rec;
    rec.id = id;
    rec.kind = "multi";
    for (std::size_t c : distinct) {
      rec.caption.push_back(desc(c, 0));
      rec.caption.push_back(corpus.entity_tokens[c]);
      rec.entities.push_back(entity(c));
    }
    for (int d = 0; d < 2; ++d) {
      const std::size_t at = rng.below(rec.caption.size() + 1);
      rec.caption.insert(rec.caption.begin() + static_cast<std::ptrdiff_t>(at), distractor());
    }
    if (labelled)
      for (std::size_t c : distinct) rec.categories.push_back(category_name(c));
    add(std::move(rec), products);
    return counts;
  }

  void finish() {
    const std::size_t rows = features.size() / cfg.prop_dim;
    split.features = make_embeddings(rows, cfg.prop_dim, features);
    split.positions = make_embeddings(rows, cfg.pos_dim, positions);
  }
};

std::string numbered(char prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%05zu", prefix, i);
  return buf;
}

}  // namespace

SyntheticCorpus generate_synthetic_corpus(const SynthConfig& cfg) {
  cfg.validate();
  SyntheticCorpus corpus;
  corpus.config = cfg;
  Rng rng(cfg.seed);

  auto& vocab = corpus.vocabulary;
  vocab = {"[PAD]", "[MASK]", "[SEP]", "[UNK]"};
  for (std::size_t e = 0; e < cfg.entity_vocab; ++e) vocab.push_back("ent" + std::to_string(e));
  for (std::size_t c = 0; c < cfg.n_categories; ++c) {
    vocab.push_back("style" + std::to_string(c));
    vocab.push_back("detail" + std::to_string(c));
  }
  for (std::size_t w = 0; vocab.size() < cfg.vocab_size; ++w) vocab.push_back("word" + std::to_string(w));

  for (std::size_t c = 0; c < cfg.n_categories; ++c) corpus.entity_tokens.push_back(kFirstRegularToken + static_cast<TokenId>(c));

  std::vector<double> proto(cfg.n_categories * cfg.prop_dim);
  const double spread = 1.0 / std::sqrt(static_cast<double>(cfg.prop_dim));
  for (auto& v : proto) v = spread * rng.normal();
  corpus.prototypes = make_embeddings(cfg.n_categories, cfg.prop_dim, proto);

  Builder gallery{cfg, corpus, rng, "gallery", {}, {}, {}};
  for (std::size_t i = 0; i < cfg.n_single; ++i) gallery.single(numbered('g', i), i % cfg.n_categories, true);
  gallery.finish();

  Builder query{cfg, corpus, rng, "query", {}, {}, {}};
  for (std::size_t i = 0; i < cfg.n_multi; ++i) {
    const auto id = numbered('q', i);
    corpus.ground_truth[id] = query.multi(id, true);
  }
  query.finish();

  Builder train{cfg, corpus, rng, "train", {}, {}, {}};
  for (std::size_t i = 0; i < cfg.n_train; ++i) {
    if (rng.uniform() < cfg.train_multi_fraction) {
      train.multi(numbered('t', i), false);
    } else {
      train.single(numbered('t', i), rng.below(cfg.n_categories), false);
    }
  }
  train.finish();

  corpus.gallery = std::move(gallery.split);
  corpus.query = std::move(query.split);
  corpus.train = std::move(train.split);
  return corpus;
}

void write_corpus(const std::string& dir, const SyntheticCorpus& corpus) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) raise(ErrorCode::io, "cannot create directory '" + dir + "': " + ec.message());
  const fs::path base(dir);
  const auto& c = corpus.config;

  ordered meta;
  meta["format"] = "ege-synthetic-corpus";
  ordered cfg;
  cfg["n_categories"] = c.n_categories;
  cfg["n_single"] = c.n_single;
  cfg["n_multi"] = c.n_multi;
  cfg["n_train"] = c.n_train;
  cfg["max_products_per_multi"] = c.max_products_per_multi;
  cfg["regions_per_product"] = c.regions_per_product;
  cfg["prop_dim"] = c.prop_dim;
  cfg["pos_dim"] = c.pos_dim;
  cfg["vocab_size"] = c.vocab_size;
  cfg["entity_vocab"] = c.entity_vocab;
  cfg["noise_sigma"] = c.noise_sigma;
  cfg["train_multi_fraction"] = c.train_multi_fraction;
  cfg["seed"] = c.seed;
  meta["config"] = cfg;
  meta["splits"] = {{"train", corpus.train.manifest.size()},
                    {"gallery", corpus.gallery.manifest.size()},
                    {"query", corpus.query.manifest.size()}};
  {
    auto out = open_out((base / "corpus.json").string());
    out << meta.dump(2) << '\n';
    if (!out) raise(ErrorCode::io, "corpus.json: write failed");
  }
  {
    auto out = open_out((base / "vocab.txt").string());
    write_vocabulary(out, corpus.vocabulary);
  }
  for (const auto& [name, split] : {std::pair<const char*, const SplitData*>{"train", &corpus.train},
                                    {"gallery", &corpus.gallery},
                                    {"query", &corpus.query}}) {
    save_manifest((base / (std::string(name) + ".jsonl")).string(), split->manifest);
    save_embeddings((base / (std::string(name) + "_features.egev")).string(), split->features);
    save_embeddings((base / (std::string(name) + "_positions.egev")).string(), split->positions);
  }
  auto out = open_out((base / "ground_truth.json").string());
  write_ground_truth(out, corpus.ground_truth);
}

}  // namespace ege
