#include "ege/ege.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <new>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ege/config.hpp"
#include "ege/corpus.hpp"
#include "ege/entity_graph.hpp"
#include "ege/error.hpp"
#include "ege/metrics.hpp"
#include "ege/model.hpp"
#include "ege/retrieval.hpp"
#include "ege/selfcheck.hpp"
#include "ege/train.hpp"

struct ege_config {
  ege::RunConfig cfg;
};

struct ege_model {
  ege::ModelState state;
};

struct ege_gallery {
  ege::GalleryIndex index;
};

namespace {

thread_local std::string g_last_error;

ege_status fail(ege_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

// Runs `body`, translating exceptions into a status plus message.
template <typename F>
ege_status guard(F&& body) {
  try {
    body();
    g_last_error.clear();
    return EGE_OK;
  } catch (const ege::Error& e) {
    return fail(static_cast<ege_status>(static_cast<int>(e.code())), e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(EGE_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(EGE_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(EGE_ERR_INTERNAL, e.what());
  }
}

void emit(ege_write_fn write, void* user, const std::string& text) {
  if (write && !text.empty()) write(user, text.data(), text.size());
}

std::string base_dir(const std::string& path) {
  auto parent = std::filesystem::path(path).parent_path();
  return parent.empty() ? std::string(".") : parent.string();
}

std::vector<ege::Sample> samples_from(const std::string& manifest_path, const ege::ModelConfig& mc) {
  auto manifest = ege::load_manifest(manifest_path);
  return ege::load_samples(manifest, base_dir(manifest_path), mc.prop_dim, mc.pos_dim);
}

std::vector<std::string> read_ids(const std::string& path) {
  std::ifstream in(path);
  if (!in) ege::raise(ege::ErrorCode::io, "cannot open id list " + path);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ids.push_back(line);
  }
  return ids;
}

void write_ids(const std::string& path, const std::vector<std::string>& ids) {
  std::ofstream out(path, std::ios::binary);
  if (!out) ege::raise(ege::ErrorCode::io, "cannot write id list " + path);
  for (const auto& id : ids) out << id << '\n';
  if (!out) ege::raise(ege::ErrorCode::io, "failed writing " + path);
}

void check_row_count(const ege::EmbeddingMatrix& m, const std::vector<std::string>& ids, const std::string& what) {
  if (m.rows != ids.size())
    ege::raise(ege::ErrorCode::consistency, what + ": " + std::to_string(m.rows) + " embedding rows but " +
                                                std::to_string(ids.size()) + " ids");
}

}  // namespace

extern "C" {

const char* ege_version(void) { return "0.1.0"; }

const char* ege_last_error(void) { return g_last_error.c_str(); }

const char* ege_status_name(ege_status status) {
  switch (status) {
    case EGE_OK: return "ok";
    case EGE_ERR_INVALID_ARGUMENT: return "invalid argument";
    case EGE_ERR_INTERNAL: return "internal error";
    default: break;
  }
  int code = static_cast<int>(status);
  if (code >= 1 && code <= static_cast<int>(ege::ErrorCode::empty_input))
    return ege::to_string(static_cast<ege::ErrorCode>(code));
  return "unknown";
}

ege_status ege_config_new(ege_config** out) {
  if (!out) return fail(EGE_ERR_INVALID_ARGUMENT, "null output pointer");
  return guard([&] { *out = new ege_config{}; });
}

ege_status ege_config_load(const char* path, ege_config** out) {
  if (!path || !out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_config_load");
  return guard([&] { *out = new ege_config{ege::load_config(path)}; });
}

ege_status ege_config_set(ege_config* config, const char* assignment) {
  if (!config || !assignment) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_config_set");
  return guard([&] {
    ege::RunConfig next = config->cfg;
    ege::set_config_value(next, assignment);
    config->cfg = next;
  });
}

ege_status ege_config_set_seed(ege_config* config, uint64_t seed) {
  if (!config) return fail(EGE_ERR_INVALID_ARGUMENT, "null config");
  config->cfg.seed = seed;
  config->cfg.synth.seed = seed;
  g_last_error.clear();
  return EGE_OK;
}

ege_status ege_config_get_seed(const ege_config* config, uint64_t* out) {
  if (!config || !out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_config_get_seed");
  *out = config->cfg.seed;
  return EGE_OK;
}

ege_status ege_config_get_workers(const ege_config* config, size_t* out) {
  if (!config || !out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_config_get_workers");
  *out = config->cfg.workers;
  return EGE_OK;
}

ege_status ege_config_dump(const ege_config* config, ege_write_fn write, void* user) {
  if (!config || !write) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_config_dump");
  return guard([&] { emit(write, user, ege::dump_config(config->cfg)); });
}

void ege_config_free(ege_config* config) { delete config; }

ege_status ege_synth(const ege_config* config, const char* out_dir, ege_write_fn summary, void* user) {
  if (!config || !out_dir) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_synth");
  return guard([&] {
    ege::SynthConfig sc = config->cfg.synth;
    sc.seed = config->cfg.seed;
    auto corpus = ege::generate_synthetic_corpus(sc);
    std::filesystem::create_directories(out_dir);
    ege::write_corpus(out_dir, corpus);
    std::ostringstream msg;
    msg << "wrote " << corpus.train.manifest.size() << " train, " << corpus.gallery.manifest.size() << " gallery, "
        << corpus.query.manifest.size() << " query records to " << out_dir << "\n";
    emit(summary, user, msg.str());
  });
}

ege_status ege_model_init(const ege_config* config, ege_model** out) {
  if (!config || !out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_model_init");
  return guard([&] {
    config->cfg.validate();
    *out = new ege_model{ege::ModelState::initialize(config->cfg.model, config->cfg.seed)};
  });
}

ege_status ege_model_load(const char* path, ege_model** out) {
  if (!path || !out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_model_load");
  return guard([&] { *out = new ege_model{ege::load_checkpoint(path)}; });
}

ege_status ege_model_save(const ege_model* model, const char* path) {
  if (!model || !path) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_model_save");
  return guard([&] { ege::save_checkpoint(path, model->state); });
}

ege_status ege_model_embedding_dim(const ege_model* model, size_t* out) {
  if (!model || !out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_model_embedding_dim");
  *out = model->state.config().embedding_dim();
  return EGE_OK;
}

ege_status ege_model_parameter_count(const ege_model* model, size_t* out) {
  if (!model || !out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_model_parameter_count");
  *out = model->state.parameter_count();
  return EGE_OK;
}

void ege_model_free(ege_model* model) { delete model; }

ege_status ege_train(const ege_config* config, const char* train_manifest, const char* checkpoint_out,
                     const char* loss_log, ege_write_fn progress, void* user) {
  if (!config || !train_manifest || !checkpoint_out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_train");
  return guard([&] {
    const auto& cfg = config->cfg;
    cfg.validate();
    auto samples = samples_from(train_manifest, cfg.model);
    std::ofstream log;
    if (loss_log) {
      log.open(loss_log, std::ios::binary);
      if (!log) ege::raise(ege::ErrorCode::io, std::string("cannot write loss log ") + loss_log);
      ege::write_loss_header(log);
    }
    const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 10);
    auto result = ege::train_model(cfg, std::move(samples), [&](const ege::StepLog& row) {
      if (log.is_open()) ege::write_loss_row(log, row);
      if (progress && (row.step % every == 0 || row.step + 1 == cfg.train.steps)) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "step %zu/%zu  loss %.6f  lr %.3g\n", row.step + 1, cfg.train.steps,
                      row.report.total, row.lr);
        emit(progress, user, buf);
      }
    });
    if (log.is_open()) {
      log.flush();
      if (!log) ege::raise(ege::ErrorCode::io, std::string("failed writing ") + loss_log);
    }
    ege::save_checkpoint(checkpoint_out, result.state);
  });
}

ege_status ege_embed(const ege_model* model, const char* manifest, const char* embeddings_out, const char* ids_out,
                     size_t workers) {
  if (!model || !manifest || !embeddings_out || !ids_out)
    return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_embed");
  return guard([&] {
    auto samples = samples_from(manifest, model->state.config());
    auto matrix = ege::embed_samples(model->state, samples, workers == 0 ? 1 : workers);
    std::vector<std::string> ids;
    ids.reserve(samples.size());
    for (const auto& s : samples) ids.push_back(s.id);
    ege::save_embeddings(embeddings_out, matrix);
    write_ids(ids_out, ids);
  });
}

ege_status ege_gallery_load(const char* embeddings, const char* ids, ege_gallery** out) {
  if (!embeddings || !ids || !out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_gallery_load");
  return guard([&] {
    auto matrix = ege::load_embeddings(embeddings);
    auto names = read_ids(ids);
    check_row_count(matrix, names, embeddings);
    *out = new ege_gallery{ege::GalleryIndex::build(std::move(names), matrix.data, matrix.dim)};
  });
}

ege_status ege_gallery_size(const ege_gallery* gallery, size_t* out) {
  if (!gallery || !out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_gallery_size");
  *out = gallery->index.size();
  return EGE_OK;
}

void ege_gallery_free(ege_gallery* gallery) { delete gallery; }

ege_status ege_gallery_query(const ege_gallery* gallery, const double* query, size_t dim, size_t n, size_t* indices,
                             double* scores, size_t* count) {
  if (!gallery || !query || !count || (n > 0 && (!indices || !scores)))
    return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_gallery_query");
  return guard([&] {
    const auto& index = gallery->index;
    auto hits = ege::query_topn(index, {query, dim}, n);
    // Hits carry ids; map back to gallery order.
    std::unordered_map<std::string_view, std::size_t> position;
    position.reserve(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) position.emplace(index.ids()[i], i);
    for (std::size_t i = 0; i < hits.size(); ++i) {
      indices[i] = position.at(hits[i].id);
      scores[i] = hits[i].score;
    }
    *count = hits.size();
  });
}

ege_status ege_gallery_id(const ege_gallery* gallery, size_t index, const char** out) {
  if (!gallery || !out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_gallery_id");
  if (index >= gallery->index.size()) return fail(EGE_ERR_INVALID_ARGUMENT, "gallery index out of range");
  *out = gallery->index.ids()[index].c_str();
  return EGE_OK;
}

ege_status ege_retrieve(const ege_gallery* gallery, const char* query_embeddings, const char* query_ids, size_t n,
                        size_t workers, const char* run_out) {
  if (!gallery || !query_embeddings || !query_ids || !run_out)
    return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_retrieve");
  return guard([&] {
    auto matrix = ege::load_embeddings(query_embeddings);
    auto ids = read_ids(query_ids);
    check_row_count(matrix, ids, query_embeddings);
    auto run = ege::batch_retrieve(gallery->index, ids, matrix.widened(), n, workers == 0 ? 1 : workers);
    ege::save_run(run_out, run);
  });
}

ege_status ege_evaluate(const char* run, const char* ground_truth, const char* gallery_manifest, const size_t* cutoffs,
                        size_t cutoff_count, const char* json_out, ege_write_fn table, void* user) {
  if (!run || !ground_truth || !gallery_manifest || (cutoff_count > 0 && !cutoffs))
    return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_evaluate");
  return guard([&] {
    std::vector<std::size_t> ns = cutoff_count == 0
                                      ? std::vector<std::size_t>(ege::kDefaultCutoffs.begin(), ege::kDefaultCutoffs.end())
                                      : std::vector<std::size_t>(cutoffs, cutoffs + cutoff_count);
    auto ranked = ege::load_run(run);
    std::ifstream manifest_in(gallery_manifest);
    if (!manifest_in) ege::raise(ege::ErrorCode::io, std::string("cannot open ") + gallery_manifest);
    auto manifest = ege::read_manifest(manifest_in, gallery_manifest);
    ege::GroundTruth gt(ege::load_ground_truth(ground_truth), ege::gallery_labels(manifest));
    auto report = ege::evaluate_run(ranked, gt, ns);
    if (json_out) {
      std::ofstream out(json_out, std::ios::binary);
      if (!out) ege::raise(ege::ErrorCode::io, std::string("cannot write ") + json_out);
      out << ege::report_json(report) << '\n';
      if (!out) ege::raise(ege::ErrorCode::io, std::string("failed writing ") + json_out);
    }
    emit(table, user, ege::report_table(report));
  });
}

ege_status ege_graph_dump(const ege_config* config, const ege_model* model, const char* manifest, const char* json_out,
                          ege_write_fn summary, void* user) {
  if (!config || !model || !manifest || !json_out) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_graph_dump");
  return guard([&] {
    const auto& gc = config->cfg.graph;
    auto samples = samples_from(manifest, model->state.config());
    auto entities = ege::corpus_entities(samples);
    auto queue = ege::build_entity_queue(entities, gc.queue_capacity);
    ege::require(queue.size() >= 2, ege::ErrorCode::empty_input, "graph needs at least two distinct entities");
    auto graph = ege::refresh_queue(queue, model->state, gc.k, gc.smoothing_steps);

    // Entity text comes from the corpus vocabulary when one sits next to the
    // manifest; otherwise nodes are labelled by token ids.
    std::vector<std::string> vocab;
    auto vocab_path = std::filesystem::path(base_dir(manifest)) / "vocab.txt";
    if (std::filesystem::exists(vocab_path)) vocab = ege::load_vocabulary(vocab_path.string());
    auto entity_text = [&](const ege::EntityKey& key) {
      std::string text;
      for (auto t : key) {
        if (!text.empty()) text += ' ';
        text += t < vocab.size() ? vocab[t] : "#" + std::to_string(t);
      }
      return text;
    };

    nlohmann::ordered_json nodes = nlohmann::ordered_json::array();
    nlohmann::ordered_json edges = nlohmann::ordered_json::array();
    double worst_row = 0.0;
    std::size_t edge_count = 0;
    for (std::size_t i = 0; i < queue.size(); ++i) {
      nodes.push_back({{"index", i}, {"text", entity_text(queue.entries[i])}, {"tokens", queue.entries[i]},
                       {"frequency", queue.frequency[i]}});
      double row_sum = 0.0;
      for (std::size_t e = 0; e < graph.neighbors[i].size(); ++e) {
        edges.push_back({{"i", i}, {"j", graph.neighbors[i][e]}, {"weight", graph.weights[i][e]}});
        row_sum += graph.weights[i][e];
        ++edge_count;
      }
      worst_row = std::max(worst_row, std::abs(row_sum - 1.0));
    }
    nlohmann::ordered_json doc;
    doc["summary"] = {{"nodes", queue.size()},
                      {"edges", edge_count},
                      {"k", graph.k},
                      {"smoothing_steps", gc.smoothing_steps},
                      {"max_row_sum_error", worst_row}};
    doc["nodes"] = std::move(nodes);
    doc["edges"] = std::move(edges);
    std::ofstream out(json_out, std::ios::binary);
    if (!out) ege::raise(ege::ErrorCode::io, std::string("cannot write ") + json_out);
    out << doc.dump(1) << '\n';
    if (!out) ege::raise(ege::ErrorCode::io, std::string("failed writing ") + json_out);

    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu entities, k=%zu, max |row sum - 1| = %.3g\n", queue.size(), graph.k, worst_row);
    emit(summary, user, buf);
  });
}

ege_status ege_selfcheck(uint64_t seed, size_t gradient_seeds, const char* inject_fault, double fault_factor,
                         ege_write_fn report, void* user, int* all_passed) {
  if (!all_passed) return fail(EGE_ERR_INVALID_ARGUMENT, "null argument to ege_selfcheck");
  return guard([&] {
    ege::SelfcheckOptions opts;
    opts.seed = seed;
    opts.gradient_seeds = gradient_seeds;
    opts.inject_fault = inject_fault ? inject_fault : "";
    opts.fault_factor = fault_factor;
    bool ok = true;
    ege::run_selfcheck(opts, [&](const ege::CheckResult& r) {
      ok = ok && r.passed;
      char buf[64];
      std::snprintf(buf, sizeof buf, " (%.2fs)", r.seconds);
      emit(report, user, std::string(r.passed ? "PASS " : "FAIL ") + r.name + "  " + r.detail + buf + "\n");
    });
    *all_passed = ok ? 1 : 0;
  });
}

}  // extern "C"
