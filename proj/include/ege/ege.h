/* C interface to the entity-graph retrieval library. Every call returns an
 * ege_status; on failure ege_last_error() describes the problem (per thread).
 * Handles are opaque and owned by the caller, who releases them with the
 * matching *_free function. Strings passed in are UTF-8 and may be released as
 * soon as the call returns. */
#ifndef EGE_H
#define EGE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(EGE_BUILDING_LIBRARY)
#define EGE_API __attribute__((visibility("default")))
#else
#define EGE_API
#endif

typedef enum ege_status {
  EGE_OK = 0,
  EGE_ERR_DIMENSION = 1,
  EGE_ERR_CONFIG = 2,
  EGE_ERR_CONTRACT = 3,
  EGE_ERR_NUMERIC = 4,
  EGE_ERR_VOCABULARY = 5,
  EGE_ERR_DEGENERATE = 6,
  EGE_ERR_FORMAT = 7,
  EGE_ERR_CONSISTENCY = 8,
  EGE_ERR_IO = 9,
  EGE_ERR_EMPTY_INPUT = 10,
  EGE_ERR_INVALID_ARGUMENT = 64,
  EGE_ERR_INTERNAL = 65
} ege_status;

typedef struct ege_config ege_config;
typedef struct ege_model ege_model;
typedef struct ege_gallery ege_gallery;

/* Receives output text in one or more chunks. */
typedef void (*ege_write_fn)(void* user, const char* data, size_t len);

EGE_API const char* ege_version(void);
EGE_API const char* ege_last_error(void);
EGE_API const char* ege_status_name(ege_status status);

/* ---- configuration ---- */
EGE_API ege_status ege_config_new(ege_config** out);
EGE_API ege_status ege_config_load(const char* path, ege_config** out);
/* "section.key=value", e.g. "train.steps=50". */
EGE_API ege_status ege_config_set(ege_config* config, const char* assignment);
EGE_API ege_status ege_config_set_seed(ege_config* config, uint64_t seed);
EGE_API ege_status ege_config_get_seed(const ege_config* config, uint64_t* out);
EGE_API ege_status ege_config_get_workers(const ege_config* config, size_t* out);
EGE_API ege_status ege_config_dump(const ege_config* config, ege_write_fn write, void* user);
EGE_API void ege_config_free(ege_config* config);

/* ---- synthetic corpus ---- */
/* Writes corpus.json, vocab.txt, {train,gallery,query}.jsonl, feature and
 * position files and ground_truth.json into out_dir. `summary` may be NULL. */
EGE_API ege_status ege_synth(const ege_config* config, const char* out_dir, ege_write_fn summary, void* user);

/* ---- models ---- */
EGE_API ege_status ege_model_init(const ege_config* config, ege_model** out);
EGE_API ege_status ege_model_load(const char* path, ege_model** out);
EGE_API ege_status ege_model_save(const ege_model* model, const char* path);
EGE_API ege_status ege_model_embedding_dim(const ege_model* model, size_t* out);
EGE_API ege_status ege_model_parameter_count(const ege_model* model, size_t* out);
EGE_API void ege_model_free(ege_model* model);

/* Trains from the manifest's samples and writes the checkpoint. `loss_log`
 * (CSV, one row per step) and `progress` may be NULL. */
EGE_API ege_status ege_train(const ege_config* config, const char* train_manifest, const char* checkpoint_out,
                             const char* loss_log, ege_write_fn progress, void* user);

/* One unit-norm row per manifest record, in manifest order, plus a sidecar
 * with one record id per line. */
EGE_API ege_status ege_embed(const ege_model* model, const char* manifest, const char* embeddings_out,
                             const char* ids_out, size_t workers);

/* ---- retrieval ---- */
EGE_API ege_status ege_gallery_load(const char* embeddings, const char* ids, ege_gallery** out);
EGE_API ege_status ege_gallery_size(const ege_gallery* gallery, size_t* out);
EGE_API void ege_gallery_free(ege_gallery* gallery);

/* Top-n for a single query vector. `indices` and `scores` must hold n entries;
 * *count receives min(n, gallery size). Indices refer to gallery order. */
EGE_API ege_status ege_gallery_query(const ege_gallery* gallery, const double* query, size_t dim, size_t n,
                                     size_t* indices, double* scores, size_t* count);
EGE_API ege_status ege_gallery_id(const ege_gallery* gallery, size_t index, const char** out);

/* Ranks every query row against the gallery and writes a JSON-lines run file. */
EGE_API ege_status ege_retrieve(const ege_gallery* gallery, const char* query_embeddings, const char* query_ids,
                                size_t n, size_t workers, const char* run_out);

/* ---- evaluation ---- */
/* Gallery labels come from the gallery manifest (first category per record).
 * `json_out` may be NULL; the text table goes to `table`. */
EGE_API ege_status ege_evaluate(const char* run, const char* ground_truth, const char* gallery_manifest,
                                const size_t* cutoffs, size_t cutoff_count, const char* json_out,
                                ege_write_fn table, void* user);

/* ---- diagnostics ---- */
/* Builds the entity queue from the manifest, embeds it with the model and
 * writes the k-NN graph as JSON. */
EGE_API ege_status ege_graph_dump(const ege_config* config, const ege_model* model, const char* manifest,
                                  const char* json_out, ege_write_fn summary, void* user);

/* Runs the numerical self-checks; `inject_fault` (may be NULL) names a
 * primitive whose backward pass is scaled by `fault_factor` for the run. */
EGE_API ege_status ege_selfcheck(uint64_t seed, size_t gradient_seeds, const char* inject_fault, double fault_factor,
                                 ege_write_fn report, void* user, int* all_passed);

#ifdef __cplusplus
}
#endif

#endif /* EGE_H */
