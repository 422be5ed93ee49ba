// Command-line front end. Talks to the library only through ege.h.
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ege/ege.h"

namespace {

void to_stdout(void*, const char* data, size_t len) { std::fwrite(data, 1, len, stdout); }
void to_stderr(void*, const char* data, size_t len) { std::fwrite(data, 1, len, stderr); }

// Thrown after the message has been printed; carries the exit code.
struct Exit {
  int code;
};

void check(ege_status status, const char* step) {
  if (status == EGE_OK) return;
  std::fprintf(stderr, "ege: %s failed [%s]: %s\n", step, ege_status_name(status), ege_last_error());
  throw Exit{static_cast<int>(status)};
}

struct ConfigHandle {
  ege_config* ptr = nullptr;
  ~ConfigHandle() { ege_config_free(ptr); }
};
struct ModelHandle {
  ege_model* ptr = nullptr;
  ~ModelHandle() { ege_model_free(ptr); }
};
struct GalleryHandle {
  ege_gallery* ptr = nullptr;
  ~GalleryHandle() { ege_gallery_free(ptr); }
};

struct Globals {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  bool print_config = false;
};

// File, then --set overrides, then --seed / EGE_SEED, then --workers.
void resolve_config(const Globals& g, ConfigHandle& cfg) {
  if (g.config_path.empty())
    check(ege_config_new(&cfg.ptr), "config");
  else
    check(ege_config_load(g.config_path.c_str(), &cfg.ptr), "config");
  for (const auto& s : g.sets) check(ege_config_set(cfg.ptr, s.c_str()), "--set");
  if (g.seed) {
    check(ege_config_set_seed(cfg.ptr, *g.seed), "--seed");
  } else if (const char* env = std::getenv("EGE_SEED"); env && *env) {
    char* end = nullptr;
    unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') {
      std::fprintf(stderr, "ege: EGE_SEED must be a non-negative integer, got '%s'\n", env);
      throw Exit{EGE_ERR_CONFIG};
    }
    check(ege_config_set_seed(cfg.ptr, v), "EGE_SEED");
  }
  if (g.workers) check(ege_config_set(cfg.ptr, ("run.workers=" + std::to_string(*g.workers)).c_str()), "--workers");
}

std::size_t workers_of(const ConfigHandle& cfg) {
  std::size_t w = 1;
  check(ege_config_get_workers(cfg.ptr, &w), "config");
  return w;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entity-graph product retrieval: synthetic data, training, embedding, retrieval, evaluation"};
  app.require_subcommand(0, 1);
  app.fallthrough();  // global flags may follow the subcommand

  Globals g;
  app.add_option("--config", g.config_path, "TOML-style run configuration")->check(CLI::ExistingFile);
  app.add_option("--set", g.sets, "Override one key, e.g. --set train.steps=50 (repeatable)");
  app.add_option("--seed", g.seed, "Global seed (falls back to $EGE_SEED, then the config)");
  app.add_option("--workers", g.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--print-config", g.print_config, "Print the fully resolved configuration to stdout");

  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus");
  synth->add_option("--out", synth_out, "Output directory")->required();

  std::string train_corpus, train_manifest, train_out, train_log;
  std::optional<std::size_t> train_steps;
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint plus per-step loss CSV");
  auto* corpus_opt = train->add_option("--corpus", train_corpus, "Corpus directory (uses train.jsonl)");
  train->add_option("--manifest", train_manifest, "Training manifest")->excludes(corpus_opt);
  train->add_option("--out", train_out, "Checkpoint path")->required();
  train->add_option("--loss-log", train_log, "Loss CSV path (default: <out>.loss.csv)");
  train->add_option("--steps", train_steps, "Shorthand for --set train.steps=N");

  std::string embed_model, embed_manifest, embed_out, embed_ids;
  auto* embed = app.add_subcommand("embed", "Embed every record of a manifest");
  embed->add_option("--model", embed_model, "Checkpoint")->required();
  embed->add_option("--manifest", embed_manifest, "Manifest")->required();
  embed->add_option("--out", embed_out, "Embedding file")->required();
  embed->add_option("--ids", embed_ids, "Id sidecar (default: <out>.ids)");

  std::string ret_gallery, ret_gallery_ids, ret_query, ret_query_ids, ret_out;
  std::size_t ret_top = 100;
  auto* retrieve = app.add_subcommand("retrieve", "Rank gallery embeddings for every query");
  retrieve->add_option("--gallery", ret_gallery, "Gallery embedding file")->required();
  retrieve->add_option("--gallery-ids", ret_gallery_ids, "Gallery id sidecar (default: <gallery>.ids)");
  retrieve->add_option("--query", ret_query, "Query embedding file")->required();
  retrieve->add_option("--query-ids", ret_query_ids, "Query id sidecar (default: <query>.ids)");
  retrieve->add_option("--top", ret_top, "Results per query (default covers cutoffs 10, 50, 100)")
      ->check(CLI::PositiveNumber);
  retrieve->add_option("--out", ret_out, "Run file")->required();

  std::string ev_run, ev_gt, ev_gallery, ev_json;
  std::vector<std::size_t> ev_ns;
  auto* evaluate = app.add_subcommand("evaluate", "Score a run file: mAP@N, mAR@N, Prec@N");
  evaluate->add_option("--run", ev_run, "Run file")->required();
  evaluate->add_option("--ground-truth", ev_gt, "Ground-truth JSON")->required();
  evaluate->add_option("--gallery", ev_gallery, "Gallery manifest (instance labels)")->required();
  evaluate->add_option("--n", ev_ns, "Cutoffs (default 10 50 100)")->delimiter(',');
  evaluate->add_option("--json", ev_json, "Also write the report as JSON");

  std::string gr_model, gr_manifest, gr_out;
  auto* graph = app.add_subcommand("graph", "Dump the entity k-NN graph as JSON");
  graph->add_option("--model", gr_model, "Checkpoint")->required();
  graph->add_option("--manifest", gr_manifest, "Manifest whose entities form the queue")->required();
  graph->add_option("--out", gr_out, "JSON output")->required();

  std::string sc_fault;
  double sc_factor = 1.5;
  std::size_t sc_seeds = 20;
  auto* selfcheck = app.add_subcommand("selfcheck", "Run numerical self-checks");
  selfcheck->add_option("--inject-fault", sc_fault, "Scale one primitive's backward pass (testing the checks)");
  selfcheck->add_option("--fault-factor", sc_factor, "Scale used by --inject-fault");
  selfcheck->add_option("--gradient-seeds", sc_seeds, "Random draws per gradient probe");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, std::cout, std::cerr);
  }

  try {
    ConfigHandle cfg;
    resolve_config(g, cfg);
    if (train_steps) check(ege_config_set(cfg.ptr, ("train.steps=" + std::to_string(*train_steps)).c_str()), "--steps");
    if (g.print_config) check(ege_config_dump(cfg.ptr, to_stdout, nullptr), "--print-config");

    if (*synth) {
      check(ege_synth(cfg.ptr, synth_out.c_str(), to_stderr, nullptr), "synth");
    } else if (*train) {
      std::string manifest = !train_manifest.empty() ? train_manifest
                             : !train_corpus.empty() ? train_corpus + "/train.jsonl"
                                                     : std::string();
      if (manifest.empty()) {
        std::fprintf(stderr, "ege: train needs --corpus or --manifest\n");
        return EGE_ERR_INVALID_ARGUMENT;
      }
      if (train_log.empty()) train_log = train_out + ".loss.csv";
      check(ege_train(cfg.ptr, manifest.c_str(), train_out.c_str(), train_log.c_str(), to_stderr, nullptr), "train");
    } else if (*embed) {
      if (embed_ids.empty()) embed_ids = embed_out + ".ids";
      ModelHandle model;
      check(ege_model_load(embed_model.c_str(), &model.ptr), "load model");
      check(ege_embed(model.ptr, embed_manifest.c_str(), embed_out.c_str(), embed_ids.c_str(), workers_of(cfg)),
            "embed");
    } else if (*retrieve) {
      if (ret_gallery_ids.empty()) ret_gallery_ids = ret_gallery + ".ids";
      if (ret_query_ids.empty()) ret_query_ids = ret_query + ".ids";
      GalleryHandle gallery;
      check(ege_gallery_load(ret_gallery.c_str(), ret_gallery_ids.c_str(), &gallery.ptr), "load gallery");
      check(ege_retrieve(gallery.ptr, ret_query.c_str(), ret_query_ids.c_str(), ret_top, workers_of(cfg),
                         ret_out.c_str()),
            "retrieve");
    } else if (*evaluate) {
      check(ege_evaluate(ev_run.c_str(), ev_gt.c_str(), ev_gallery.c_str(), ev_ns.data(), ev_ns.size(),
                         ev_json.empty() ? nullptr : ev_json.c_str(), to_stdout, nullptr),
            "evaluate");
    } else if (*graph) {
      ModelHandle model;
      check(ege_model_load(gr_model.c_str(), &model.ptr), "load model");
      check(ege_graph_dump(cfg.ptr, model.ptr, gr_manifest.c_str(), gr_out.c_str(), to_stderr, nullptr), "graph");
    } else if (*selfcheck) {
      std::uint64_t seed = 1;
      check(ege_config_get_seed(cfg.ptr, &seed), "config");
      int ok = 0;
      check(ege_selfcheck(seed, sc_seeds, sc_fault.empty() ? nullptr : sc_fault.c_str(), sc_factor, to_stdout, nullptr,
                          &ok),
            "selfcheck");
      if (!ok) {
        std::fprintf(stderr, "ege: selfcheck reported failures\n");
        return 1;
      }
    } else if (!g.print_config) {
      std::fputs(app.help().c_str(), stderr);
      return EGE_ERR_INVALID_ARGUMENT;
    }
  } catch (const Exit& e) {
    return e.code;
  }
  return 0;
}
