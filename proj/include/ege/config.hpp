#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ege/corpus.hpp"
#include "ege/entity_graph.hpp"
#include "ege/model.hpp"
#include "ege/objectives.hpp"

namespace ege {

enum class Precision { f64, f32 };

struct TrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool linear_decay = true;
  double tau = 0.07;
  // f32 rounds parameters through 32-bit storage after every update.
  Precision precision = Precision::f64;
  bool operator==(const TrainConfig&) const = default;
};

struct RankingConfig {
  double margin = 0.0;
  double y = 1.0;
  bool operator==(const RankingConfig&) const = default;
};

struct GraphConfig {
  std::size_t k = 5;
  std::size_t k_tail = 0;          // 0: ceil(candidates / 4)
  std::size_t smoothing_steps = 2;
  std::size_t refresh_steps = 0;   // 0: once per pass over the training set
  std::size_t queue_capacity = kDefaultQueueCapacity;
  bool operator==(const GraphConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  ModelConfig model;
  TrainConfig train;
  LossWeights weights = kDefaultLossWeights;
  RankingConfig ranking;
  MaskRates mask;
  GraphConfig graph;
  SynthConfig synth;

  void validate() const;
  bool operator==(const RunConfig& o) const;
};

// TOML-style text: [section] headers, `key = value` lines, # comments. Unknown
// sections or keys are rejected with the offending line number.
RunConfig parse_config(std::istream& in, const std::string& what = "config");
RunConfig load_config(const std::string& path);
// Applies `section.key=value` on top of `cfg`.
void set_config_value(RunConfig& cfg, const std::string& assignment);
// Fully resolved configuration; parse_config(dump_config(c)) == c.
std::string dump_config(const RunConfig& cfg);
// Every accepted `section.key`.
std::vector<std::string> config_keys();

}  // namespace ege
