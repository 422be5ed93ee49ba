#include <sstream>

#include "ege/train.hpp"
#include "support.hpp"

using namespace ege;
using testing::error_code_of;
using testing::error_message_of;
using testing::TempDir;

namespace {

struct Fixture {
  TempDir dir{"train"};
  RunConfig cfg;
  std::vector<Sample> train, gallery;

  Fixture() {
    cfg.synth.n_categories = 6;
    cfg.synth.n_single = 12;
    cfg.synth.n_multi = 4;
    cfg.synth.n_train = 24;
    cfg.train.batch_size = 4;
    cfg.train.steps = 4;
    auto corpus = generate_synthetic_corpus(cfg.synth);
    write_corpus(dir.path().string(), corpus);
    const auto& mc = cfg.model;
    train = load_samples(load_manifest(dir / "train.jsonl"), dir.path().string(), mc.prop_dim, mc.pos_dim);
    gallery = load_samples(load_manifest(dir / "gallery.jsonl"), dir.path().string(), mc.prop_dim, mc.pos_dim);
  }
};

std::vector<std::vector<double>> snapshot(const ModelState& s) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : s.parameters()) out.push_back(t.to_vector());
  return out;
}

std::vector<double> params_named(const ModelState& s, const std::string& prefix) {
  std::vector<double> out;
  for (const auto& [name, t] : s.parameters()) {
    if (name.rfind(prefix, 0) != 0) continue;
    const auto v = t.to_vector();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

}  // namespace

TEST_CASE("training replays exactly under a fixed seed") {
  Fixture f;
  auto a = train_model(f.cfg, f.train);
  auto b = train_model(f.cfg, f.train);
  REQUIRE(a.log.size() == 4);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].step == i);
    CHECK(a.log[i].report.total == b.log[i].report.total);
    CHECK(a.log[i].report.values == b.log[i].report.values);
    CHECK(std::isfinite(a.log[i].report.total));
  }
  CHECK(snapshot(a.state) == snapshot(b.state));

  auto other = f.cfg;
  other.seed = f.cfg.seed + 1;
  CHECK(snapshot(train_model(other, f.train).state) != snapshot(a.state));
}

TEST_CASE("zero steps leaves the initialisation untouched") {
  Fixture f;
  f.cfg.train.steps = 0;
  auto r = train_model(f.cfg, f.train);
  CHECK(r.log.empty());
  CHECK(snapshot(r.state) == snapshot(ModelState::initialize(f.cfg.model, f.cfg.seed)));

  TempDir dir("ckpt0");
  save_checkpoint(dir / "a.ckpt", r.state);
  save_checkpoint(dir / "b.ckpt", ModelState::initialize(f.cfg.model, f.cfg.seed));
  CHECK(testing::slurp(dir / "a.ckpt") == testing::slurp(dir / "b.ckpt"));
}

TEST_CASE("loss log: header plus one row per step; losses are live") {
  Fixture f;
  std::ostringstream log;
  write_loss_header(log);
  auto r = train_model(f.cfg, f.train, [&](const StepLog& row) { write_loss_row(log, row); });
  std::istringstream in(log.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == f.cfg.train.steps + 1);
  CHECK(lines[0] == "step,mlm,mrp,mem,vt,et,node,subgraph,total,lr");
  CHECK(lines[1].rfind("0,", 0) == 0);
  CHECK(lines.back().rfind("3,", 0) == 0);
  for (std::size_t k : {kMlm, kMrp, kVt, kEt}) CHECK(r.log[0].report.values[k] > 0.0);
  // with a margin the hinge terms cannot vanish, so they are evidently computed
  auto margin = f.cfg;
  margin.ranking.margin = 0.5;
  margin.train.steps = 1;
  const auto first = train_model(margin, f.train).log[0].report;
  CHECK(first.values[kNode] > 0.0);
  CHECK(first.values[kSubgraph] > 0.0);
  // linear decay to zero over the run
  CHECK(r.log[0].lr == f.cfg.train.lr);
  CHECK(r.log[2].lr == doctest::Approx(f.cfg.train.lr * 0.5).epsilon(1e-15));
}

TEST_CASE("divergence names the loss that produced it") {
  Fixture f;
  f.cfg.train.tau = 1e-310;  // similarity / tau overflows
  CHECK(error_code_of([&] { train_model(f.cfg, f.train); }) == ErrorCode::numeric);
  CHECK(error_message_of([&] { train_model(f.cfg, f.train); }).find("loss 'vt'") != std::string::npos);
}

TEST_CASE("a loss with zero weight moves none of its own parameters") {
  Fixture f;
  f.cfg.weights[kMem] = 0.0;
  f.cfg.weights[kMlm] = 0.0;
  const auto init = ModelState::initialize(f.cfg.model, f.cfg.seed);
  auto r = train_model(f.cfg, f.train);
  CHECK(params_named(r.state, "heads.mem") == params_named(init, "heads.mem"));
  CHECK(params_named(r.state, "heads.mlm") == params_named(init, "heads.mlm"));
  CHECK(params_named(r.state, "heads.mrp") != params_named(init, "heads.mrp"));
  for (const auto& row : r.log) CHECK(row.report.values[kMem] == 0.0);
}

TEST_CASE("f32 precision keeps every parameter representable in 32 bits") {
  Fixture f;
  f.cfg.train.precision = Precision::f32;
  f.cfg.train.steps = 2;
  auto r = train_model(f.cfg, f.train);
  for (const auto& v : snapshot(r.state))
    for (double x : v) CHECK(static_cast<double>(static_cast<float>(x)) == x);
}

TEST_CASE("embeddings: unit rows, input order, independent of worker count") {
  Fixture f;
  f.cfg.train.steps = 2;
  const auto state = train_model(f.cfg, f.train).state;
  const auto one = embed_samples(state, f.gallery, 1);
  CHECK(one.rows == f.gallery.size());
  CHECK(one.dim == f.cfg.model.embedding_dim());
  for (std::size_t w : {2u, 3u, 5u, 64u}) CHECK(embed_samples(state, f.gallery, w) == one);
  for (std::size_t i = 0; i < one.rows; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < one.dim; ++j) s += double(one.data[i * one.dim + j]) * one.data[i * one.dim + j];
    CHECK(std::abs(std::sqrt(s) - 1.0) <= 1e-6);
    const auto single = embed_sample(state, f.gallery[i]);
    for (std::size_t j = 0; j < one.dim; ++j) CHECK(one.data[i * one.dim + j] == static_cast<float>(single[j]));
  }
  CHECK(error_code_of([&] { embed_samples(state, std::vector<Sample>{}, 1); }) == ErrorCode::empty_input);
}

TEST_CASE("trainer input errors") {
  Fixture f;
  CHECK(error_code_of([&] { train_model(f.cfg, {}); }) == ErrorCode::empty_input);
  auto other = f.cfg.model;
  other.hidden = 16;
  other.head_dim = 8;
  CHECK(error_code_of([&] { Trainer(f.cfg, f.train, ModelState::initialize(other, 1)); }) == ErrorCode::consistency);
  auto narrow = f.cfg;
  narrow.model.prop_dim = 8;
  CHECK(error_code_of([&] { train_model(narrow, f.train); }) == ErrorCode::dimension);
}
