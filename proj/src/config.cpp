#include "ege/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "ege/error.hpp"

namespace ege {

void RunConfig::validate() const {
  model.validate();
  if (train.batch_size == 0) raise(ErrorCode::config, "train.batch_size must be >= 1");
  if (!(train.lr > 0.0)) raise(ErrorCode::config, "train.lr must be positive");
  if (!(train.beta1 >= 0.0 && train.beta1 < 1.0) || !(train.beta2 >= 0.0 && train.beta2 < 1.0)) {
    raise(ErrorCode::config, "train.beta1/beta2 must lie in [0, 1)");
  }
  if (!(train.adam_eps > 0.0)) raise(ErrorCode::config, "train.adam_eps must be positive");
  if (!(train.tau > 0.0)) raise(ErrorCode::config, "train.tau must be positive");
  for (std::size_t i = 0; i < kLossCount; ++i) {
    if (!(weights[i] >= 0.0) || !std::isfinite(weights[i])) {
      raise(ErrorCode::config, std::string("loss.") + kLossNames[i] + " must be finite and >= 0");
    }
  }
  if (!(ranking.margin >= 0.0)) raise(ErrorCode::config, "loss.margin must be >= 0");
  if (ranking.y != 1.0) raise(ErrorCode::config, "loss.y must be 1");
  for (double r : {mask.text, mask.region, mask.entity}) {
    if (!(r >= 0.0 && r <= 1.0)) raise(ErrorCode::config, "mask rates must lie in [0, 1]");
  }
  if (graph.k == 0) raise(ErrorCode::config, "graph.k must be >= 1");
  if (graph.queue_capacity == 0) raise(ErrorCode::config, "graph.queue_capacity must be >= 1");
  if (workers == 0) raise(ErrorCode::config, "run.workers must be >= 1");
  synth.validate();
}

bool RunConfig::operator==(const RunConfig& o) const {
  return seed == o.seed && workers == o.workers && model == o.model && train == o.train && weights == o.weights &&
         ranking == o.ranking && mask.text == o.mask.text && mask.region == o.mask.region &&
         mask.entity == o.mask.entity && graph == o.graph && synth == o.synth;
}

namespace {

struct Value {
  enum Kind { number, boolean, string } kind;
  std::string text;
};

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::size_t as_size(const Value& v, const std::string& key) {
  std::uint64_t out = 0;
  const char* end = v.text.data() + v.text.size();
  auto res = std::from_chars(v.text.data(), end, out);
  if (v.kind != Value::number || res.ec != std::errc() || res.ptr != end) {
    raise(ErrorCode::config, key + " expects a non-negative integer, got '" + v.text + "'");
  }
  return static_cast<std::size_t>(out);
}

double as_double(const Value& v, const std::string& key) {
  double out = 0.0;
  const char* end = v.text.data() + v.text.size();
  auto res = std::from_chars(v.text.data(), end, out);
  if (v.kind != Value::number || res.ec != std::errc() || res.ptr != end) {
    raise(ErrorCode::config, key + " expects a number, got '" + v.text + "'");
  }
  return out;
}

bool as_bool(const Value& v, const std::string& key) {
  if (v.kind != Value::boolean) raise(ErrorCode::config, key + " expects true or false, got '" + v.text + "'");
  return v.text == "true";
}

std::string as_string(const Value& v, const std::string& key) {
  if (v.kind != Value::string) raise(ErrorCode::config, key + " expects a quoted string, got '" + v.text + "'");
  return v.text;
}

struct Field {
  std::function<void(RunConfig&, const Value&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

using Registry = std::vector<std::pair<std::string, Field>>;

template <typename Member>
Field size_field(Member member) {
  return {[member](RunConfig& c, const Value& v, const std::string& k) { member(c) = as_size(v, k); },
          [member](RunConfig c) { return std::to_string(member(c)); }};
}

template <typename Member>
Field double_field(Member member) {
  return {[member](RunConfig& c, const Value& v, const std::string& k) { member(c) = as_double(v, k); },
          [member](RunConfig c) { return shortest(member(c)); }};
}

template <typename Enum>
Field enum_field(std::function<Enum&(RunConfig&)> member, std::vector<std::pair<std::string, Enum>> names) {
  return {[member, names](RunConfig& c, const Value& v, const std::string& k) {
            const auto s = as_string(v, k);
            for (const auto& [n, e] : names) {
              if (n == s) {
                member(c) = e;
                return;
              }
            }
            std::string options;
            for (const auto& [n, e] : names) options += (options.empty() ? "" : ", ") + n;
            raise(ErrorCode::config, k + " must be one of " + options + ", got \"" + s + "\"");
          },
          [member, names](RunConfig c) {
            const Enum e = member(c);
            for (const auto& [n, x] : names)
              if (x == e) return "\"" + n + "\"";
            return std::string("\"?\"");
          }};
}

const Registry& registry() {
  static const Registry r = [] {
    Registry r;
#define EGE_SIZE(key, expr) r.emplace_back(key, size_field([](RunConfig& c) -> std::size_t& { return expr; }))
#define EGE_DOUBLE(key, expr) r.emplace_back(key, double_field([](RunConfig& c) -> double& { return expr; }))
    r.emplace_back("run.seed", Field{[](RunConfig& c, const Value& v, const std::string& k) { c.seed = as_size(v, k); },
                                     [](const RunConfig& c) { return std::to_string(c.seed); }});
    EGE_SIZE("run.workers", c.workers);

    EGE_SIZE("model.smt_layers", c.model.smt_layers);
    EGE_SIZE("model.cmt_layers", c.model.cmt_layers);
    EGE_SIZE("model.comt_layers", c.model.comt_layers);
    EGE_SIZE("model.hidden", c.model.hidden);
    EGE_SIZE("model.heads", c.model.heads);
    EGE_SIZE("model.vocab_size", c.model.vocab_size);
    EGE_SIZE("model.prop_dim", c.model.prop_dim);
    EGE_SIZE("model.pos_dim", c.model.pos_dim);
    EGE_SIZE("model.max_seq", c.model.max_seq);
    EGE_SIZE("model.max_regions", c.model.max_regions);
    EGE_SIZE("model.head_dim", c.model.head_dim);
    EGE_SIZE("model.ffn_dim", c.model.ffn_dim);
    r.emplace_back("model.text_fusion",
                   enum_field<TextFusion>([](RunConfig& c) -> TextFusion& { return c.model.text_fusion; },
                                          {{"mean", TextFusion::mean}, {"visual_only", TextFusion::visual_only}}));
    r.emplace_back("model.contrastive_source",
                   enum_field<ContrastiveSource>(
                       [](RunConfig& c) -> ContrastiveSource& { return c.model.contrastive_source; },
                       {{"single_modal", ContrastiveSource::single_modal}, {"co_modal", ContrastiveSource::co_modal}}));
    EGE_DOUBLE("model.ln_eps", c.model.ln_eps);
    EGE_DOUBLE("model.init_range", c.model.init_range);

    EGE_SIZE("train.steps", c.train.steps);
    EGE_SIZE("train.batch_size", c.train.batch_size);
    EGE_DOUBLE("train.lr", c.train.lr);
    EGE_DOUBLE("train.beta1", c.train.beta1);
    EGE_DOUBLE("train.beta2", c.train.beta2);
    EGE_DOUBLE("train.adam_eps", c.train.adam_eps);
    r.emplace_back("train.linear_decay",
                   Field{[](RunConfig& c, const Value& v, const std::string& k) { c.train.linear_decay = as_bool(v, k); },
                         [](const RunConfig& c) { return std::string(c.train.linear_decay ? "true" : "false"); }});
    EGE_DOUBLE("train.tau", c.train.tau);
    r.emplace_back("train.precision",
                   enum_field<Precision>([](RunConfig& c) -> Precision& { return c.train.precision; },
                                         {{"f64", Precision::f64}, {"f32", Precision::f32}}));

    for (std::size_t i = 0; i < kLossCount; ++i) {
      r.emplace_back(std::string("loss.") + kLossNames[i],
                     double_field([i](RunConfig& c) -> double& { return c.weights[i]; }));
    }
    EGE_DOUBLE("loss.margin", c.ranking.margin);
    EGE_DOUBLE("loss.y", c.ranking.y);

    EGE_DOUBLE("mask.text", c.mask.text);
    EGE_DOUBLE("mask.region", c.mask.region);
    EGE_DOUBLE("mask.entity", c.mask.entity);

    EGE_SIZE("graph.k", c.graph.k);
    EGE_SIZE("graph.k_tail", c.graph.k_tail);
    EGE_SIZE("graph.smoothing_steps", c.graph.smoothing_steps);
    EGE_SIZE("graph.refresh_steps", c.graph.refresh_steps);
    EGE_SIZE("graph.queue_capacity", c.graph.queue_capacity);

    EGE_SIZE("synth.n_categories", c.synth.n_categories);
    EGE_SIZE("synth.n_single", c.synth.n_single);
    EGE_SIZE("synth.n_multi", c.synth.n_multi);
    EGE_SIZE("synth.n_train", c.synth.n_train);
    EGE_SIZE("synth.max_products_per_multi", c.synth.max_products_per_multi);
    EGE_SIZE("synth.regions_per_product", c.synth.regions_per_product);
    EGE_SIZE("synth.prop_dim", c.synth.prop_dim);
    EGE_SIZE("synth.pos_dim", c.synth.pos_dim);
    EGE_SIZE("synth.vocab_size", c.synth.vocab_size);
    EGE_SIZE("synth.entity_vocab", c.synth.entity_vocab);
    EGE_DOUBLE("synth.noise_sigma", c.synth.noise_sigma);
    EGE_DOUBLE("synth.train_multi_fraction", c.synth.train_multi_fraction);
#undef EGE_SIZE
#undef EGE_DOUBLE
    return r;
  }();
  return r;
}

const Field* find_field(const std::string& key) {
  for (const auto& [k, f] : registry())
    if (k == key) return &f;
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Strips a trailing comment that is not inside a string.
std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

Value parse_value(const std::string& raw, const std::string& where) {
  const std::string t = trim(raw);
  if (t.empty()) raise(ErrorCode::config, where + ": missing value");
  if (t.front() == '"') {
    if (t.size() < 2 || t.back() != '"') raise(ErrorCode::config, where + ": unterminated string");
    std::string out;
    for (std::size_t i = 1; i + 1 < t.size(); ++i) {
      if (t[i] == '\\' && i + 2 < t.size()) ++i;
      out += t[i];
    }
    return {Value::string, out};
  }
  if (t == "true" || t == "false") return {Value::boolean, t};
  return {Value::number, t};
}

void assign(RunConfig& cfg, const std::string& key, const std::string& raw, const std::string& where) {
  const Field* f = find_field(key);
  if (!f) raise(ErrorCode::config, where + ": unknown key '" + key + "'");
  try {
    f->set(cfg, parse_value(raw, where), key);
  } catch (const Error& e) {
    raise(ErrorCode::config, where + ": " + e.what());
  }
}

}  // namespace

RunConfig parse_config(std::istream& in, const std::string& what) {
  RunConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::string section, line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = what + " line " + std::to_string(line_no);
    const std::string t = trim(strip_comment(line));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') raise(ErrorCode::config, where + ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      bool known = false;
      for (const auto& [k, f] : registry()) known = known || k.rfind(section + ".", 0) == 0;
      if (!known) raise(ErrorCode::config, where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) raise(ErrorCode::config, where + ": expected key = value");
    const std::string name = trim(t.substr(0, eq));
    if (section.empty()) raise(ErrorCode::config, where + ": key '" + name + "' outside of a section");
    const std::string key = section + "." + name;
    auto [it, inserted] = seen.emplace(key, line_no);
    if (!inserted) {
      raise(ErrorCode::config, where + ": '" + key + "' already set on line " + std::to_string(it->second));
    }
    assign(cfg, key, t.substr(eq + 1), where);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::io, "cannot open config '" + path + "'");
  return parse_config(in, "'" + path + "'");
}

void set_config_value(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) raise(ErrorCode::config, "override '" + assignment + "' must look like section.key=value");
  const std::string key = trim(assignment.substr(0, eq));
  std::string raw = trim(assignment.substr(eq + 1));
  // Bare words on the command line are taken as strings.
  if (!raw.empty() && raw.front() != '"' && raw != "true" && raw != "false" &&
      raw.find_first_not_of("0123456789+-.eE") != std::string::npos) {
    raw = "\"" + raw + "\"";
  }
  assign(cfg, key, raw, "override '" + assignment + "'");
}

std::string dump_config(const RunConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& [key, f] : registry()) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      if (!section.empty()) out << '\n';
      out << '[' << s << "]\n";
      section = s;
    }
    out << key.substr(dot + 1) << " = " << f.get(cfg) << '\n';
  }
  return out.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : registry()) out.push_back(k);
  return out;
}

}  // namespace ege
