#include "ege/model.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "binary_io.hpp"
#include "ege/error.hpp"

namespace ege {

void ModelConfig::validate() const {
  require(hidden > 0, ErrorCode::config, "model: hidden size must be positive");
  require(heads > 0 && hidden % heads == 0, ErrorCode::config,
          "model: hidden size " + std::to_string(hidden) + " not divisible by " + std::to_string(heads) + " heads");
  require(max_seq >= 1, ErrorCode::config, "model: max_seq must be >= 1");
  require(max_regions >= 1, ErrorCode::config, "model: max_regions must be >= 1");
  require(vocab_size > static_cast<std::size_t>(kFirstRegularToken), ErrorCode::config,
          "model: vocabulary must hold the reserved tokens");
  require(prop_dim > 0 && pos_dim > 0 && head_dim > 0 && ffn_dim > 0, ErrorCode::config,
          "model: widths must be positive");
  require(ln_eps > 0.0, ErrorCode::config, "model: ln_eps must be positive");
  require(init_range > 0.0, ErrorCode::config, "model: init_range must be positive");
}

ModelConfig ModelConfig::reference() {
  ModelConfig c;
  c.smt_layers = c.cmt_layers = c.comt_layers = 4;
  c.hidden = 768;
  c.heads = 8;
  c.max_seq = 36;
  c.max_regions = 36;
  c.head_dim = 512;
  c.ffn_dim = 3072;
  c.vocab_size = 30522;
  c.prop_dim = 2048;
  c.pos_dim = 5;
  return c;
}

// ---- parameters ------------------------------------------------------------------

namespace {

struct Init {
  std::mt19937_64 rng;
  double range;

  // Built from raw engine bits so values do not depend on the standard library's
  // distribution implementation.
  double uniform() {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return (2.0 * u - 1.0) * range;
  }

  Tensor random(Shape shape) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = uniform();
    return Tensor(std::move(shape), std::move(v));
  }
};

Projection make_projection(Init& init, std::size_t in, std::size_t out) {
  return {init.random({in, out}), Tensor::zeros({out})};
}

TransformerLayer make_layer(Init& init, const ModelConfig& c) {
  const std::size_t d = c.hidden;
  TransformerLayer l;
  auto [wq, bq] = make_projection(init, d, d);
  auto [wk, bk] = make_projection(init, d, d);
  auto [wv, bv] = make_projection(init, d, d);
  auto [wo, bo] = make_projection(init, d, d);
  l.attn = {wq, bq, wk, bk, wv, bv, wo, bo};
  l.ln1_g = Tensor::filled({d}, 1.0);
  l.ln1_b = Tensor::zeros({d});
  auto f1 = make_projection(init, d, c.ffn_dim);
  auto f2 = make_projection(init, c.ffn_dim, d);
  l.ffn_w1 = f1.w;
  l.ffn_b1 = f1.b;
  l.ffn_w2 = f2.w;
  l.ffn_b2 = f2.b;
  l.ln2_g = Tensor::filled({d}, 1.0);
  l.ln2_b = Tensor::zeros({d});
  return l;
}

using ParamList = std::vector<std::pair<std::string, Tensor>>;

void list_layer(ParamList& out, const std::string& prefix, const TransformerLayer& l) {
  out.emplace_back(prefix + ".attn.wq", l.attn.wq);
  out.emplace_back(prefix + ".attn.bq", l.attn.bq);
  out.emplace_back(prefix + ".attn.wk", l.attn.wk);
  out.emplace_back(prefix + ".attn.bk", l.attn.bk);
  out.emplace_back(prefix + ".attn.wv", l.attn.wv);
  out.emplace_back(prefix + ".attn.bv", l.attn.bv);
  out.emplace_back(prefix + ".attn.wo", l.attn.wo);
  out.emplace_back(prefix + ".attn.bo", l.attn.bo);
  out.emplace_back(prefix + ".ln1.g", l.ln1_g);
  out.emplace_back(prefix + ".ln1.b", l.ln1_b);
  out.emplace_back(prefix + ".ffn.w1", l.ffn_w1);
  out.emplace_back(prefix + ".ffn.b1", l.ffn_b1);
  out.emplace_back(prefix + ".ffn.w2", l.ffn_w2);
  out.emplace_back(prefix + ".ffn.b2", l.ffn_b2);
  out.emplace_back(prefix + ".ln2.g", l.ln2_g);
  out.emplace_back(prefix + ".ln2.b", l.ln2_b);
}

void list_stack(ParamList& out, const std::string& prefix, const std::vector<TransformerLayer>& layers) {
  for (std::size_t i = 0; i < layers.size(); ++i) list_layer(out, prefix + "." + std::to_string(i), layers[i]);
}

void list_projection(ParamList& out, const std::string& prefix, const Projection& p) {
  out.emplace_back(prefix + ".w", p.w);
  out.emplace_back(prefix + ".b", p.b);
}

}  // namespace

ModelState::ModelState(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  // Placeholder values; initialize() or a checkpoint overwrite every tensor.
  Init init{std::mt19937_64(0), config_.init_range};
  const auto& c = config_;
  const std::size_t d = c.hidden;
  token_embedding = init.random({c.vocab_size, d});
  token_position = init.random({c.max_seq, d});
  image_embed = make_projection(init, c.prop_dim, d);
  image_position = make_projection(init, c.pos_dim, d);
  for (std::size_t i = 0; i < c.smt_layers; ++i) {
    smt_visual.push_back(make_layer(init, c));
    smt_caption.push_back(make_layer(init, c));
    smt_entity.push_back(make_layer(init, c));
  }
  for (std::size_t i = 0; i < c.cmt_layers; ++i) {
    cmt_visual.push_back({make_layer(init, c), make_layer(init, c)});
    cmt_entity.push_back({make_layer(init, c), make_layer(init, c)});
  }
  for (std::size_t i = 0; i < c.comt_layers; ++i) {
    comt_visual.push_back(make_layer(init, c));
    comt_entity.push_back(make_layer(init, c));
  }
  cls_visual = init.random({1, d});
  cls_entity = init.random({1, d});
  pos_visual = init.random({c.max_seq + c.max_regions, d});
  pos_entity = init.random({2 * c.max_seq, d});
  text_merge = make_projection(init, 2 * d, d);
  mlm_head = make_projection(init, d, c.vocab_size);
  mem_head = make_projection(init, d, c.vocab_size);
  mrp_head = make_projection(init, d, c.prop_dim);
  ctr_visual = make_projection(init, d, c.head_dim);
  ctr_caption = make_projection(init, d, c.head_dim);
  ctr_entity = make_projection(init, d, c.head_dim);
  ret_visual = make_projection(init, d, c.head_dim);
  ret_caption = make_projection(init, d, c.head_dim);
}

ModelState ModelState::initialize(const ModelConfig& config, std::uint64_t seed) {
  ModelState state(config);
  Init init{std::mt19937_64(seed), config.init_range};
  for (auto& [name, t] : state.parameters()) {
    // Biases and layer-norm shifts start at zero, layer-norm gains at one.
    const bool gain = name.ends_with(".g");
    const bool bias = name.ends_with(".b") || name.ends_with(".bq") || name.ends_with(".bk") ||
                      name.ends_with(".bv") || name.ends_with(".bo") || name.ends_with(".b1") ||
                      name.ends_with(".b2");
    auto data = t.mutable_data();
    for (auto& x : data) x = gain ? 1.0 : bias ? 0.0 : init.uniform();
  }
  return state;
}

std::vector<std::pair<std::string, Tensor>> ModelState::parameters() const {
  ParamList out;
  out.emplace_back("embeddings.token", token_embedding);
  out.emplace_back("embeddings.token_position", token_position);
  list_projection(out, "embeddings.image", image_embed);
  list_projection(out, "embeddings.image_position", image_position);
  list_stack(out, "smt.visual", smt_visual);
  list_stack(out, "smt.caption", smt_caption);
  list_stack(out, "smt.entity", smt_entity);
  for (std::size_t i = 0; i < cmt_visual.size(); ++i) {
    list_layer(out, "cmt.visual." + std::to_string(i) + ".text", cmt_visual[i].first);
    list_layer(out, "cmt.visual." + std::to_string(i) + ".other", cmt_visual[i].second);
  }
  for (std::size_t i = 0; i < cmt_entity.size(); ++i) {
    list_layer(out, "cmt.entity." + std::to_string(i) + ".text", cmt_entity[i].first);
    list_layer(out, "cmt.entity." + std::to_string(i) + ".other", cmt_entity[i].second);
  }
  list_stack(out, "comt.visual", comt_visual);
  list_stack(out, "comt.entity", comt_entity);
  out.emplace_back("comt.visual.cls", cls_visual);
  out.emplace_back("comt.entity.cls", cls_entity);
  out.emplace_back("comt.visual.position", pos_visual);
  out.emplace_back("comt.entity.position", pos_entity);
  list_projection(out, "comt.text_merge", text_merge);
  list_projection(out, "heads.mlm", mlm_head);
  list_projection(out, "heads.mem", mem_head);
  list_projection(out, "heads.mrp", mrp_head);
  list_projection(out, "heads.contrastive.visual", ctr_visual);
  list_projection(out, "heads.contrastive.caption", ctr_caption);
  list_projection(out, "heads.contrastive.entity", ctr_entity);
  list_projection(out, "heads.retrieval.visual", ret_visual);
  list_projection(out, "heads.retrieval.caption", ret_caption);
  return out;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

void ModelState::set_requires_grad(bool on) {
  for (auto& [name, t] : parameters()) t.set_requires_grad(on);
}

void ModelState::zero_grad() {
  for (auto& [name, t] : parameters()) t.zero_grad();
}

void ModelState::round_to_float() {
  for (auto& [name, t] : parameters()) {
    for (auto& x : t.mutable_data()) x = static_cast<double>(static_cast<float>(x));
  }
}

// ---- samples ---------------------------------------------------------------------

EntitySequence entity_sequence(const std::vector<std::vector<TokenId>>& entities, std::size_t max_seq) {
  EntitySequence seq;
  for (const auto& e : entities) {
    if (e.empty()) continue;
    if (!seq.tokens.empty()) {
      if (seq.tokens.size() + 1 >= max_seq) break;
      seq.tokens.push_back(kSepToken);
    }
    const std::size_t begin = seq.tokens.size();
    for (TokenId t : e) {
      if (seq.tokens.size() >= max_seq) break;
      seq.tokens.push_back(t);
    }
    if (seq.tokens.size() > begin) seq.spans.emplace_back(begin, seq.tokens.size());
    if (seq.tokens.size() >= max_seq) break;
  }
  return seq;
}

namespace {

void check_tokens(std::span<const TokenId> tokens, std::size_t vocab, const std::string& where) {
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      raise(ErrorCode::vocabulary,
            where + ": token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
}

}  // namespace

void validate_sample(const Sample& s, const ModelConfig& c) {
  const std::string where = "sample '" + s.id + "'";
  if (!s.proposals.defined()) raise(ErrorCode::empty_input, where + ": no proposals");
  if (s.proposals.rank() != 2 || s.proposals.dim(1) != c.prop_dim) {
    raise(ErrorCode::dimension, where + ": proposals " + shape_string(s.proposals.shape()) + " expected [m x " +
                                    std::to_string(c.prop_dim) + "]");
  }
  const std::size_t m = s.proposals.dim(0);
  if (m > c.max_regions) {
    raise(ErrorCode::dimension, where + ": " + std::to_string(m) + " regions exceed max " + std::to_string(c.max_regions));
  }
  if (!s.positions.defined() || s.positions.rank() != 2 || s.positions.dim(0) != m ||
      s.positions.dim(1) != c.pos_dim) {
    raise(ErrorCode::dimension, where + ": positions must be [" + std::to_string(m) + " x " +
                                    std::to_string(c.pos_dim) + "]");
  }
  if (s.caption.empty()) raise(ErrorCode::empty_input, where + ": empty caption");
  if (s.caption.size() > c.max_seq) {
    raise(ErrorCode::dimension, where + ": caption of " + std::to_string(s.caption.size()) + " tokens exceeds max_seq");
  }
  check_tokens(s.caption, c.vocab_size, where);
  bool any_entity = false;
  for (const auto& e : s.entities) {
    check_tokens(e, c.vocab_size, where);
    any_entity = any_entity || !e.empty();
  }
  if (!any_entity) raise(ErrorCode::contract, where + ": entities are mandatory (use a single PAD entity at inference)");
}

// ---- forward ---------------------------------------------------------------------

Tensor transformer_layer(const TransformerLayer& l, const Tensor& x, std::size_t heads, double eps) {
  return cross_attention_layer(l, x, x, heads, eps);
}

Tensor cross_attention_layer(const TransformerLayer& l, const Tensor& x, const Tensor& context, std::size_t heads,
                             double eps) {
  Tensor attended = multi_head_attention(x, context, context, heads, l.attn);
  Tensor x1 = layer_norm(add(x, attended), l.ln1_g, l.ln1_b, eps);
  Tensor ff = linear(gelu(linear(x1, l.ffn_w1, l.ffn_b1)), l.ffn_w2, l.ffn_b2);
  return layer_norm(add(x1, ff), l.ln2_g, l.ln2_b, eps);
}

Tensor encode_image(const ModelState& state, const Tensor& proposals, const Tensor& positions) {
  const auto& c = state.config();
  if (!proposals.defined() || !positions.defined()) raise(ErrorCode::empty_input, "encode_image: no proposals");
  if (proposals.rank() != 2 || positions.rank() != 2 || proposals.dim(0) != positions.dim(0)) {
    raise(ErrorCode::dimension, "encode_image: proposals " + shape_string(proposals.shape()) + " vs positions " +
                                    shape_string(positions.shape()));
  }
  Tensor x = add(linear(proposals, state.image_embed.w, state.image_embed.b),
                 linear(positions, state.image_position.w, state.image_position.b));
  for (const auto& layer : state.smt_visual) x = transformer_layer(layer, x, c.heads, c.ln_eps);
  return x;
}

Tensor encode_tokens(const ModelState& state, std::span<const TokenId> tokens, Stream stream) {
  const auto& c = state.config();
  if (tokens.empty()) raise(ErrorCode::empty_input, "encode_tokens: empty token list");
  if (tokens.size() > c.max_seq) {
    raise(ErrorCode::dimension, "encode_tokens: " + std::to_string(tokens.size()) + " tokens exceed max_seq " +
                                    std::to_string(c.max_seq));
  }
  Tensor x = add(embedding(state.token_embedding, tokens), slice(state.token_position, 0, 0, tokens.size()));
  const auto& stack = stream == Stream::caption ? state.smt_caption : state.smt_entity;
  for (const auto& layer : stack) x = transformer_layer(layer, x, c.heads, c.ln_eps);
  return x;
}

CrossOutputs cross_fuse(const ModelState& state, const Tensor& u_t, const Tensor& u_v, const Tensor& u_e) {
  const auto& c = state.config();
  for (const Tensor* t : {&u_t, &u_v, &u_e}) {
    if (t->rank() != 2 || t->dim(1) != c.hidden) {
      raise(ErrorCode::config, "cross_fuse: stream width " + shape_string(t->shape()) + " does not match hidden " +
                                   std::to_string(c.hidden));
    }
  }
  CrossOutputs out;
  Tensor t = u_t, v = u_v;
  for (const auto& layer : state.cmt_visual) {
    Tensor nt = cross_attention_layer(layer.first, t, v, c.heads, c.ln_eps);
    Tensor nv = cross_attention_layer(layer.second, v, t, c.heads, c.ln_eps);
    t = nt;
    v = nv;
  }
  out.h_t1 = t;
  out.h_v = v;
  t = u_t;
  Tensor e = u_e;
  for (const auto& layer : state.cmt_entity) {
    Tensor nt = cross_attention_layer(layer.first, t, e, c.heads, c.ln_eps);
    Tensor ne = cross_attention_layer(layer.second, e, t, c.heads, c.ln_eps);
    t = nt;
    e = ne;
  }
  out.h_t2 = t;
  out.h_e = e;
  out.h_t = c.text_fusion == TextFusion::mean ? scale(add(out.h_t1, out.h_t2), 0.5) : out.h_t1;
  return out;
}

namespace {

struct BranchResult {
  Tensor sequence, text, other;
};

BranchResult co_branch(const ModelState& state, const std::vector<TransformerLayer>& layers, const Tensor& cls,
                       const Tensor& positions, const Tensor& text, const Tensor& other) {
  const auto& c = state.config();
  const std::size_t lt = text.dim(0), lo = other.dim(0);
  if (lt + lo > positions.dim(0)) {
    raise(ErrorCode::dimension, "co_fuse: joint sequence of " + std::to_string(lt + lo) +
                                    " exceeds position table of " + std::to_string(positions.dim(0)));
  }
  Tensor joint = add(concat({text, other}, 0), slice(positions, 0, 0, lt + lo));
  Tensor x = concat({cls, joint}, 0);
  for (const auto& layer : layers) x = transformer_layer(layer, x, c.heads, c.ln_eps);
  return {x, slice(x, 0, 1, lt), slice(x, 0, 1 + lt, lo)};
}

}  // namespace

CoOutputs co_fuse(const ModelState& state, const Tensor& h_v, const Tensor& h_t, const Tensor& h_e) {
  const auto& c = state.config();
  for (const Tensor* t : {&h_v, &h_t, &h_e}) {
    if (t->rank() != 2 || t->dim(1) != c.hidden) {
      raise(ErrorCode::config, "co_fuse: stream width " + shape_string(t->shape()) + " does not match hidden " +
                                   std::to_string(c.hidden));
    }
  }
  CoOutputs out;
  BranchResult vis = co_branch(state, state.comt_visual, state.cls_visual, state.pos_visual, h_t, h_v);
  BranchResult ent = co_branch(state, state.comt_entity, state.cls_entity, state.pos_entity, h_t, h_e);
  out.branch_visual = vis.sequence;
  out.branch_entity = ent.sequence;
  out.f_t1 = mean(vis.text, 0);
  out.f_v = mean(vis.other, 0);
  out.f_t2 = mean(ent.text, 0);
  out.f_e = mean(ent.other, 0);
  out.f_t = linear(concat({out.f_t1, out.f_t2}, 0), state.text_merge.w, state.text_merge.b);
  out.f = concat({out.f_v, out.f_t, out.f_e}, 0);
  out.text_states = scale(add(vis.text, ent.text), 0.5);
  out.visual_states = vis.other;
  out.entity_states = ent.other;
  return out;
}

ModelOutputs forward(const ModelState& state, const Sample& sample) {
  const auto& c = state.config();
  validate_sample(sample, c);
  EntitySequence ents = entity_sequence(sample.entities, c.max_seq);
  ModelOutputs out;
  out.u_v = encode_image(state, sample.proposals, sample.positions);
  out.u_t = encode_tokens(state, sample.caption, Stream::caption);
  out.u_e = encode_tokens(state, ents.tokens, Stream::entity);
  CrossOutputs cross = cross_fuse(state, out.u_t, out.u_v, out.u_e);
  out.h_v = cross.h_v;
  out.h_t = cross.h_t;
  out.h_e = cross.h_e;
  out.h_t1 = cross.h_t1;
  out.h_t2 = cross.h_t2;
  CoOutputs co = co_fuse(state, out.h_v, out.h_t, out.h_e);
  out.f_v = co.f_v;
  out.f_t = co.f_t;
  out.f_e = co.f_e;
  out.f = co.f;
  out.f_t1 = co.f_t1;
  out.f_t2 = co.f_t2;
  out.text_states = co.text_states;
  out.visual_states = co.visual_states;
  out.entity_states = co.entity_states;
  out.entity_spans = std::move(ents.spans);
  return out;
}

Tensor retrieval_embedding(const ModelOutputs& outputs, const ModelState& state) {
  if (!outputs.f_v.defined() || !outputs.f_t.defined()) {
    raise(ErrorCode::contract, "retrieval_embedding: outputs were not produced by forward");
  }
  Tensor v = linear(outputs.f_v, state.ret_visual.w, state.ret_visual.b);
  Tensor t = linear(outputs.f_t, state.ret_caption.w, state.ret_caption.b);
  return l2_normalize(concat({v, t}, 0));
}

ContrastiveViews contrastive_views(const ModelOutputs& o, const ModelState& state) {
  if (state.config().contrastive_source == ContrastiveSource::co_modal) {
    return {linear(o.f_v, state.ctr_visual.w, state.ctr_visual.b),
            linear(o.f_t, state.ctr_caption.w, state.ctr_caption.b),
            linear(o.f_e, state.ctr_entity.w, state.ctr_entity.b)};
  }
  return {linear(mean(o.u_v, 0), state.ctr_visual.w, state.ctr_visual.b),
          linear(mean(o.u_t, 0), state.ctr_caption.w, state.ctr_caption.b),
          linear(mean(o.u_e, 0), state.ctr_entity.w, state.ctr_entity.b)};
}

// ---- checkpoint ------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'E', 'G', 'E', 'M'};
constexpr std::uint32_t kConfigFields = 14;

std::vector<std::uint32_t> config_fields(const ModelConfig& c) {
  auto u = [](std::size_t v) { return static_cast<std::uint32_t>(v); };
  return {u(c.smt_layers), u(c.cmt_layers), u(c.comt_layers), u(c.hidden),     u(c.heads),
          u(c.vocab_size), u(c.prop_dim),   u(c.pos_dim),     u(c.max_seq),    u(c.max_regions),
          u(c.head_dim),   u(c.ffn_dim),    static_cast<std::uint32_t>(c.text_fusion),
          static_cast<std::uint32_t>(c.contrastive_source)};
}

}  // namespace

void write_checkpoint(std::ostream& out, const ModelState& state) {
  out.write(kCheckpointMagic, 4);
  binary::put_u32(out, kCheckpointVersion);
  const auto fields = config_fields(state.config());
  binary::put_u32(out, static_cast<std::uint32_t>(fields.size()));
  for (auto f : fields) binary::put_u32(out, f);
  binary::put_f64(out, state.config().ln_eps);
  binary::put_f64(out, state.config().init_range);
  for (const auto& [name, t] : state.parameters()) {
    binary::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    binary::put_u8(out, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) binary::put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) binary::put_f32(out, static_cast<float>(v));
  }
  if (!out) raise(ErrorCode::io, "checkpoint: write failed");
}

ModelState read_checkpoint(std::istream& in) {
  binary::Reader r(in, "checkpoint");
  char magic[4];
  r.read(magic, 4);
  if (std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
    raise(ErrorCode::format, "checkpoint: bad magic at byte offset 0");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    raise(ErrorCode::format, "checkpoint: unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  const auto count = r.u32();
  if (count != kConfigFields) raise(ErrorCode::format, "checkpoint: unexpected config field count " + std::to_string(count));
  std::vector<std::uint32_t> f(count);
  for (auto& x : f) x = r.u32();
  ModelConfig c;
  c.smt_layers = f[0];
  c.cmt_layers = f[1];
  c.comt_layers = f[2];
  c.hidden = f[3];
  c.heads = f[4];
  c.vocab_size = f[5];
  c.prop_dim = f[6];
  c.pos_dim = f[7];
  c.max_seq = f[8];
  c.max_regions = f[9];
  c.head_dim = f[10];
  c.ffn_dim = f[11];
  if (f[12] > 1 || f[13] > 1) raise(ErrorCode::format, "checkpoint: unknown enum value in config");
  c.text_fusion = static_cast<TextFusion>(f[12]);
  c.contrastive_source = static_cast<ContrastiveSource>(f[13]);
  c.ln_eps = r.f64();
  c.init_range = r.f64();
  ModelState state(c);
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : state.parameters()) by_name.emplace(name, t);
  std::map<std::string, bool> seen;
  while (!r.at_end()) {
    const std::uint64_t at = r.offset();
    const auto len = r.u16();
    std::string name(len, '\0');
    r.read(name.data(), len);
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      raise(ErrorCode::format, "checkpoint: unknown parameter '" + name + "' at byte offset " + std::to_string(at));
    }
    if (seen[name]) raise(ErrorCode::format, "checkpoint: duplicate parameter '" + name + "'");
    seen[name] = true;
    const auto rank = r.u8();
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    if (shape != it->second.shape()) {
      raise(ErrorCode::format, "checkpoint: parameter '" + name + "' has shape " + shape_string(shape) + ", expected " +
                                   shape_string(it->second.shape()));
    }
    auto data = it->second.mutable_data();
    for (auto& x : data) x = static_cast<double>(r.f32());
  }
  for (const auto& [name, t] : by_name) {
    if (!seen[name]) raise(ErrorCode::format, "checkpoint: missing parameter '" + name + "'");
  }
  return state;
}

void save_checkpoint(const std::string& path, const ModelState& state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::io, "cannot open '" + path + "' for writing");
  write_checkpoint(out, state);
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::io, "cannot open '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace ege
