#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ege/tensor.hpp"

namespace ege {

using TokenId = std::int32_t;

// Reserved vocabulary slots; regular tokens start at kFirstRegularToken.
inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kMaskToken = 1;
inline constexpr TokenId kSepToken = 2;
inline constexpr TokenId kUnkToken = 3;
inline constexpr TokenId kFirstRegularToken = 4;

enum class TextFusion : std::uint32_t {
  mean = 0,        // h_t = (h_t1 + h_t2) / 2
  visual_only = 1  // h_t = h_t1
};

enum class ContrastiveSource : std::uint32_t {
  single_modal = 0,  // pooled SMT outputs through the contrastive heads
  co_modal = 1       // pooled COMT outputs (f_v, f_t, f_e)
};

enum class Stream { caption, entity };

struct ModelConfig {
  std::size_t smt_layers = 1;   // L
  std::size_t cmt_layers = 1;   // K
  std::size_t comt_layers = 1;  // H
  std::size_t hidden = 32;
  std::size_t heads = 2;
  std::size_t vocab_size = 128;
  std::size_t prop_dim = 32;
  std::size_t pos_dim = 5;
  std::size_t max_seq = 16;
  std::size_t max_regions = 8;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 64;
  TextFusion text_fusion = TextFusion::mean;
  ContrastiveSource contrastive_source = ContrastiveSource::single_modal;
  double ln_eps = 1e-5;
  double init_range = 0.02;

  void validate() const;
  // One layer per stage per depth unit: L + K + H.
  std::size_t transformer_layers() const { return smt_layers + cmt_layers + comt_layers; }
  std::size_t embedding_dim() const { return 2 * head_dim; }

  // Full-size reference point: (4,4,4), 768 wide, 8 heads, 36 tokens/regions, 512-wide heads.
  static ModelConfig reference();

  bool operator==(const ModelConfig&) const = default;
};

struct TransformerLayer {
  AttentionParams attn;
  Tensor ln1_g, ln1_b;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor ln2_g, ln2_b;
};

// One co-attention layer over a pair of streams; each side queries the other.
struct CrossLayer {
  TransformerLayer first;
  TransformerLayer second;
};

struct Projection {
  Tensor w, b;
};

/// All learnable parameters of the hybrid-stream encoder plus its task heads.
class ModelState {
 public:
  explicit ModelState(ModelConfig config);
  static ModelState initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }

  // Deterministic (name, tensor) listing of every parameter. Tensors share storage
  // with the model.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::size_t parameter_count() const;
  void set_requires_grad(bool on);
  void zero_grad();
  // Rounds every parameter through 32-bit storage.
  void round_to_float();

  Tensor token_embedding, token_position;
  Projection image_embed, image_position;
  std::vector<TransformerLayer> smt_visual, smt_caption, smt_entity;
  std::vector<CrossLayer> cmt_visual, cmt_entity;
  std::vector<TransformerLayer> comt_visual, comt_entity;
  Tensor cls_visual, cls_entity;
  Tensor pos_visual, pos_entity;
  Projection text_merge;
  Projection mlm_head, mem_head, mrp_head;
  Projection ctr_visual, ctr_caption, ctr_entity;
  Projection ret_visual, ret_caption;

 private:
  ModelConfig config_;
};

struct Sample {
  std::string id;
  Tensor proposals;  // [m x prop_dim]
  Tensor positions;  // [m x pos_dim]
  std::vector<TokenId> caption;
  std::vector<std::vector<TokenId>> entities;
  std::vector<std::string> categories;
};

struct EntitySequence {
  std::vector<TokenId> tokens;
  // [begin, end) token span of each entity that survived truncation.
  std::vector<std::pair<std::size_t, std::size_t>> spans;
};

// Joins entities with separator tokens, truncated at max_seq.
EntitySequence entity_sequence(const std::vector<std::vector<TokenId>>& entities, std::size_t max_seq);

void validate_sample(const Sample& sample, const ModelConfig& config);

struct CrossOutputs {
  Tensor h_v, h_t, h_e, h_t1, h_t2;
};

struct CoOutputs {
  Tensor f_v, f_t, f_e, f;
  Tensor f_t1, f_t2;
  Tensor branch_visual, branch_entity;  // full COMT sequences incl. [CLS]
  Tensor text_states, visual_states, entity_states;
};

struct ModelOutputs {
  Tensor u_v, u_t, u_e;
  Tensor h_v, h_t, h_e, h_t1, h_t2;
  Tensor f_v, f_t, f_e, f, f_t1, f_t2;
  Tensor text_states, visual_states, entity_states;
  std::vector<std::pair<std::size_t, std::size_t>> entity_spans;
};

Tensor transformer_layer(const TransformerLayer& layer, const Tensor& x, std::size_t heads, double eps);
// Residual block where `x` attends over `context`.
Tensor cross_attention_layer(const TransformerLayer& layer, const Tensor& x, const Tensor& context,
                             std::size_t heads, double eps);

Tensor encode_image(const ModelState& state, const Tensor& proposals, const Tensor& positions);
Tensor encode_tokens(const ModelState& state, std::span<const TokenId> tokens, Stream stream);
CrossOutputs cross_fuse(const ModelState& state, const Tensor& u_t, const Tensor& u_v, const Tensor& u_e);
CoOutputs co_fuse(const ModelState& state, const Tensor& h_v, const Tensor& h_t, const Tensor& h_e);
ModelOutputs forward(const ModelState& state, const Sample& sample);

/// proj_v(f_v) ++ proj_t(f_t), L2-normalised as one vector of width 2*head_dim.
Tensor retrieval_embedding(const ModelOutputs& outputs, const ModelState& state);

/// Embedding entering the image-text / entity-text contrastive losses.
struct ContrastiveViews {
  Tensor visual, caption, entity;
};
ContrastiveViews contrastive_views(const ModelOutputs& outputs, const ModelState& state);

// ---- checkpoint ----------------------------------------------------------------
//
// "EGEM" | u32 version | u32 field count | u32 fields... | f64 ln_eps | f64 init_range
// then per parameter: u16 name length | name | u8 rank | u32 extents | f32 data.
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const ModelState& state);
ModelState read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const ModelState& state);
ModelState load_checkpoint(const std::string& path);

}  // namespace ege
