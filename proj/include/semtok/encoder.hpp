#pragma once

// Visual token encoder and the caption encoder it is aligned with.
//
// Image path: pack -> project (l through a 3-layer ReLU MLP, V/U through a
// shared linear map) -> add per-type embeddings -> pre-norm transformer
// layers whose attention scores receive the rank bias in every head ->
// final layer norm -> readout at position 0 -> linear projection -> L2
// normalize.
//
// Text path: token + absolute position embeddings -> pre-norm transformer
// layers with a key padding mask -> readout at the end-of-sequence slot ->
// linear projection -> L2 normalize.

#include "semtok/rankmatrix.hpp"
#include "semtok/tensor.hpp"
#include "semtok/tokens.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace semtok {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what);
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Reserved caption token ids.
inline constexpr std::int64_t kPadId = 0;
inline constexpr std::int64_t kEosId = 1;

struct EncoderConfig {
  std::size_t d = 32;             // token width in the corpus
  std::size_t d_l = 32;           // raw image-feature width
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t context_length = 24;
  std::size_t embed_dim = 64;
  std::size_t vocab_size = 64;    // includes the reserved ids
  std::size_t text_context = 32;  // caption tokens plus the end-of-sequence slot
  double init_logit_scale = 2.6592600369327779;  // log(1 / 0.07)

  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct Param {
  std::string path;
  Tensor value;
  bool weight_decay = true;
  bool pin_first = false;  // coordinate 0 is never updated
};

// All learnable tensors of both encoders, addressable by path.
class ModelParams {
 public:
  static ModelParams initialize(const EncoderConfig& config, std::uint64_t seed);

  const Tensor& at(std::string_view path) const;
  Tensor& at(std::string_view path);
  bool contains(std::string_view path) const;

  std::vector<Param>& entries() { return entries_; }
  const std::vector<Param>& entries() const { return entries_; }
  std::size_t scalar_count() const;
  void zero_grad();

  // Deep copy with fresh leaf tensors.
  ModelParams clone() const;

  WeightEncoding weight_encoding() const { return WeightEncoding(at("image/rank_weights/a")); }

 private:
  void add(std::string path, Tensor value, bool weight_decay = true, bool pin_first = false);
  std::vector<Param> entries_;
};

// ---------------------------------------------------------------------------
// Batches

struct ImageBatch {
  std::size_t batch = 0;
  std::size_t context_length = 0;
  std::size_t width = 0;  // d
  std::size_t d_l = 0;
  std::vector<double> tokens;          // [B, L, d]
  std::vector<double> image_features;  // [B, d_l]
  std::vector<std::uint8_t> kinds;     // [B, L] TokenKind
  std::vector<std::uint8_t> valid;     // [B, L]
  std::vector<RankMatrix> ranks;       // one per sample, empty when bias is off
  std::vector<std::string> sample_ids;
};

ImageBatch make_image_batch(std::span<const TokenSet* const> samples, const EncoderConfig& config,
                            bool additive_attention);

struct TextBatch {
  std::size_t batch = 0;
  std::size_t context_length = 0;
  std::vector<std::size_t> ids;      // [B, Lt], PAD-filled
  std::vector<std::uint8_t> valid;   // [B, Lt]
  std::vector<std::size_t> eos_row;  // flat row index of each sample's end-of-sequence slot
};

TextBatch make_text_batch(std::span<const Caption* const> captions, const EncoderConfig& config);

// ---------------------------------------------------------------------------
// Building blocks, exposed for tests.

// x: [B*L, D]. kinds: [B*L]. IMAGE rows get +p_l, TANGIBLE +p_v, INTANGIBLE +p_u.
Tensor add_type_embeddings(const Tensor& x, std::span<const std::uint8_t> kinds,
                           const ModelParams& params);

struct AttentionShape {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t heads = 0;
};

// h: [B*L, D] (already normalized). bias: [B, L, L] or undefined. Returns
// per-head attention probabilities [B, H, L, L].
Tensor attention_probabilities(const Tensor& h, const Tensor& bias, const Mask& key_mask,
                               const ModelParams& params, const std::string& layer,
                               const AttentionShape& shape);

// Multi-head attention output after the output projection, [B*L, D].
Tensor multi_head_attention(const Tensor& h, const Tensor& bias, const Mask& key_mask,
                            const ModelParams& params, const std::string& layer,
                            const AttentionShape& shape);

// One pre-norm block: x + MHA(LN(x)) followed by x + FFN(LN(x)).
Tensor attention_layer(const Tensor& x, const Tensor& bias, const Mask& key_mask,
                       const ModelParams& params, const std::string& layer,
                       const AttentionShape& shape);

// ---------------------------------------------------------------------------
// Encoders

// Additive bias for the batch from its rank matrices; undefined if none.
Tensor image_bias(const ModelParams& params, const ImageBatch& batch);

// [B, embed_dim] unit rows. The bias argument overrides the batch's ranks
// (pass an undefined Tensor for plain attention).
Tensor encode_images(const ModelParams& params, const EncoderConfig& config,
                     const ImageBatch& batch, const Tensor& bias);
Tensor encode_images(const ModelParams& params, const EncoderConfig& config,
                     const ImageBatch& batch);

Tensor encode_captions(const ModelParams& params, const EncoderConfig& config,
                       const TextBatch& batch);

std::vector<double> encode_image(const TokenSet& ts, const ModelParams& params,
                                 const EncoderConfig& config, bool additive_attention = true);
std::vector<double> encode_caption(const Caption& caption, const ModelParams& params,
                                   const EncoderConfig& config);

}  // namespace semtok
