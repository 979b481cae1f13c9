#include "semtok/encoder.hpp"

#include "semtok/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

namespace semtok {

using nlohmann::json;

ConfigError::ConfigError(std::string field, const std::string& what)
    : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}

void EncoderConfig::validate() const {
  const auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(name, "must be positive");
  };
  positive(d, "d");
  positive(d_l, "d_l");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(context_length, "context_length");
  positive(embed_dim, "embed_dim");
  positive(text_context, "text_context");
  if (d_model % n_heads != 0) {
    throw ConfigError("n_heads", "d_model=" + std::to_string(d_model) +
                                     " is not divisible by n_heads=" + std::to_string(n_heads));
  }
  if (text_context < 2) throw ConfigError("text_context", "must hold at least one token plus end-of-sequence");
  if (vocab_size <= static_cast<std::size_t>(kEosId)) {
    throw ConfigError("vocab_size", "must exceed the reserved ids");
  }
  if (!std::isfinite(init_logit_scale)) throw ConfigError("init_logit_scale", "must be finite");
}

void to_json(json& j, const EncoderConfig& c) {
  j = json{{"d", c.d},
           {"d_l", c.d_l},
           {"d_model", c.d_model},
           {"n_layers", c.n_layers},
           {"n_heads", c.n_heads},
           {"d_ff", c.d_ff},
           {"context_length", c.context_length},
           {"embed_dim", c.embed_dim},
           {"vocab_size", c.vocab_size},
           {"text_context", c.text_context},
           {"init_logit_scale", c.init_logit_scale}};
}

void from_json(const json& j, EncoderConfig& c) {
  const EncoderConfig defaults;
  c = defaults;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "d") c.d = value.get<std::size_t>();
      else if (key == "d_l") c.d_l = value.get<std::size_t>();
      else if (key == "d_model") c.d_model = value.get<std::size_t>();
      else if (key == "n_layers") c.n_layers = value.get<std::size_t>();
      else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
      else if (key == "d_ff") c.d_ff = value.get<std::size_t>();
      else if (key == "context_length") c.context_length = value.get<std::size_t>();
      else if (key == "embed_dim") c.embed_dim = value.get<std::size_t>();
      else if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
      else if (key == "text_context") c.text_context = value.get<std::size_t>();
      else if (key == "init_logit_scale") c.init_logit_scale = value.get<double>();
      else throw ConfigError("encoder." + key, "unknown key");
    } catch (const json::exception& e) {
      throw ConfigError("encoder." + key, e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

Tensor gaussian(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal() * stddev;
  return Tensor::from(std::move(shape), std::move(v), true);
}

std::string layer_prefix(const char* tower, std::size_t i) {
  return std::string(tower) + "/layers/" + std::to_string(i);
}

}  // namespace

void ModelParams::add(std::string path, Tensor value, bool weight_decay, bool pin_first) {
  entries_.push_back(Param{std::move(path), std::move(value), weight_decay, pin_first});
}

ModelParams ModelParams::initialize(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, 0x1417));
  ModelParams p;
  const std::size_t D = config.d_model, F = config.d_ff;
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  const double embed_std = 0.1;

  const auto linear = [&](const std::string& prefix, std::size_t in, std::size_t out, double gain = 1.0) {
    p.add(prefix + "/weight", gaussian(rng, {in, out}, gain / std::sqrt(static_cast<double>(in))));
    p.add(prefix + "/bias", Tensor::zeros({out}, true));
  };
  const auto norm = [&](const std::string& prefix) {
    p.add(prefix + "/gain", Tensor::full({D}, 1.0, true));
    p.add(prefix + "/bias", Tensor::zeros({D}, true));
  };
  const auto block = [&](const std::string& prefix) {
    norm(prefix + "/ln1");
    linear(prefix + "/attn/q", D, D);
    linear(prefix + "/attn/k", D, D);
    linear(prefix + "/attn/v", D, D);
    linear(prefix + "/attn/out", D, D, residual_scale);
    norm(prefix + "/ln2");
    linear(prefix + "/ffn/in", D, F);
    linear(prefix + "/ffn/out", F, D, residual_scale);
  };

  linear("image/token_proj", config.d, D);
  linear("image/feature_mlp/0", config.d_l, D);
  linear("image/feature_mlp/1", D, D);
  linear("image/feature_mlp/2", D, D);
  p.add("image/type/image", gaussian(rng, {D}, embed_std), false);
  p.add("image/type/tangible", gaussian(rng, {D}, embed_std), false);
  p.add("image/type/intangible", gaussian(rng, {D}, embed_std), false);
  for (std::size_t i = 0; i < config.n_layers; ++i) block(layer_prefix("image", i));
  norm("image/final_ln");
  p.add("image/out_proj/weight", gaussian(rng, {D, config.embed_dim}, 1.0 / std::sqrt(double(D))));
  p.add("image/rank_weights/a", WeightEncoding::initial_values(true), true, true);

  p.add("text/token_embedding", gaussian(rng, {config.vocab_size, D}, embed_std));
  p.add("text/pos_embedding", gaussian(rng, {config.text_context, D}, embed_std), false);
  for (std::size_t i = 0; i < config.n_layers; ++i) block(layer_prefix("text", i));
  norm("text/final_ln");
  p.add("text/out_proj/weight", gaussian(rng, {D, config.embed_dim}, 1.0 / std::sqrt(double(D))));

  p.add("logit_scale/tau", Tensor::full({1}, config.init_logit_scale, true), false);
  return p;
}

const Tensor& ModelParams::at(std::string_view path) const {
  for (const auto& e : entries_) {
    if (e.path == path) return e.value;
  }
  throw std::out_of_range("no parameter '" + std::string(path) + "'");
}

Tensor& ModelParams::at(std::string_view path) {
  return const_cast<Tensor&>(static_cast<const ModelParams&>(*this).at(path));
}

bool ModelParams::contains(std::string_view path) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Param& e) { return e.path == path; });
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  for (const auto& e : entries_) {
    Tensor copy = e.value.detach();
    copy.set_requires_grad(true);
    out.entries_.push_back(Param{e.path, std::move(copy), e.weight_decay, e.pin_first});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches

ImageBatch make_image_batch(std::span<const TokenSet* const> samples, const EncoderConfig& config,
                            bool additive_attention) {
  if (samples.empty()) throw std::invalid_argument("make_image_batch: empty batch");
  ImageBatch b;
  b.batch = samples.size();
  b.width = config.d;
  b.d_l = config.d_l;
  // Pad only as far as the longest sample; results do not depend on slack.
  std::size_t longest = 1;
  for (const TokenSet* ts : samples) {
    if (ts->token_count() > config.context_length) {
      throw CapacityError(ts->sample_id, ts->token_count(), config.context_length);
    }
    longest = std::max(longest, ts->token_count());
  }
  const std::size_t L = longest;
  b.context_length = L;
  b.tokens.reserve(b.batch * L * b.width);
  for (const TokenSet* ts : samples) {
    if (ts->image_features.size() != config.d_l) {
      throw ConfigError("d_l", "sample '" + ts->sample_id + "' has image features of width " +
                                   std::to_string(ts->image_features.size()));
    }
    PackedTokens packed = pack(*ts, L);
    if (packed.width != b.width && ts->token_count() > 1) {
      throw ConfigError("d", "sample '" + ts->sample_id + "' has token width " + std::to_string(packed.width));
    }
    if (packed.width == b.width) {
      b.tokens.insert(b.tokens.end(), packed.rows.begin(), packed.rows.end());
    } else {
      b.tokens.resize(b.tokens.size() + L * b.width, 0.0);
    }
    b.image_features.insert(b.image_features.end(), ts->image_features.begin(), ts->image_features.end());
    for (const auto& pos : packed.positions) b.kinds.push_back(static_cast<std::uint8_t>(pos.kind));
    b.valid.insert(b.valid.end(), packed.valid_mask.begin(), packed.valid_mask.end());
    if (additive_attention) b.ranks.push_back(build_ranks(*ts, packed.positions, L));
    b.sample_ids.push_back(ts->sample_id);
  }
  return b;
}

TextBatch make_text_batch(std::span<const Caption* const> captions, const EncoderConfig& config) {
  if (captions.empty()) throw std::invalid_argument("make_text_batch: empty batch");
  std::size_t longest = 0;
  for (const Caption* c : captions) {
    if (c->size() + 1 > config.text_context) {
      throw ConfigError("text_context", "caption of " + std::to_string(c->size()) +
                                            " tokens does not fit text context " +
                                            std::to_string(config.text_context));
    }
    longest = std::max(longest, c->size());
  }
  TextBatch b;
  b.batch = captions.size();
  b.context_length = longest + 1;
  b.ids.assign(b.batch * b.context_length, static_cast<std::size_t>(kPadId));
  b.valid.assign(b.batch * b.context_length, 0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const Caption& c = *captions[i];
    for (std::size_t t = 0; t < c.size(); ++t) {
      if (c[t] <= kEosId || static_cast<std::size_t>(c[t]) >= config.vocab_size) {
        throw VocabularyError("caption token id " + std::to_string(c[t]) + " at position " +
                              std::to_string(t) + " is outside the vocabulary [2, " +
                              std::to_string(config.vocab_size) + ")");
      }
      b.ids[i * b.context_length + t] = static_cast<std::size_t>(c[t]);
      b.valid[i * b.context_length + t] = 1;
    }
    b.ids[i * b.context_length + c.size()] = static_cast<std::size_t>(kEosId);
    b.valid[i * b.context_length + c.size()] = 1;
    b.eos_row.push_back(i * b.context_length + c.size());
  }
  return b;
}

// ---------------------------------------------------------------------------
// Building blocks

namespace {

Tensor linear(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  return add(matmul(x, p.at(prefix + "/weight")), p.at(prefix + "/bias"));
}

Tensor affine_norm(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  return add(mul(layer_norm(x), p.at(prefix + "/gain")), p.at(prefix + "/bias"));
}

// [B*L, D] -> [B*H, L, dh]
Tensor split_heads(const Tensor& t, const AttentionShape& s, std::size_t dh) {
  return reshape(permute(reshape(t, {s.batch, s.length, s.heads, dh}), {0, 2, 1, 3}),
                 {s.batch * s.heads, s.length, dh});
}

// [B*H, L, dh] -> [B*L, D]
Tensor merge_heads(const Tensor& t, const AttentionShape& s, std::size_t dh) {
  return reshape(permute(reshape(t, {s.batch, s.heads, s.length, dh}), {0, 2, 1, 3}),
                 {s.batch * s.length, s.heads * dh});
}

std::size_t head_width(const Tensor& h, const AttentionShape& s) {
  if (h.rank() != 2 || h.dim(0) != s.batch * s.length || h.dim(1) % s.heads != 0) {
    throw DimensionError("attention: input " + shape_str(h.shape()) + " does not match batch " +
                         std::to_string(s.batch) + " x length " + std::to_string(s.length) +
                         " with " + std::to_string(s.heads) + " heads");
  }
  return h.dim(1) / s.heads;
}

}  // namespace

Tensor add_type_embeddings(const Tensor& x, std::span<const std::uint8_t> kinds,
                           const ModelParams& params) {
  if (x.rank() != 2 || x.dim(0) != kinds.size()) {
    throw DimensionError("add_type_embeddings: " + shape_str(x.shape()) + " with " +
                         std::to_string(kinds.size()) + " token kinds");
  }
  const std::size_t D = x.dim(1);
  std::vector<double> onehot(kinds.size() * 3, 0.0);
  for (std::size_t r = 0; r < kinds.size(); ++r) {
    const auto kind = static_cast<TokenKind>(kinds[r]);
    if (kind != TokenKind::Pad) onehot[r * 3 + static_cast<std::size_t>(kind)] = 1.0;
  }
  const Tensor table = concat({reshape(params.at("image/type/image"), {1, D}),
                               reshape(params.at("image/type/tangible"), {1, D}),
                               reshape(params.at("image/type/intangible"), {1, D})},
                              0);
  return add(x, matmul(Tensor::from({kinds.size(), 3}, std::move(onehot)), table));
}

Tensor attention_probabilities(const Tensor& h, const Tensor& bias, const Mask& key_mask,
                               const ModelParams& params, const std::string& layer,
                               const AttentionShape& shape) {
  const std::size_t dh = head_width(h, shape);
  const Tensor q = split_heads(linear(h, params, layer + "/attn/q"), shape, dh);
  const Tensor k = split_heads(linear(h, params, layer + "/attn/k"), shape, dh);
  Tensor scores = reshape(scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))),
                          {shape.batch, shape.heads, shape.length, shape.length});
  if (bias.defined()) {
    if (bias.shape() != Shape{shape.batch, shape.length, shape.length}) {
      throw DimensionError("attention bias " + shape_str(bias.shape()) + " does not match " +
                           shape_str({shape.batch, shape.length, shape.length}));
    }
    scores = add(scores, reshape(bias, {shape.batch, 1, shape.length, shape.length}));
  }
  return softmax_lastdim(scores, &key_mask);
}

Tensor multi_head_attention(const Tensor& h, const Tensor& bias, const Mask& key_mask,
                            const ModelParams& params, const std::string& layer,
                            const AttentionShape& shape) {
  const std::size_t dh = head_width(h, shape);
  const Tensor probs = reshape(attention_probabilities(h, bias, key_mask, params, layer, shape),
                               {shape.batch * shape.heads, shape.length, shape.length});
  const Tensor v = split_heads(linear(h, params, layer + "/attn/v"), shape, dh);
  return linear(merge_heads(bmm(probs, v), shape, dh), params, layer + "/attn/out");
}

Tensor attention_layer(const Tensor& x, const Tensor& bias, const Mask& key_mask,
                       const ModelParams& params, const std::string& layer,
                       const AttentionShape& shape) {
  Tensor y = add(x, multi_head_attention(affine_norm(x, params, layer + "/ln1"), bias, key_mask,
                                         params, layer, shape));
  const Tensor hidden = relu(linear(affine_norm(y, params, layer + "/ln2"), params, layer + "/ffn/in"));
  return add(y, linear(hidden, params, layer + "/ffn/out"));
}

// ---------------------------------------------------------------------------
// Encoders

Tensor image_bias(const ModelParams& params, const ImageBatch& batch) {
  if (batch.ranks.empty()) return {};
  return weights_from_ranks(batch.ranks, params.weight_encoding().weights());
}

Tensor encode_images(const ModelParams& params, const EncoderConfig& config,
                     const ImageBatch& batch) {
  return encode_images(params, config, batch, image_bias(params, batch));
}

Tensor encode_images(const ModelParams& params, const EncoderConfig& config,
                     const ImageBatch& batch, const Tensor& bias) {
  const std::size_t B = batch.batch, L = batch.context_length, d = batch.width, D = config.d_model;

  // Rows 1..L-1 of every sample through the shared token projection.
  Tensor summary = linear(Tensor::from({B, batch.d_l}, batch.image_features), params, "image/feature_mlp/0");
  summary = linear(relu(summary), params, "image/feature_mlp/1");
  summary = linear(relu(summary), params, "image/feature_mlp/2");
  Tensor x;
  if (L > 1) {
    std::vector<double> rest;
    rest.reserve(B * (L - 1) * d);
    for (std::size_t b = 0; b < B; ++b) {
      rest.insert(rest.end(), batch.tokens.begin() + (b * L + 1) * d, batch.tokens.begin() + (b + 1) * L * d);
    }
    const Tensor projected = linear(Tensor::from({B * (L - 1), d}, std::move(rest)), params, "image/token_proj");
    x = reshape(concat({reshape(summary, {B, 1, D}), reshape(projected, {B, L - 1, D})}, 1), {B * L, D});
  } else {
    x = summary;
  }
  x = add_type_embeddings(x, batch.kinds, params);

  const Mask key_mask = Mask::from({B, L}, batch.valid);
  const AttentionShape shape{B, L, config.n_heads};
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    x = attention_layer(x, bias, key_mask, params, layer_prefix("image", i), shape);
  }
  std::vector<std::size_t> readout(B);
  for (std::size_t b = 0; b < B; ++b) readout[b] = b * L;
  const Tensor pooled = affine_norm(select_rows(x, readout), params, "image/final_ln");
  return normalize_rows(matmul(pooled, params.at("image/out_proj/weight")));
}

Tensor encode_captions(const ModelParams& params, const EncoderConfig& config,
                       const TextBatch& batch) {
  const std::size_t B = batch.batch, L = batch.context_length, D = config.d_model;
  if (L > config.text_context) throw ConfigError("text_context", "batch longer than the text context");
  Tensor x = embedding(params.at("text/token_embedding"), batch.ids);
  const Tensor pos = slice(params.at("text/pos_embedding"), 0, 0, L);
  x = reshape(add(reshape(x, {B, L, D}), reshape(pos, {1, L, D})), {B * L, D});

  const Mask key_mask = Mask::from({B, L}, batch.valid);
  const AttentionShape shape{B, L, config.n_heads};
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    x = attention_layer(x, Tensor{}, key_mask, params, layer_prefix("text", i), shape);
  }
  const Tensor pooled = affine_norm(select_rows(x, batch.eos_row), params, "text/final_ln");
  return normalize_rows(matmul(pooled, params.at("text/out_proj/weight")));
}

std::vector<double> encode_image(const TokenSet& ts, const ModelParams& params,
                                 const EncoderConfig& config, bool additive_attention) {
  const TokenSet* one[] = {&ts};
  const Tensor s = encode_images(params, config, make_image_batch(one, config, additive_attention));
  return {s.data().begin(), s.data().end()};
}

std::vector<double> encode_caption(const Caption& caption, const ModelParams& params,
                                   const EncoderConfig& config) {
  const Caption* one[] = {&caption};
  const Tensor t = encode_captions(params, config, make_text_batch(one, config));
  return {t.data().begin(), t.data().end()};
}

}  // namespace semtok
