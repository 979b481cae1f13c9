#include "semtok/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace semtok {

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: widths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

SimilarityReport similarity_report(const Embeddings& images, const Embeddings& texts) {
  if (images.dim != texts.dim) {
    throw ConfigError("embed_dim", "image width " + std::to_string(images.dim) +
                                       " differs from text width " + std::to_string(texts.dim));
  }
  SimilarityReport r;
  r.n_images = images.count;
  r.n_texts = texts.count;
  r.matrix.resize(images.count * texts.count);
  for (std::size_t i = 0; i < images.count; ++i) {
    for (std::size_t j = 0; j < texts.count; ++j) {
      r.matrix[i * texts.count + j] = cosine(images.row(i), texts.row(j));
    }
  }
  const std::size_t n = std::min(images.count, texts.count);
  if (n == 0) return r;

  std::size_t i2t_hits = 0, t2i_hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < texts.count; ++j) {
      if (r.matrix[i * texts.count + j] > r.matrix[i * texts.count + best]) best = j;
    }
    i2t_hits += best == i;
  }
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < images.count; ++i) {
      if (r.matrix[i * texts.count + j] > r.matrix[best * texts.count + j]) best = i;
    }
    t2i_hits += best == j;
  }
  r.i2t_top1 = static_cast<double>(i2t_hits) / static_cast<double>(n);
  r.t2i_top1 = static_cast<double>(t2i_hits) / static_cast<double>(n);

  double diag = 0.0, off = 0.0;
  std::size_t n_off = 0;
  for (std::size_t i = 0; i < images.count; ++i) {
    for (std::size_t j = 0; j < texts.count; ++j) {
      if (i == j) {
        diag += r.matrix[i * texts.count + j];
      } else {
        off += r.matrix[i * texts.count + j];
        ++n_off;
      }
    }
  }
  r.diag_mean = diag / static_cast<double>(n);
  r.offdiag_mean = n_off ? off / static_cast<double>(n_off) : 0.0;
  return r;
}

Embeddings embed_images(const ModelParams& params, const EncoderConfig& config,
                        std::span<const TokenSet* const> records, bool additive_attention,
                        std::size_t batch_size) {
  Embeddings out;
  out.count = records.size();
  out.dim = config.embed_dim;
  out.values.reserve(out.count * out.dim);
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const auto chunk = records.subspan(start, std::min(batch_size, records.size() - start));
    const Tensor s = encode_images(params, config, make_image_batch(chunk, config, additive_attention));
    out.values.insert(out.values.end(), s.data().begin(), s.data().end());
  }
  return out;
}

Embeddings embed_images(const ModelParams& params, const EncoderConfig& config,
                        std::span<const TokenSet> records, bool additive_attention,
                        std::size_t batch_size) {
  std::vector<const TokenSet*> ptrs;
  ptrs.reserve(records.size());
  for (const auto& r : records) ptrs.push_back(&r);
  return embed_images(params, config, ptrs, additive_attention, batch_size);
}

Embeddings embed_captions(const ModelParams& params, const EncoderConfig& config,
                          std::span<const Caption* const> captions, std::size_t batch_size) {
  Embeddings out;
  out.count = captions.size();
  out.dim = config.embed_dim;
  out.values.reserve(out.count * out.dim);
  for (std::size_t start = 0; start < captions.size(); start += batch_size) {
    const auto chunk = captions.subspan(start, std::min(batch_size, captions.size() - start));
    const Tensor t = encode_captions(params, config, make_text_batch(chunk, config));
    out.values.insert(out.values.end(), t.data().begin(), t.data().end());
  }
  return out;
}

SimilarityReport retrieval_eval(const ModelParams& params, const EncoderConfig& config,
                                std::span<const TokenSet> records, bool additive_attention) {
  std::vector<const Caption*> captions;
  for (const auto& r : records) captions.push_back(&r.caption());
  return similarity_report(embed_images(params, config, records, additive_attention),
                           embed_captions(params, config, captions));
}

double pairwise_choice_accuracy(const Embeddings& images, const Embeddings& correct,
                                const Embeddings& distractors) {
  if (images.count != correct.count || images.count != distractors.count) {
    throw DimensionError("pairwise_choice_accuracy: probe counts differ");
  }
  if (images.count == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < images.count; ++i) {
    hits += cosine(images.row(i), correct.row(i)) > cosine(images.row(i), distractors.row(i));
  }
  return static_cast<double>(hits) / static_cast<double>(images.count);
}

double pairwise_choice_eval(const ModelParams& params, const EncoderConfig& config,
                            std::span<const ChoiceProbe> probes, bool additive_attention) {
  std::vector<const TokenSet*> images;
  std::vector<const Caption*> correct, distractors;
  for (const auto& p : probes) {
    images.push_back(p.image);
    correct.push_back(&p.correct);
    distractors.push_back(&p.distractor);
  }
  return pairwise_choice_accuracy(embed_images(params, config, images, additive_attention),
                                  embed_captions(params, config, correct),
                                  embed_captions(params, config, distractors));
}

GroupScores group_scores(std::span<const QuadSimilarity> quads) {
  GroupScores g;
  g.quads = quads.size();
  if (quads.empty()) return g;
  std::size_t text = 0, image = 0, group = 0;
  for (const auto& q : quads) {
    // Each image prefers its own caption.
    const bool t = q.aa > q.ab && q.bb > q.ba;
    // Each caption prefers its own image.
    const bool i = q.aa > q.ba && q.bb > q.ab;
    text += t;
    image += i;
    group += t && i;
  }
  const double n = static_cast<double>(quads.size());
  g.text_correct = static_cast<double>(text) / n;
  g.image_correct = static_cast<double>(image) / n;
  g.group_correct = static_cast<double>(group) / n;
  return g;
}

GroupScores group_eval(const ModelParams& params, const EncoderConfig& config,
                       std::span<const GroupQuad> quads, bool additive_attention) {
  std::vector<const TokenSet*> images;
  std::vector<const Caption*> captions;
  for (const auto& q : quads) {
    images.push_back(q.image_a);
    images.push_back(q.image_b);
    captions.push_back(&q.caption_a);
    captions.push_back(&q.caption_b);
  }
  const Embeddings s = embed_images(params, config, images, additive_attention);
  const Embeddings t = embed_captions(params, config, captions);
  std::vector<QuadSimilarity> sims;
  for (std::size_t k = 0; k < quads.size(); ++k) {
    const std::size_t a = 2 * k, b = 2 * k + 1;
    sims.push_back({cosine(s.row(a), t.row(a)), cosine(s.row(a), t.row(b)), cosine(s.row(b), t.row(a)),
                    cosine(s.row(b), t.row(b))});
  }
  return group_scores(sims);
}

// ---------------------------------------------------------------------------

namespace {

std::filesystem::path cache_file(const std::filesystem::path& dir, std::uint64_t ckpt,
                                 std::uint64_t corpus, const std::string& kind) {
  char name[96];
  std::snprintf(name, sizeof name, "%016llx-%016llx-", static_cast<unsigned long long>(ckpt),
                static_cast<unsigned long long>(corpus));
  return dir / (std::string(name) + kind + ".emb");
}

}  // namespace

std::optional<Embeddings> load_cached_embeddings(const std::filesystem::path& dir,
                                                 std::uint64_t checkpoint_hash,
                                                 std::uint64_t corpus_hash, const std::string& kind) {
  std::ifstream in(cache_file(dir, checkpoint_hash, corpus_hash, kind), std::ios::binary);
  if (!in) return std::nullopt;
  Embeddings e;
  std::uint64_t count = 0, dim = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  in.read(reinterpret_cast<char*>(&dim), sizeof dim);
  if (!in) return std::nullopt;
  e.count = count;
  e.dim = dim;
  e.values.resize(count * dim);
  in.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(e.values.size() * sizeof(double)));
  if (!in) return std::nullopt;
  return e;
}

void store_cached_embeddings(const std::filesystem::path& dir, std::uint64_t checkpoint_hash,
                             std::uint64_t corpus_hash, const std::string& kind,
                             const Embeddings& embeddings) {
  std::filesystem::create_directories(dir);
  std::ofstream out(cache_file(dir, checkpoint_hash, corpus_hash, kind), std::ios::binary);
  const std::uint64_t count = embeddings.count, dim = embeddings.dim;
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
  out.write(reinterpret_cast<const char*>(embeddings.values.data()),
            static_cast<std::streamsize>(embeddings.values.size() * sizeof(double)));
}

}  // namespace semtok
