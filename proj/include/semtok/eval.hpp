#pragma once

// Retrieval metrics over image/caption embeddings and the two choice
// protocols (pairwise caption choice, 2x2 group scoring).
//
// Every comparison is strict: a tie counts as a failure.

#include "semtok/encoder.hpp"
#include "semtok/tokens.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace semtok {

// Row-major [count x dim] unit vectors.
struct Embeddings {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
};

struct SimilarityReport {
  std::size_t n_images = 0;
  std::size_t n_texts = 0;
  std::vector<double> matrix;  // [n_images x n_texts] cosine similarities
  double t2i_top1 = 0.0;
  double i2t_top1 = 0.0;
  double diag_mean = 0.0;
  double offdiag_mean = 0.0;
};

double cosine(std::span<const double> a, std::span<const double> b);

// Image i is paired with caption i. Argmax ties resolve to the lowest index.
SimilarityReport similarity_report(const Embeddings& images, const Embeddings& texts);

Embeddings embed_images(const ModelParams& params, const EncoderConfig& config,
                        std::span<const TokenSet> records, bool additive_attention,
                        std::size_t batch_size = 64);
Embeddings embed_images(const ModelParams& params, const EncoderConfig& config,
                        std::span<const TokenSet* const> records, bool additive_attention,
                        std::size_t batch_size = 64);
Embeddings embed_captions(const ModelParams& params, const EncoderConfig& config,
                          std::span<const Caption* const> captions, std::size_t batch_size = 64);

// Uses each record's first caption.
SimilarityReport retrieval_eval(const ModelParams& params, const EncoderConfig& config,
                                std::span<const TokenSet> records, bool additive_attention);

struct ChoiceProbe {
  const TokenSet* image = nullptr;
  Caption correct;
  Caption distractor;
};

// Fraction of i with cos(s_i, correct_i) > cos(s_i, distractor_i).
double pairwise_choice_accuracy(const Embeddings& images, const Embeddings& correct,
                                const Embeddings& distractors);
double pairwise_choice_eval(const ModelParams& params, const EncoderConfig& config,
                            std::span<const ChoiceProbe> probes, bool additive_attention);

struct GroupQuad {
  const TokenSet* image_a = nullptr;
  const TokenSet* image_b = nullptr;
  Caption caption_a;
  Caption caption_b;
};

struct GroupScores {
  double text_correct = 0.0;
  double image_correct = 0.0;
  double group_correct = 0.0;
  std::size_t quads = 0;
};

// One 2x2 block of similarities: sim[i][j] = cos(image i, caption j).
struct QuadSimilarity {
  double aa, ab, ba, bb;
};

GroupScores group_scores(std::span<const QuadSimilarity> quads);
GroupScores group_eval(const ModelParams& params, const EncoderConfig& config,
                       std::span<const GroupQuad> quads, bool additive_attention);

// Embedding cache keyed by (checkpoint hash, corpus hash, kind).
std::optional<Embeddings> load_cached_embeddings(const std::filesystem::path& dir,
                                                 std::uint64_t checkpoint_hash,
                                                 std::uint64_t corpus_hash, const std::string& kind);
void store_cached_embeddings(const std::filesystem::path& dir, std::uint64_t checkpoint_hash,
                             std::uint64_t corpus_hash, const std::string& kind,
                             const Embeddings& embeddings);

}  // namespace semtok
