#include "semtok/eval.hpp"
#include "semtok/random.hpp"
#include "semtok/synthcorpus.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace semtok;

namespace {

Embeddings random_unit(Rng& rng, std::size_t n, std::size_t dim) {
  Embeddings e{n, dim, std::vector<double>(n * dim)};
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t k = 0; k < dim; ++k) sq += (e.values[i * dim + k] = rng.normal()) * e.values[i * dim + k];
    for (std::size_t k = 0; k < dim; ++k) e.values[i * dim + k] /= std::sqrt(sq);
  }
  return e;
}

Embeddings basis(std::size_t n, std::size_t dim, std::size_t offset = 0) {
  Embeddings e{n, dim, std::vector<double>(n * dim, 0.0)};
  for (std::size_t i = 0; i < n; ++i) e.values[i * dim + i + offset] = 1.0;
  return e;
}

Embeddings permuted(const Embeddings& e, const std::vector<std::size_t>& perm) {
  Embeddings out{e.count, e.dim, {}};
  for (std::size_t i : perm) out.values.insert(out.values.end(), e.row(i).begin(), e.row(i).end());
  return out;
}

}  // namespace

TEST_CASE("identical distinct embeddings retrieve perfectly") {
  const Embeddings e = basis(6, 8);
  const SimilarityReport r = similarity_report(e, e);
  CHECK(r.t2i_top1 == 1.0);
  CHECK(r.i2t_top1 == 1.0);
  CHECK(r.diag_mean == 1.0);
  CHECK(r.offdiag_mean == 0.0);
}

TEST_CASE("diagonal and off-diagonal means are exact") {
  Rng rng(1);
  const Embeddings s = random_unit(rng, 7, 5), t = random_unit(rng, 7, 5);
  const SimilarityReport r = similarity_report(s, t);
  double diag = 0.0, off = 0.0;
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 7; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < 5; ++k) dot += s.row(i)[k] * t.row(j)[k];
      (i == j ? diag : off) += dot;
      CHECK(r.matrix[i * 7 + j] == doctest::Approx(dot).epsilon(1e-14));
    }
  }
  CHECK(r.diag_mean == doctest::Approx(diag / 7).epsilon(1e-14));
  CHECK(r.offdiag_mean == doctest::Approx(off / 42).epsilon(1e-14));
}

TEST_CASE("ties go to the lowest index") {
  Embeddings s{2, 2, {1, 0, 1, 0}};
  Embeddings t{2, 2, {1, 0, 1, 0}};
  const SimilarityReport r = similarity_report(s, t);
  CHECK(r.i2t_top1 == 0.5);
  CHECK(r.t2i_top1 == 0.5);
}

TEST_CASE("retrieval accuracy is invariant under joint permutation") {
  Rng rng(2);
  Embeddings s = random_unit(rng, 20, 4), t = s;
  for (double& v : t.values) v += 0.3 * rng.normal();
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  const SimilarityReport a = similarity_report(s, t), b = similarity_report(permuted(s, perm), permuted(t, perm));
  CHECK(a.t2i_top1 == b.t2i_top1);
  CHECK(a.i2t_top1 == b.i2t_top1);
  CHECK(a.diag_mean == doctest::Approx(b.diag_mean).epsilon(1e-14));
}

TEST_CASE("random embeddings retrieve at chance") {
  const std::size_t n = 100;
  std::vector<double> acc;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(derive_seed(seed, 77));
    const SimilarityReport r = similarity_report(random_unit(rng, n, 16), random_unit(rng, n, 16));
    acc.push_back(r.t2i_top1);
  }
  const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / acc.size();
  double var = 0.0;
  for (double a : acc) var += (a - mean) * (a - mean);
  const double se = std::sqrt(var / (acc.size() - 1) / acc.size());
  MESSAGE("mean " << mean << " se " << se);
  CHECK(std::abs(mean - 1.0 / n) <= 3 * se);
}

TEST_CASE("pairwise choice") {
  const Embeddings img = basis(4, 8);
  CHECK(pairwise_choice_accuracy(img, img, img) == 0.0);           // ties lose
  CHECK(pairwise_choice_accuracy(img, img, basis(4, 8, 4)) == 1.0);  // orthogonal distractors
  CHECK_THROWS_AS(pairwise_choice_accuracy(img, img, basis(3, 8)), DimensionError);
}

TEST_CASE("untrained model chooses at chance on relation swaps") {
  EncoderConfig cfg;
  const SyntheticCorpus data = generate(500, SceneSpec{}, 123, "probe");
  std::vector<ChoiceProbe> probes;
  for (std::size_t i = 0; i < data.truth.size(); ++i) {
    probes.push_back({&data.corpus.records[i], data.truth[i].swap->correct, data.truth[i].swap->swapped});
  }
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    total += pairwise_choice_eval(ModelParams::initialize(cfg, 1000 + seed), cfg, probes, true);
  }
  MESSAGE("mean accuracy " << total / 5);
  CHECK(std::abs(total / 5 - 0.5) <= 0.05);
}

TEST_CASE("group scores") {
  const QuadSimilarity aligned{1.0, 0.0, 0.0, 1.0};
  const GroupScores g = group_scores(std::span(&aligned, 1));
  CHECK(g.text_correct == 1.0);
  CHECK(g.image_correct == 1.0);
  CHECK(g.group_correct == 1.0);

  // Each image picks its own caption, but both captions prefer image B.
  const QuadSimilarity half{0.5, 0.1, 0.9, 0.95};
  const GroupScores h = group_scores(std::span(&half, 1));
  CHECK(h.text_correct == 1.0);
  CHECK(h.image_correct == 0.0);
  CHECK(h.group_correct == 0.0);

  const QuadSimilarity tied{0.5, 0.5, 0.5, 0.5};
  CHECK(group_scores(std::span(&tied, 1)).text_correct == 0.0);
}

TEST_CASE("random similarity quads: group score near 1/6 and never above its parts") {
  Rng rng(3);
  std::vector<QuadSimilarity> quads;
  for (int i = 0; i < 60000; ++i) quads.push_back({rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()});
  const GroupScores g = group_scores(quads);
  // Independent continuous scores: text and image each 1/4; both requires
  // aa and bb to be the two largest of four, probability 1/6.
  CHECK(g.text_correct == doctest::Approx(0.25).epsilon(0.04));
  CHECK(g.image_correct == doctest::Approx(0.25).epsilon(0.04));
  CHECK(g.group_correct == doctest::Approx(1.0 / 6.0).epsilon(0.04));
  CHECK(g.group_correct <= std::min(g.text_correct, g.image_correct));

  for (int trial = 0; trial < 200; ++trial) {
    std::vector<QuadSimilarity> few;
    for (int k = 0; k < 5; ++k) few.push_back({rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()});
    const GroupScores s = group_scores(few);
    CHECK(s.group_correct <= std::min(s.text_correct, s.image_correct));
  }
}

TEST_CASE("embedding cache round trip") {
  Rng rng(4);
  const Embeddings e = random_unit(rng, 5, 3);
  const auto dir = std::filesystem::temp_directory_path() / "semtok-tests" / "cache";
  std::filesystem::remove_all(dir);
  CHECK_FALSE(load_cached_embeddings(dir, 1, 2, "images"));
  store_cached_embeddings(dir, 1, 2, "images", e);
  const auto back = load_cached_embeddings(dir, 1, 2, "images");
  REQUIRE(back);
  CHECK(back->values == e.values);
  CHECK_FALSE(load_cached_embeddings(dir, 1, 3, "images"));
}
