#include "semtok/checkpoint.hpp"
#include "semtok/synthcorpus.hpp"
#include "semtok/trainer.hpp"
#include "semtok/verify.hpp"

#include <chrono>
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>

using namespace semtok;
namespace fs = std::filesystem;

namespace {

Tensor rows(std::size_t n, std::size_t e, std::vector<double> v) { return Tensor::from({n, e}, std::move(v), true); }

Tensor unit_rows(Rng& rng, std::size_t n, std::size_t e) {
  std::vector<double> v(n * e);
  for (double& x : v) x = rng.normal();
  return normalize_rows(Tensor::from({n, e}, v)).detach();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "semtok-tests" / name;
  fs::remove_all(dir);
  return dir;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.d = 8;
  c.d_l = 8;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.context_length = 14;
  c.embed_dim = 16;
  c.vocab_size = 24;
  c.text_context = 32;
  return c;
}

SceneSpec small_scenes() {
  SceneSpec s;
  s.object_vocab = 8;
  s.predicate_vocab = 6;
  s.d = 8;
  s.max_objects = 5;
  s.max_triplets = 3;
  return s;
}

std::vector<std::string> step_lines(const std::vector<std::string>& log) {
  std::vector<std::string> out;
  for (const auto& l : log) {
    if (l.find("\"event\":\"step\"") != std::string::npos) out.push_back(l);
  }
  return out;
}

}  // namespace

TEST_CASE("contrastive loss of a single pair is zero") {
  const Tensor s = rows(1, 2, {1, 0});
  const Tensor tau = Tensor::from({1}, {std::log(10.0)}, true);
  CHECK(contrastive_loss(s, s, tau).item() == 0.0);
}

TEST_CASE("contrastive loss with orthonormal matches at scale 100") {
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  const Tensor s = rows(4, 4, eye);
  const Tensor tau = Tensor::from({1}, {std::log(100.0)});
  const double loss = contrastive_loss(s, s, tau).item();
  // Each row is softmax([100, 0, 0, 0]); cross-entropy log(1 + 3 e^-100).
  CHECK(loss == doctest::Approx(std::log1p(3.0 * std::exp(-100.0))).epsilon(1e-12));
  CHECK(loss < 1e-8);
}

TEST_CASE("contrastive loss clamps the scale at the maximum") {
  Rng rng(1);
  const Tensor s = unit_rows(rng, 5, 3), t = unit_rows(rng, 5, 3);
  const double at_cap = contrastive_loss(s, t, Tensor::from({1}, {std::log(100.0)})).item();
  const double beyond = contrastive_loss(s, t, Tensor::from({1}, {std::log(1000.0)})).item();
  CHECK(at_cap == beyond);
}

TEST_CASE("contrastive loss is non-negative and invariant to joint permutation") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(6);
    const Tensor s = unit_rows(rng, n, 4), t = unit_rows(rng, n, 4);
    const Tensor tau = Tensor::from({1}, {rng.uniform() * 4.0});
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    const double base = contrastive_loss(s, t, tau).item();
    const double moved = contrastive_loss(select_rows(s, perm), select_rows(t, perm), tau).item();
    CHECK(base >= 0.0);
    CHECK(moved == doctest::Approx(base).epsilon(1e-13));
  }
}

TEST_CASE("contrastive loss rejects rows that are not unit norm") {
  const Tensor s = rows(2, 2, {1, 0, 0, 1.01});
  CHECK_THROWS_AS(contrastive_loss(s, s, Tensor::from({1}, {0.0})), std::domain_error);
}

TEST_CASE("contrastive loss gradient check on a 2-sample batch") {
  Rng rng(3);
  Tensor s_raw = Tensor::from({2, 3}, {0.3, -1.2, 0.8, 1.1, 0.4, -0.5}, true);
  Tensor t_raw = Tensor::from({2, 3}, {-0.7, 0.2, 1.3, 0.9, -0.6, 0.1}, true);
  Tensor tau = Tensor::from({1}, {1.5}, true);
  std::vector<Tensor> params{s_raw, t_raw, tau};
  const auto f = [&] { return contrastive_loss(normalize_rows(s_raw), normalize_rows(t_raw), tau); };
  const GradCheckReport r = grad_check(f, params, 1e-6, 1e-5);
  INFO(r.max_rel_error);
  CHECK(r.passed);
}

TEST_CASE("learning-rate schedule") {
  const std::size_t total = 1000, warmup = 100;
  const double peak = 5e-5;
  CHECK(learning_rate(0, total, warmup, peak) == 0.0);
  CHECK(learning_rate(50, total, warmup, peak) == doctest::Approx(peak / 2));
  CHECK(learning_rate(warmup, total, warmup, peak) == peak);
  CHECK(learning_rate(total - 1, total, warmup, peak) < 1e-3 * peak);
  for (std::size_t s = warmup; s + 1 < total; ++s) {
    CHECK(learning_rate(s + 1, total, warmup, peak) <= learning_rate(s, total, warmup, peak));
  }
}

TEST_CASE("AdamW update rule") {
  EncoderConfig cfg = tiny_config();
  SUBCASE("zero gradients and no decay leave parameters unchanged") {
    ModelParams p = ModelParams::initialize(cfg, 1);
    const ModelParams before = p.clone();
    AdamW opt(p, {.weight_decay = 0.0});
    for (auto& e : p.entries()) e.value.zero_grad();
    opt.step(p, 0.1);
    for (std::size_t i = 0; i < p.entries().size(); ++i) {
      const auto a = p.entries()[i].value.data(), b = before.entries()[i].value.data();
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
  SUBCASE("first step with constant unit gradient moves by about -lr") {
    ModelParams p = ModelParams::initialize(cfg, 2);
    Tensor& tau = p.at("logit_scale/tau");
    const double start = tau.item();
    AdamW opt(p, {.weight_decay = 0.0});
    tau.mutable_grad()[0] = 1.0;
    opt.step(p, 0.1);
    // m_hat = 1, v_hat = 1: step = 0.1 / (1 + 1e-8)
    CHECK(tau.item() - start == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
  }
  SUBCASE("decoupled decay shrinks a gradient-free tensor geometrically") {
    ModelParams p = ModelParams::initialize(cfg, 3);
    const std::vector<double> w0(p.at("image/out_proj/weight").data().begin(), p.at("image/out_proj/weight").data().end());
    AdamW opt(p, {.weight_decay = 0.1});
    for (int k = 0; k < 3; ++k) opt.step(p, 0.01);
    const auto w = p.at("image/out_proj/weight").data();
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(w[i] == doctest::Approx(w0[i] * std::pow(1 - 0.01 * 0.1, 3)).epsilon(1e-13));
    // Exempt tensors are not decayed.
    const ModelParams fresh = ModelParams::initialize(cfg, 3);
    CHECK(p.at("text/pos_embedding").data()[0] == fresh.at("text/pos_embedding").data()[0]);
    CHECK(p.at("logit_scale/tau").item() == fresh.at("logit_scale/tau").item());
  }
  SUBCASE("a[0] never moves") {
    ModelParams p = ModelParams::initialize(cfg, 4);
    AdamW opt(p, {.weight_decay = 0.5});
    for (int k = 0; k < 5; ++k) {
      for (double& g : p.at("image/rank_weights/a").mutable_grad()) g = 1.0;
      opt.step(p, 0.1);
    }
    CHECK(p.at("image/rank_weights/a").data()[0] == 0.0);
    CHECK(p.at("image/rank_weights/a").data()[1] != 0.0);
  }
  SUBCASE("non-finite gradients abort") {
    ModelParams p = ModelParams::initialize(cfg, 5);
    AdamW opt(p, {});
    p.at("logit_scale/tau").mutable_grad()[0] = NAN;
    CHECK_THROWS_AS(opt.step(p, 0.1), TrainingError);
  }
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.warmup_epochs = c.epochs + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"epochs": 3, "momentum": 0.9})").get<TrainConfig>(), ConfigError);
  TrainConfig d;
  d.grad_clip = 1.5;
  d.lr = 1e-5;
  const TrainConfig back = nlohmann::json(d).get<TrainConfig>();
  CHECK(back.grad_clip == d.grad_clip);
  CHECK(back.lr == d.lr);
}

TEST_CASE("memorization of 8 samples") {
  const SceneSpec spec;
  const SyntheticCorpus data = generate(8, spec, 5);
  EncoderConfig ec;
  ec.vocab_size = Vocabulary(spec.object_vocab, spec.predicate_vocab).size();
  TrainConfig tc;
  tc.batch_size = 8;
  tc.epochs = 200;
  tc.warmup_epochs = 10;
  tc.lr = 3e-3;
  tc.weight_decay = 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = train(data.corpus, tc, ec);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 60.0);
  MESSAGE("final loss " << r.last_loss);
  CHECK(r.steps == 200);
  CHECK(r.last_loss < 0.05);
}

TEST_CASE("ablation path never builds rank matrices") {
  const SyntheticCorpus data = generate(16, small_scenes(), 6);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.epochs = 2;
  tc.warmup_epochs = 1;
  tc.additive_attention = false;
  const auto before = build_ranks_calls();
  train(data.corpus, tc, small_encoder());
  CHECK(build_ranks_calls() == before);
  tc.additive_attention = true;
  train(data.corpus, tc, small_encoder());
  CHECK(build_ranks_calls() == before + 2 * 16);
}

TEST_CASE("same seed gives identical logs; resume continues the same run") {
  const SyntheticCorpus data = generate(40, small_scenes(), 7);
  const SyntheticCorpus val = generate(10, small_scenes(), 8, "val");
  TrainConfig tc;
  tc.batch_size = 8;
  tc.epochs = 4;
  tc.warmup_epochs = 1;
  tc.seed = 11;
  tc.checkpoint_every = 2;
  TrainOptions opt;
  opt.validation = &val.corpus.records;
  opt.groups = twin_groups(data.corpus.records, data.truth);

  opt.out_dir = fresh_dir("run-a");
  const TrainResult a = train(data.corpus, tc, small_encoder(), opt);
  opt.out_dir = fresh_dir("run-b");
  const TrainResult b = train(data.corpus, tc, small_encoder(), opt);
  CHECK(a.log == b.log);
  CHECK(file_hash(fresh_dir("x").parent_path() / "run-a" / "final.ckpt") ==
        file_hash(fresh_dir("y").parent_path() / "run-b" / "final.ckpt"));

  TrainOptions resume = opt;
  resume.out_dir = fresh_dir("run-c");
  resume.resume_from = fs::temp_directory_path() / "semtok-tests" / "run-a" / "checkpoints" / "epoch-0002.ckpt";
  const TrainResult c = train(data.corpus, tc, small_encoder(), resume);
  const std::vector<std::string> tail(a.log.begin() + static_cast<std::ptrdiff_t>(a.log.size() - c.log.size()), a.log.end());
  CHECK(c.log.size() == a.log.size() / 2);
  CHECK(c.log == tail);
  CHECK(c.steps == a.steps);

  tc.seed = 12;
  opt.out_dir.clear();
  const TrainResult d = train(data.corpus, tc, small_encoder(), opt);
  CHECK(step_lines(d.log) != step_lines(a.log));
}

TEST_CASE("zero epochs writes the initial parameters and an empty log") {
  const SyntheticCorpus data = generate(4, small_scenes(), 9);
  TrainConfig tc;
  tc.epochs = 0;
  tc.warmup_epochs = 0;
  TrainOptions opt;
  opt.out_dir = fresh_dir("zero");
  const TrainResult r = train(data.corpus, tc, small_encoder(), opt);
  CHECK(r.log.empty());
  const LoadedCheckpoint ck = load_checkpoint(opt.out_dir / "final.ckpt");
  const ModelParams init = ModelParams::initialize(small_encoder(), tc.seed);
  for (std::size_t i = 0; i < init.entries().size(); ++i) {
    const auto a = init.entries()[i].value.data();
    const auto b = ck.params.at(init.entries()[i].path).data();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("non-finite inputs abort with the batch sample ids") {
  SyntheticCorpus data = generate(4, small_scenes(), 10);
  data.corpus.records[2].tangible[0][0] = 1e308;
  data.corpus.records[2].image_features[0] = 1e308;
  TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 1;
  tc.warmup_epochs = 0;
  try {
    train(data.corpus, tc, small_encoder());
    FAIL("expected a training error");
  } catch (const TrainingError& e) {
    CHECK(e.sample_ids().size() == 4);
    CHECK(std::find(e.sample_ids().begin(), e.sample_ids().end(), data.corpus.records[2].sample_id) !=
          e.sample_ids().end());
  }
}

TEST_CASE("corpus width must match the encoder") {
  SyntheticCorpus data = generate(4, small_scenes(), 11);
  EncoderConfig ec = small_encoder();
  ec.d = 6;
  TrainConfig tc;
  tc.epochs = 1;
  tc.warmup_epochs = 0;
  CHECK_THROWS_AS(train(data.corpus, tc, ec), ConfigError);
}
