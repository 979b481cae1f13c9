#include "semtok/verify.hpp"

#include "semtok/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace semtok {

RankMatrix oracle_ranks(const TokenSet& ts, std::size_t context_length) {
  const std::size_t n_v = ts.tangible.size();
  const std::size_t n = ts.token_count();
  const auto pv = [](std::size_t j) { return 1 + j; };
  const auto pu = [n_v](std::size_t c) { return 1 + n_v + c; };

  RankMatrix rm;
  rm.size = context_length;
  rm.ranks.assign(context_length * context_length, 0);
  rm.valid_mask.assign(context_length, 0);
  for (std::size_t p = 0; p < std::min(n, context_length); ++p) rm.valid_mask[p] = 1;

  for (std::size_t p = 0; p < context_length; ++p) {
    for (std::size_t q = 0; q < context_length; ++q) {
      if (p == q || p >= n || q >= n) continue;
      int best = 0;
      for (const Triplet& t : ts.triplets) {
        if (p == pv(t.subject) && q == pv(t.object)) best = std::max(best, 7);
        if ((p == pv(t.subject) || p == pv(t.object)) && q == pu(t.predicate)) best = std::max(best, 6);
        if (p == pu(t.predicate) && (q == pv(t.subject) || q == pv(t.object))) best = std::max(best, 5);
      }
      for (std::size_t a = 0; a < ts.neighbors.size(); ++a) {
        for (std::size_t k = 0; k < ts.neighbors[a].size(); ++k) {
          if (p == pv(a) && q == pv(ts.neighbors[a][k])) best = std::max(best, 4 - static_cast<int>(k));
        }
      }
      rm.ranks[p * context_length + q] = static_cast<std::uint8_t>(best);
    }
  }
  return rm;
}

TokenSet random_token_set(Rng& rng, const RandomTokenSetOptions& options, const std::string& sample_id) {
  TokenSet ts;
  ts.sample_id = sample_id;
  const auto vec = [&](std::size_t width) {
    Vec v(width);
    for (double& x : v) x = (2.0 * rng.uniform() - 1.0) * options.value_range;
    return v;
  };
  const std::size_t n_v = rng.below(options.max_tangible + 1);
  const std::size_t n_u = rng.below(options.max_intangible + 1);
  ts.image_features = vec(options.d_l);
  for (std::size_t i = 0; i < n_v; ++i) ts.tangible.push_back(vec(options.d));
  for (std::size_t i = 0; i < n_u; ++i) ts.intangible.push_back(vec(options.d));

  if (n_v >= 2) {
    for (std::size_t c = 0; c < n_u; ++c) {
      if (rng.below(4) == 0) continue;  // leave some predicates unused
      const std::size_t s = rng.below(n_v);
      std::size_t o = rng.below(n_v - 1);
      if (o >= s) ++o;
      ts.triplets.push_back({s, o, c});
    }
    rng.shuffle(ts.triplets);
  }

  ts.neighbors.resize(n_v);
  for (std::size_t a = 0; a < n_v; ++a) {
    std::vector<std::size_t> others;
    for (std::size_t b = 0; b < n_v; ++b) {
      if (b != a) others.push_back(b);
    }
    rng.shuffle(others);
    others.resize(std::min(others.size(), rng.below(kMaxNeighbors + 1)));
    ts.neighbors[a] = std::move(others);
  }
  ts.captions = {{2, 3}};
  return ts;
}

TokenSet permute_tokens(const TokenSet& ts, const std::vector<std::size_t>& tangible,
                        const std::vector<std::size_t>& intangible) {
  std::vector<std::size_t> new_v(tangible.size()), new_u(intangible.size());
  for (std::size_t i = 0; i < tangible.size(); ++i) new_v[tangible[i]] = i;
  for (std::size_t i = 0; i < intangible.size(); ++i) new_u[intangible[i]] = i;

  TokenSet out = ts;
  for (std::size_t i = 0; i < tangible.size(); ++i) out.tangible[i] = ts.tangible[tangible[i]];
  for (std::size_t i = 0; i < intangible.size(); ++i) out.intangible[i] = ts.intangible[intangible[i]];
  for (auto& t : out.triplets) {
    t = {new_v[t.subject], new_v[t.object], new_u[t.predicate]};
  }
  for (std::size_t i = 0; i < tangible.size(); ++i) {
    out.neighbors[i].clear();
    for (std::size_t b : ts.neighbors[tangible[i]]) out.neighbors[i].push_back(new_v[b]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reference forward pass.

namespace {

using Matrix = std::vector<Vec>;

Vec values(const ModelParams& p, const std::string& path) {
  const auto d = p.at(path).data();
  return {d.begin(), d.end()};
}

Vec affine(const Vec& x, const ModelParams& p, const std::string& prefix, bool with_bias = true) {
  const Tensor& w = p.at(prefix + "/weight");
  const std::size_t in = w.dim(0), out = w.dim(1);
  const auto wd = w.data();
  Vec y = with_bias ? values(p, prefix + "/bias") : Vec(out, 0.0);
  for (std::size_t i = 0; i < in; ++i) {
    for (std::size_t j = 0; j < out; ++j) y[j] += x[i] * wd[i * out + j];
  }
  return y;
}

Vec rectify(Vec x) {
  for (double& v : x) v = std::max(v, 0.0);
  return x;
}

Vec normed(const Vec& x, const ModelParams& p, const std::string& prefix) {
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  const Vec gain = values(p, prefix + "/gain"), bias = values(p, prefix + "/bias");
  Vec y(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) y[j] = (x[j] - mu) / std::sqrt(var + 1e-5) * gain[j] + bias[j];
  return y;
}

void block(Matrix& x, const Matrix& bias, const ModelParams& p, const std::string& layer, std::size_t heads) {
  const std::size_t n = x.size(), D = x.front().size(), dh = D / heads;
  Matrix q(n), k(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec h = normed(x[i], p, layer + "/ln1");
    q[i] = affine(h, p, layer + "/attn/q");
    k[i] = affine(h, p, layer + "/attn/k");
    v[i] = affine(h, p, layer + "/attn/v");
  }
  Matrix mixed(n, Vec(D, 0.0));
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < n; ++i) {
      Vec score(n);
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) dot += q[i][c] * k[j][c];
        score[j] = dot / std::sqrt(static_cast<double>(dh)) + bias[i][j];
      }
      const double top = *std::max_element(score.begin(), score.end());
      double z = 0.0;
      for (double& s : score) z += (s = std::exp(s - top));
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) mixed[i][c] += score[j] / z * v[j][c];
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Vec attended = affine(mixed[i], p, layer + "/attn/out");
    for (std::size_t c = 0; c < D; ++c) x[i][c] += attended[c];
    const Vec ff = affine(rectify(affine(normed(x[i], p, layer + "/ln2"), p, layer + "/ffn/in")), p,
                          layer + "/ffn/out");
    for (std::size_t c = 0; c < D; ++c) x[i][c] += ff[c];
  }
}

}  // namespace

std::vector<double> reference_encode_image(const TokenSet& ts, const ModelParams& params,
                                           const EncoderConfig& config, bool additive_attention) {
  const std::size_t n = ts.token_count();
  Matrix x;
  x.push_back(affine(rectify(affine(rectify(affine(ts.image_features, params, "image/feature_mlp/0")), params,
                                    "image/feature_mlp/1")),
                     params, "image/feature_mlp/2"));
  for (const auto& v : ts.tangible) x.push_back(affine(v, params, "image/token_proj"));
  for (const auto& u : ts.intangible) x.push_back(affine(u, params, "image/token_proj"));
  const Vec pl = values(params, "image/type/image"), pv = values(params, "image/type/tangible"),
            pu = values(params, "image/type/intangible");
  for (std::size_t i = 0; i < n; ++i) {
    const Vec& e = i == 0 ? pl : (i <= ts.tangible.size() ? pv : pu);
    for (std::size_t c = 0; c < e.size(); ++c) x[i][c] += e[c];
  }

  Matrix bias(n, Vec(n, 0.0));
  if (additive_attention) {
    const Vec a = values(params, "image/rank_weights/a");
    Vec w(a.size());
    double run = 0.0;
    for (std::size_t r = 0; r < a.size(); ++r) w[r] = (run += std::exp(a[r]));
    const RankMatrix rm = oracle_ranks(ts, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (rm.at(i, j) > 0) bias[i][j] = w[rm.at(i, j)];
      }
    }
  }
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    block(x, bias, params, "image/layers/" + std::to_string(l), config.n_heads);
  }
  Vec s = affine(normed(x[0], params, "image/final_ln"), params, "image/out_proj", false);
  double sq = 0.0;
  for (double v : s) sq += v * v;
  for (double& v : s) v /= std::sqrt(sq);
  return s;
}

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.d = 4;
  c.d_l = 6;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.context_length = 10;
  c.embed_dim = 8;
  c.vocab_size = 12;
  c.text_context = 6;
  return c;
}

// ---------------------------------------------------------------------------
// Checks

namespace {

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

RandomTokenSetOptions options_for(const EncoderConfig& c) {
  RandomTokenSetOptions o;
  o.d = c.d;
  o.d_l = c.d_l;
  o.max_tangible = std::min<std::size_t>(5, c.context_length - 1);
  o.max_intangible = std::min<std::size_t>(3, c.context_length - 1 - o.max_tangible);
  return o;
}

// Draws until the set has at least one triplet.
TokenSet linked_token_set(Rng& rng, const RandomTokenSetOptions& o, const std::string& id) {
  for (;;) {
    TokenSet ts = random_token_set(rng, o, id);
    if (!ts.triplets.empty()) return ts;
  }
}

Caption random_caption(Rng& rng, const EncoderConfig& c) {
  Caption cap(1 + rng.below(c.text_context - 1));
  for (auto& id : cap) id = static_cast<std::int64_t>(2 + rng.below(c.vocab_size - 2));
  return cap;
}

}  // namespace

CheckResult check_rank_oracle(std::size_t samples, std::uint64_t seed) {
  Timer timer;
  CheckResult r{"rank matrix matches oracle", true, {}, 0.0};
  Rng rng(derive_seed(seed, 0x0ac1e));
  std::size_t nonzero = 0;
  for (std::size_t i = 0; i < samples && r.passed; ++i) {
    const TokenSet ts = random_token_set(rng, {}, "oracle-" + std::to_string(i));
    const std::size_t L = ts.token_count() + rng.below(4);
    const PackedTokens packed = pack(ts, L);
    const RankMatrix built = build_ranks(ts, packed.positions, L);
    const RankMatrix expected = oracle_ranks(ts, L);
    nonzero += static_cast<std::size_t>(std::count_if(built.ranks.begin(), built.ranks.end(), [](auto v) { return v; }));
    if (built != expected) {
      r.passed = false;
      r.detail = "mismatch on sample " + std::to_string(i) + "\nbuilt:\n" + render_ranks(built) +
                 "oracle:\n" + render_ranks(expected);
    }
  }
  r.seconds = timer.seconds();
  if (r.passed) r.detail = format("%zu sets, %zu ranked cells", samples, nonzero);
  return r;
}

CheckResult check_weight_table(std::size_t vectors, std::uint64_t seed) {
  Timer timer;
  CheckResult r{"weight table law", true, {}, 0.0};
  const auto zero = WeightEncoding(WeightEncoding::initial_values(false)).weight_table();
  for (std::size_t k = 0; k < zero.size(); ++k) {
    if (zero[k] != static_cast<double>(k + 1)) {
      r.passed = false;
      r.detail = format("a = 0 gives w[%zu] = %.17g", k, zero[k]);
    }
  }
  Rng rng(derive_seed(seed, 0x3e1));
  for (std::size_t i = 0; i < vectors && r.passed; ++i) {
    std::vector<double> a(kRankLevels, 0.0);
    for (std::size_t k = 1; k < kRankLevels; ++k) a[k] = 6.0 * rng.uniform() - 3.0;
    const auto w = WeightEncoding(Tensor::from({kRankLevels}, a)).weight_table();
    for (std::size_t k = 0; k + 1 < w.size(); ++k) {
      if (!(w[k + 1] > w[k])) {
        r.passed = false;
        r.detail = format("vector %zu: w[%zu]=%.17g is not above w[%zu]=%.17g", i, k + 1, w[k + 1], k, w[k]);
      }
    }
  }
  r.seconds = timer.seconds();
  if (r.passed) r.detail = format("w(0) = [1..8]; %zu random vectors strictly increasing", vectors);
  return r;
}

CheckResult check_gradients(std::uint64_t seed, double tolerance) {
  Timer timer;
  CheckResult r{"full-model gradient check", true, {}, 0.0};
  const EncoderConfig cfg = tiny_config();
  ModelParams params = ModelParams::initialize(cfg, seed);
  // Perturb a and the type embeddings off their initial values.
  Rng rng(derive_seed(seed, 0x96ad));
  for (std::size_t k = 1; k < kRankLevels; ++k) params.at("image/rank_weights/a").mutable_data()[k] = 0.5 * rng.normal();

  std::vector<TokenSet> images;
  std::vector<Caption> captions;
  for (std::size_t i = 0; i < 3; ++i) {
    images.push_back(linked_token_set(rng, options_for(cfg), "g" + std::to_string(i)));
    captions.push_back(random_caption(rng, cfg));
  }
  std::vector<const TokenSet*> image_ptrs;
  std::vector<const Caption*> caption_ptrs;
  for (std::size_t i = 0; i < images.size(); ++i) {
    image_ptrs.push_back(&images[i]);
    caption_ptrs.push_back(&captions[i]);
  }
  const ImageBatch ib = make_image_batch(image_ptrs, cfg, true);
  const TextBatch tb = make_text_batch(caption_ptrs, cfg);
  const auto loss = [&] {
    return contrastive_loss(encode_images(params, cfg, ib), encode_captions(params, cfg, tb),
                            params.at("logit_scale/tau"));
  };

  double worst = 0.0;
  std::string worst_path;
  std::size_t coordinates = 0;
  std::ostringstream failures;
  for (auto& entry : params.entries()) {
    std::span<Tensor> one(&entry.value, 1);
    const GradCheckReport rep = grad_check(loss, one, 1e-4, tolerance);
    coordinates += rep.coordinates;
    if (rep.max_rel_error > worst) {
      worst = rep.max_rel_error;
      worst_path = entry.path + rep.worst.substr(rep.worst.find('['));
    }
    if (!rep.passed) {
      r.passed = false;
      failures << "\n  " << entry.path << ": rel " << rep.max_rel_error << " at " << rep.worst;
    }
  }
  r.seconds = timer.seconds();
  r.detail = format("%zu groups, %zu coordinates, step 1e-4, max rel err %.3e (%s), tol %.0e", params.entries().size(),
                    coordinates, worst, worst_path.c_str(), tolerance) +
             failures.str();
  return r;
}

CheckResult check_permutation_invariance(std::uint64_t seed, double tolerance) {
  Timer timer;
  CheckResult r{"token permutation invariance", true, {}, 0.0};
  EncoderConfig cfg = tiny_config();
  cfg.context_length = 17;
  const ModelParams params = ModelParams::initialize(cfg, seed);
  Rng rng(derive_seed(seed, 0x9e4));
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 20; ++trial) {
    RandomTokenSetOptions o = options_for(cfg);
    o.max_tangible = 10;
    o.max_intangible = 6;
    const TokenSet ts = random_token_set(rng, o);
    std::vector<std::size_t> pt(ts.tangible.size()), pu(ts.intangible.size());
    std::iota(pt.begin(), pt.end(), 0);
    std::iota(pu.begin(), pu.end(), 0);
    rng.shuffle(pt);
    rng.shuffle(pu);
    for (bool additive : {true, false}) {
      const auto a = encode_image(ts, params, cfg, additive);
      const auto b = encode_image(permute_tokens(ts, pt, pu), params, cfg, additive);
      worst = std::max(worst, max_abs_diff(a, b));
    }
  }
  r.passed = worst <= tolerance;
  r.seconds = timer.seconds();
  r.detail = format("20 random sets, max |ds| = %.3e (tol %.0e)", worst, tolerance);
  return r;
}

CheckResult check_padding_invariance(std::uint64_t seed) {
  Timer timer;
  CheckResult r{"padding invariance", true, {}, 0.0};
  const EncoderConfig cfg = tiny_config();
  const ModelParams params = ModelParams::initialize(cfg, seed);
  Rng rng(derive_seed(seed, 0xbad));
  std::size_t trials = 0;
  double slack = 0.0;
  while (trials < 20) {
    const TokenSet a = random_token_set(rng, options_for(cfg), "short");
    const TokenSet b = random_token_set(rng, options_for(cfg), "long");
    if (a.token_count() >= b.token_count()) continue;
    ++trials;
    const std::vector<const TokenSet*> pair{&a, &b};
    ImageBatch clean = make_image_batch(pair, cfg, true);
    ImageBatch dirty = clean;
    for (std::size_t p = 0; p < clean.context_length; ++p) {
      if (clean.valid[p]) continue;
      for (std::size_t c = 0; c < clean.width; ++c) dirty.tokens[p * clean.width + c] = 1e3 * rng.normal();
    }
    const Tensor s_clean = encode_images(params, cfg, clean);
    const Tensor s_dirty = encode_images(params, cfg, dirty);
    if (!std::equal(s_clean.data().begin(), s_clean.data().end(), s_dirty.data().begin())) {
      r.passed = false;
      r.detail = "PAD row contents changed the embedding";
      break;
    }
    const auto alone = encode_image(a, params, cfg, true);
    slack = std::max(slack, max_abs_diff(alone, s_clean.data().subspan(0, cfg.embed_dim)));
  }
  r.seconds = timer.seconds();
  if (r.passed) {
    r.passed = slack <= 1e-12;
    r.detail = format("PAD contents bit-exact over %zu batches; context slack max |ds| = %.3e", trials, slack);
  }
  return r;
}

CheckResult check_zero_bias_equivalence(std::uint64_t seed, double tolerance) {
  Timer timer;
  CheckResult r{"zero bias equals plain attention", true, {}, 0.0};
  const EncoderConfig cfg = tiny_config();
  const ModelParams params = ModelParams::initialize(cfg, seed);
  Rng rng(derive_seed(seed, 0x2e0));
  double lib = 0.0, ref = 0.0;
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const TokenSet ts = linked_token_set(rng, options_for(cfg), "z");
    const std::vector<const TokenSet*> one{&ts};
    const ImageBatch batch = make_image_batch(one, cfg, true);
    const Tensor zero = Tensor::zeros({1, batch.context_length, batch.context_length});
    const Tensor with_zero = encode_images(params, cfg, batch, zero);
    const Tensor plain = encode_images(params, cfg, batch, Tensor{});
    lib = std::max(lib, max_abs_diff(with_zero.data(), plain.data()));
    ref = std::max(ref, max_abs_diff(with_zero.data(), reference_encode_image(ts, params, cfg, false)));
  }
  r.passed = lib <= tolerance && ref <= tolerance;
  r.seconds = timer.seconds();
  r.detail = format("max |ds| vs unbiased path %.3e, vs loop reference %.3e (tol %.0e)", lib, ref, tolerance);
  return r;
}

CheckResult check_reference_encoder(std::uint64_t seed, double tolerance) {
  Timer timer;
  CheckResult r{"encoder matches loop reference", true, {}, 0.0};
  const EncoderConfig cfg = tiny_config();
  ModelParams params = ModelParams::initialize(cfg, seed);
  Rng rng(derive_seed(seed, 0x4ef));
  for (std::size_t k = 1; k < kRankLevels; ++k) params.at("image/rank_weights/a").mutable_data()[k] = 0.5 * rng.normal();
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const TokenSet ts = random_token_set(rng, options_for(cfg));
    worst = std::max(worst, max_abs_diff(encode_image(ts, params, cfg, true),
                                         reference_encode_image(ts, params, cfg, true)));
  }
  r.passed = worst <= tolerance;
  r.seconds = timer.seconds();
  r.detail = format("20 random sets with rank bias, max |ds| = %.3e (tol %.0e)", worst, tolerance);
  return r;
}

CheckResult check_bias_liveness(std::uint64_t seed) {
  Timer timer;
  CheckResult r{"rank weights receive gradient", true, {}, 0.0};
  const EncoderConfig cfg = tiny_config();
  ModelParams params = ModelParams::initialize(cfg, seed);
  Rng rng(derive_seed(seed, 0x11e));
  std::vector<TokenSet> images;
  std::vector<Caption> captions;
  for (std::size_t i = 0; i < 4; ++i) {
    images.push_back(linked_token_set(rng, options_for(cfg), "b" + std::to_string(i)));
    captions.push_back(random_caption(rng, cfg));
  }
  std::vector<const TokenSet*> ip;
  std::vector<const Caption*> cp;
  for (std::size_t i = 0; i < images.size(); ++i) {
    ip.push_back(&images[i]);
    cp.push_back(&captions[i]);
  }
  const ImageBatch ib = make_image_batch(ip, cfg, true);
  std::uint8_t top = 0;
  for (const auto& rm : ib.ranks) top = std::max(top, *std::max_element(rm.ranks.begin(), rm.ranks.end()));
  params.zero_grad();
  contrastive_loss(encode_images(params, cfg, ib), encode_captions(params, cfg, make_text_batch(cp, cfg)),
                   params.at("logit_scale/tau"))
      .backward();
  const auto g = params.at("image/rank_weights/a").grad();
  std::string grads;
  for (std::size_t k = 1; k < kRankLevels; ++k) {
    const bool expect_live = k <= top;
    if ((g[k] != 0.0) != expect_live) r.passed = false;
    grads += format(" %.2e", g[k]);
  }
  r.seconds = timer.seconds();
  r.detail = format("max rank %d; dL/da[1..7] =", int(top)) + grads;
  return r;
}

std::vector<CheckResult> run_property_suite(std::uint64_t seed) {
  return {check_rank_oracle(1000, seed),         check_weight_table(100, seed),
          check_gradients(seed),                 check_permutation_invariance(seed),
          check_padding_invariance(seed),        check_zero_bias_equivalence(seed),
          check_reference_encoder(seed),         check_bias_liveness(seed)};
}

}  // namespace semtok
