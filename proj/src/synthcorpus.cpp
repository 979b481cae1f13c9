#include "semtok/synthcorpus.hpp"

#include "semtok/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

namespace semtok {

using nlohmann::json;

namespace {

const char* const kObjectNames[] = {"dog",   "rock",  "tree", "person", "grass", "sea",   "mountain", "sky",
                                    "cup",   "table", "chair", "car",   "bench", "ball",  "cat",      "horse",
                                    "boat",  "bird",  "lamp", "book",   "fence", "road",  "house",    "bike"};
const char* const kPredicateNames[] = {"sits_on", "beside", "behind",  "in_front_of", "holds", "looks_at",
                                       "under",   "above",  "rides",   "carries",     "near",  "touches"};

constexpr std::size_t kWordsPerTriplet = 5;  // the S P the O

}  // namespace

void SceneSpec::validate() const {
  if (object_vocab < 2) throw std::invalid_argument("scene.object_vocab: must be at least 2");
  if (predicate_vocab < 2) throw std::invalid_argument("scene.predicate_vocab: must be at least 2");
  if (d == 0) throw std::invalid_argument("scene.d: must be positive");
  if (min_objects < 2 || min_objects > max_objects) {
    throw std::invalid_argument("scene.min_objects: need 2 <= min_objects <= max_objects");
  }
  if (max_objects > object_vocab) {
    throw std::invalid_argument("scene.max_objects: objects in a scene have distinct classes, so max_objects <= object_vocab");
  }
  if (min_triplets < 1 || min_triplets > max_triplets) {
    throw std::invalid_argument("scene.min_triplets: need 1 <= min_triplets <= max_triplets");
  }
  if (!(noise >= 0.0)) throw std::invalid_argument("scene.noise: must be non-negative");
  if (!(ambiguous_rate >= 0.0 && ambiguous_rate <= 1.0)) {
    throw std::invalid_argument("scene.ambiguous_rate: must lie in [0, 1]");
  }
}

void to_json(json& j, const SceneSpec& s) {
  j = json{{"object_vocab", s.object_vocab}, {"predicate_vocab", s.predicate_vocab},
           {"d", s.d},                       {"min_objects", s.min_objects},
           {"max_objects", s.max_objects},   {"min_triplets", s.min_triplets},
           {"max_triplets", s.max_triplets}, {"noise", s.noise},
           {"ambiguous_rate", s.ambiguous_rate}, {"vocab_seed", s.vocab_seed}};
}

void from_json(const json& j, SceneSpec& s) {
  s = SceneSpec{};
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "object_vocab") s.object_vocab = value.get<std::size_t>();
      else if (key == "predicate_vocab") s.predicate_vocab = value.get<std::size_t>();
      else if (key == "d") s.d = value.get<std::size_t>();
      else if (key == "min_objects") s.min_objects = value.get<std::size_t>();
      else if (key == "max_objects") s.max_objects = value.get<std::size_t>();
      else if (key == "min_triplets") s.min_triplets = value.get<std::size_t>();
      else if (key == "max_triplets") s.max_triplets = value.get<std::size_t>();
      else if (key == "noise") s.noise = value.get<double>();
      else if (key == "ambiguous_rate") s.ambiguous_rate = value.get<double>();
      else if (key == "vocab_seed") s.vocab_seed = value.get<std::uint64_t>();
      else throw std::invalid_argument("scene." + key + ": unknown key");
    } catch (const json::exception& e) {
      throw std::invalid_argument("scene." + key + ": " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary(std::size_t objects, std::size_t predicates)
    : objects_(objects), predicates_(predicates) {
  words_ = {"<pad>", "<eos>", "the", "and"};
  constexpr std::size_t named_objects = std::size(kObjectNames);
  constexpr std::size_t named_predicates = std::size(kPredicateNames);
  for (std::size_t i = 0; i < objects; ++i) {
    words_.push_back(i < named_objects ? kObjectNames[i] : "object_" + std::to_string(i));
  }
  for (std::size_t i = 0; i < predicates; ++i) {
    words_.push_back(i < named_predicates ? kPredicateNames[i] : "relation_" + std::to_string(i));
  }
}

std::int64_t Vocabulary::object_id(std::size_t cls) const {
  if (cls >= objects_) throw std::out_of_range("object class " + std::to_string(cls));
  return 4 + static_cast<std::int64_t>(cls);
}

std::int64_t Vocabulary::predicate_id(std::size_t cls) const {
  if (cls >= predicates_) throw std::out_of_range("predicate class " + std::to_string(cls));
  return 4 + static_cast<std::int64_t>(objects_ + cls);
}

const std::string& Vocabulary::word(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw std::out_of_range("word id " + std::to_string(id));
  }
  return words_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::render(const Caption& caption) const {
  std::string out;
  for (std::int64_t id : caption) {
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

Caption caption_for(const std::vector<ClassTriplet>& triplets, const Vocabulary& vocab) {
  Caption c;
  for (std::size_t t = 0; t < triplets.size(); ++t) {
    if (t) c.push_back(Vocabulary::kAnd);
    c.push_back(Vocabulary::kThe);
    c.push_back(vocab.object_id(triplets[t].subject));
    c.push_back(vocab.predicate_id(triplets[t].predicate));
    c.push_back(Vocabulary::kThe);
    c.push_back(vocab.object_id(triplets[t].object));
  }
  return c;
}

std::vector<ClassTriplet> decode_caption(const Caption& caption, const Vocabulary& vocab) {
  const auto object_class = [&](std::int64_t id, std::size_t at) {
    if (id < 4 || id >= 4 + static_cast<std::int64_t>(vocab.objects())) {
      throw std::invalid_argument("caption position " + std::to_string(at) + ": expected an object word");
    }
    return static_cast<std::size_t>(id - 4);
  };
  const auto predicate_class = [&](std::int64_t id, std::size_t at) {
    const auto first = 4 + static_cast<std::int64_t>(vocab.objects());
    if (id < first || id >= first + static_cast<std::int64_t>(vocab.predicates())) {
      throw std::invalid_argument("caption position " + std::to_string(at) + ": expected a predicate word");
    }
    return static_cast<std::size_t>(id - first);
  };
  const auto expect = [&](std::size_t at, std::int64_t id, const char* word) {
    if (at >= caption.size() || caption[at] != id) {
      throw std::invalid_argument("caption position " + std::to_string(at) + ": expected '" + word + "'");
    }
  };

  std::vector<ClassTriplet> out;
  std::size_t at = 0;
  while (at < caption.size() || out.empty()) {
    if (!out.empty()) expect(at++, Vocabulary::kAnd, "and");
    expect(at, Vocabulary::kThe, "the");
    if (at + kWordsPerTriplet > caption.size()) throw std::invalid_argument("caption ends mid-triplet");
    ClassTriplet t;
    t.subject = object_class(caption[at + 1], at + 1);
    t.predicate = predicate_class(caption[at + 2], at + 2);
    expect(at + 3, Vocabulary::kThe, "the");
    t.object = object_class(caption[at + 4], at + 4);
    out.push_back(t);
    at += kWordsPerTriplet;
  }
  return out;
}

std::optional<SwapPair> make_swapped_pair(const Caption& caption, const Vocabulary& vocab,
                                          std::uint64_t choice_key) {
  const auto triplets = decode_caption(caption, vocab);
  std::vector<std::size_t> candidates;
  for (std::size_t t = 0; t < triplets.size(); ++t) {
    if (triplets[t].subject != triplets[t].object) candidates.push_back(t);
  }
  if (candidates.empty()) return std::nullopt;
  const std::size_t k = candidates[derive_seed(choice_key, 0x5a9) % candidates.size()];
  SwapPair pair{caption, caption, k};
  const std::size_t start = k * (kWordsPerTriplet + 1);
  std::swap(pair.swapped[start + 1], pair.swapped[start + 4]);
  return pair;
}

// ---------------------------------------------------------------------------

std::vector<Vec> base_vectors(const SceneSpec& spec) {
  Rng rng(derive_seed(spec.vocab_seed, 0xba5e));
  const std::size_t total = spec.object_vocab + spec.predicate_vocab;
  std::vector<Vec> out;
  std::size_t attempts = 0;
  while (out.size() < total) {
    if (++attempts > 100000) throw std::runtime_error("base_vectors: cannot place vectors with cosine < 0.5; raise d");
    Vec v(spec.d);
    double sq = 0.0;
    for (double& x : v) {
      x = rng.normal();
      sq += x * x;
    }
    const double nrm = std::sqrt(sq);
    for (double& x : v) x /= nrm;
    const bool ok = std::all_of(out.begin(), out.end(), [&](const Vec& u) {
      return std::inner_product(u.begin(), u.end(), v.begin(), 0.0) < 0.5;
    });
    if (ok) out.push_back(std::move(v));
  }
  return out;
}

std::vector<std::vector<std::size_t>> nearest_neighbors(const std::vector<std::array<double, 2>>& positions,
                                                        std::size_t k) {
  const std::size_t n = positions.size();
  std::vector<std::vector<std::size_t>> out(n);
  for (std::size_t a = 0; a < n; ++a) {
    std::vector<std::size_t> others;
    for (std::size_t b = 0; b < n; ++b) {
      if (b != a) others.push_back(b);
    }
    const auto dist = [&](std::size_t b) {
      return std::hypot(positions[a][0] - positions[b][0], positions[a][1] - positions[b][1]);
    };
    std::stable_sort(others.begin(), others.end(), [&](std::size_t x, std::size_t y) { return dist(x) < dist(y); });
    others.resize(std::min(k, others.size()));
    out[a] = std::move(others);
  }
  return out;
}

namespace {

struct Draft {
  TokenSet tokens;
  SceneTruth truth;
  std::vector<ClassTriplet> class_triplets;
};

Vec noisy(const Vec& base, double sigma, Rng& rng) {
  Vec v = base;
  for (double& x : v) x += sigma * rng.normal();
  return v;
}

Draft draw_scene(Rng& rng, const SceneSpec& spec, const std::vector<Vec>& bases) {
  Draft s;
  const std::size_t n_obj = spec.min_objects + rng.below(spec.max_objects - spec.min_objects + 1);

  std::vector<std::size_t> classes(spec.object_vocab);
  std::iota(classes.begin(), classes.end(), 0);
  for (std::size_t i = 0; i < n_obj; ++i) std::swap(classes[i], classes[i + rng.below(classes.size() - i)]);
  classes.resize(n_obj);
  s.truth.object_classes = classes;

  std::set<std::array<double, 2>> seen;
  while (s.truth.positions.size() < n_obj) {
    std::array<double, 2> p{rng.uniform(), rng.uniform()};
    if (seen.insert(p).second) s.truth.positions.push_back(p);
  }

  // Unordered object pairs, each used at most once, so a triplet's reverse
  // never co-occurs with it.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < n_obj; ++a) {
    for (std::size_t b = a + 1; b < n_obj; ++b) pairs.emplace_back(a, b);
  }
  const std::size_t max_tri = std::min(spec.max_triplets, pairs.size());
  const std::size_t min_tri = std::min(spec.min_triplets, max_tri);
  const std::size_t n_tri = min_tri + rng.below(max_tri - min_tri + 1);
  for (std::size_t t = 0; t < n_tri; ++t) {
    std::swap(pairs[t], pairs[t + rng.below(pairs.size() - t)]);
    auto [a, b] = pairs[t];
    if (rng.below(2)) std::swap(a, b);
    const std::size_t pred = rng.below(spec.predicate_vocab);
    s.tokens.triplets.push_back({a, b, t});
    s.truth.predicate_classes.push_back(pred);
    s.class_triplets.push_back({classes[a], classes[b], pred});
  }

  Vec mean(spec.d, 0.0);
  for (std::size_t cls : classes) {
    s.tokens.tangible.push_back(noisy(bases[cls], spec.noise, rng));
    for (std::size_t k = 0; k < spec.d; ++k) mean[k] += s.tokens.tangible.back()[k] / static_cast<double>(n_obj);
  }
  for (std::size_t pred : s.truth.predicate_classes) {
    s.tokens.intangible.push_back(noisy(bases[spec.object_vocab + pred], spec.noise, rng));
  }
  s.tokens.image_features = noisy(mean, spec.noise, rng);
  s.tokens.neighbors = nearest_neighbors(s.truth.positions);
  return s;
}

std::string scene_id(const std::string& prefix, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "-%06zu", index);
  return prefix + buf;
}

}  // namespace

SyntheticCorpus generate(std::size_t n_scenes, const SceneSpec& spec, std::uint64_t seed,
                         const std::string& id_prefix) {
  spec.validate();
  const auto bases = base_vectors(spec);
  const Vocabulary vocab(spec.object_vocab, spec.predicate_vocab);

  SyntheticCorpus out;
  out.seed = seed;
  out.spec = spec;
  out.corpus.header = {spec.d, spec.d};

  const auto finish = [&](Draft& s, std::size_t index, std::uint64_t swap_key) {
    s.tokens.sample_id = scene_id(id_prefix, index);
    s.truth.sample_id = s.tokens.sample_id;
    s.tokens.captions = {caption_for(s.class_triplets, vocab)};
    s.truth.swap = make_swapped_pair(s.tokens.caption(), vocab, swap_key);
    out.corpus.records.push_back(s.tokens);
    out.truth.push_back(s.truth);
  };

  for (std::size_t pair = 0; 2 * pair < n_scenes; ++pair) {
    Rng rng(derive_seed(seed, pair));
    const std::uint64_t swap_key = derive_seed(seed ^ 0x7357, pair);
    const bool ambiguous = rng.uniform() < spec.ambiguous_rate;
    Draft first = draw_scene(rng, spec, bases);
    const bool twin = ambiguous && 2 * pair + 1 < n_scenes;
    Draft second = twin ? first : draw_scene(rng, spec, bases);
    if (twin) {
      const auto swap = make_swapped_pair(caption_for(first.class_triplets, vocab), vocab, swap_key);
      auto& e = second.tokens.triplets[swap->triplet_index];
      std::swap(e.subject, e.object);
      auto& c = second.class_triplets[swap->triplet_index];
      std::swap(c.subject, c.object);
      first.truth.twin = scene_id(id_prefix, 2 * pair + 1);
      second.truth.twin = scene_id(id_prefix, 2 * pair);
    }
    finish(first, 2 * pair, swap_key);
    if (2 * pair + 1 < n_scenes) finish(second, 2 * pair + 1, swap_key);
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_ground_truth(const SyntheticCorpus& corpus, const std::filesystem::path& path) {
  const Vocabulary vocab(corpus.spec.object_vocab, corpus.spec.predicate_vocab);
  json scenes = json::array();
  for (std::size_t i = 0; i < corpus.truth.size(); ++i) {
    const auto& t = corpus.truth[i];
    json triplets = json::array();
    for (const auto& c : decode_caption(corpus.corpus.records[i].caption(), vocab)) {
      triplets.push_back({c.subject, c.object, c.predicate});
    }
    json positions = json::array();
    for (const auto& p : t.positions) positions.push_back({p[0], p[1]});
    json s{{"sample_id", t.sample_id},
           {"objects", t.object_classes},
           {"positions", positions},
           {"predicates", t.predicate_classes},
           {"triplets", triplets},
           {"twin", t.twin ? json(*t.twin) : json(nullptr)}};
    if (t.swap) {
      s["swap"] = {{"triplet", t.swap->triplet_index}, {"swapped_caption", t.swap->swapped}};
    } else {
      s["swap"] = nullptr;
    }
    scenes.push_back(std::move(s));
  }
  const json doc{{"format", "semtok-groundtruth"},
                 {"version", 1},
                 {"seed", corpus.seed},
                 {"scene_spec", corpus.spec},
                 {"vocabulary", vocab.words()},
                 {"scenes", scenes}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write ground truth '" + path.string() + "'");
  out << doc.dump(1) << '\n';
}

GroundTruth read_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open ground truth '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("ground truth '" + path.string() + "': " + e.what());
  }
  if (doc.value("format", "") != "semtok-groundtruth") {
    throw std::runtime_error("ground truth '" + path.string() + "': wrong format tag");
  }
  GroundTruth g;
  g.seed = doc.at("seed").get<std::uint64_t>();
  g.spec = doc.at("scene_spec").get<SceneSpec>();
  g.words = doc.at("vocabulary").get<std::vector<std::string>>();
  for (const auto& s : doc.at("scenes")) {
    SceneTruth t;
    t.sample_id = s.at("sample_id").get<std::string>();
    t.object_classes = s.at("objects").get<std::vector<std::size_t>>();
    for (const auto& p : s.at("positions")) t.positions.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    t.predicate_classes = s.at("predicates").get<std::vector<std::size_t>>();
    if (!s.at("twin").is_null()) t.twin = s.at("twin").get<std::string>();
    if (!s.at("swap").is_null()) {
      SwapPair sp;
      sp.triplet_index = s["swap"].at("triplet").get<std::size_t>();
      sp.swapped = s["swap"].at("swapped_caption").get<Caption>();
      t.swap = std::move(sp);
    }
    g.scenes.push_back(std::move(t));
  }
  return g;
}

std::vector<std::size_t> twin_groups(const std::vector<TokenSet>& records,
                                     const std::vector<SceneTruth>& truth) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) index.emplace(records[i].sample_id, i);
  std::vector<std::size_t> groups(records.size());
  std::iota(groups.begin(), groups.end(), 0);
  for (const auto& t : truth) {
    if (!t.twin) continue;
    const auto a = index.find(t.sample_id), b = index.find(*t.twin);
    if (a == index.end() || b == index.end()) continue;
    const std::size_t g = std::min(a->second, b->second);
    groups[a->second] = g;
    groups[b->second] = g;
  }
  return groups;
}

std::vector<ChoiceProbe> choice_probes(std::span<const TokenSet> records,
                                       std::span<const SceneTruth> truth, bool twins_only) {
  if (records.size() != truth.size()) throw std::invalid_argument("choice_probes: records and truth differ in length");
  std::vector<ChoiceProbe> probes;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!truth[i].swap || (twins_only && !truth[i].twin)) continue;
    probes.push_back({&records[i], records[i].caption(), truth[i].swap->swapped});
  }
  return probes;
}

std::vector<GroupQuad> twin_quads(std::span<const TokenSet> records, std::span<const SceneTruth> truth) {
  if (records.size() != truth.size()) throw std::invalid_argument("twin_quads: records and truth differ in length");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) index.emplace(records[i].sample_id, i);
  std::vector<GroupQuad> quads;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!truth[i].twin) continue;
    const auto it = index.find(*truth[i].twin);
    if (it == index.end() || it->second <= i) continue;
    const TokenSet& a = records[i];
    const TokenSet& b = records[it->second];
    quads.push_back({&a, &b, a.caption(), b.caption()});
  }
  return quads;
}

}  // namespace semtok
