#pragma once

// Deterministic paired (TokenSet, caption) data whose captions spell out the
// scene graph. Stands in for segmenter/relation-model extraction at desk scale.
//
// Scenes are generated in pairs keyed by (seed, pair index). With probability
// `ambiguous_rate` the second scene of a pair is the direction twin of the
// first: identical tokens and neighbors, one triplet reversed.

#include "semtok/eval.hpp"
#include "semtok/tokens.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace semtok {

struct SceneSpec {
  std::size_t object_vocab = 20;
  std::size_t predicate_vocab = 10;
  std::size_t d = 32;
  std::size_t min_objects = 2;
  std::size_t max_objects = 8;
  std::size_t min_triplets = 1;
  std::size_t max_triplets = 4;
  double noise = 0.05;
  double ambiguous_rate = 0.3;
  std::uint64_t vocab_seed = 0;  // base vectors; shared by every split

  void validate() const;
};

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);

// Word ids: 0 PAD, 1 EOS, 2 "the", 3 "and", then objects, then predicates.
class Vocabulary {
 public:
  Vocabulary(std::size_t objects, std::size_t predicates);

  static constexpr std::int64_t kThe = 2;
  static constexpr std::int64_t kAnd = 3;

  std::size_t size() const { return words_.size(); }
  std::size_t objects() const { return objects_; }
  std::size_t predicates() const { return predicates_; }
  std::int64_t object_id(std::size_t cls) const;
  std::int64_t predicate_id(std::size_t cls) const;
  const std::string& word(std::int64_t id) const;
  const std::vector<std::string>& words() const { return words_; }
  std::string render(const Caption& caption) const;

 private:
  std::size_t objects_;
  std::size_t predicates_;
  std::vector<std::string> words_;
};

// Class-level triplet as spelled by a caption.
struct ClassTriplet {
  std::size_t subject = 0;
  std::size_t object = 0;
  std::size_t predicate = 0;
  friend auto operator<=>(const ClassTriplet&, const ClassTriplet&) = default;
};

Caption caption_for(const std::vector<ClassTriplet>& triplets, const Vocabulary& vocab);
// Inverse of caption_for; throws std::invalid_argument on ungrammatical input.
std::vector<ClassTriplet> decode_caption(const Caption& caption, const Vocabulary& vocab);

struct SwapPair {
  Caption correct;
  Caption swapped;
  std::size_t triplet_index = 0;
};

// Exchanges the subject and object words of one triplet, chosen from the key.
// Returns nullopt when no triplet has distinct subject and object words.
std::optional<SwapPair> make_swapped_pair(const Caption& caption, const Vocabulary& vocab,
                                          std::uint64_t choice_key);

struct SceneTruth {
  std::string sample_id;
  std::vector<std::size_t> object_classes;         // per tangible token
  std::vector<std::array<double, 2>> positions;    // per tangible token
  std::vector<std::size_t> predicate_classes;      // per intangible token
  std::optional<std::string> twin;                 // direction twin, if any
  std::optional<SwapPair> swap;
};

struct SyntheticCorpus {
  Corpus corpus;
  std::vector<SceneTruth> truth;
  std::uint64_t seed = 0;
  SceneSpec spec;
};

// Unit-norm base vectors for objects then predicates; pairwise cosine < 0.5.
std::vector<Vec> base_vectors(const SceneSpec& spec);

// K-nearest tangible neighbors by Euclidean distance (ties by lower index).
std::vector<std::vector<std::size_t>> nearest_neighbors(const std::vector<std::array<double, 2>>& positions,
                                                        std::size_t k = kMaxNeighbors);

SyntheticCorpus generate(std::size_t n_scenes, const SceneSpec& spec, std::uint64_t seed,
                         const std::string& id_prefix = "scene");

void write_ground_truth(const SyntheticCorpus& corpus, const std::filesystem::path& path);

struct GroundTruth {
  std::uint64_t seed = 0;
  SceneSpec spec;
  std::vector<std::string> words;
  std::vector<SceneTruth> scenes;
};
GroundTruth read_ground_truth(const std::filesystem::path& path);

// Group ids that put each direction twin pair in one group.
std::vector<std::size_t> twin_groups(const std::vector<TokenSet>& records,
                                     const std::vector<SceneTruth>& truth);

// One probe per scene with a swap pair: (image, own caption, swapped caption).
// With twins_only, only scenes that have a direction twin are used.
std::vector<ChoiceProbe> choice_probes(std::span<const TokenSet> records,
                                       std::span<const SceneTruth> truth, bool twins_only);

// One quad per direction-twin pair, in corpus order.
std::vector<GroupQuad> twin_quads(std::span<const TokenSet> records, std::span<const SceneTruth> truth);

}  // namespace semtok
