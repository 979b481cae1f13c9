#pragma once

// Independent oracles and the property suite run by `semtok verify` and the
// acceptance tests.

#include "semtok/encoder.hpp"
#include "semtok/random.hpp"
#include "semtok/rankmatrix.hpp"
#include "semtok/tokens.hpp"

#include <string>
#include <vector>

namespace semtok {

// Per-cell exhaustive scan of every triplet and neighbor case, keeping the
// maximum. Positions are computed from |V| directly, not from pack().
RankMatrix oracle_ranks(const TokenSet& ts, std::size_t context_length);

struct RandomTokenSetOptions {
  std::size_t max_tangible = 10;
  std::size_t max_intangible = 6;
  std::size_t d = 4;
  std::size_t d_l = 4;
  double value_range = 2.0;  // entries uniform in [-range, range]
};

// A valid TokenSet with random sizes, triplets and directed neighbor lists.
TokenSet random_token_set(Rng& rng, const RandomTokenSetOptions& options = {},
                          const std::string& sample_id = "random");

// Relabels tangible and intangible tokens: new V[i] = old V[tangible[i]], and
// likewise for U; triplets and neighbor lists are rewritten to match.
TokenSet permute_tokens(const TokenSet& ts, const std::vector<std::size_t>& tangible,
                        const std::vector<std::size_t>& intangible);

// Image embedding computed with plain loops over the valid tokens only. Shares
// no code with the tensor library; ranks come from oracle_ranks.
std::vector<double> reference_encode_image(const TokenSet& ts, const ModelParams& params,
                                           const EncoderConfig& config, bool additive_attention);

// The small configuration used for gradient checks.
EncoderConfig tiny_config();

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

CheckResult check_rank_oracle(std::size_t samples, std::uint64_t seed);
CheckResult check_weight_table(std::size_t vectors, std::uint64_t seed);
// Central differences over every parameter of the tiny config, per group.
CheckResult check_gradients(std::uint64_t seed, double tolerance = 1e-4);
CheckResult check_permutation_invariance(std::uint64_t seed, double tolerance = 1e-9);
CheckResult check_padding_invariance(std::uint64_t seed);
CheckResult check_zero_bias_equivalence(std::uint64_t seed, double tolerance = 1e-12);
CheckResult check_reference_encoder(std::uint64_t seed, double tolerance = 1e-10);
CheckResult check_bias_liveness(std::uint64_t seed);

std::vector<CheckResult> run_property_suite(std::uint64_t seed);

}  // namespace semtok
