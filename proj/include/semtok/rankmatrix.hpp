#pragma once

// Importance ranks between ordered token pairs, and the learnable rank weights.
//
// For a triplet (s, o, p):   v_s -> v_o : 7
//                            v_s -> u_p, v_o -> u_p : 6
//                            u_p -> v_s, u_p -> v_o : 5
// For the k-th nearest neighbor b of tangible a (k = 1..4): v_a -> v_b : 5 - k
// Colliding cases keep the maximum. Everything else, including the diagonal
// and every PAD row/column, is 0.

#include "semtok/tensor.hpp"
#include "semtok/tokens.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace semtok {

inline constexpr std::size_t kRankLevels = 8;  // ranks 0..7

struct RankMatrix {
  std::size_t size = 0;
  std::vector<std::uint8_t> ranks;  // [size x size]
  std::vector<std::uint8_t> valid_mask;

  std::uint8_t at(std::size_t row, std::size_t col) const { return ranks[row * size + col]; }
  friend bool operator==(const RankMatrix&, const RankMatrix&) = default;
};

RankMatrix build_ranks(const TokenSet& ts, std::span<const TokenPosition> positions,
                       std::size_t context_length);

// Number of build_ranks invocations since process start. Lets callers assert
// that the additive-attention-off path never builds ranks.
std::uint64_t build_ranks_calls();

// Aligned integer grid, one row per line, PAD positions rendered as '.'.
std::string render_ranks(const RankMatrix& rm);

// The learnable vector a (length 8, a[0] pinned at 0) and w = cumsum(exp(a)).
// a is a view onto the model's parameter tensor, so gradients flow into it.
class WeightEncoding {
 public:
  explicit WeightEncoding(Tensor a);

  static Tensor initial_values(bool requires_grad = true);

  const Tensor& a() const { return a_; }
  Tensor weights() const;  // differentiable in a
  std::vector<double> weight_table() const;

 private:
  Tensor a_;
};

// Additive attention bias for one or several samples: a cell of rank r > 0
// receives w[r]; rank 0 receives exactly 0. Output shape [B, L, L].
Tensor weights_from_ranks(std::span<const RankMatrix> matrices, const Tensor& w);
Tensor weights_from_ranks(const RankMatrix& rm, const Tensor& w);

}  // namespace semtok
