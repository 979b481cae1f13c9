#include "semtok/rankmatrix.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <stdexcept>

namespace semtok {

namespace {
std::atomic<std::uint64_t> g_build_calls{0};
}

std::uint64_t build_ranks_calls() { return g_build_calls.load(); }

RankMatrix build_ranks(const TokenSet& ts, std::span<const TokenPosition> positions,
                       std::size_t context_length) {
  g_build_calls.fetch_add(1, std::memory_order_relaxed);
  if (positions.size() != context_length) {
    throw std::invalid_argument("build_ranks: " + std::to_string(positions.size()) +
                                " positions for context " + std::to_string(context_length));
  }
  std::vector<std::size_t> tangible_at(ts.tangible.size(), context_length);
  std::vector<std::size_t> intangible_at(ts.intangible.size(), context_length);
  RankMatrix rm;
  rm.size = context_length;
  rm.ranks.assign(context_length * context_length, 0);
  rm.valid_mask.assign(context_length, 0);
  for (std::size_t p = 0; p < context_length; ++p) {
    const auto& pos = positions[p];
    if (pos.kind == TokenKind::Pad) continue;
    rm.valid_mask[p] = 1;
    if (pos.kind == TokenKind::Tangible) tangible_at.at(pos.source_index) = p;
    if (pos.kind == TokenKind::Intangible) intangible_at.at(pos.source_index) = p;
  }

  const auto raise = [&](std::size_t row, std::size_t col, std::uint8_t rank) {
    if (row == col) return;
    auto& cell = rm.ranks[row * context_length + col];
    cell = std::max(cell, rank);
  };

  for (const auto& e : ts.triplets) {
    const std::size_t s = tangible_at.at(e.subject), o = tangible_at.at(e.object),
                      p = intangible_at.at(e.predicate);
    raise(s, o, 7);
    raise(s, p, 6);
    raise(o, p, 6);
    raise(p, s, 5);
    raise(p, o, 5);
  }
  for (std::size_t a = 0; a < ts.neighbors.size(); ++a) {
    const auto& list = ts.neighbors[a];
    for (std::size_t k = 0; k < list.size() && k < kMaxNeighbors; ++k) {
      raise(tangible_at.at(a), tangible_at.at(list[k]), static_cast<std::uint8_t>(4 - k));
    }
  }
  return rm;
}

std::string render_ranks(const RankMatrix& rm) {
  std::ostringstream os;
  for (std::size_t p = 0; p < rm.size; ++p) {
    for (std::size_t q = 0; q < rm.size; ++q) {
      os << (q ? " " : "");
      if (!rm.valid_mask[p] || !rm.valid_mask[q]) {
        os << '.';
      } else {
        os << static_cast<int>(rm.at(p, q));
      }
    }
    os << '\n';
  }
  return os.str();
}

WeightEncoding::WeightEncoding(Tensor a) : a_(std::move(a)) {
  if (!a_.defined() || a_.shape() != Shape{kRankLevels}) {
    throw DimensionError("WeightEncoding: a must have shape [8]");
  }
}

Tensor WeightEncoding::initial_values(bool requires_grad) {
  return Tensor::zeros({kRankLevels}, requires_grad);
}

Tensor WeightEncoding::weights() const { return cumsum_lastdim(exp(a_)); }

std::vector<double> WeightEncoding::weight_table() const {
  const Tensor w = cumsum_lastdim(exp(a_.detach()));
  return {w.data().begin(), w.data().end()};
}

Tensor weights_from_ranks(std::span<const RankMatrix> matrices, const Tensor& w) {
  if (matrices.empty()) throw std::invalid_argument("weights_from_ranks: no rank matrices");
  const std::size_t n = matrices.front().size;
  std::vector<std::uint8_t> index;
  index.reserve(matrices.size() * n * n);
  for (const auto& rm : matrices) {
    if (rm.size != n) throw DimensionError("weights_from_ranks: rank matrices differ in size");
    index.insert(index.end(), rm.ranks.begin(), rm.ranks.end());
  }
  return take_nonzero(w, index, {matrices.size(), n, n});
}

Tensor weights_from_ranks(const RankMatrix& rm, const Tensor& w) {
  return reshape(weights_from_ranks(std::span<const RankMatrix>(&rm, 1), w), {rm.size, rm.size});
}

}  // namespace semtok
