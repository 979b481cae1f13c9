#pragma once

// Per-image semantic token sets and the line-oriented interchange format.
//
// A corpus file is UTF-8 text with one JSON object per line. An optional first
// line carries the header {"format":"semtok-tokens","version":1,"d":..,"d_l":..};
// every other line is one record:
//
//   {"sample_id":"..","d":32,"l":[..],"V":[[..],..],"U":[[..],..],
//    "E":[[s,o,p],..],"N":{"0":[1,2],..},"caption":[ids..]}
//
// A record may carry "captions":[[ids..],..] instead of "caption" when several
// captions describe one image. Files ending in ".gz" are gzip-compressed.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace semtok {

using Vec = std::vector<double>;
using Caption = std::vector<std::int64_t>;

struct Triplet {
  std::size_t subject = 0;
  std::size_t object = 0;
  std::size_t predicate = 0;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

struct TokenSet {
  std::string sample_id;
  Vec image_features;               // l, width d_l
  std::vector<Vec> tangible;        // V, each width d
  std::vector<Vec> intangible;      // U, each width d
  std::vector<Triplet> triplets;    // E
  std::vector<std::vector<std::size_t>> neighbors;  // N, one list per tangible token
  std::vector<Caption> captions;    // at least one

  std::size_t token_count() const { return 1 + tangible.size() + intangible.size(); }
  const Caption& caption() const { return captions.front(); }

  friend bool operator==(const TokenSet&, const TokenSet&) = default;
};

inline constexpr std::size_t kMaxNeighbors = 4;

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, std::string field, const std::string& what);
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::string sample_id, std::string field, const std::string& what);
  const std::string& sample_id() const { return sample_id_; }
  const std::string& field() const { return field_; }

 private:
  std::string sample_id_;
  std::string field_;
};

class CapacityError : public std::length_error {
 public:
  CapacityError(std::string sample_id, std::size_t needed, std::size_t capacity);
  const std::string& sample_id() const { return sample_id_; }

 private:
  std::string sample_id_;
};

// Checks every TokenSet invariant. Widths are enforced when non-zero.
// Returns warnings (currently: unused predicate tokens); throws ValidationError.
std::vector<std::string> validate(const TokenSet& ts, std::size_t d, std::size_t d_l);

// ---------------------------------------------------------------------------
// Packing into a fixed context.

enum class TokenKind : std::uint8_t { Image = 0, Tangible = 1, Intangible = 2, Pad = 3 };

struct TokenPosition {
  TokenKind kind = TokenKind::Pad;
  std::size_t source_index = 0;

  friend bool operator==(const TokenPosition&, const TokenPosition&) = default;
};

struct PackedTokens {
  std::size_t context_length = 0;
  std::size_t width = 0;                 // d
  std::vector<double> rows;              // [context_length x width], row-major
  Vec image_features;                    // l at its native width d_l
  std::vector<TokenPosition> positions;
  std::vector<std::uint8_t> valid_mask;
};

// Layout: [l] ++ V ++ U ++ zero PAD rows. Row 0 holds l when d_l == d and is
// left zero otherwise; image_features always carries l.
PackedTokens pack(const TokenSet& ts, std::size_t context_length);

struct UnpackedTokens {
  Vec image_features;
  std::vector<Vec> tangible;
  std::vector<Vec> intangible;
};
UnpackedTokens unpack(const PackedTokens& packed);

// ---------------------------------------------------------------------------
// Corpus I/O.

struct CorpusHeader {
  std::size_t d = 0;
  std::size_t d_l = 0;
};

struct Corpus {
  CorpusHeader header;
  std::vector<TokenSet> records;
  std::vector<std::string> warnings;
};

class CorpusReader {
 public:
  explicit CorpusReader(const std::filesystem::path& path);
  ~CorpusReader();
  CorpusReader(const CorpusReader&) = delete;
  CorpusReader& operator=(const CorpusReader&) = delete;

  // Next validated record, or nullopt at end of file.
  std::optional<TokenSet> next();
  const CorpusHeader& header() const { return header_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  CorpusHeader header_;
  std::vector<std::string> warnings_;
};

Corpus read_corpus(const std::filesystem::path& path);
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);

// Exposed for tests and tools that handle single records.
std::string record_to_line(const TokenSet& ts, std::size_t d);
TokenSet record_from_line(const std::string& line, std::size_t line_number);

}  // namespace semtok
