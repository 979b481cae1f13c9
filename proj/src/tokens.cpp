#include "semtok/tokens.hpp"

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace semtok {

using nlohmann::json;

namespace {

constexpr const char* kFormatTag = "semtok-tokens";
constexpr int kFormatVersion = 1;

bool has_gz_suffix(const std::filesystem::path& path) { return path.extension() == ".gz"; }

std::string index_field(const std::string& base, std::size_t i) {
  return base + "[" + std::to_string(i) + "]";
}

Vec parse_vector(const json& j, const std::string& field, std::size_t line) {
  if (!j.is_array()) throw ParseError(line, field, "expected an array of numbers");
  Vec out;
  out.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ParseError(line, index_field(field, i), "expected a number");
    out.push_back(j[i].get<double>());
  }
  return out;
}

std::vector<Vec> parse_matrix(const json& j, const std::string& field, std::size_t line) {
  if (!j.is_array()) throw ParseError(line, field, "expected an array of vectors");
  std::vector<Vec> out;
  out.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(parse_vector(j[i], index_field(field, i), line));
  return out;
}

std::size_t parse_index(const json& j, const std::string& field, std::size_t line) {
  if (!j.is_number_integer() || j.get<std::int64_t>() < 0) {
    throw ParseError(line, field, "expected a non-negative integer");
  }
  return j.get<std::size_t>();
}

Caption parse_caption(const json& j, const std::string& field, std::size_t line) {
  if (!j.is_array()) throw ParseError(line, field, "expected an array of token ids");
  Caption out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number_integer()) throw ParseError(line, index_field(field, i), "expected an integer");
    out.push_back(j[i].get<std::int64_t>());
  }
  return out;
}

const json& require(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(line, key, "missing required field");
  return *it;
}

bool is_header(const json& j) { return j.is_object() && j.contains("format"); }

CorpusHeader parse_header(const json& j, std::size_t line) {
  if (!j["format"].is_string() || j["format"].get<std::string>() != kFormatTag) {
    throw ParseError(line, "format", std::string("expected \"") + kFormatTag + "\"");
  }
  if (j.contains("version") && j["version"] != kFormatVersion) {
    throw ParseError(line, "version", "unsupported version");
  }
  CorpusHeader h;
  h.d = parse_index(require(j, "d", line), "d", line);
  h.d_l = j.contains("d_l") ? parse_index(j["d_l"], "d_l", line) : h.d;
  return h;
}

}  // namespace

ParseError::ParseError(std::size_t line, std::string field, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": field '" + field + "': " + what),
      line_(line),
      field_(std::move(field)) {}

ValidationError::ValidationError(std::string sample_id, std::string field, const std::string& what)
    : std::runtime_error("sample '" + sample_id + "': " + field + ": " + what),
      sample_id_(std::move(sample_id)),
      field_(std::move(field)) {}

CapacityError::CapacityError(std::string sample_id, std::size_t needed, std::size_t capacity)
    : std::length_error("sample '" + sample_id + "' needs " + std::to_string(needed) +
                        " token positions but the context holds " + std::to_string(capacity)),
      sample_id_(std::move(sample_id)) {}

std::vector<std::string> validate(const TokenSet& ts, std::size_t d, std::size_t d_l) {
  const auto fail = [&](const std::string& field, const std::string& what) {
    throw ValidationError(ts.sample_id, field, what);
  };
  const auto check_vec = [&](const Vec& v, const std::string& field, std::size_t width) {
    if (width != 0 && v.size() != width) {
      fail(field, "width " + std::to_string(v.size()) + ", expected " + std::to_string(width));
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i])) fail(index_field(field, i), "non-finite value");
    }
  };

  if (ts.sample_id.empty()) fail("sample_id", "empty");
  if (ts.image_features.empty()) fail("l", "empty image-feature vector");
  check_vec(ts.image_features, "l", d_l);
  for (std::size_t i = 0; i < ts.tangible.size(); ++i) check_vec(ts.tangible[i], index_field("V", i), d);
  for (std::size_t i = 0; i < ts.intangible.size(); ++i) {
    check_vec(ts.intangible[i], index_field("U", i), d);
  }

  const std::size_t n = ts.tangible.size(), m = ts.intangible.size();
  std::vector<int> predicate_uses(m, 0);
  for (std::size_t t = 0; t < ts.triplets.size(); ++t) {
    const auto& e = ts.triplets[t];
    const std::string base = index_field("triplets", t);
    if (e.subject >= n) fail(base + ".subject", std::to_string(e.subject) + " out of range [0, " + std::to_string(n) + ")");
    if (e.object >= n) fail(base + ".object", std::to_string(e.object) + " out of range [0, " + std::to_string(n) + ")");
    if (e.predicate >= m) fail(base + ".predicate", std::to_string(e.predicate) + " out of range [0, " + std::to_string(m) + ")");
    if (e.subject == e.object) fail(base, "subject and object are the same token");
    if (++predicate_uses[e.predicate] > 1) fail(base + ".predicate", "predicate token used by more than one triplet");
  }

  if (ts.neighbors.size() != n) {
    fail("neighbors", "expected " + std::to_string(n) + " lists, got " + std::to_string(ts.neighbors.size()));
  }
  for (std::size_t a = 0; a < ts.neighbors.size(); ++a) {
    const auto& list = ts.neighbors[a];
    const std::string base = index_field("neighbors", a);
    if (list.size() > kMaxNeighbors) fail(base, "more than 4 neighbors");
    std::set<std::size_t> seen;
    for (std::size_t k = 0; k < list.size(); ++k) {
      if (list[k] >= n) fail(index_field(base, k), "index out of range");
      if (list[k] == a) fail(index_field(base, k), "token listed as its own neighbor");
      if (!seen.insert(list[k]).second) fail(index_field(base, k), "duplicate neighbor");
    }
  }

  if (ts.captions.empty()) fail("caption", "no caption");
  for (std::size_t c = 0; c < ts.captions.size(); ++c) {
    for (std::size_t i = 0; i < ts.captions[c].size(); ++i) {
      if (ts.captions[c][i] < 0) fail(index_field(index_field("captions", c), i), "negative token id");
    }
  }

  std::vector<std::string> warnings;
  for (std::size_t p = 0; p < m; ++p) {
    if (predicate_uses[p] == 0) {
      warnings.push_back("sample '" + ts.sample_id + "': intangible token " + std::to_string(p) +
                         " is not used by any triplet");
    }
  }
  return warnings;
}

// ---------------------------------------------------------------------------

PackedTokens pack(const TokenSet& ts, std::size_t context_length) {
  if (ts.token_count() > context_length) {
    throw CapacityError(ts.sample_id, ts.token_count(), context_length);
  }
  const std::size_t d = !ts.tangible.empty()     ? ts.tangible.front().size()
                        : !ts.intangible.empty() ? ts.intangible.front().size()
                                                 : ts.image_features.size();
  PackedTokens p;
  p.context_length = context_length;
  p.width = d;
  p.rows.assign(context_length * d, 0.0);
  p.image_features = ts.image_features;
  p.positions.assign(context_length, TokenPosition{TokenKind::Pad, 0});
  p.valid_mask.assign(context_length, 0);

  const auto put = [&](std::size_t row, const Vec& v, TokenKind kind, std::size_t src) {
    if (v.size() == d) std::copy(v.begin(), v.end(), p.rows.begin() + row * d);
    p.positions[row] = {kind, src};
    p.valid_mask[row] = 1;
  };
  put(0, ts.image_features, TokenKind::Image, 0);
  std::size_t row = 1;
  for (std::size_t j = 0; j < ts.tangible.size(); ++j) put(row++, ts.tangible[j], TokenKind::Tangible, j);
  for (std::size_t c = 0; c < ts.intangible.size(); ++c) put(row++, ts.intangible[c], TokenKind::Intangible, c);
  return p;
}

UnpackedTokens unpack(const PackedTokens& packed) {
  UnpackedTokens out;
  out.image_features = packed.image_features;
  const std::size_t d = packed.width;
  for (std::size_t r = 0; r < packed.context_length; ++r) {
    const Vec row(packed.rows.begin() + r * d, packed.rows.begin() + (r + 1) * d);
    switch (packed.positions[r].kind) {
      case TokenKind::Tangible: out.tangible.push_back(row); break;
      case TokenKind::Intangible: out.intangible.push_back(row); break;
      default: break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string record_to_line(const TokenSet& ts, std::size_t d) {
  json j;
  j["sample_id"] = ts.sample_id;
  j["d"] = d;
  j["l"] = ts.image_features;
  j["V"] = ts.tangible;
  j["U"] = ts.intangible;
  json e = json::array();
  for (const auto& t : ts.triplets) e.push_back({t.subject, t.object, t.predicate});
  j["E"] = std::move(e);
  json nb = json::object();
  for (std::size_t a = 0; a < ts.neighbors.size(); ++a) {
    if (!ts.neighbors[a].empty()) nb[std::to_string(a)] = ts.neighbors[a];
  }
  j["N"] = std::move(nb);
  if (ts.captions.size() == 1) {
    j["caption"] = ts.captions.front();
  } else {
    j["captions"] = ts.captions;
  }
  return j.dump();
}

TokenSet record_from_line(const std::string& line, std::size_t line_number) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(line_number, "<record>", e.what());
  }
  if (!j.is_object()) throw ParseError(line_number, "<record>", "expected a JSON object");

  static const std::set<std::string> known{"sample_id", "d", "l", "V", "U", "E", "N", "caption", "captions"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ParseError(line_number, key, "unknown field");
  }

  TokenSet ts;
  const json& id = require(j, "sample_id", line_number);
  if (!id.is_string()) throw ParseError(line_number, "sample_id", "expected a string");
  ts.sample_id = id.get<std::string>();
  ts.image_features = parse_vector(require(j, "l", line_number), "l", line_number);
  ts.tangible = parse_matrix(require(j, "V", line_number), "V", line_number);
  ts.intangible = parse_matrix(require(j, "U", line_number), "U", line_number);

  const json& e = require(j, "E", line_number);
  if (!e.is_array()) throw ParseError(line_number, "E", "expected an array of [s,o,p] triplets");
  for (std::size_t t = 0; t < e.size(); ++t) {
    const std::string f = index_field("E", t);
    if (!e[t].is_array() || e[t].size() != 3) throw ParseError(line_number, f, "expected [s,o,p]");
    ts.triplets.push_back({parse_index(e[t][0], f + "[0]", line_number),
                           parse_index(e[t][1], f + "[1]", line_number),
                           parse_index(e[t][2], f + "[2]", line_number)});
  }

  ts.neighbors.assign(ts.tangible.size(), {});
  if (j.contains("N")) {
    const json& nb = j["N"];
    if (!nb.is_object()) throw ParseError(line_number, "N", "expected an object keyed by tangible index");
    for (const auto& [key, list] : nb.items()) {
      const std::string f = "N." + key;
      std::size_t a = 0;
      try {
        std::size_t used = 0;
        a = std::stoul(key, &used);
        if (used != key.size()) throw std::invalid_argument(key);
      } catch (const std::exception&) {
        throw ParseError(line_number, f, "key is not a tangible index");
      }
      if (a >= ts.tangible.size()) throw ParseError(line_number, f, "key out of range");
      if (!list.is_array()) throw ParseError(line_number, f, "expected an array of indices");
      for (std::size_t k = 0; k < list.size(); ++k) {
        ts.neighbors[a].push_back(parse_index(list[k], index_field(f, k), line_number));
      }
    }
  }

  if (j.contains("captions")) {
    const json& cs = j["captions"];
    if (!cs.is_array() || cs.empty()) throw ParseError(line_number, "captions", "expected a non-empty array");
    for (std::size_t c = 0; c < cs.size(); ++c) {
      ts.captions.push_back(parse_caption(cs[c], index_field("captions", c), line_number));
    }
  } else {
    ts.captions.push_back(parse_caption(require(j, "caption", line_number), "caption", line_number));
  }

  if (j.contains("d")) {
    const std::size_t d = parse_index(j["d"], "d", line_number);
    for (std::size_t i = 0; i < ts.tangible.size(); ++i) {
      if (ts.tangible[i].size() != d) {
        throw ValidationError(ts.sample_id, index_field("V", i), "width disagrees with d=" + std::to_string(d));
      }
    }
  }
  return ts;
}

// ---------------------------------------------------------------------------

struct CorpusReader::Impl {
  gzFile file = nullptr;
  std::filesystem::path path;
  std::size_t line_number = 0;
  std::optional<std::string> pending;  // first record line consumed while probing for a header

  bool read_line(std::string& out) {
    out.clear();
    char buf[1 << 16];
    while (gzgets(file, buf, sizeof buf) != nullptr) {
      out += buf;
      if (!out.empty() && out.back() == '\n') break;
    }
    if (out.empty()) return false;
    ++line_number;
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return true;
  }

  ~Impl() {
    if (file) gzclose(file);
  }
};

CorpusReader::CorpusReader(const std::filesystem::path& path) : impl_(std::make_unique<Impl>()) {
  impl_->path = path;
  impl_->file = gzopen(path.c_str(), "rb");
  if (!impl_->file) throw std::runtime_error("cannot open corpus '" + path.string() + "'");
  std::string line;
  while (impl_->read_line(line)) {
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(impl_->line_number, "<record>", e.what());
    }
    if (is_header(j)) {
      header_ = parse_header(j, impl_->line_number);
    } else {
      impl_->pending = line;
    }
    break;
  }
}

CorpusReader::~CorpusReader() = default;

std::optional<TokenSet> CorpusReader::next() {
  std::string line;
  std::size_t number = impl_->line_number;
  if (impl_->pending) {
    line = std::move(*impl_->pending);
    impl_->pending.reset();
  } else {
    do {
      if (!impl_->read_line(line)) return std::nullopt;
      number = impl_->line_number;
    } while (line.find_first_not_of(" \t") == std::string::npos);
  }
  TokenSet ts = record_from_line(line, number);
  if (header_.d == 0) {
    header_.d = !ts.tangible.empty()     ? ts.tangible.front().size()
                : !ts.intangible.empty() ? ts.intangible.front().size()
                                         : ts.image_features.size();
  }
  if (header_.d_l == 0) header_.d_l = ts.image_features.size();
  auto w = validate(ts, header_.d, header_.d_l);
  warnings_.insert(warnings_.end(), w.begin(), w.end());
  return ts;
}

Corpus read_corpus(const std::filesystem::path& path) {
  CorpusReader reader(path);
  Corpus corpus;
  while (auto ts = reader.next()) corpus.records.push_back(std::move(*ts));
  corpus.header = reader.header();
  corpus.warnings = reader.warnings();
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  CorpusHeader h = corpus.header;
  if (h.d == 0 && !corpus.records.empty()) {
    const auto& r = corpus.records.front();
    h.d = !r.tangible.empty() ? r.tangible.front().size()
          : !r.intangible.empty() ? r.intangible.front().size()
                                  : r.image_features.size();
  }
  if (h.d_l == 0 && !corpus.records.empty()) h.d_l = corpus.records.front().image_features.size();

  std::string text;
  if (h.d != 0) {
    text += json{{"format", kFormatTag}, {"version", kFormatVersion}, {"d", h.d}, {"d_l", h.d_l}}.dump();
    text += '\n';
  }
  for (const auto& ts : corpus.records) {
    text += record_to_line(ts, h.d);
    text += '\n';
  }

  if (has_gz_suffix(path)) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot write corpus '" + path.string() + "'");
    const int written = gzwrite(f, text.data(), static_cast<unsigned>(text.size()));
    gzclose(f);
    if (written != static_cast<int>(text.size())) {
      throw std::runtime_error("short write to '" + path.string() + "'");
    }
  } else {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write corpus '" + path.string() + "'");
    out << text;
  }
}

}  // namespace semtok
