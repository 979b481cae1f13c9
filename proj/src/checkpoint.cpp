#include "semtok/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace semtok {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'S', 'E', 'M', 'T', 'O', 'K', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw std::runtime_error("cannot write checkpoint '" + path.string() + "'");
  }
  template <class T>
  void pod(T v) {
    v = to_little(v);
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void bytes(const std::string& s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }
  void tensor(const std::string& name, const Shape& shape, std::span<const double> values) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    bytes(name);
    pod<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) pod<std::uint64_t>(d);
    for (double v : values) pod<double>(v);
  }
  void finish() {
    out_.flush();
    if (!out_) throw std::runtime_error("write failed for '" + path_.string() + "'");
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  }
  template <class T>
  T pod() {
    T v;
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in_) fail("truncated file");
    return to_little(v);
  }
  std::string bytes(std::size_t n) {
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) fail("truncated file");
    return s;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error("checkpoint '" + path_.string() + "': " + what);
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

struct RawEntry {
  Shape shape;
  std::vector<double> values;
};

CheckpointHeader header_from_json(const json& j) {
  CheckpointHeader h;
  h.encoder = j.at("encoder").get<EncoderConfig>();
  h.corpus_d = j.at("corpus_d").get<std::size_t>();
  h.seed = j.at("seed").get<std::uint64_t>();
  h.step = j.at("step").get<std::uint64_t>();
  h.epoch = j.value("epoch", std::uint64_t{0});
  h.train = j.value("train", json::object());
  h.extra = j.value("extra", json::object());
  return h;
}

std::pair<CheckpointHeader, std::map<std::string, RawEntry>> read_all(const std::filesystem::path& path,
                                                                      bool payloads) {
  Reader r(path);
  const std::string magic = r.bytes(sizeof kMagic);
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0) r.fail("not a checkpoint file");
  if (const auto version = r.pod<std::uint32_t>(); version != kVersion) {
    r.fail("unsupported version " + std::to_string(version));
  }
  const auto header_len = r.pod<std::uint64_t>();
  CheckpointHeader header;
  try {
    header = header_from_json(json::parse(r.bytes(header_len)));
  } catch (const json::exception& e) {
    r.fail(std::string("bad header: ") + e.what());
  }
  std::map<std::string, RawEntry> entries;
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.pod<std::uint32_t>());
    RawEntry e;
    e.shape.resize(r.pod<std::uint32_t>());
    for (auto& d : e.shape) d = r.pod<std::uint64_t>();
    const std::size_t n = shape_numel(e.shape);
    e.values.resize(n);
    for (auto& v : e.values) v = r.pod<double>();
    if (!payloads) e.values.clear();
    entries.emplace(name, std::move(e));
  }
  return {std::move(header), std::move(entries)};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const ModelParams& params, const OptimizerMoments* moments) {
  json hj{{"encoder", header.encoder},
          {"corpus_d", header.corpus_d},
          {"seed", header.seed},
          {"step", header.step},
          {"epoch", header.epoch},
          {"train", header.train.is_null() ? json::object() : header.train},
          {"extra", header.extra.is_null() ? json::object() : header.extra}};
  const std::string header_text = hj.dump();

  const auto& entries = params.entries();
  if (moments && (moments->first.size() != entries.size() || moments->second.size() != entries.size())) {
    throw std::invalid_argument("save_checkpoint: optimizer moments do not match parameters");
  }
  Writer w(path);
  w.bytes(std::string(kMagic, sizeof kMagic));
  w.pod<std::uint32_t>(kVersion);
  w.pod<std::uint64_t>(header_text.size());
  w.bytes(header_text);
  w.pod<std::uint64_t>(entries.size() * (moments ? 3 : 1));
  for (const auto& e : entries) w.tensor("params/" + e.path, e.value.shape(), e.value.data());
  if (moments) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      w.tensor("adam_m/" + entries[i].path, entries[i].value.shape(), moments->first[i]);
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
      w.tensor("adam_v/" + entries[i].path, entries[i].value.shape(), moments->second[i]);
    }
  }
  w.finish();
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  auto [header, entries] = read_all(path, true);
  LoadedCheckpoint out{header, ModelParams::initialize(header.encoder, 0), std::nullopt};
  OptimizerMoments moments;
  bool has_moments = true;
  for (auto& p : out.params.entries()) {
    const auto it = entries.find("params/" + p.path);
    if (it == entries.end()) {
      throw std::runtime_error("checkpoint '" + path.string() + "' is missing parameter '" + p.path + "'");
    }
    if (it->second.shape != p.value.shape()) {
      throw std::runtime_error("checkpoint '" + path.string() + "': parameter '" + p.path + "' has shape " +
                               shape_str(it->second.shape) + ", expected " + shape_str(p.value.shape()));
    }
    std::copy(it->second.values.begin(), it->second.values.end(), p.value.mutable_data().begin());
    const auto m = entries.find("adam_m/" + p.path), v = entries.find("adam_v/" + p.path);
    if (m == entries.end() || v == entries.end() || m->second.shape != p.value.shape() ||
        v->second.shape != p.value.shape()) {
      has_moments = false;
    } else {
      moments.first.push_back(std::move(m->second.values));
      moments.second.push_back(std::move(v->second.values));
    }
  }
  if (has_moments) out.moments = std::move(moments);
  return out;
}

std::map<std::string, Shape> checkpoint_inventory(const std::filesystem::path& path) {
  std::map<std::string, Shape> out;
  for (auto& [name, e] : read_all(path, false).second) out.emplace(name, e.shape);
  return out;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace semtok
