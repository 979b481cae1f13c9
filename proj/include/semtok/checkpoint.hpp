#pragma once

// Binary checkpoint container.
//
//   "SEMTOKCK" | u32 version | u64 header bytes | header (JSON text)
//   u64 entry count | entries...
//   entry: u32 name bytes | name | u32 rank | u64 dims[rank] | f64 payload[numel]
//
// All integers and floats are little-endian. Parameter entries live under
// "params/<path>"; optimizer moments under "adam_m/<path>" and "adam_v/<path>".

#include "semtok/encoder.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace semtok {

struct CheckpointHeader {
  EncoderConfig encoder;
  std::size_t corpus_d = 0;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;       // completed epochs
  nlohmann::json train;          // trainer configuration snapshot
  nlohmann::json extra;          // optimizer counters and free-form metadata
};

struct OptimizerMoments {
  std::vector<std::vector<double>> first;   // aligned with ModelParams::entries()
  std::vector<std::vector<double>> second;
};

struct LoadedCheckpoint {
  CheckpointHeader header;
  ModelParams params;
  std::optional<OptimizerMoments> moments;
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const ModelParams& params, const OptimizerMoments* moments = nullptr);

// Verifies that every parameter the header's EncoderConfig implies is present
// with its expected shape.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Raw entry table, for inspection tools.
std::map<std::string, Shape> checkpoint_inventory(const std::filesystem::path& path);

// FNV-1a over the file bytes.
std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace semtok
