#pragma once

// The `semtok` command line: gen-data, train, eval, inspect, verify, plot-data.

#include "semtok/encoder.hpp"
#include "semtok/synthcorpus.hpp"
#include "semtok/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace semtok::cli {

struct DataConfig {
  std::size_t train_scenes = 2000;
  std::size_t val_scenes = 200;
  std::uint64_t seed = 0;
};

struct Paths {
  std::filesystem::path corpus;
  std::filesystem::path validation;
  std::filesystem::path truth;        // ground-truth sidecar of `corpus`
  std::filesystem::path checkpoint;
  std::filesystem::path resume;
  std::filesystem::path out_dir;
};

struct RunConfig {
  EncoderConfig encoder;
  TrainConfig train;
  SceneSpec scene;
  DataConfig data;
  Paths paths;

  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);

// Parses a config document. Every section is optional; unknown keys anywhere
// are rejected. When train.warmup_epochs is absent it is capped at epochs.
RunConfig parse_run_config(const nlohmann::json& document);

// Applies "section.key=value" to a document. The value is read as JSON when it
// parses, otherwise as a string.
void apply_override(nlohmann::json& document, const std::string& assignment);

enum ExitCode : int {
  kOk = 0,
  kCheckFailed = 1,
  kUsage = 2,
  kConfig = 3,
  kPath = 4,
  kTraining = 5,
};

// Runs one invocation; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string version_string();

}  // namespace semtok::cli
