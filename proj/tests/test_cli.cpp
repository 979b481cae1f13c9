#include "cli.hpp"

#include "semtok/checkpoint.hpp"
#include "semtok/tokens.hpp"

#include <doctest.h>

#include <cstdlib>
#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <unistd.h>

using namespace semtok;
namespace fs = std::filesystem;

namespace {

struct Invocation {
  int code = 0;
  std::string out;
  std::string err;
};

Invocation run(std::vector<std::string> args) {
  ::setenv("SEMTOK_LOG_LEVEL", "quiet", 1);
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("semtok-cli-" + tag + "-" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& rel) const { return (path / rel).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::set<std::string> tree(const fs::path& root) {
  std::set<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) files.insert(fs::relative(e.path(), root).string());
  return files;
}

const std::vector<std::string> kSmallModel = {"--set", "encoder.d_model=16", "encoder.d_ff=32", "encoder.n_layers=1",
                                              "encoder.n_heads=2", "encoder.embed_dim=16"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("gen-data is byte-identical for a fixed seed") {
  TempDir tmp("gen");
  for (const char* dir : {"a", "b"}) {
    const auto r = run({"gen-data", "-o", tmp / dir, "--train-scenes", "30", "--val-scenes", "10", "--seed", "9"});
    REQUIRE(r.code == 0);
  }
  for (const char* f : {"train.jsonl", "val.jsonl", "train.truth.json", "val.truth.json"}) {
    CAPTURE(f);
    CHECK(slurp(fs::path(tmp / "a") / f) == slurp(fs::path(tmp / "b") / f));
  }
  const Corpus c = read_corpus(fs::path(tmp / "a") / "train.jsonl");
  CHECK(c.records.size() == 30);
  CHECK(c.warnings.empty());

  const auto other = run({"gen-data", "-o", tmp / "c", "--train-scenes", "30", "--val-scenes", "0", "--seed", "10"});
  REQUIRE(other.code == 0);
  CHECK(slurp(fs::path(tmp / "a") / "train.jsonl") != slurp(fs::path(tmp / "c") / "train.jsonl"));
  CHECK_FALSE(fs::exists(fs::path(tmp / "c") / "val.jsonl"));
}

TEST_CASE("train with zero epochs writes the initial parameters and an empty log") {
  TempDir tmp("zero");
  REQUIRE(run({"gen-data", "-o", tmp / "data", "--train-scenes", "8", "--val-scenes", "0"}).code == 0);
  const auto r = run(concat({"train", "--corpus", tmp / "data/train.jsonl", "-o", tmp / "run", "--epochs", "0",
                             "--seed", "4"},
                            kSmallModel));
  REQUIRE(r.code == 0);
  CHECK(slurp(fs::path(tmp / "run") / "metrics.jsonl").empty());
  const LoadedCheckpoint ck = load_checkpoint(fs::path(tmp / "run") / "final.ckpt");
  const ModelParams init = ModelParams::initialize(ck.header.encoder, 4);
  CHECK(ck.header.step == 0);
  REQUIRE(ck.params.entries().size() == init.entries().size());
  for (std::size_t i = 0; i < init.entries().size(); ++i) {
    CAPTURE(init.entries()[i].path);
    CHECK(std::ranges::equal(ck.params.entries()[i].value.data(), init.entries()[i].value.data()));
  }
  CHECK(fs::exists(fs::path(tmp / "run") / "manifest.json"));
}

TEST_CASE("pipeline runs end to end, reruns identically, and stays inside its output directories") {
  TempDir tmp("pipe");
  REQUIRE(run({"gen-data", "-o", tmp / "data", "--train-scenes", "24", "--val-scenes", "12", "--seed", "2"}).code == 0);
  const auto before = tree(tmp.path);

  const auto train_args = concat({"train", "--corpus", tmp / "data/train.jsonl", "--validation", tmp / "data/val.jsonl",
                                  "--epochs", "2", "--batch-size", "8"},
                                 kSmallModel);
  REQUIRE(run(concat(train_args, {"-o", tmp / "run1"})).code == 0);
  REQUIRE(run(concat(train_args, {"-o", tmp / "run2"})).code == 0);
  CHECK(slurp(fs::path(tmp / "run1") / "metrics.jsonl") == slurp(fs::path(tmp / "run2") / "metrics.jsonl"));
  CHECK(slurp(fs::path(tmp / "run1") / "final.ckpt") == slurp(fs::path(tmp / "run2") / "final.ckpt"));
  // Same directory again: the log is rewritten, not appended.
  const std::string log = slurp(fs::path(tmp / "run1") / "metrics.jsonl");
  REQUIRE(run(concat(train_args, {"-o", tmp / "run1"})).code == 0);
  CHECK(slurp(fs::path(tmp / "run1") / "metrics.jsonl") == log);

  const auto ev = run({"eval", "--checkpoint", tmp / "run1/final.ckpt", "--corpus", tmp / "data/val.jsonl", "-o",
                       tmp / "eval", "--dump-matrix"});
  REQUIRE(ev.code == 0);
  const auto report = nlohmann::json::parse(slurp(fs::path(tmp / "eval") / "report.json"));
  CHECK(report["samples"] == 12);
  CHECK(report["retrieval"]["t2i_top1"].get<double>() >= 0.0);
  CHECK(report.contains("pairwise_choice"));
  const auto group = report["group"];
  CHECK(group["group_correct"].get<double>() <=
        std::min(group["text_correct"].get<double>(), group["image_correct"].get<double>()));
  std::ifstream csv(fs::path(tmp / "eval") / "similarity.csv");
  std::size_t rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  CHECK(rows == 12);

  // A second eval hits the embedding cache and reports the same numbers.
  const auto again = run({"eval", "--checkpoint", tmp / "run1/final.ckpt", "--corpus", tmp / "data/val.jsonl", "-o",
                          tmp / "eval"});
  REQUIRE(again.code == 0);
  CHECK(nlohmann::json::parse(again.out) == report);

  // Everything new lives under run1, run2 or eval.
  for (const auto& f : tree(tmp.path)) {
    if (before.count(f)) continue;
    const std::string top = fs::path(f).begin()->string();
    CAPTURE(f);
    CHECK((top == "run1" || top == "run2" || top == "eval"));
  }
  const auto manifest = nlohmann::json::parse(slurp(fs::path(tmp / "run1") / "manifest.json"));
  CHECK(manifest["command"] == "train");
  CHECK(manifest["config"]["train"]["epochs"] == 2);
  CHECK(manifest["version"].get<std::string>().rfind("semtok ", 0) == 0);

  const auto plot = run({"plot-data", "--log", tmp / "run1/metrics.jsonl", "--metric", "t2i_top1"});
  REQUIRE(plot.code == 0);
  CHECK(plot.out.rfind("iteration\tt2i_top1\n", 0) == 0);
  CHECK(std::count(plot.out.begin(), plot.out.end(), '\n') == 3);
}

TEST_CASE("resume through the CLI matches an uninterrupted run") {
  TempDir tmp("resume");
  REQUIRE(run({"gen-data", "-o", tmp / "data", "--train-scenes", "16", "--val-scenes", "0"}).code == 0);
  const auto base = concat({"train", "--corpus", tmp / "data/train.jsonl", "--batch-size", "8", "--set",
                            "train.warmup_epochs=1", "train.checkpoint_every=1"},
                           kSmallModel);
  REQUIRE(run(concat(base, {"--epochs", "3", "-o", tmp / "full"})).code == 0);
  REQUIRE(run(concat(base, {"--epochs", "3", "-o", tmp / "resumed", "--resume", tmp / "full/checkpoints/epoch-0001.ckpt"}))
              .code == 0);
  const LoadedCheckpoint a = load_checkpoint(fs::path(tmp / "full") / "final.ckpt");
  const LoadedCheckpoint b = load_checkpoint(fs::path(tmp / "resumed") / "final.ckpt");
  for (std::size_t i = 0; i < a.params.entries().size(); ++i) {
    CHECK(std::ranges::equal(a.params.entries()[i].value.data(), b.params.entries()[i].value.data()));
  }
}

TEST_CASE("inspect shows the person-beside-tree ranks") {
  TempDir tmp("inspect");
  TokenSet ts;
  ts.sample_id = "person-beside-tree";
  ts.image_features = {0.1, 0.2};
  ts.tangible = {{1.0, 0.0}, {0.0, 1.0}};
  ts.intangible = {{0.5, 0.5}};
  ts.triplets = {{0, 1, 0}};
  ts.neighbors = {{}, {}};
  ts.captions = {{2, 4, 6, 2, 5, 1}};
  Corpus corpus;
  corpus.header = {2, 2};
  corpus.records = {ts};
  write_corpus(corpus, tmp / "graph.jsonl");

  const auto r = run({"inspect", "--corpus", tmp / "graph.jsonl", "--sample", "person-beside-tree"});
  REQUIRE(r.code == 0);
  std::istringstream lines(r.out.substr(r.out.find("rank matrix")));
  std::string header;
  std::getline(lines, header);
  std::vector<std::vector<int>> grid;
  for (std::string line; std::getline(lines, line) && !line.empty();) {
    std::istringstream cells(line);
    grid.emplace_back(std::istream_iterator<int>(cells), std::istream_iterator<int>());
  }
  REQUIRE(grid.size() == 4);
  const std::size_t person = 1, tree = 2, beside = 3;
  CHECK(grid[person][beside] == 6);
  CHECK(grid[tree][beside] == 6);
  CHECK(grid[beside][person] == 5);
  CHECK(grid[beside][tree] == 5);
  CHECK(grid[person][tree] == 7);
  CHECK(r.out.find("w[7] = 8") != std::string::npos);

  CHECK(run({"inspect", "--corpus", tmp / "graph.jsonl", "--sample", "missing"}).code == cli::kPath);
}

TEST_CASE("configuration: unknown keys rejected, flags beat the file, errors name the field") {
  TempDir tmp("config");
  {
    std::ofstream(tmp / "run.json") << R"({"data": {"train_scenes": 5, "val_scenes": 0, "seed": 1},
                                          "scene": {"ambiguous_rate": 0.5}})";
  }
  REQUIRE(run({"gen-data", "-c", tmp / "run.json", "-o", tmp / "d1", "--train-scenes", "7"}).code == 0);
  CHECK(read_corpus(fs::path(tmp / "d1") / "train.jsonl").records.size() == 7);
  const auto manifest = nlohmann::json::parse(slurp(fs::path(tmp / "d1") / "manifest.json"));
  CHECK(manifest["config"]["scene"]["ambiguous_rate"] == 0.5);
  CHECK(manifest["seed"]["data"] == 1);

  {
    std::ofstream(tmp / "bad.json") << R"({"train": {"epochs": 2, "momentum": 0.9}})";
  }
  auto bad = run({"gen-data", "-c", tmp / "bad.json", "-o", tmp / "d2"});
  CHECK(bad.code == cli::kConfig);
  CHECK(bad.err.find("momentum") != std::string::npos);
  CHECK_FALSE(fs::exists(fs::path(tmp / "d2")));

  bad = run({"gen-data", "-o", tmp / "d3", "--set", "unknown_section.x=1"});
  CHECK(bad.code == cli::kConfig);
  bad = run({"gen-data", "-o", tmp / "d3", "--set", "train.lr=-1"});
  CHECK(bad.code == cli::kConfig);
  CHECK(bad.err.find("train.lr") != std::string::npos);
  bad = run({"gen-data", "-o", tmp / "d3", "--set", "encoder.context_length=8"});
  CHECK(bad.code == cli::kConfig);
  CHECK(bad.err.find("encoder.context_length") != std::string::npos);
  CHECK(run({"train", "-o", tmp / "d3"}).code == cli::kConfig);
  CHECK(run({"frobnicate"}).code == cli::kUsage);
  CHECK(run({}).code == cli::kUsage);
}

TEST_CASE("overrides parse JSON values and fall back to strings") {
  nlohmann::json doc = nlohmann::json::object();
  cli::apply_override(doc, "train.lr=0.5");
  cli::apply_override(doc, "paths.out_dir=runs/a");
  cli::apply_override(doc, "train.grad_clip=null");
  CHECK(doc["train"]["lr"] == 0.5);
  CHECK(doc["paths"]["out_dir"] == "runs/a");
  CHECK(doc["train"]["grad_clip"].is_null());
  CHECK_THROWS_AS(cli::apply_override(doc, "novalue"), ConfigError);
  const cli::RunConfig c = cli::parse_run_config(doc);
  CHECK(c.train.lr == 0.5);
  CHECK(c.paths.out_dir == "runs/a");
  CHECK(cli::parse_run_config(cli::to_json(c)).train.lr == 0.5);
}
