#include "cli.hpp"

#include "semtok/checkpoint.hpp"
#include "semtok/eval.hpp"
#include "semtok/rankmatrix.hpp"
#include "semtok/verify.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#ifndef SEMTOK_VERSION
#define SEMTOK_VERSION "0.0.0"
#endif

namespace semtok::cli {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

class PathError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Verbosity { Quiet, Info, Debug };

Verbosity verbosity() {
  const char* v = std::getenv("SEMTOK_LOG_LEVEL");
  if (!v) return Verbosity::Info;
  const std::string s(v);
  if (s == "quiet" || s == "0") return Verbosity::Quiet;
  if (s == "debug" || s == "2") return Verbosity::Debug;
  return Verbosity::Info;
}

void log_info(std::ostream& err, const std::string& msg) {
  if (verbosity() != Verbosity::Quiet) err << msg << '\n';
}

template <class F>
void for_each_key(const json& section, const std::string& name, F&& f) {
  if (!section.is_object()) throw ConfigError(name, "must be an object");
  for (const auto& [key, value] : section.items()) {
    try {
      if (!f(key, value)) throw ConfigError(name + "." + key, "unknown key");
    } catch (const json::exception& e) {
      throw ConfigError(name + "." + key, e.what());
    }
  }
}

DataConfig parse_data(const json& j) {
  DataConfig d;
  for_each_key(j, "data", [&](const std::string& key, const json& v) {
    if (key == "train_scenes") d.train_scenes = v.get<std::size_t>();
    else if (key == "val_scenes") d.val_scenes = v.get<std::size_t>();
    else if (key == "seed") d.seed = v.get<std::uint64_t>();
    else return false;
    return true;
  });
  return d;
}

Paths parse_paths(const json& j) {
  Paths p;
  for_each_key(j, "paths", [&](const std::string& key, const json& v) {
    const fs::path value = v.get<std::string>();
    if (key == "corpus") p.corpus = value;
    else if (key == "validation") p.validation = value;
    else if (key == "truth") p.truth = value;
    else if (key == "checkpoint") p.checkpoint = value;
    else if (key == "resume") p.resume = value;
    else if (key == "out_dir") p.out_dir = value;
    else return false;
    return true;
  });
  return p;
}

template <class T>
T parse_section(const json& j, const std::string& name) {
  if (!j.is_object()) throw ConfigError(name, "must be an object");
  try {
    return j.get<T>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(name, e.what());
  }
}

fs::path require(const fs::path& p, const std::string& field) {
  if (p.empty()) throw ConfigError("paths." + field, "required for this command");
  return p;
}

fs::path existing(const fs::path& p, const std::string& field) {
  require(p, field);
  if (!fs::exists(p)) throw PathError("paths." + field + ": no such file: " + p.string());
  return p;
}

// "corpus.jsonl" -> "corpus.truth.json", when present.
fs::path sidecar_for(const fs::path& corpus) {
  fs::path stem = corpus;
  if (stem.extension() == ".gz") stem.replace_extension();
  stem.replace_extension(".truth.json");
  return stem;
}

fs::path truth_path(const Paths& p, const fs::path& corpus) {
  if (!p.truth.empty()) return existing(p.truth, "truth");
  const fs::path guess = sidecar_for(corpus);
  return fs::exists(guess) ? guess : fs::path{};
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

void write_manifest(const fs::path& out_dir, const std::string& command, const std::vector<std::string>& args,
                    const RunConfig& config, const ordered_json& inputs, const ordered_json& outputs) {
  ordered_json m;
  m["command"] = command;
  m["arguments"] = args;
  m["version"] = version_string();
  m["seed"] = {{"data", config.data.seed}, {"train", config.train.seed}};
  m["config"] = to_json(config);
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  std::ofstream f(out_dir / "manifest.json");
  f << m.dump(2) << '\n';
  if (!f) throw PathError("cannot write " + (out_dir / "manifest.json").string());
}

ordered_json file_entry(const fs::path& p) {
  return {{"path", p.string()}, {"fnv1a", hex(file_hash(p))}};
}

fs::path prepare_out_dir(const RunConfig& c) {
  const fs::path out = require(c.paths.out_dir, "out_dir");
  fs::create_directories(out);
  return out;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& c, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  c.scene.validate();
  const fs::path dir = prepare_out_dir(c);
  ordered_json outputs = ordered_json::object();
  const auto emit = [&](const std::string& split, std::size_t n, std::uint64_t seed) {
    const SyntheticCorpus data = generate(n, c.scene, seed, split);
    const fs::path corpus = dir / (split + ".jsonl");
    const fs::path truth = dir / (split + ".truth.json");
    write_corpus(data.corpus, corpus);
    write_ground_truth(data, truth);
    std::size_t twins = 0;
    for (const auto& t : data.truth) twins += t.twin.has_value();
    outputs[split] = {{"corpus", file_entry(corpus)}, {"truth", file_entry(truth)}, {"scenes", n}, {"twin_scenes", twins}};
    log_info(err, "wrote " + std::to_string(n) + " scenes to " + corpus.string());
  };
  emit("train", c.data.train_scenes, c.data.seed);
  if (c.data.val_scenes > 0) emit("val", c.data.val_scenes, derive_seed(c.data.seed, 1));
  write_manifest(dir, "gen-data", args, c, ordered_json::object(), outputs);
  out << outputs.dump(2) << '\n';
  return kOk;
}

int cmd_train(const RunConfig& c, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const fs::path corpus_path = existing(c.paths.corpus, "corpus");
  const fs::path dir = prepare_out_dir(c);
  const Corpus corpus = read_corpus(corpus_path);
  for (const auto& w : corpus.warnings) log_info(err, "warning: " + w);

  ordered_json inputs;
  inputs["corpus"] = file_entry(corpus_path);
  TrainOptions options;
  options.out_dir = dir;
  const fs::path truth = truth_path(c.paths, corpus_path);
  if (!truth.empty()) {
    const GroundTruth gt = read_ground_truth(truth);
    options.groups = twin_groups(corpus.records, gt.scenes);
    inputs["truth"] = file_entry(truth);
  }
  std::vector<TokenSet> validation;
  if (!c.paths.validation.empty()) {
    validation = read_corpus(existing(c.paths.validation, "validation")).records;
    options.validation = &validation;
    inputs["validation"] = file_entry(c.paths.validation);
  }
  if (!c.paths.resume.empty()) {
    options.resume_from = existing(c.paths.resume, "resume");
    inputs["resume"] = file_entry(c.paths.resume);
  }
  const Verbosity level = verbosity();
  options.log_sink = [&](const std::string& line) {
    const bool is_step = line.rfind(R"({"event":"step")", 0) == 0;
    if (level == Verbosity::Debug || (level == Verbosity::Info && !is_step)) err << line << '\n';
  };

  const TrainResult r = train(corpus, c.train, c.encoder, options);
  ordered_json outputs;
  outputs["checkpoint"] = file_entry(dir / "final.ckpt");
  outputs["metrics"] = (dir / "metrics.jsonl").string();
  outputs["steps"] = r.steps;
  outputs["last_loss"] = r.last_loss;
  write_manifest(dir, "train", args, c, inputs, outputs);
  out << outputs.dump(2) << '\n';
  return kOk;
}

Embeddings cached(const fs::path& cache, std::uint64_t ck, std::uint64_t data, const std::string& kind,
                  const std::function<Embeddings()>& compute) {
  if (auto hit = load_cached_embeddings(cache, ck, data, kind)) return std::move(*hit);
  Embeddings e = compute();
  store_cached_embeddings(cache, ck, data, kind, e);
  return e;
}

int cmd_eval(const RunConfig& c, const std::vector<std::string>& args, bool dump_matrix,
             std::optional<bool> additive_override, std::ostream& out, std::ostream& err) {
  const fs::path ck_path = existing(c.paths.checkpoint, "checkpoint");
  const fs::path corpus_path = existing(c.paths.corpus, "corpus");
  const fs::path dir = prepare_out_dir(c);
  const LoadedCheckpoint ck = load_checkpoint(ck_path);
  const Corpus corpus = read_corpus(corpus_path);
  const EncoderConfig& ec = ck.header.encoder;
  if (corpus.header.d != 0 && corpus.header.d != ec.d) {
    throw ConfigError("encoder.d", "corpus token width " + std::to_string(corpus.header.d) +
                                       " does not match the checkpoint's " + std::to_string(ec.d));
  }
  const bool additive = additive_override.value_or(ck.header.train.value("additive_attention", true));

  const std::uint64_t ck_hash = file_hash(ck_path);
  const std::uint64_t data_hash = file_hash(corpus_path);
  const fs::path cache = dir / "cache";
  fs::create_directories(cache);
  const std::string mode = additive ? "on" : "off";
  const auto& records = corpus.records;

  const Embeddings images = cached(cache, ck_hash, data_hash, "images-" + mode, [&] {
    return embed_images(ck.params, ec, std::span<const TokenSet>(records), additive);
  });
  const Embeddings texts = cached(cache, ck_hash, data_hash, "captions", [&] {
    std::vector<const Caption*> caps;
    for (const auto& r : records) caps.push_back(&r.caption());
    return embed_captions(ck.params, ec, caps);
  });
  const SimilarityReport report = similarity_report(images, texts);

  ordered_json result;
  result["checkpoint"] = file_entry(ck_path);
  result["corpus"] = file_entry(corpus_path);
  result["additive_attention"] = additive;
  result["samples"] = records.size();
  result["retrieval"] = {{"t2i_top1", report.t2i_top1}, {"i2t_top1", report.i2t_top1},
                         {"diag_mean", report.diag_mean}, {"offdiag_mean", report.offdiag_mean}};

  const fs::path truth = truth_path(c.paths, corpus_path);
  if (!truth.empty()) {
    const GroundTruth gt = read_ground_truth(truth);
    if (gt.scenes.size() != records.size()) throw ConfigError("paths.truth", "scene count does not match the corpus");
    std::vector<std::size_t> with_swap;
    for (std::size_t i = 0; i < gt.scenes.size(); ++i)
      if (gt.scenes[i].swap) with_swap.push_back(i);
    const Embeddings swapped = cached(cache, ck_hash, data_hash, "swapped", [&] {
      std::vector<const Caption*> caps;
      for (std::size_t i : with_swap) caps.push_back(&gt.scenes[i].swap->swapped);
      return embed_captions(ck.params, ec, caps);
    });
    double all_hits = 0, twin_hits = 0;
    std::size_t twin_total = 0;
    for (std::size_t k = 0; k < with_swap.size(); ++k) {
      const std::size_t i = with_swap[k];
      const bool hit = cosine(images.row(i), texts.row(i)) > cosine(images.row(i), swapped.row(k));
      all_hits += hit;
      if (gt.scenes[i].twin) {
        twin_hits += hit;
        ++twin_total;
      }
    }
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < records.size(); ++i) index.emplace(records[i].sample_id, i);
    std::vector<QuadSimilarity> quads;
    for (std::size_t a = 0; a < gt.scenes.size(); ++a) {
      if (!gt.scenes[a].twin) continue;
      const auto it = index.find(*gt.scenes[a].twin);
      if (it == index.end() || it->second <= a) continue;
      const std::size_t b = it->second;
      quads.push_back({cosine(images.row(a), texts.row(a)), cosine(images.row(a), texts.row(b)),
                       cosine(images.row(b), texts.row(a)), cosine(images.row(b), texts.row(b))});
    }
    const GroupScores g = group_scores(quads);
    result["pairwise_choice"] = {
        {"probes", with_swap.size()},
        {"accuracy", with_swap.empty() ? 0.0 : all_hits / static_cast<double>(with_swap.size())},
        {"twin_probes", twin_total},
        {"twin_accuracy", twin_total == 0 ? 0.0 : twin_hits / static_cast<double>(twin_total)}};
    result["group"] = {{"quads", g.quads},
                       {"text_correct", g.text_correct},
                       {"image_correct", g.image_correct},
                       {"group_correct", g.group_correct}};
  } else {
    log_info(err, "no ground-truth sidecar found; skipping compositional probes");
  }

  ordered_json outputs;
  std::ofstream(dir / "report.json") << result.dump(2) << '\n';
  outputs["report"] = (dir / "report.json").string();
  if (dump_matrix) {
    std::ofstream m(dir / "similarity.csv");
    m << std::setprecision(17);
    for (std::size_t i = 0; i < report.n_images; ++i) {
      for (std::size_t j = 0; j < report.n_texts; ++j) m << (j ? "," : "") << report.matrix[i * report.n_texts + j];
      m << '\n';
    }
    outputs["similarity"] = (dir / "similarity.csv").string();
  }
  ordered_json inputs;
  inputs["checkpoint"] = file_entry(ck_path);
  inputs["corpus"] = file_entry(corpus_path);
  if (!truth.empty()) inputs["truth"] = file_entry(truth);
  write_manifest(dir, "eval", args, c, inputs, outputs);
  out << result.dump(2) << '\n';
  return kOk;
}

std::string format_row(const Vec& v, std::size_t shown = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(3) << '[';
  for (std::size_t i = 0; i < std::min(shown, v.size()); ++i) s << (i ? " " : "") << std::setw(6) << v[i];
  if (v.size() > shown) s << " ...";
  s << ']';
  return s.str();
}

void print_weight_table(std::ostream& out, const std::vector<double>& w) {
  out << "rank weights w (rank 0 contributes no bias):\n";
  for (std::size_t r = 1; r < w.size(); ++r) out << "  w[" << r << "] = " << std::setprecision(6) << w[r] << '\n';
}

int cmd_inspect(const RunConfig& c, const std::string& sample, std::ostream& out) {
  std::optional<LoadedCheckpoint> ck;
  if (!c.paths.checkpoint.empty()) ck = load_checkpoint(existing(c.paths.checkpoint, "checkpoint"));

  if (!sample.empty()) {
    CorpusReader reader(existing(c.paths.corpus, "corpus"));
    std::optional<TokenSet> found;
    while (auto ts = reader.next()) {
      if (ts->sample_id == sample) {
        found = std::move(ts);
        break;
      }
    }
    if (!found) throw PathError("sample not found in corpus: " + sample);
    const TokenSet& ts = *found;
    const std::size_t ctx = ck ? ck->header.encoder.context_length : ts.token_count();
    const PackedTokens packed = pack(ts, ctx);

    out << "sample " << ts.sample_id << ": |V| = " << ts.tangible.size() << ", |U| = " << ts.intangible.size()
        << ", |E| = " << ts.triplets.size() << ", context " << ctx << "\n\n";
    out << "pos  kind        src  values\n";
    for (std::size_t i = 0; i < packed.positions.size(); ++i) {
      const TokenPosition& p = packed.positions[i];
      const char* kind = p.kind == TokenKind::Image ? "image" : p.kind == TokenKind::Tangible ? "tangible"
                         : p.kind == TokenKind::Intangible ? "intangible" : "pad";
      const Vec& v = p.kind == TokenKind::Image ? ts.image_features
                     : p.kind == TokenKind::Tangible ? ts.tangible[p.source_index]
                     : p.kind == TokenKind::Intangible ? ts.intangible[p.source_index] : Vec{};
      out << std::setw(3) << i << "  " << std::left << std::setw(10) << kind << std::right << "  ";
      if (p.kind == TokenKind::Pad) out << "   -\n";
      else out << std::setw(3) << p.source_index << "  " << format_row(v) << '\n';
    }
    out << "\ntriplets (subject, object, predicate):\n";
    for (const auto& t : ts.triplets) out << "  (" << t.subject << ", " << t.object << ", " << t.predicate << ")\n";
    out << "neighbors:\n";
    for (std::size_t a = 0; a < ts.neighbors.size(); ++a) {
      out << "  " << a << ":";
      for (std::size_t b : ts.neighbors[a]) out << ' ' << b;
      out << '\n';
    }
    out << "\nrank matrix (row attends to column):\n" << render_ranks(build_ranks(ts, packed.positions, ctx)) << '\n';
    const std::vector<double> w =
        ck ? WeightEncoding(ck->params.at("image/rank_weights/a")).weight_table()
           : WeightEncoding(WeightEncoding::initial_values(false)).weight_table();
    out << (ck ? "" : "(initial values) ");
    print_weight_table(out, w);
    return kOk;
  }

  if (!ck) throw ConfigError("inspect", "give --sample with --corpus, or --checkpoint");
  const auto& h = ck->header;
  out << "checkpoint " << c.paths.checkpoint.string() << "\n";
  out << "  step " << h.step << ", epoch " << h.epoch << ", seed " << h.seed << '\n';
  out << "  encoder " << json(h.encoder).dump() << '\n';
  out << "  train " << h.train.dump() << "\n\n";
  std::size_t total = 0;
  out << "parameters:\n";
  for (const auto& [name, shape] : checkpoint_inventory(c.paths.checkpoint)) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    if (name.rfind("params/", 0) == 0) total += n;
    out << "  " << std::left << std::setw(40) << name << std::right << ' ' << shape_str(shape) << '\n';
  }
  out << "  total trainable values: " << total << "\n\n";
  print_weight_table(out, WeightEncoding(ck->params.at("image/rank_weights/a")).weight_table());
  return kOk;
}

int cmd_verify(std::uint64_t seed, std::ostream& out) {
  bool ok = true;
  for (const CheckResult& r : run_property_suite(seed)) {
    ok = ok && r.passed;
    out << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(24) << r.name << std::right << ' ' << r.detail
        << " (" << std::fixed << std::setprecision(2) << r.seconds << " s)" << std::defaultfloat << '\n';
  }
  out << (ok ? "all checks passed" : "some checks failed") << '\n';
  return ok ? kOk : kCheckFailed;
}

int cmd_plot_data(const fs::path& log, const std::string& metric, const fs::path& out_dir, std::ostream& out) {
  std::ifstream in(existing(log, "log"));
  std::ostringstream series;
  series << "iteration\t" << metric << '\n';
  series << std::setprecision(17);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    if (!rec.contains(metric) || !rec.contains("step")) continue;
    // Epoch records carry the step count after the epoch; step records the step index.
    series << rec["step"].get<std::uint64_t>() << '\t' << rec[metric].get<double>() << '\n';
    ++rows;
  }
  if (out_dir.empty()) {
    out << series.str();
  } else {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / (metric + ".tsv")) << series.str();
    out << "wrote " << rows << " points to " << (out_dir / (metric + ".tsv")).string() << '\n';
  }
  return kOk;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string version_string() { return "semtok " SEMTOK_VERSION; }

void RunConfig::validate() const {
  encoder.validate();
  train.validate();
  scene.validate();
  const std::size_t words = Vocabulary(scene.object_vocab, scene.predicate_vocab).size();
  if (words > encoder.vocab_size) {
    throw ConfigError("encoder.vocab_size", "scene vocabulary needs " + std::to_string(words) + " word ids");
  }
  if (scene.d != encoder.d) throw ConfigError("encoder.d", "must equal scene.d");
  if (6 * scene.max_triplets > encoder.text_context) {
    throw ConfigError("encoder.text_context", "too short for scene.max_triplets captions");
  }
  if (1 + scene.max_objects + scene.max_triplets > encoder.context_length) {
    throw ConfigError("encoder.context_length", "too small for scene.max_objects plus scene.max_triplets");
  }
}

json to_json(const RunConfig& c) {
  return json{{"encoder", json(c.encoder)},
              {"train", json(c.train)},
              {"scene", json(c.scene)},
              {"data", {{"train_scenes", c.data.train_scenes}, {"val_scenes", c.data.val_scenes}, {"seed", c.data.seed}}},
              {"paths",
               {{"corpus", c.paths.corpus.string()},
                {"validation", c.paths.validation.string()},
                {"truth", c.paths.truth.string()},
                {"checkpoint", c.paths.checkpoint.string()},
                {"resume", c.paths.resume.string()},
                {"out_dir", c.paths.out_dir.string()}}}};
}

RunConfig parse_run_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config", "must be a JSON object");
  RunConfig c;
  bool warmup_given = false;
  for (const auto& [key, value] : doc.items()) {
    if (key == "encoder") c.encoder = parse_section<EncoderConfig>(value, key);
    else if (key == "train") {
      c.train = parse_section<TrainConfig>(value, key);
      warmup_given = value.contains("warmup_epochs");
    } else if (key == "scene") c.scene = parse_section<SceneSpec>(value, key);
    else if (key == "data") c.data = parse_data(value);
    else if (key == "paths") c.paths = parse_paths(value);
    else throw ConfigError(key, "unknown section");
  }
  if (!warmup_given) c.train.warmup_epochs = std::min(c.train.warmup_epochs, c.train.epochs);
  c.validate();
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like section.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError(path, "empty key in override");
    if (!node->is_object()) *node = json::object();
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semantic-token vision encoder: data generation, training, evaluation and checks", "semtok"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  fs::path config_file;
  std::vector<std::string> overrides;
  std::string out_dir;
  const auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_file, "JSON run configuration");
    sub->add_option("--set", overrides, "Override a config field, e.g. --set train.lr=1e-3")->take_all();
    sub->add_option("-o,--out", out_dir, "Output directory (paths.out_dir)");
  };

  // Flag values land in the config document, so flags win over the file.
  std::map<std::string, std::string> flag_overrides;
  const auto flag = [&](CLI::App* sub, const std::string& name, const std::string& field, const std::string& help) {
    sub->add_option_function<std::string>(name, [&flag_overrides, field](const std::string& v) { flag_overrides[field] = v; }, help);
  };
  const auto path_flag = [&](CLI::App* sub, const std::string& name, const std::string& field, const std::string& help) {
    sub->add_option_function<std::string>(name, [&flag_overrides, field](const std::string& v) {
      flag_overrides[field] = json(v).dump();
    }, help);
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic train/val corpus with ground-truth sidecars");
  common(gen);
  flag(gen, "--seed", "data.seed", "Corpus seed");
  flag(gen, "--train-scenes", "data.train_scenes", "Training scenes");
  flag(gen, "--val-scenes", "data.val_scenes", "Validation scenes");
  flag(gen, "--ambiguous-rate", "scene.ambiguous_rate", "Fraction of direction-twin scenes");

  auto* tr = app.add_subcommand("train", "Train both encoders contrastively");
  common(tr);
  path_flag(tr, "--corpus", "paths.corpus", "Training corpus");
  path_flag(tr, "--validation", "paths.validation", "Validation corpus, evaluated every epoch");
  path_flag(tr, "--truth", "paths.truth", "Ground-truth sidecar of the training corpus");
  path_flag(tr, "--resume", "paths.resume", "Checkpoint to resume from");
  flag(tr, "--epochs", "train.epochs", "Epochs");
  flag(tr, "--lr", "train.lr", "Peak learning rate");
  flag(tr, "--batch-size", "train.batch_size", "Batch size");
  flag(tr, "--seed", "train.seed", "Initialization and shuffling seed");
  bool no_additive = false;
  tr->add_flag("--no-additive", no_additive, "Disable the rank-matrix attention bias");

  auto* ev = app.add_subcommand("eval", "Retrieval and compositional-probe report for a checkpoint");
  common(ev);
  path_flag(ev, "--checkpoint", "paths.checkpoint", "Checkpoint to evaluate");
  path_flag(ev, "--corpus", "paths.corpus", "Evaluation corpus");
  path_flag(ev, "--truth", "paths.truth", "Ground-truth sidecar of the corpus");
  bool dump_matrix = false;
  ev->add_flag("--dump-matrix", dump_matrix, "Also write the similarity matrix as CSV");
  std::string eval_attention;
  ev->add_option("--attention", eval_attention, "Override the checkpoint's mode: on or off")
      ->check(CLI::IsMember({"on", "off"}));

  auto* in = app.add_subcommand("inspect", "Print a sample's tokens and rank matrix, or a checkpoint's contents");
  common(in);
  path_flag(in, "--corpus", "paths.corpus", "Corpus holding the sample");
  path_flag(in, "--checkpoint", "paths.checkpoint", "Checkpoint to describe");
  std::string sample;
  in->add_option("--sample", sample, "Sample id");

  auto* ve = app.add_subcommand("verify", "Run the property suite; nonzero exit on any failure");
  std::uint64_t verify_seed = 0;
  ve->add_option("--seed", verify_seed, "Seed for random cases");

  auto* pd = app.add_subcommand("plot-data", "Extract (iteration, metric) series from a metrics log");
  fs::path log_path;
  std::string metric = "loss";
  fs::path plot_out;
  pd->add_option("--log", log_path, "metrics.jsonl written by train")->required();
  pd->add_option("--metric", metric, "Field to extract (loss, mean_loss, t2i_top1, ...)");
  pd->add_option("-o,--out", plot_out, "Directory for <metric>.tsv; stdout when omitted");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (ve->parsed()) return cmd_verify(verify_seed, out);
    if (pd->parsed()) return cmd_plot_data(log_path, metric, plot_out, out);

    json doc = json::object();
    if (!config_file.empty()) {
      std::ifstream f(config_file);
      if (!f) throw PathError("cannot read config " + config_file.string());
      try {
        doc = json::parse(f);
      } catch (const json::parse_error& e) {
        throw ConfigError("config", std::string("not valid JSON: ") + e.what());
      }
    }
    for (const auto& o : overrides) apply_override(doc, o);
    for (const auto& [field, value] : flag_overrides) apply_override(doc, field + "=" + value);
    if (!out_dir.empty()) apply_override(doc, "paths.out_dir=" + json(out_dir).dump());
    if (no_additive) apply_override(doc, "train.additive_attention=false");
    const RunConfig config = parse_run_config(doc);

    if (gen->parsed()) return cmd_gen_data(config, args, out, err);
    if (tr->parsed()) return cmd_train(config, args, out, err);
    if (ev->parsed()) {
      std::optional<bool> attention;
      if (!eval_attention.empty()) attention = eval_attention == "on";
      return cmd_eval(config, args, dump_matrix, attention, out, err);
    }
    if (in->parsed()) return cmd_inspect(config, sample, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const PathError& e) {
    err << "path error: " << e.what() << '\n';
    return kPath;
  } catch (const TrainingError& e) {
    err << "training error: " << e.what() << '\n';
    return kTraining;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfig;
  }
  return kUsage;
}

}  // namespace semtok::cli
