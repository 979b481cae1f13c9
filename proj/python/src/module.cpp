#include "cli.hpp"

#include "semtok/checkpoint.hpp"
#include "semtok/eval.hpp"
#include "semtok/rankmatrix.hpp"
#include "semtok/synthcorpus.hpp"
#include "semtok/trainer.hpp"
#include "semtok/verify.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>

#include <sstream>

namespace py = pybind11;
using nlohmann::json;

namespace {

py::array_t<double> to_array(const semtok::Embeddings& e) {
  py::array_t<double> out({e.count, e.dim});
  std::copy(e.values.begin(), e.values.end(), out.mutable_data());
  return out;
}

template <class T>
T parse(const std::string& text) {
  return text.empty() ? T{} : json::parse(text).get<T>();
}

}  // namespace

PYBIND11_MODULE(_semtok, m) {
  m.doc() = "Semantic-token vision encoder: rank matrices, training and evaluation";

  py::register_exception<semtok::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<semtok::ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<semtok::ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<semtok::TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  m.def("version", &semtok::cli::version_string);

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = semtok::cli::run(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"), "Runs one `semtok` command; returns (exit code, stdout, stderr).");

  m.def("build_ranks", [](const std::string& record, std::size_t context_length) {
    const semtok::TokenSet ts = semtok::record_from_line(record, 1);
    semtok::validate(ts, 0, 0);
    const semtok::RankMatrix rm = semtok::build_ranks(ts, semtok::pack(ts, context_length).positions, context_length);
    py::array_t<std::uint8_t> out({rm.size, rm.size});
    std::copy(rm.ranks.begin(), rm.ranks.end(), out.mutable_data());
    return out;
  }, py::arg("record"), py::arg("context_length"),
     "Rank matrix of one interchange-format record (JSON text).");

  m.def("weight_table", [](const std::vector<double>& a) {
    if (a.size() != semtok::kRankLevels) throw semtok::ConfigError("a", "must have 8 entries");
    semtok::Tensor t = semtok::Tensor::from({a.size()}, a);
    return semtok::WeightEncoding(t).weight_table();
  }, py::arg("a"), "cumsum(exp(a)) for a length-8 vector.");

  m.def("generate", [](std::size_t n, std::uint64_t seed, const std::string& spec, const std::string& prefix) {
    const semtok::SceneSpec s = parse<semtok::SceneSpec>(spec);
    s.validate();
    const semtok::SyntheticCorpus data = semtok::generate(n, s, seed, prefix);
    std::vector<std::string> lines;
    for (const auto& r : data.corpus.records) lines.push_back(semtok::record_to_line(r, s.d));
    return lines;
  }, py::arg("n"), py::arg("seed"), py::arg("spec") = "", py::arg("prefix") = "scene",
     "Synthetic records as interchange-format JSON lines.");

  m.def("train", [](const std::filesystem::path& corpus, const std::filesystem::path& out_dir,
                    const std::string& train_config, const std::string& encoder_config) {
    const semtok::TrainConfig tc = parse<semtok::TrainConfig>(train_config);
    const semtok::EncoderConfig ec = parse<semtok::EncoderConfig>(encoder_config);
    tc.validate();
    ec.validate();
    semtok::TrainResult r;
    {
      py::gil_scoped_release release;
      const semtok::Corpus c = semtok::read_corpus(corpus);
      semtok::TrainOptions options;
      options.out_dir = out_dir;
      r = semtok::train(c, tc, ec, options);
    }
    py::dict out;
    out["steps"] = r.steps;
    out["last_loss"] = r.last_loss;
    out["log"] = r.log;
    out["checkpoint"] = (out_dir / "final.ckpt").string();
    return out;
  }, py::arg("corpus"), py::arg("out_dir"), py::arg("train_config") = "", py::arg("encoder_config") = "");

  m.def("embed", [](const std::filesystem::path& checkpoint, const std::filesystem::path& corpus,
                    std::optional<bool> additive) {
    semtok::Embeddings images, texts;
    {
      py::gil_scoped_release release;
      const semtok::LoadedCheckpoint ck = semtok::load_checkpoint(checkpoint);
      const semtok::Corpus c = semtok::read_corpus(corpus);
      const bool on = additive.value_or(ck.header.train.value("additive_attention", true));
      images = semtok::embed_images(ck.params, ck.header.encoder, std::span<const semtok::TokenSet>(c.records), on);
      std::vector<const semtok::Caption*> caps;
      for (const auto& r : c.records) caps.push_back(&r.caption());
      texts = semtok::embed_captions(ck.params, ck.header.encoder, caps);
    }
    return py::make_tuple(to_array(images), to_array(texts));
  }, py::arg("checkpoint"), py::arg("corpus"), py::arg("additive_attention") = py::none(),
     "Unit image and caption embeddings, one row per record.");

  m.def("similarity_report", [](py::array_t<double, py::array::c_style | py::array::forcecast> images,
                                py::array_t<double, py::array::c_style | py::array::forcecast> texts) {
    const auto as_embeddings = [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
      if (a.ndim() != 2) throw semtok::ConfigError("embeddings", "must be a 2-D array");
      semtok::Embeddings e;
      e.count = static_cast<std::size_t>(a.shape(0));
      e.dim = static_cast<std::size_t>(a.shape(1));
      e.values.assign(a.data(), a.data() + a.size());
      return e;
    };
    const semtok::SimilarityReport r = semtok::similarity_report(as_embeddings(images), as_embeddings(texts));
    py::dict out;
    out["t2i_top1"] = r.t2i_top1;
    out["i2t_top1"] = r.i2t_top1;
    out["diag_mean"] = r.diag_mean;
    out["offdiag_mean"] = r.offdiag_mean;
    return out;
  }, py::arg("images"), py::arg("texts"));

  m.def("verify", [](std::uint64_t seed) {
    std::vector<semtok::CheckResult> results;
    {
      py::gil_scoped_release release;
      results = semtok::run_property_suite(seed);
    }
    py::list out;
    for (const auto& r : results) {
      py::dict d;
      d["name"] = r.name;
      d["passed"] = r.passed;
      d["detail"] = r.detail;
      d["seconds"] = r.seconds;
      out.append(d);
    }
    return out;
  }, py::arg("seed") = 0, "Runs the property suite.");
}
