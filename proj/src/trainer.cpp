#include "semtok/trainer.hpp"

#include "semtok/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

namespace semtok {

using nlohmann::json;
using nlohmann::ordered_json;

TrainingError::TrainingError(const std::string& what, std::vector<std::string> sample_ids)
    : std::runtime_error(what), sample_ids_(std::move(sample_ids)) {}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("train.batch_size", "must be at least 2");
  if (warmup_epochs > epochs) throw ConfigError("train.warmup_epochs", "must not exceed epochs");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr", "must be positive and finite");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be non-negative");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("train.grad_clip", "must be positive");
  if (!(max_logit_scale > 0.0)) throw ConfigError("train.max_logit_scale", "must be positive");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"lr", c.lr},
           {"warmup_epochs", c.warmup_epochs},
           {"weight_decay", c.weight_decay},
           {"seed", c.seed},
           {"additive_attention", c.additive_attention},
           {"grad_clip", c.grad_clip ? json(*c.grad_clip) : json(nullptr)},
           {"max_logit_scale", c.max_logit_scale},
           {"checkpoint_every", c.checkpoint_every},
           {"group_batches", c.group_batches}};
}

void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "warmup_epochs") c.warmup_epochs = value.get<std::size_t>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "additive_attention") c.additive_attention = value.get<bool>();
      else if (key == "grad_clip") c.grad_clip = value.is_null() ? std::nullopt : std::optional(value.get<double>());
      else if (key == "max_logit_scale") c.max_logit_scale = value.get<double>();
      else if (key == "checkpoint_every") c.checkpoint_every = value.get<std::size_t>();
      else if (key == "group_batches") c.group_batches = value.get<bool>();
      else throw ConfigError("train." + key, "unknown key");
    } catch (const json::exception& e) {
      throw ConfigError("train." + key, e.what());
    }
  }
}

double learning_rate(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak) {
  if (total_steps == 0) return 0.0;
  if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const std::size_t decay_span = total_steps - 1 > warmup_steps ? total_steps - 1 - warmup_steps : 0;
  if (decay_span == 0) return step == warmup_steps ? peak : 0.0;
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_span));
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Tensor contrastive_loss(const Tensor& images, const Tensor& texts, const Tensor& tau, double max_scale) {
  if (images.rank() != 2 || images.shape() != texts.shape()) {
    throw DimensionError("contrastive_loss: image embeddings " + shape_str(images.shape()) +
                         " and text embeddings " + shape_str(texts.shape()) + " must both be [N, E]");
  }
  if (images.dim(0) == 0) throw DimensionError("contrastive_loss: empty batch");
  const std::size_t n = images.dim(0), e = images.dim(1);
  for (const Tensor* t : {&images, &texts}) {
    for (std::size_t r = 0; r < n; ++r) {
      double sq = 0.0;
      for (std::size_t k = 0; k < e; ++k) sq += t->data()[r * e + k] * t->data()[r * e + k];
      if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
        throw std::domain_error("contrastive_loss: row " + std::to_string(r) + " has norm " +
                                std::to_string(std::sqrt(sq)) + ", expected unit norm");
      }
    }
  }
  const Tensor logit_scale = exp(clamp_max(tau, std::log(max_scale)));
  const Tensor logits = mul(matmul(images, transpose(texts)), logit_scale);
  const Tensor image_to_text = mean(diagonal(log_softmax_lastdim(logits)));
  const Tensor text_to_image = mean(diagonal(log_softmax_lastdim(transpose(logits))));
  return scale(add(image_to_text, text_to_image), -0.5);
}

// ---------------------------------------------------------------------------

AdamW::AdamW(const ModelParams& params, Options options) : options_(options) {
  for (const auto& p : params.entries()) {
    first_.emplace_back(p.value.numel(), 0.0);
    second_.emplace_back(p.value.numel(), 0.0);
  }
}

void AdamW::restore(OptimizerMoments moments, std::uint64_t steps) {
  if (moments.first.size() != first_.size() || moments.second.size() != second_.size()) {
    throw std::invalid_argument("AdamW::restore: moment table does not match parameters");
  }
  first_ = std::move(moments.first);
  second_ = std::move(moments.second);
  steps_ = steps;
}

void AdamW::step(ModelParams& params, double lr) {
  auto& entries = params.entries();
  if (entries.size() != first_.size()) throw std::invalid_argument("AdamW::step: parameter set changed");
  for (const auto& p : entries) {
    if (!p.value.has_grad()) continue;
    for (double g : p.value.grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in '" + p.path + "'", {});
    }
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(options_.beta1, t);
  const double c2 = 1.0 - std::pow(options_.beta2, t);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = entries[i];
    auto x = p.value.mutable_data();
    const bool has_grad = p.value.has_grad();
    const auto g = has_grad ? p.value.grad() : std::span<const double>{};
    auto& m = first_[i];
    auto& v = second_[i];
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (p.pin_first && j == 0) continue;
      const double gj = has_grad ? g[j] : 0.0;
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * gj;
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * gj * gj;
      if (p.weight_decay) x[j] -= lr * options_.weight_decay * x[j];
      x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.eps);
    }
  }
}

double global_grad_norm(const ModelParams& params) {
  double sq = 0.0;
  for (const auto& p : params.entries()) {
    if (!p.value.has_grad()) continue;
    const auto g = p.value.grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (p.pin_first && j == 0) continue;
      sq += g[j] * g[j];
    }
  }
  return std::sqrt(sq);
}

// ---------------------------------------------------------------------------

namespace {

// Contiguous batches of whole groups, cut as evenly as group boundaries allow.
std::vector<std::vector<std::size_t>> plan_batches(const std::vector<std::vector<std::size_t>>& groups,
                                                   std::size_t n_samples, std::size_t steps) {
  std::vector<std::size_t> flat;
  std::vector<std::size_t> boundaries{0};
  for (const auto& g : groups) {
    flat.insert(flat.end(), g.begin(), g.end());
    boundaries.push_back(flat.size());
  }
  std::vector<std::vector<std::size_t>> batches;
  std::size_t begin = 0;
  for (std::size_t s = 1; s <= steps; ++s) {
    const std::size_t target = s * n_samples / steps;
    std::size_t end = *std::lower_bound(boundaries.begin(), boundaries.end(), target);
    if (s == steps) end = flat.size();
    if (end <= begin) continue;
    batches.emplace_back(flat.begin() + begin, flat.begin() + end);
    begin = end;
  }
  return batches;
}

std::string dump_line(const ordered_json& j) { return j.dump(); }

}  // namespace

TrainResult train(const Corpus& corpus, const TrainConfig& tc, const EncoderConfig& ec,
                  const TrainOptions& options) {
  tc.validate();
  ec.validate();
  if (corpus.header.d != 0 && corpus.header.d != ec.d) {
    throw ConfigError("encoder.d", "corpus token width is " + std::to_string(corpus.header.d) +
                                       ", encoder expects " + std::to_string(ec.d));
  }
  const std::size_t n = corpus.records.size();
  if (n < 2 && tc.epochs > 0) throw ConfigError("corpus", "need at least 2 samples to train");
  if (!options.groups.empty() && options.groups.size() != n) {
    throw std::invalid_argument("train: group ids do not match the corpus size");
  }

  TrainResult result{ModelParams::initialize(ec, tc.seed), {}, 0, 0.0};
  ModelParams& params = result.params;
  AdamW optimizer(params, {.weight_decay = tc.weight_decay});
  std::size_t start_epoch = 0;
  std::uint64_t step = 0;

  if (options.resume_from) {
    LoadedCheckpoint ck = load_checkpoint(*options.resume_from);
    if (!(ck.header.encoder == ec)) throw ConfigError("encoder", "checkpoint was trained with a different encoder configuration");
    if (!ck.moments) throw ConfigError("resume", "checkpoint carries no optimizer state");
    params = std::move(ck.params);
    optimizer = AdamW(params, {.weight_decay = tc.weight_decay});
    optimizer.restore(std::move(*ck.moments), ck.header.extra.value("adam_steps", std::uint64_t{0}));
    start_epoch = ck.header.epoch;
    step = ck.header.step;
  }

  // Groups in order of first appearance.
  std::vector<std::vector<std::size_t>> groups;
  if (tc.group_batches && !options.groups.empty()) {
    std::map<std::size_t, std::size_t> slot;
    for (std::size_t i = 0; i < n; ++i) {
      auto [it, inserted] = slot.emplace(options.groups[i], groups.size());
      if (inserted) groups.emplace_back();
      groups[it->second].push_back(i);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) groups.push_back({i});
  }

  const std::size_t steps_per_epoch = std::max<std::size_t>(1, n / tc.batch_size);
  const std::size_t total_steps = steps_per_epoch * tc.epochs;
  const std::size_t warmup_steps = steps_per_epoch * tc.warmup_epochs;

  std::ofstream log_file;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    log_file.open(options.out_dir / "metrics.jsonl", options.resume_from ? std::ios::app : std::ios::trunc);
  }
  const auto emit = [&](const ordered_json& record) {
    std::string line = dump_line(record);
    if (log_file) log_file << line << '\n' << std::flush;
    if (options.log_sink) options.log_sink(line);
    result.log.push_back(std::move(line));
  };

  const auto save = [&](const std::filesystem::path& path, std::size_t completed_epochs) {
    CheckpointHeader h;
    h.encoder = ec;
    h.corpus_d = ec.d;
    h.seed = tc.seed;
    h.step = step;
    h.epoch = completed_epochs;
    h.train = tc;
    h.extra = json{{"adam_steps", optimizer.steps()}};
    const OptimizerMoments moments = optimizer.moments();
    save_checkpoint(path, h, params, &moments);
  };

  for (std::size_t epoch = start_epoch; epoch < tc.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(tc.seed, 0xe90c + epoch));
    auto order = groups;
    shuffle_rng.shuffle(order);
    const auto batches = plan_batches(order, n, steps_per_epoch);
    const std::uint64_t caption_key = derive_seed(tc.seed, 0xca9 + epoch);

    double epoch_loss = 0.0;
    for (const auto& batch : batches) {
      std::vector<const TokenSet*> images;
      std::vector<const Caption*> captions;
      std::vector<std::string> ids;
      for (std::size_t idx : batch) {
        const TokenSet& ts = corpus.records[idx];
        images.push_back(&ts);
        std::size_t pick = 0;
        if (ts.captions.size() > 1) pick = Rng(derive_seed(caption_key, idx)).below(ts.captions.size());
        captions.push_back(&ts.captions[pick]);
        ids.push_back(ts.sample_id);
      }
      const auto fail = [&](const std::string& what) {
        std::string joined;
        for (const auto& id : ids) joined += (joined.empty() ? "" : ", ") + id;
        throw TrainingError(what + " at step " + std::to_string(step) + " (samples: " + joined + ")", ids);
      };
      const double lr = learning_rate(step, total_steps, warmup_steps, tc.lr);
      const ImageBatch image_batch = make_image_batch(images, ec, tc.additive_attention);
      const TextBatch text_batch = make_text_batch(captions, ec);
      Tensor loss;
      try {
        const Tensor s = encode_images(params, ec, image_batch);
        const Tensor t = encode_captions(params, ec, text_batch);
        loss = contrastive_loss(s, t, params.at("logit_scale/tau"), tc.max_logit_scale);
      } catch (const std::domain_error& e) {
        fail(std::string("numerical failure: ") + e.what());
      }
      if (!std::isfinite(loss.item())) fail("non-finite loss");
      params.zero_grad();
      loss.backward();
      if (tc.grad_clip) {
        const double norm = global_grad_norm(params);
        if (norm > *tc.grad_clip) {
          const double f = *tc.grad_clip / norm;
          for (auto& p : params.entries()) {
            if (!p.value.has_grad()) continue;
            for (double& g : p.value.mutable_grad()) g *= f;
          }
        }
      }
      try {
        optimizer.step(params, lr);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step), ids);
      }
      params.zero_grad();

      ordered_json rec;
      rec["event"] = "step";
      rec["step"] = step;
      rec["epoch"] = epoch;
      rec["lr"] = lr;
      rec["loss"] = loss.item();
      emit(rec);
      result.last_loss = loss.item();
      epoch_loss += loss.item();
      ++step;
    }

    ordered_json rec;
    rec["event"] = "epoch";
    rec["epoch"] = epoch;
    rec["step"] = step;
    rec["mean_loss"] = batches.empty() ? 0.0 : epoch_loss / static_cast<double>(batches.size());
    rec["logit_scale"] = std::exp(std::min(params.at("logit_scale/tau").item(), std::log(tc.max_logit_scale)));
    if (options.validation && !options.validation->empty()) {
      const SimilarityReport r = retrieval_eval(params, ec, *options.validation, tc.additive_attention);
      rec["t2i_top1"] = r.t2i_top1;
      rec["i2t_top1"] = r.i2t_top1;
      rec["diag_mean"] = r.diag_mean;
      rec["offdiag_mean"] = r.offdiag_mean;
    }
    emit(rec);

    if (!options.out_dir.empty() && tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0) {
      std::filesystem::create_directories(options.out_dir / "checkpoints");
      char name[32];
      std::snprintf(name, sizeof name, "epoch-%04zu.ckpt", epoch + 1);
      save(options.out_dir / "checkpoints" / name, epoch + 1);
    }
  }

  result.steps = step;
  if (!options.out_dir.empty()) save(options.out_dir / "final.ckpt", std::max(start_epoch, tc.epochs));
  return result;
}

}  // namespace semtok
