#pragma once

// Symmetric contrastive training of the image and caption encoders.

#include "semtok/checkpoint.hpp"
#include "semtok/encoder.hpp"
#include "semtok/eval.hpp"
#include "semtok/tokens.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace semtok {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::vector<std::string> sample_ids);
  const std::vector<std::string>& sample_ids() const { return sample_ids_; }

 private:
  std::vector<std::string> sample_ids_;
};

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 50;
  double lr = 2e-3;
  std::size_t warmup_epochs = 5;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  bool additive_attention = true;
  std::optional<double> grad_clip;
  double max_logit_scale = 100.0;
  std::size_t checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  // Samples sharing a group id (e.g. direction twins) land in the same batch.
  bool group_batches = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Learning rates used for sweeps at full scale.
inline constexpr double kLearningRatePresets[] = {1e-6, 5e-6, 1e-5, 5e-5};

// Linear warmup from 0 to peak over warmup_steps, then cosine decay reaching 0
// at the last step (total_steps - 1).
double learning_rate(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak);

// S, T: [N, E] unit rows. tau: one-element tensor; scale = exp(min(tau, ln max_scale)).
// Returns 0.5 * (CE(scale * S T^T, I) + CE(scale * T S^T, I)), each a row mean.
Tensor contrastive_loss(const Tensor& images, const Tensor& texts, const Tensor& tau,
                        double max_scale = 100.0);

// Decoupled-weight-decay Adam. Parameters flagged pin_first never change their
// first coordinate; parameters without weight_decay are never decayed.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW(const ModelParams& params, Options options);

  // Applies one update using each parameter's accumulated gradient (missing
  // gradients count as zero). Throws TrainingError on a non-finite gradient.
  void step(ModelParams& params, double lr);

  std::uint64_t steps() const { return steps_; }
  OptimizerMoments moments() const { return {first_, second_}; }
  void restore(OptimizerMoments moments, std::uint64_t steps);

 private:
  Options options_;
  std::uint64_t steps_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

double global_grad_norm(const ModelParams& params);

struct TrainOptions {
  std::filesystem::path out_dir;                // empty: keep everything in memory
  const std::vector<TokenSet>* validation = nullptr;
  std::vector<std::size_t> groups;              // per training sample; empty: singletons
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const std::string&)> log_sink;  // receives each metrics line
};

struct TrainResult {
  ModelParams params;
  std::vector<std::string> log;   // metrics records, one JSON object per entry
  std::uint64_t steps = 0;
  double last_loss = 0.0;
};

TrainResult train(const Corpus& corpus, const TrainConfig& train_config,
                  const EncoderConfig& encoder_config, const TrainOptions& options = {});

}  // namespace semtok
