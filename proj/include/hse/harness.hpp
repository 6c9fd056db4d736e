#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hse/core.hpp"
#include "hse/episodes.hpp"
#include "hse/semantics.hpp"

namespace hse {

// ---- training ------------------------------------------------------------------

struct TrainConfig {
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch = 4;              // episodes whose losses are averaged per update
  int epochs = 20;
  int episodes_per_epoch = 200;
  int fold = 0;
  int shots = 1;
  VariantConfig variant;
  std::uint64_t train_seed = 1;
  bool lr_poly_decay = false;      // constant lr by default
  bool paranoid_frozen_check = false;  // snapshot-compare frozen params each epoch
  int threads = 1;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0,1)");
    if (weight_decay < 0) throw ConfigError("weight decay must be >= 0");
    if (batch < 1 || epochs < 1 || episodes_per_epoch < 1) throw ConfigError("batch/epochs/episodes must be >= 1");
    if (shots < 1) throw ConfigError("shots must be >= 1");
  }
};

using GradMap = std::map<std::string, std::vector<float>>;
using VelocityState = std::map<std::string, std::vector<float>>;

// v <- momentum*v + (grad + wd*theta); theta <- theta - lr*v. Touches only
// the parameters present in `grads` (frozen tensors never appear there).
void sgd_step(ModelParams<float>& model, const GradMap& grads, const TrainConfig& cfg,
              VelocityState& velocity, double lr_now);

struct TrainResult {
  std::vector<double> epoch_losses;
};

TrainResult train(const LoadedDataset& ds, const TrainConfig& cfg, ModelParams<float>& model,
                  const std::vector<ClassEmbedding>& embeddings);

// ---- evaluation -----------------------------------------------------------------

struct MiouResult {
  std::map<std::string, double> per_class;   // defined classes only
  std::vector<std::string> undefined;        // zero-union classes, excluded
  double miou = 0.0;                         // mean over defined novel classes
};

// Dataset-level IoU per class (sum of intersections / sum of unions across a
// class's episodes), then the mean over the novel classes. The per-episode
// variant averages episode IoUs within each class instead.
MiouResult miou(const std::vector<Tensor<float>>& predictions, const std::vector<Tensor<float>>& truths,
                const std::vector<std::string>& episode_classes,
                const std::vector<std::string>& novel_classes, bool per_episode = false);

struct EvalReport {
  std::string config_fingerprint;
  int fold = 0;
  int shots = 1;
  int episodes = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> per_seed_miou;
  std::map<std::string, double> per_class_iou;  // averaged over seeds where defined
  double miou = 0.0;                            // mean of per_seed_miou
  std::vector<std::string> warnings;

  // Canonical JSON payload; byte-identical across runs with the same inputs.
  std::string payload() const;
};

struct PredOut {
  Tensor<float> mask;
  bool warn_empty_fg = false;
};
using Predictor = std::function<PredOut(const Episode<float>&)>;

struct EvalOptions {
  bool per_episode_iou = false;
  int threads = 1;
};

EvalReport evaluate(const LoadedDataset& ds, const Predictor& predict, int fold, int shots,
                    int n_episodes, const std::vector<std::uint64_t>& seeds,
                    const std::string& fingerprint_payload, const EvalOptions& opts = {});

Predictor model_predictor(const ModelParams<float>& model, const VariantConfig& variant,
                          const std::vector<ClassEmbedding>& embeddings);

// ---- ablation --------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  std::vector<double> per_fold;
  double mean = 0.0;
};

struct AblationTable {
  std::vector<int> folds;
  std::vector<AblationRow> rows;
  std::string to_text() const;
  std::string to_json() const;
};

struct AblationConfig {
  TrainConfig train;
  ModelConfig model;
  std::uint64_t model_seed = 0;
  std::vector<std::uint64_t> eval_seeds;
  int eval_episodes = 100;
  std::vector<int> folds = {0, 1, 2};
  int threads = 1;
};

AblationTable run_ablation(const LoadedDataset& ds, const AblationConfig& cfg,
                           const std::vector<VariantConfig>& variants,
                           const std::vector<ClassEmbedding>& embeddings);

// ---- misc ------------------------------------------------------------------------

std::string fingerprint_hex(const std::string& canonical);

std::vector<ClassEmbedding> synth_embeddings_for(const std::vector<std::string>& classes, int ct,
                                                 std::uint64_t seed);

}  // namespace hse
