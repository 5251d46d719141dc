#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "bapgan/config.hpp"
#include "bapgan/data.hpp"
#include "bapgan/model.hpp"
#include "bapgan/objectives.hpp"

namespace bapgan {

struct TrainConfig {
  ModelConfig model = ModelConfig::desk();
  int64_t steps = 2000;  // 50000 at full scale
  int batch = 32;
  double lr_eg_did = 1e-4;
  double lr_dimg_dage = 4e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;  // lambda1 = 10000, lambda2 = 100
  bool non_saturating = true;
  bool augment = true;
  uint64_t seed = 0;
  int64_t checkpoint_period = 500;  // 0 disables periodic checkpoints
  int64_t eval_every = 100;         // D_age validation accuracy cadence, 0 disables
  size_t history_capacity = 4096;

  void validate() const;
  static TrainConfig full_scale();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// One row of the metric log.
struct LossRecord {
  int64_t step = 0;
  double loss_eg = 0, loss_did = 0, loss_dimg = 0, loss_dage = 0, recon = 0;
  std::optional<double> age_val_acc;
  std::map<std::string, double> components;
};

struct AdamMoments {
  torch::Tensor first, second;
};

struct TrainState {
  ModelParams params;
  std::map<std::string, AdamMoments> moments;  // keyed by parameter name
  int64_t step = 0;                            // completed steps
  uint64_t seed = 0;                           // random streams derive from (seed, step)
  std::deque<LossRecord> history;

  TrainState clone() const;
};

TrainState make_train_state(const TrainConfig& config, uint64_t seed);

// Inputs of one objective evaluation; labels are the (possibly smoothed) l.
struct BatchInputs {
  torch::Tensor x;
  torch::Tensor labels;
  torch::Tensor prior_z;
};

// The full objective on one batch in a single graph: every term depends on the
// parameters it would be optimized against.
LossBundle evaluate_losses(const ModelParams& params, const BatchInputs& batch,
                           const LossWeights& weights, bool non_saturating = true);

// Uniform prior on [-1, 1]^d_z for the given step, reproducible from (seed, step).
torch::Tensor sample_prior(const TrainState& state, int64_t batch, int latent_dim);

// One optimization step on (x, one-hot labels):
//   1. refresh spectral-norm vectors, sample z* ~ U[-1, 1]^d_z
//   2. smooth labels when use_ls
//   3. Adam step on D_img (+ D_age head) at lr_dimg_dage
//   4. Adam step on D_id at lr_eg_did
//   5. joint Adam step on E and G at lr_eg_did
// Throws NumericError, with the component losses in the message, on a non-finite loss.
LossRecord train_step(TrainState& state, const TrainConfig& config, const torch::Tensor& x,
                      const torch::Tensor& one_hot_labels);

// Element-wise Adam for the named parameters, with bias correction at step + 1.
void adam_update(TrainState& state, const std::vector<std::string>& names,
                 const std::vector<torch::Tensor>& grads, double lr, const TrainConfig& config);

// Fraction of images whose arg-max age logit equals the bin.
double age_accuracy(const ModelParams& params, const ImageDataset& data, int64_t chunk = 64);

struct TrainOutputs {
  std::filesystem::path out_dir;
  std::vector<std::filesystem::path> checkpoints;  // periodic checkpoints, then final
  std::vector<LossRecord> log;
};

using StepCallback = std::function<void(const LossRecord&)>;

// Runs until config.steps completed steps, starting from `resume` when given.
// Writes out_dir/metrics.csv, out_dir/checkpoints/step_NNNNNN and out_dir/checkpoints/final.
// Throws ConfigError on an empty training set.
TrainOutputs train(const TrainConfig& config, const ImageDataset& train_set,
                   const ImageDataset& val_set, const std::filesystem::path& out_dir,
                   std::optional<TrainState> resume = std::nullopt,
                   const StepCallback& on_step = {});

// Batch of `batch` indices for a step, drawn uniformly with replacement.
std::vector<int64_t> sample_batch_indices(uint64_t seed, int64_t step, int64_t dataset_size,
                                          int batch);

inline constexpr const char* kMetricHeader =
    "step,loss_eg,loss_did,loss_dimg,loss_dage,recon,age_val_acc";
std::string format_metric_row(const LossRecord& r);

}  // namespace bapgan
