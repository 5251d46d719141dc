#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "bapgan/config.hpp"
#include "bapgan/errors.hpp"

namespace bapgan {

inline constexpr double kScoreClamp = 1e-7;

// Smoothed version of the one-hot label with the hot entry at `hot`: every
// existing neighbour bin receives `eps`, the hot bin keeps the rest. Boundary
// bins have one neighbour, so [1,0,0,0,0] becomes [1-eps, eps, 0, 0, 0].
// Templated so callers can evaluate it in exact rational arithmetic.
template <typename T>
std::vector<T> smooth_one_hot(int hot, int bins, const T& eps) {
  if (bins < 1 || hot < 0 || hot >= bins) throw ContractError("smooth_one_hot: hot index out of range");
  std::vector<T> out(static_cast<size_t>(bins), T(0));
  T kept = T(1);
  for (int n : {hot - 1, hot + 1}) {
    if (n < 0 || n >= bins) continue;
    out[static_cast<size_t>(n)] = eps;
    kept -= eps;
  }
  out[static_cast<size_t>(hot)] = kept;
  return out;
}

// l: B x K one-hot rows. Throws ContractError for any row that is not one-hot
// and ConfigError when eps leaves a negative entry (eps > 1/2 with K >= 3).
torch::Tensor smooth_age_label(const torch::Tensor& one_hot, double eps = 0.2);

// One-hot B x K labels from bin indices.
torch::Tensor one_hot_labels(const std::vector<int>& bins, int num_bins,
                             torch::Dtype dtype = torch::kFloat32);

// Mean over the batch of |x - x'|^2 / (elements per image).
torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& reconstructed);

struct AdversarialLosses {
  torch::Tensor d_loss;  // -mean log s_real - mean log(1 - s_fake)
  torch::Tensor g_loss;  // -mean log s_fake (non-saturating)
};

// Scores are clamped to [kScoreClamp, 1 - kScoreClamp] before the logarithms.
AdversarialLosses adversarial_losses(const torch::Tensor& scores_real,
                                     const torch::Tensor& scores_fake);

// Literal generator objective mean log(1 - s_fake), minimized by G. Kept for
// callers that want the saturating form.
torch::Tensor saturating_generator_loss(const torch::Tensor& scores_fake);

// Mean soft-target cross-entropy -sum_k p_k log softmax(logits)_k.
torch::Tensor soft_cross_entropy(const torch::Tensor& logits, const torch::Tensor& targets);

struct AgeLosses {
  torch::Tensor age_d;  // on real images, drives the discriminator
  torch::Tensor age_g;  // on generated images, drives E and G
};

AgeLosses age_classification_losses(const torch::Tensor& logits_real,
                                    const torch::Tensor& logits_fake,
                                    const torch::Tensor& targets);

struct LossWeights {
  double lambda_recon = 10000.0;
  double lambda_age = 100.0;
};

// The additive terms of the objective, each a scalar tensor.
struct LossParts {
  torch::Tensor recon;
  torch::Tensor id_adv_d, id_adv_g;
  torch::Tensor img_adv_d, img_adv_g;
  std::optional<torch::Tensor> age_d, age_g;
};

struct LossBundle {
  torch::Tensor loss_eg;    // lambda1 recon + id_adv_g + img_adv_g [+ lambda2 age_g]
  torch::Tensor loss_did;   // id_adv_d
  torch::Tensor loss_dimg;  // img_adv_d
  torch::Tensor loss_dage;  // lambda2 age_d, zero without D_age
  std::map<std::string, double> components;

  // Objective of the (shared) image discriminator update.
  torch::Tensor discriminator_total() const { return loss_dimg + loss_dage; }
};

// Throws ContractError when the age terms are missing with use_dage or present without it.
LossBundle compose_losses(const ModelConfig& config, const LossParts& parts,
                          const LossWeights& weights = {});

}  // namespace bapgan
