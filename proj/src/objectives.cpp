#include "bapgan/objectives.hpp"

namespace bapgan {

torch::Tensor smooth_age_label(const torch::Tensor& one_hot, double eps) {
  if (one_hot.dim() != 2) throw DimensionError("smooth_age_label expects B x K labels");
  if (!(eps >= 0.0 && eps < 1.0)) throw ConfigError("smoothing must lie in [0, 1)");
  const int bins = static_cast<int>(one_hot.size(1));
  if (bins >= 3 && eps > 0.5) throw ConfigError("smoothing above 1/2 leaves a negative hot bin");

  const auto rows = one_hot.detach().to(torch::kFloat64).contiguous();
  auto out = torch::zeros_like(rows);
  auto acc = rows.accessor<double, 2>();
  auto dst = out.accessor<double, 2>();
  for (int64_t b = 0; b < rows.size(0); ++b) {
    int hot = -1;
    for (int k = 0; k < bins; ++k) {
      const double v = acc[b][k];
      if (v == 1.0 && hot < 0) {
        hot = k;
      } else if (v != 0.0) {
        hot = -2;
        break;
      }
    }
    if (hot < 0) throw ContractError("smooth_age_label: row " + std::to_string(b) + " is not one-hot");
    const auto smoothed = smooth_one_hot<double>(hot, bins, eps);
    for (int k = 0; k < bins; ++k) dst[b][k] = smoothed[static_cast<size_t>(k)];
  }
  return out.to(one_hot.scalar_type());
}

torch::Tensor one_hot_labels(const std::vector<int>& bins, int num_bins, torch::Dtype dtype) {
  auto out = torch::zeros({static_cast<int64_t>(bins.size()), num_bins},
                          torch::TensorOptions().dtype(dtype));
  for (size_t i = 0; i < bins.size(); ++i) {
    if (bins[i] < 0 || bins[i] >= num_bins) throw RangeError("age bin out of range");
    out[static_cast<int64_t>(i)][bins[i]] = 1.0;
  }
  return out;
}

torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& reconstructed) {
  if (x.sizes() != reconstructed.sizes()) throw DimensionError("reconstruction_loss: shape mismatch");
  const auto per_image = (x - reconstructed).pow(2).flatten(1).mean(1);
  return per_image.mean();
}

namespace {
torch::Tensor clamp_scores(const torch::Tensor& s) {
  return s.clamp(kScoreClamp, 1.0 - kScoreClamp);
}
}  // namespace

AdversarialLosses adversarial_losses(const torch::Tensor& scores_real,
                                     const torch::Tensor& scores_fake) {
  const auto real = clamp_scores(scores_real);
  const auto fake = clamp_scores(scores_fake);
  return {-torch::log(real).mean() - torch::log1p(-fake).mean(), -torch::log(fake).mean()};
}

torch::Tensor saturating_generator_loss(const torch::Tensor& scores_fake) {
  return torch::log1p(-clamp_scores(scores_fake)).mean();
}

torch::Tensor soft_cross_entropy(const torch::Tensor& logits, const torch::Tensor& targets) {
  if (logits.sizes() != targets.sizes()) throw DimensionError("soft_cross_entropy: shape mismatch");
  return -(targets * torch::log_softmax(logits, 1)).sum(1).mean();
}

AgeLosses age_classification_losses(const torch::Tensor& logits_real,
                                    const torch::Tensor& logits_fake,
                                    const torch::Tensor& targets) {
  return {soft_cross_entropy(logits_real, targets), soft_cross_entropy(logits_fake, targets)};
}

LossBundle compose_losses(const ModelConfig& config, const LossParts& parts,
                          const LossWeights& weights) {
  const bool has_age = parts.age_d.has_value() || parts.age_g.has_value();
  if (config.use_dage && !(parts.age_d && parts.age_g)) {
    throw ContractError("compose_losses: age terms required when the age discriminator is on");
  }
  if (!config.use_dage && has_age) {
    throw ContractError("compose_losses: age terms given but the age discriminator is off");
  }
  if (!parts.recon.defined() || !parts.id_adv_d.defined() || !parts.id_adv_g.defined() ||
      !parts.img_adv_d.defined() || !parts.img_adv_g.defined()) {
    throw ContractError("compose_losses: missing adversarial or reconstruction term");
  }

  LossBundle out;
  out.loss_eg = weights.lambda_recon * parts.recon + parts.id_adv_g + parts.img_adv_g;
  out.loss_did = parts.id_adv_d;
  out.loss_dimg = parts.img_adv_d;
  out.loss_dage = torch::zeros_like(parts.img_adv_d);
  if (config.use_dage) {
    out.loss_eg = out.loss_eg + weights.lambda_age * *parts.age_g;
    out.loss_dage = weights.lambda_age * *parts.age_d;
  }

  auto value = [](const torch::Tensor& t) { return t.detach().item<double>(); };
  out.components = {{"recon", value(parts.recon)},         {"id_adv_d", value(parts.id_adv_d)},
                    {"id_adv_g", value(parts.id_adv_g)},   {"img_adv_d", value(parts.img_adv_d)},
                    {"img_adv_g", value(parts.img_adv_g)}};
  if (config.use_dage) {
    out.components["age_d"] = value(*parts.age_d);
    out.components["age_g"] = value(*parts.age_g);
  }
  return out;
}

}  // namespace bapgan
