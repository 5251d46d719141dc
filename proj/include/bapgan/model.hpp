#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "bapgan/config.hpp"
#include "bapgan/self_attention.hpp"

namespace bapgan {

enum class Network { kEncoder, kGenerator, kIdDiscriminator, kImgDiscriminator, kAgeDiscriminator };

// Which network owns a parameter, decided by its name prefix (E., G., Did., Dimg., Dage.).
Network network_of(std::string_view name);
std::string_view network_name(Network net);

// All learnable state of the five networks. Parameter names are stable and are
// used verbatim as checkpoint array names.
struct ModelParams {
  ModelConfig config;
  std::map<std::string, torch::Tensor> weights;
  // Power-iteration vector per spectrally normalized weight, keyed by the weight's name.
  std::map<std::string, torch::Tensor> sn_vectors;

  const torch::Tensor& at(const std::string& name) const;
  std::vector<std::string> names_of(Network net) const;
  std::vector<torch::Tensor> tensors_of(Network net) const;
  // Deep copy; the result shares no storage with *this.
  ModelParams clone() const;
  torch::Dtype dtype() const;
  int64_t parameter_count() const;
};

ModelParams init_params(const ModelConfig& config, uint64_t seed,
                        torch::Dtype dtype = torch::kFloat32);

// x: B x 1 x S x S in [-1, 1]  ->  z: B x d_z in [-1, 1].
torch::Tensor encode(const ModelParams& params, const torch::Tensor& x);

// z: B x d_z, labels: B x K  ->  B x 1 x S x S in [-1, 1].
torch::Tensor generate(const ModelParams& params, const torch::Tensor& z,
                       const torch::Tensor& labels);

// z: B x d_z -> B scores in (0, 1).
torch::Tensor discriminate_identity(const ModelParams& params, const torch::Tensor& z);

struct ImageJudgement {
  torch::Tensor realness;                   // B scores in (0, 1)
  std::optional<torch::Tensor> age_logits;  // B x K, unnormalized; absent without D_age
};

// D_img and D_age share the convolutional trunk (unless separate_dage). The trunk
// sees the image only; the label enters the realness head through a projection
// term so that the age head cannot read the label it is asked to predict.
ImageJudgement discriminate_image(const ModelParams& params, const torch::Tensor& x,
                                  const torch::Tensor& labels);

// Age logits only, for classification accuracy.
torch::Tensor classify_age(const ModelParams& params, const torch::Tensor& x);

// Gathered weights for the SA block named by `prefix` (e.g. "G.sa").
SelfAttentionWeights attention_weights(const ModelParams& params, const std::string& prefix);

// One power iteration per spectrally normalized weight, persisted into
// sn_vectors. This is the only mutation of ModelParams outside the optimizer.
void refresh_spectral_vectors(ModelParams& params, int n_iter = 1);

// The weight as the forward pass sees it (spectrally normalized when registered).
torch::Tensor effective_weight(const ModelParams& params, const std::string& name);

}  // namespace bapgan
