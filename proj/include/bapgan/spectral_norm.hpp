#pragma once

#include <torch/torch.h>

namespace bapgan {

inline constexpr double kSigmaFloor = 1e-12;

struct SpectralNormResult {
  torch::Tensor weight;  // W / sigma, same shape as the input weight
  torch::Tensor u;       // updated left singular vector estimate, unit norm
  torch::Tensor sigma;   // scalar estimate of the top singular value
};

// Power iteration on W viewed as (rows = size(0)) x (everything else); this is
// how convolution kernels are treated. `u` has length size(0) and unit norm.
// Runs without recording gradients; a zero matrix yields sigma clamped to
// kSigmaFloor and a zero normalized weight.
SpectralNormResult spectral_normalize(const torch::Tensor& weight, const torch::Tensor& u,
                                      int n_iter);

// Differentiable W / sigma(W) for a fixed u. v = normalize(W^T u) is treated as
// a constant; since v has unit norm, d(u^T W v) = u^T dW v, so the gradient is
// exact for sigma(W) = |W^T u|.
torch::Tensor spectral_weight(const torch::Tensor& weight, const torch::Tensor& u);

// Unit vector of length `rows` drawn from a standard normal.
torch::Tensor random_unit_vector(int64_t rows, torch::Generator& gen, torch::Dtype dtype);

}  // namespace bapgan
