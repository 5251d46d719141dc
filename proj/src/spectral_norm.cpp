#include "bapgan/spectral_norm.hpp"

#include "bapgan/errors.hpp"

namespace bapgan {
namespace {

torch::Tensor as_matrix(const torch::Tensor& w) { return w.reshape({w.size(0), -1}); }

torch::Tensor unit(const torch::Tensor& v) {
  return v / v.norm().clamp_min(kSigmaFloor);
}

}  // namespace

SpectralNormResult spectral_normalize(const torch::Tensor& weight, const torch::Tensor& u,
                                      int n_iter) {
  if (n_iter < 1) throw ContractError("spectral_normalize: n_iter must be >= 1");
  if (u.dim() != 1 || u.size(0) != weight.size(0)) {
    throw DimensionError("spectral_normalize: u must have length weight.size(0)");
  }
  torch::NoGradGuard no_grad;
  const auto w = as_matrix(weight);
  auto left = u.clone();
  torch::Tensor right;
  for (int i = 0; i < n_iter; ++i) {
    right = unit(torch::mv(w.t(), left));
    auto next = torch::mv(w, right);
    // A zero matrix has no direction to converge to; keep the previous estimate.
    if (next.norm().item<double>() > kSigmaFloor) left = unit(next);
  }
  auto sigma = torch::dot(left, torch::mv(w, right)).clamp_min(kSigmaFloor);
  return {weight / sigma, left, sigma};
}

torch::Tensor spectral_weight(const torch::Tensor& weight, const torch::Tensor& u) {
  const auto w = as_matrix(weight);
  torch::Tensor v;
  {
    torch::NoGradGuard no_grad;
    v = unit(torch::mv(w.t(), u));
  }
  auto sigma = torch::dot(u, torch::mv(w, v)).clamp_min(kSigmaFloor);
  return weight / sigma;
}

torch::Tensor random_unit_vector(int64_t rows, torch::Generator& gen, torch::Dtype dtype) {
  auto v = torch::randn({rows}, gen, torch::TensorOptions().dtype(dtype));
  return unit(v);
}

}  // namespace bapgan
