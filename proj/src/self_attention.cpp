#include "bapgan/self_attention.hpp"

#include <string>

#include "bapgan/errors.hpp"

namespace bapgan {

void check_attention_channels(int64_t channels, int reduction) {
  if (reduction < 1 || channels % reduction != 0 || channels / reduction < 1) {
    throw ConfigError("self-attention: " + std::to_string(channels) +
                      " channels not divisible by reduction " + std::to_string(reduction));
  }
}

SelfAttentionOutput self_attention_full(const torch::Tensor& features,
                                        const SelfAttentionWeights& w) {
  if (features.dim() != 4) throw DimensionError("self-attention expects B x C x H x W");
  const auto batch = features.size(0);
  const auto channels = features.size(1);
  if (w.value_w.size(0) != channels || w.value_w.size(1) != channels ||
      w.query_w.size(1) != channels || w.key_w.size(1) != channels) {
    throw DimensionError("self-attention weights do not match feature channels");
  }
  const auto flat = features.reshape({batch, channels, -1});  // B x C x N

  auto project = [&](const torch::Tensor& m, const torch::Tensor& b) {
    return torch::matmul(m, flat) + b.view({1, -1, 1});
  };
  auto query = project(w.query_w, w.query_b);  // B x C' x N
  auto key = project(w.key_w, w.key_b);        // B x C' x N
  auto value = project(w.value_w, w.value_b);  // B x C x N

  auto energy = torch::bmm(query.transpose(1, 2), key);  // B x N x N
  auto attention = torch::softmax(energy, -1);
  auto attended = torch::bmm(value, attention.transpose(1, 2)).view_as(features);
  return {features + w.gamma * attended, attention};
}

}  // namespace bapgan
