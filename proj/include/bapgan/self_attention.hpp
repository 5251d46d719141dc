#pragma once

#include <torch/torch.h>

namespace bapgan {

// Weights of one self-attention block. The 1x1 convolutions are stored as
// matrices: query/key are (C/r x C), value is (C x C).
struct SelfAttentionWeights {
  torch::Tensor query_w, query_b;
  torch::Tensor key_w, key_b;
  torch::Tensor value_w, value_b;
  torch::Tensor gamma;  // scalar gate, zero at initialization
};

struct SelfAttentionOutput {
  torch::Tensor output;     // B x C x H x W, f + gamma * o(f)
  torch::Tensor attention;  // B x N x N with N = H*W; row i is the distribution query i attends with
};

// Throws ConfigError when C is not divisible by `reduction`.
void check_attention_channels(int64_t channels, int reduction);

SelfAttentionOutput self_attention_full(const torch::Tensor& features,
                                        const SelfAttentionWeights& w);

inline torch::Tensor self_attention(const torch::Tensor& features, const SelfAttentionWeights& w) {
  return self_attention_full(features, w).output;
}

}  // namespace bapgan
