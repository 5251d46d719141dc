#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

namespace bapgan {

// The four model variants compared in the ablation table.
enum class AblationRow { kCaae, kDageLs, kSa, kBapgan };

inline constexpr std::array<AblationRow, 4> kAblationRows = {
    AblationRow::kCaae, AblationRow::kDageLs, AblationRow::kSa, AblationRow::kBapgan};

std::string_view ablation_row_name(AblationRow row);
// Short filesystem-safe tag: caae, dage_ls, sa, bapgan.
std::string_view ablation_row_tag(AblationRow row);

struct ModelConfig {
  int image_size = 128;
  int latent_dim = 50;
  int num_age_bins = 5;
  int base_channels = 64;
  // Spatial size of the feature map followed by self-attention, in both G and
  // the discriminator trunk. 0 selects image_size / 4.
  int sa_resolution = 0;
  int sa_reduction = 8;

  bool use_dage = true;
  bool use_ls = true;
  bool use_sa = true;
  // Spectral normalization of every discriminator layer. Travels with the SA
  // flag in the ablation rows (SA comes with its stabilization techniques).
  bool use_sn = true;
  // Give D_age its own convolutional trunk instead of sharing D_img's.
  bool separate_dage = false;

  double smoothing = 0.2;

  // Throws ConfigError.
  void validate() const;

  int encoder_stages() const;  // stride-2 convolutions in E (and deconvolutions in G)
  int trunk_stages() const;    // stride-2 convolutions in the discriminator trunk
  int effective_sa_resolution() const;
  int trunk_feature_size() const;  // flattened trunk output length
  std::array<bool, 3> flags() const { return {use_dage, use_ls, use_sa}; }

  static ModelConfig for_row(AblationRow row, ModelConfig base);
  // 128x128 full scale.
  static ModelConfig full_scale();
  // 64x64 desk scale used by the phantom experiments.
  static ModelConfig desk();
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace bapgan
