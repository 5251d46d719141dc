#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <Eigen/Dense>
#include <torch/torch.h>

namespace bapgan {

// Feature extractors map N x 1 x S x S images in [-1, 1] to N x D float64 features.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  virtual torch::Tensor extract(const torch::Tensor& images) const = 0;
};

// "desk-extractor": pixels mapped to [0, 1], average-pooled to 8x8, flattened (D = 64).
// "pretrained-inception": a TorchScript module supplied by the user. Images are
// replicated to 3 channels and resized bilinearly to 299x299, kept in [-1, 1];
// the module must return N x 2048 pool features.
inline constexpr const char* kDeskExtractor = "desk-extractor";
inline constexpr const char* kInceptionExtractor = "pretrained-inception";

std::unique_ptr<FeatureExtractor> make_extractor(
    const std::string& id, const std::optional<std::filesystem::path>& weights = std::nullopt);

Eigen::MatrixXd extract_features(const torch::Tensor& images, const FeatureExtractor& extractor,
                                 int64_t chunk = 64);

struct FeatureStats {
  int64_t n = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased
};

FeatureStats feature_stats(const Eigen::MatrixXd& features);

// ||mu_a - mu_b||^2 + Tr(S_a) + Tr(S_b) - 2 Tr((S_a S_b)^{1/2}).
// The trace of the square root is taken from the eigenvalues of the symmetric
// matrix sqrt(S_a) S_b sqrt(S_a), which has the same spectrum as S_a S_b; negative
// eigenvalues from round-off are clipped at 0.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

double fid(const torch::Tensor& images_a, const torch::Tensor& images_b,
           const FeatureExtractor& extractor);

}  // namespace bapgan
