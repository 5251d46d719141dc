#include "bapgan/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <torch/script.h>

#include "bapgan/errors.hpp"

namespace bapgan {
namespace {

class DeskExtractor final : public FeatureExtractor {
 public:
  std::string id() const override { return kDeskExtractor; }
  torch::Tensor extract(const torch::Tensor& images) const override {
    torch::NoGradGuard guard;
    if (images.dim() != 4 || images.size(1) != 1) {
      throw DimensionError("desk extractor expects N x 1 x S x S images");
    }
    auto unit = (images.to(torch::kFloat64) + 1.0) / 2.0;
    auto pooled = torch::adaptive_avg_pool2d(unit, {8, 8});
    return pooled.reshape({images.size(0), 64});
  }
};

class InceptionExtractor final : public FeatureExtractor {
 public:
  explicit InceptionExtractor(const std::filesystem::path& weights) {
    try {
      module_ = torch::jit::load(weights.string());
    } catch (const c10::Error& e) {
      throw ConfigError("cannot load Inception TorchScript module " + weights.string() + ": " +
                        e.what_without_backtrace());
    }
    module_.eval();
  }
  std::string id() const override { return kInceptionExtractor; }
  torch::Tensor extract(const torch::Tensor& images) const override {
    torch::NoGradGuard guard;
    auto x = images.to(torch::kFloat32).expand({images.size(0), 3, images.size(2), images.size(3)});
    x = torch::nn::functional::interpolate(
        x, torch::nn::functional::InterpolateFuncOptions()
               .size(std::vector<int64_t>{299, 299})
               .mode(torch::kBilinear)
               .align_corners(false));
    auto out = const_cast<torch::jit::Module&>(module_).forward({x}).toTensor();
    return out.reshape({images.size(0), -1}).to(torch::kFloat64);
  }

 private:
  torch::jit::Module module_;
};

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& id,
                                                 const std::optional<std::filesystem::path>& weights) {
  if (id == kDeskExtractor) return std::make_unique<DeskExtractor>();
  if (id == kInceptionExtractor) {
    if (!weights || !std::filesystem::exists(*weights)) {
      throw ConfigError(
          "pretrained-inception needs Inception-v3 pool-feature weights as a TorchScript file "
          "(pass --inception-weights FILE; e.g. trace torchvision's inception_v3 with fc replaced "
          "by identity and save it with torch.jit.save). No fallback extractor is used.");
    }
    return std::make_unique<InceptionExtractor>(*weights);
  }
  throw ConfigError("unknown feature extractor '" + id + "' (expected " + kDeskExtractor + " or " +
                    kInceptionExtractor + ")");
}

Eigen::MatrixXd extract_features(const torch::Tensor& images, const FeatureExtractor& extractor,
                                 int64_t chunk) {
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < images.size(0); i += chunk) {
    parts.push_back(extractor.extract(images.slice(0, i, std::min(images.size(0), i + chunk))));
  }
  if (parts.empty()) return Eigen::MatrixXd(0, 0);
  auto feats = torch::cat(parts).to(torch::kFloat64).contiguous();
  const auto n = feats.size(0), d = feats.size(1);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> rm(
      feats.data_ptr<double>(), n, d);
  return Eigen::MatrixXd(rm);
}

FeatureStats feature_stats(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) throw ContractError("feature statistics need at least 2 samples");
  if (!features.allFinite()) throw NumericError("non-finite features");
  FeatureStats s;
  s.n = features.rows();
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centred = features.rowwise() - s.mean.transpose();
  s.cov = centred.transpose() * centred / static_cast<double>(s.n - 1);
  return s;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows() ||
      a.cov.rows() != a.mean.size()) {
    throw DimensionError("feature dimensions differ: " + std::to_string(a.mean.size()) + " vs " +
                         std::to_string(b.mean.size()));
  }
  const Eigen::MatrixXd sa = 0.5 * (a.cov + a.cov.transpose());
  const Eigen::MatrixXd sb = 0.5 * (b.cov + b.cov.transpose());
  const Eigen::MatrixXd root_a = symmetric_sqrt(sa);
  Eigen::MatrixXd m = root_a * sb * root_a;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

double fid(const torch::Tensor& images_a, const torch::Tensor& images_b,
           const FeatureExtractor& extractor) {
  return frechet_distance(feature_stats(extract_features(images_a, extractor)),
                          feature_stats(extract_features(images_b, extractor)));
}

}  // namespace bapgan
