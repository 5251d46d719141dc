#include "bapgan/evaluation.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "bapgan/checkpoint.hpp"
#include "bapgan/errors.hpp"
#include "bapgan/objectives.hpp"

namespace bapgan {
namespace {

torch::Tensor run_generator(const ModelParams& params, const torch::Tensor& x,
                            const std::vector<int>& bins) {
  torch::NoGradGuard guard;
  if (x.dim() != 4) throw DimensionError("expected N x 1 x S x S images");
  if (static_cast<int64_t>(bins.size()) != x.size(0)) {
    throw DimensionError("one bin per image required");
  }
  const auto input = x.to(params.dtype());
  std::vector<torch::Tensor> parts;
  constexpr int64_t kChunk = 64;
  for (int64_t i = 0; i < x.size(0); i += kChunk) {
    const auto end = std::min(x.size(0), i + kChunk);
    const std::vector<int> chunk_bins(bins.begin() + i, bins.begin() + end);
    const auto labels = one_hot_labels(chunk_bins, params.config.num_age_bins, params.dtype());
    parts.push_back(generate(params, encode(params, input.slice(0, i, end)), labels));
  }
  return torch::cat(parts);
}

std::string fmt_flag(bool b) { return b ? "yes" : "no"; }

}  // namespace

torch::Tensor age_invariant_reconstruct(const ModelParams& params, const torch::Tensor& x,
                                        const std::vector<int>& bins) {
  return run_generator(params, x, bins);
}

int shifted_bin(int source_bin, int delta_years, int num_bins) {
  const double width = 20.0 / num_bins;
  const double shift = delta_years / width;
  if (std::abs(shift - std::round(shift)) > 1e-9) {
    throw ConfigError("age shift of " + std::to_string(delta_years) +
                      " years is not a whole number of bins");
  }
  if (source_bin < 0 || source_bin >= num_bins) {
    throw RangeError("source bin " + std::to_string(source_bin) + " out of range");
  }
  const int target = source_bin + static_cast<int>(std::lround(shift));
  if (target < 0 || target >= num_bins) {
    throw RangeError("target bin " + std::to_string(target) + " (bin " + std::to_string(source_bin) +
                     " shifted by " + std::to_string(delta_years) + " years) is outside [0, " +
                     std::to_string(num_bins) + ")");
  }
  return target;
}

torch::Tensor progress_image(const ModelParams& params, const torch::Tensor& x, int source_bin,
                             int delta_years) {
  const bool single = x.dim() == 3;
  const auto batch = single ? x.unsqueeze(0) : x;
  std::vector<int> bins(static_cast<size_t>(batch.size(0)), source_bin);
  auto out = progress_images(params, batch, bins, delta_years);
  return single ? out.squeeze(0) : out;
}

torch::Tensor progress_images(const ModelParams& params, const torch::Tensor& x,
                              const std::vector<int>& source_bins, int delta_years) {
  std::vector<int> targets;
  targets.reserve(source_bins.size());
  for (int b : source_bins) {
    targets.push_back(shifted_bin(b, delta_years, params.config.num_age_bins));
  }
  return run_generator(params, x, targets);
}

int measure_gap_width(const torch::Tensor& image, double threshold) {
  auto img = image.detach().to(torch::kFloat64);
  if (img.dim() == 3) img = img.squeeze(0);
  if (img.dim() != 2) throw DimensionError("measure_gap_width expects a single image");
  const auto s = img.size(1);
  const auto half_band = std::max<int64_t>(1, s / 16);
  const auto profile = img.slice(1, s / 2 - half_band, s / 2 + half_band).mean(1).contiguous();
  const auto* p = profile.data_ptr<double>();
  int best = 0, run = 0;
  for (int64_t y = 0; y < profile.size(0); ++y) {
    run = p[y] < threshold ? run + 1 : 0;
    best = std::max(best, run);
  }
  return best;
}

std::string AblationReport::to_csv() const {
  std::ostringstream out;
  out << "Model,D_age,LS,SA,FID\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    const auto f = ModelConfig::for_row(r.row, ModelConfig{}).flags();
    out << '"' << ablation_row_name(r.row) << "\"," << fmt_flag(f[0]) << ',' << fmt_flag(f[1])
        << ',' << fmt_flag(f[2]) << ',' << r.fid << '\n';
  }
  return out.str();
}

std::string AblationReport::to_text() const {
  std::ostringstream out;
  out << "FID (real vs age-invariant reconstruction), dataset " << dataset_tag << ", split "
      << split << ", " << n_images << " images, " << extractor << "\n";
  out << std::left << std::setw(14) << "Model" << std::setw(7) << "D_age" << std::setw(5) << "LS"
      << std::setw(5) << "SA" << std::right << std::setw(10) << "FID" << '\n';
  out << std::string(41, '-') << '\n';
  for (const auto& r : rows) {
    const auto f = ModelConfig::for_row(r.row, ModelConfig{}).flags();
    out << std::left << std::setw(14) << ablation_row_name(r.row) << std::setw(7)
        << (f[0] ? "x" : "") << std::setw(5) << (f[1] ? "x" : "") << std::setw(5)
        << (f[2] ? "x" : "") << std::right << std::setw(10) << std::fixed << std::setprecision(2)
        << r.fid << '\n';
  }
  return out.str();
}

AblationReport ablation_report(const ImageDataset& data,
                               const std::map<AblationRow, std::filesystem::path>& checkpoints,
                               const FeatureExtractor& extractor) {
  if (data.size() < 2) throw ConfigError("ablation report needs at least 2 images");
  AblationReport report;
  report.extractor = extractor.id();
  report.n_images = data.size();
  if (!data.records.empty()) report.dataset_tag = data.records.front().dataset_tag;
  const auto real_stats = feature_stats(extract_features(data.images, extractor));
  for (const auto row : kAblationRows) {
    auto it = checkpoints.find(row);
    if (it == checkpoints.end()) {
      throw NotFoundError(std::string("no checkpoint given for ablation row ") + std::string(ablation_row_name(row)));
    }
    ModelParams params;
    try {
      params = load_model_params(it->second);
    } catch (const NotFoundError&) {
      throw NotFoundError(std::string("checkpoint for ablation row ") + std::string(ablation_row_name(row)) +
                          " not found at " + it->second.string());
    }
    if (params.config.flags() != ModelConfig::for_row(row, ModelConfig{}).flags()) {
      throw ConfigError(std::string("checkpoint for ablation row ") + std::string(ablation_row_name(row)) +
                        " was trained with different flags");
    }
    const auto recon = age_invariant_reconstruct(params, data.images, data.bins);
    const auto stats = feature_stats(extract_features(recon, extractor));
    report.rows.push_back({row, frechet_distance(real_stats, stats)});
  }
  return report;
}

}  // namespace bapgan

namespace bapgan {

torch::Tensor uniform_noise_images(int64_t n, int size, uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return torch::rand({n, 1, size, size}, gen, torch::kFloat32) * 2.0 - 1.0;
}

}  // namespace bapgan
