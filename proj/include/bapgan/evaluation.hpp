#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "bapgan/config.hpp"
#include "bapgan/data.hpp"
#include "bapgan/metrics.hpp"
#include "bapgan/model.hpp"
#include "bapgan/phantom.hpp"

namespace bapgan {

// G(E(x), one-hot(bins)); labels are never smoothed at inference.
torch::Tensor age_invariant_reconstruct(const ModelParams& params, const torch::Tensor& x,
                                        const std::vector<int>& bins);

// delta_years must be a whole number of bins; the target bin must exist (no clamping).
int shifted_bin(int source_bin, int delta_years, int num_bins);

torch::Tensor progress_image(const ModelParams& params, const torch::Tensor& x, int source_bin,
                             int delta_years);
torch::Tensor progress_images(const ModelParams& params, const torch::Tensor& x,
                              const std::vector<int>& source_bins, int delta_years);

// Longest run of rows whose mean over the centre column band (+-S/16) falls
// below `threshold`. 0 when no row does. Image is 1 x S x S or S x S in [-1, 1].
int measure_gap_width(const torch::Tensor& image, double threshold = kGapThreshold);

struct AblationRowResult {
  AblationRow row;
  double fid = 0;
};

struct AblationReport {
  std::string dataset_tag;
  std::string split;
  std::string extractor;
  int64_t n_images = 0;
  std::vector<AblationRowResult> rows;

  std::string to_csv() const;   // Model,D_age,LS,SA,FID
  std::string to_text() const;  // aligned table
};

// FID between `data` and its age-invariant reconstructions, per row checkpoint.
// Throws NotFoundError naming the row when a checkpoint is missing, ConfigError
// when a checkpoint's flags differ from its row.
AblationReport ablation_report(const ImageDataset& data,
                               const std::map<AblationRow, std::filesystem::path>& checkpoints,
                               const FeatureExtractor& extractor);

}  // namespace bapgan

namespace bapgan {

// N x 1 x S x S images of i.i.d. uniform noise in [-1, 1].
torch::Tensor uniform_noise_images(int64_t n, int size, uint64_t seed);

}  // namespace bapgan
