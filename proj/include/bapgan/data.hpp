#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "bapgan/image.hpp"

namespace bapgan {

// ---------------------------------------------------------------------------
// Age bins

inline constexpr double kMaxAgeYears = 19.999;
inline constexpr double kAgeSpanYears = 20.0;

// Equal-width bins over [0, 20): with K = 5 the intervals are
// [0-3] [4-7] [8-11] [12-15] [16-19]. Throws RangeError outside [0, 19.999].
int bin_age(double age_years, int num_bins = 5);
double bin_midpoint(int bin, int num_bins = 5);

// ---------------------------------------------------------------------------
// Manifest

enum class Split { kTrain, kVal, kTest };
std::string_view split_name(Split s);
std::optional<Split> parse_split(std::string_view s);

struct SampleRecord {
  std::filesystem::path image_path;  // absolute, or relative to the manifest directory on load
  double age_years = 0.0;
  std::optional<Split> split;
  std::string dataset_tag;
};

struct Manifest {
  std::vector<SampleRecord> records;
  std::vector<std::string> warnings;
  std::array<int, 3> split_counts{};  // train, val, test
  int unassigned = 0;
};

// CSV with header `path,age_years,split,dataset_tag` (split may be omitted or
// empty). Relative paths resolve against the manifest's directory. Throws
// IngestionError naming the offending line.
Manifest load_manifest(const std::filesystem::path& path);
// Paths are written relative to the manifest's directory when possible.
void write_manifest(const std::filesystem::path& path, const std::vector<SampleRecord>& records);

// ---------------------------------------------------------------------------
// Splits

struct DatasetSplits {
  std::vector<SampleRecord> train, val, test;
};

// Seeded shuffle, then the first round(r0 n) records go to train, the next
// round(r1 n) to val, the remainder to test.
DatasetSplits split_dataset(const std::vector<SampleRecord>& records,
                            const std::array<double, 3>& ratios, uint64_t seed);

// Records with an explicit split keep it; the rest are split by `ratios`.
DatasetSplits assign_splits(const std::vector<SampleRecord>& records,
                            const std::array<double, 3>& ratios, uint64_t seed);

// ---------------------------------------------------------------------------
// Preprocessing and augmentation

// Raw [0, 255] image of any size -> 1 x S x S in [-1, 1]. Throws IngestionError on empty input.
torch::Tensor preprocess(const GrayImage& raw, int size);

inline constexpr std::array<std::string_view, 5> kAugmentOps = {
    "auto-contrast", "contrast", "brightness", "sharpness", "posterize"};

struct AugmentOp {
  std::string name;
  double magnitude = 1.0;  // enhancement factor, or bit count for posterize
};

struct AugmentPlan {
  double rotation_degrees = 0.0;
  std::vector<AugmentOp> ops;
};

// Throws ConfigError for names outside kAugmentOps.
AugmentOp make_augment_op(std::string_view name, double magnitude);

// Rotation uniform in [-5, 5] degrees, then two distinct ops drawn uniformly
// from kAugmentOps with factors in [0.7, 1.3] and posterize bits in 4..7.
AugmentPlan sample_augment_plan(uint64_t seed);

// image: 1 x S x S (or S x S) in [-1, 1]; output clipped to [-1, 1].
torch::Tensor apply_augment(const torch::Tensor& image, const AugmentPlan& plan);
torch::Tensor augment(const torch::Tensor& image, uint64_t seed);

// Deterministic seed mixing (splitmix64 chain); order independent per sample.
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0);

// ---------------------------------------------------------------------------
// In-memory dataset

struct ImageDataset {
  torch::Tensor images;  // N x 1 x S x S in [-1, 1]
  std::vector<int> bins;
  std::vector<double> ages;
  std::vector<SampleRecord> records;

  int64_t size() const { return static_cast<int64_t>(bins.size()); }
  bool empty() const { return bins.empty(); }
  ImageDataset subset(const std::vector<int64_t>& indices) const;
};

ImageDataset load_images(const std::vector<SampleRecord>& records, int size, int num_bins);

}  // namespace bapgan
