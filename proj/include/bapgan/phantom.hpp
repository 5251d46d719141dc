#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "bapgan/data.hpp"
#include "bapgan/image.hpp"

namespace bapgan {

// Procedural bone phantom: an epiphysis above and a shaft below, separated by
// a dark growth-plate gap whose height shrinks with age and closes at 16.
struct PhantomSpec {
  double age_years = 0.0;
  uint64_t identity_seed = 0;
  int size = 64;
  int gap_max_px = 10;
};

// Raw intensities of the phantom's tissue classes (0..255 scale, before texture).
inline constexpr float kPhantomBackground = 30.0f;
inline constexpr float kPhantomGap = 50.0f;
inline constexpr float kPhantomShaft = 180.0f;
inline constexpr float kPhantomEpiphysisYoung = 140.0f;
inline constexpr float kPhantomEpiphysisFused = 200.0f;
// Midpoint of shaft and gap, in model units [-1, 1].
inline constexpr double kGapThreshold = ((kPhantomShaft + kPhantomGap) / 2.0) / 127.5 - 1.0;

// round(gap_max * max(0, 1 - age / 16)).
int phantom_gap_px(double age_years, int gap_max_px);

struct Phantom {
  GrayImage image;
  int gap_px = 0;
  // Pixels whose value may depend on age (epiphysis plus the maximal gap band).
  std::vector<bool> age_region;
};

Phantom generate_phantom(const PhantomSpec& spec);

struct PhantomDatasetOptions {
  int count = 500;
  int size = 64;
  int gap_max_px = 10;
  uint64_t seed = 0;
  std::array<double, 3> split_ratios = {0.7, 0.1, 0.2};
  std::string dataset_tag = "phantom";
};

// Writes images/NNNNN.png, manifest.csv (path,age_years,split,dataset_tag) and
// metadata.csv (path,true_gap_px,identity_seed) under `dir`. Ages are uniform
// on [0, 19.999]; every image has its own identity.
std::vector<SampleRecord> write_phantom_dataset(const std::filesystem::path& dir,
                                                const PhantomDatasetOptions& options);

}  // namespace bapgan
