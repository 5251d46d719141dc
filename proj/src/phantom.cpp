#include "bapgan/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "bapgan/errors.hpp"

namespace bapgan {
namespace {

// Uniform [0, 1) stream from splitmix64, so phantoms are identical across standard libraries.
class UnitStream {
 public:
  explicit UnitStream(uint64_t seed) : state_(seed) {}
  double next() {
    state_ = mix_seed(state_, 0x5bd1e995ULL);
    return static_cast<double>(state_ >> 11) * 0x1.0p-53;
  }
  double range(double lo, double hi) { return lo + (hi - lo) * next(); }

 private:
  uint64_t state_;
};

struct Geometry {
  double half_width, flare, offset, bend;
  int gap_top;
  double noise_amp;
  double wave_amp[3], wave_fx[3], wave_fy[3], wave_phase[3];
};

Geometry identity_geometry(const PhantomSpec& spec) {
  const double s = spec.size / 64.0;
  UnitStream u(mix_seed(spec.identity_seed, 0xb0e));
  Geometry g{};
  g.half_width = u.range(8.5, 11.5) * s;
  g.flare = u.range(0.5, 2.5) * s;
  g.offset = u.range(-1.5, 1.5) * s;
  g.bend = u.range(-1.5, 1.5) * s;
  g.gap_top = static_cast<int>(std::lround(spec.size / 2.0 - spec.gap_max_px / 2.0 + u.range(-3.0, 3.0) * s));
  g.noise_amp = u.range(1.0, 3.0);
  for (int k = 0; k < 3; ++k) {
    g.wave_amp[k] = u.range(2.0, 4.0);
    g.wave_fx[k] = u.range(0.05, 0.4) / s;
    g.wave_fy[k] = u.range(0.05, 0.4) / s;
    g.wave_phase[k] = u.range(0.0, 2.0 * M_PI);
  }
  return g;
}

}  // namespace

int phantom_gap_px(double age_years, int gap_max_px) {
  return static_cast<int>(std::lround(gap_max_px * std::max(0.0, 1.0 - age_years / 16.0)));
}

Phantom generate_phantom(const PhantomSpec& spec) {
  if (spec.size < 16) throw ConfigError("phantom size must be >= 16");
  if (spec.gap_max_px < 0 || spec.gap_max_px >= spec.size / 2) {
    throw ConfigError("phantom gap_max_px out of range");
  }
  if (!(spec.age_years >= 0.0)) throw RangeError("phantom age must be non-negative");

  const auto g = identity_geometry(spec);
  const int n = spec.size;
  Phantom out;
  out.gap_px = phantom_gap_px(spec.age_years, spec.gap_max_px);
  out.image = GrayImage(n, n);
  out.age_region.assign(static_cast<size_t>(n) * n, false);

  const double maturity = std::min(spec.age_years, 16.0) / 16.0;
  const float epiphysis = kPhantomEpiphysisYoung + static_cast<float>(maturity) *
                                                       (kPhantomEpiphysisFused - kPhantomEpiphysisYoung);
  const int gap_end = g.gap_top + out.gap_px;
  const int band_end = g.gap_top + spec.gap_max_px;
  UnitStream noise(mix_seed(spec.identity_seed, 0x701e));

  for (int y = 0; y < n; ++y) {
    const double centre = n / 2.0 - 0.5 + g.offset + g.bend * std::sin(M_PI * y / n);
    const bool upper = y < g.gap_top;
    const double half = upper ? g.half_width + g.flare : g.half_width;
    for (int x = 0; x < n; ++x) {
      const double dist = std::abs(x - centre);
      const double coverage = std::clamp(half - dist + 0.5, 0.0, 1.0);
      double tissue;
      if (upper) {
        tissue = epiphysis;
      } else if (y < gap_end) {
        tissue = kPhantomGap;
      } else {
        const double r = dist / g.half_width;
        tissue = kPhantomShaft + 15.0 * r * r;  // cortical rim
      }
      double texture = 0.0;
      for (int k = 0; k < 3; ++k) {
        texture += g.wave_amp[k] * std::sin(g.wave_fx[k] * x + g.wave_fy[k] * y + g.wave_phase[k]);
      }
      double v = kPhantomBackground + coverage * (tissue + texture - kPhantomBackground);
      v += g.noise_amp * (2.0 * noise.next() - 1.0);
      out.image.at(x, y) = static_cast<float>(std::clamp(v, 0.0, 255.0));
      out.age_region[static_cast<size_t>(y) * n + x] = y < band_end;
    }
  }
  return out;
}

std::vector<SampleRecord> write_phantom_dataset(const std::filesystem::path& dir,
                                                const PhantomDatasetOptions& options) {
  if (options.count < 1) throw ConfigError("phantom count must be positive");
  std::filesystem::create_directories(dir / "images");
  std::vector<SampleRecord> records;
  std::ostringstream meta;
  meta << "path,true_gap_px,identity_seed\n";
  UnitStream ages(mix_seed(options.seed, 0xa9e));
  for (int i = 0; i < options.count; ++i) {
    PhantomSpec spec;
    spec.age_years = std::min(kMaxAgeYears, std::round(ages.range(0.0, 20.0) * 1000.0) / 1000.0);
    spec.identity_seed = mix_seed(options.seed, static_cast<uint64_t>(i), 0x1d);
    spec.size = options.size;
    spec.gap_max_px = options.gap_max_px;
    const auto phantom = generate_phantom(spec);
    std::ostringstream name;
    name << "images/" << std::setw(5) << std::setfill('0') << i << ".png";
    write_png(dir / name.str(), phantom.image);
    SampleRecord rec;
    rec.image_path = std::filesystem::absolute(dir / name.str());
    rec.age_years = spec.age_years;
    rec.dataset_tag = options.dataset_tag;
    records.push_back(rec);
    meta << name.str() << ',' << phantom.gap_px << ',' << spec.identity_seed << '\n';
  }
  auto splits = split_dataset(records, options.split_ratios, options.seed);
  std::vector<SampleRecord> ordered;
  for (auto* part : {&splits.train, &splits.val, &splits.test}) {
    ordered.insert(ordered.end(), part->begin(), part->end());
  }
  std::sort(ordered.begin(), ordered.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.image_path < b.image_path; });
  write_manifest(dir / "manifest.csv", ordered);
  std::ofstream(dir / "metadata.csv") << meta.str();
  return ordered;
}

}  // namespace bapgan
