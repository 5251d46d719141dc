#include "bapgan/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "bapgan/errors.hpp"

namespace bapgan {

int bin_age(double age_years, int num_bins) {
  if (num_bins < 1) throw ConfigError("num_bins must be positive");
  if (!(age_years >= 0.0) || age_years > kMaxAgeYears) {
    throw RangeError("age " + std::to_string(age_years) + " outside [0, 19.999]");
  }
  const double width = kAgeSpanYears / num_bins;
  return std::min(num_bins - 1, static_cast<int>(std::floor(age_years / width)));
}

double bin_midpoint(int bin, int num_bins) {
  if (bin < 0 || bin >= num_bins) throw RangeError("age bin out of range");
  const double width = kAgeSpanYears / num_bins;
  return (bin + 0.5) * width;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  return std::nullopt;
}

// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Comma-separated fields with optional double-quoted values.
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  fields.push_back(trim(cur));
  return fields;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open manifest " + path.string());
  const auto base = path.parent_path();

  std::string line;
  if (!std::getline(in, line)) throw IngestionError(path.string() + ": empty manifest");
  const auto header = split_csv_line(line);
  std::map<std::string, size_t> column;
  for (size_t i = 0; i < header.size(); ++i) column[header[i]] = i;
  for (const char* required : {"path", "age_years"}) {
    if (!column.contains(required)) {
      throw IngestionError(path.string() + ":1: header lacks column '" + required + "'");
    }
  }
  auto optional_field = [&](const std::vector<std::string>& f, const char* name) -> std::string {
    auto it = column.find(name);
    return it == column.end() ? std::string() : f[it->second];
  };

  Manifest out;
  std::set<std::string> seen;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw IngestionError(where + "expected " + std::to_string(header.size()) + " fields, got " +
                           std::to_string(fields.size()));
    }
    SampleRecord rec;
    const auto& raw_path = fields[column["path"]];
    if (raw_path.empty()) throw IngestionError(where + "empty path");
    rec.image_path = std::filesystem::path(raw_path).is_absolute() ? std::filesystem::path(raw_path) : base / raw_path;

    const auto& age_text = fields[column["age_years"]];
    size_t consumed = 0;
    try {
      rec.age_years = std::stod(age_text, &consumed);
    } catch (const std::exception&) {
      consumed = 0;
    }
    if (consumed == 0 || consumed != age_text.size()) {
      throw IngestionError(where + "age_years '" + age_text + "' is not a number");
    }
    if (!(rec.age_years >= 0.0) || rec.age_years > kMaxAgeYears) {
      throw IngestionError(where + "age_years " + age_text + " outside [0, 19.999]");
    }

    const auto split_text = optional_field(fields, "split");
    if (!split_text.empty()) {
      rec.split = parse_split(split_text);
      if (!rec.split) throw IngestionError(where + "unknown split '" + split_text + "'");
    }
    rec.dataset_tag = optional_field(fields, "dataset_tag");

    if (!std::filesystem::exists(rec.image_path)) {
      throw IngestionError(where + "missing image file " + rec.image_path.string());
    }
    if (!seen.insert(rec.image_path.lexically_normal().string()).second) {
      out.warnings.push_back(where + "duplicate image_path " + raw_path + " (kept)");
    }
    if (rec.split) {
      ++out.split_counts[static_cast<size_t>(*rec.split)];
    } else {
      ++out.unassigned;
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<SampleRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write manifest " + path.string());
  const auto base = path.parent_path();
  out << "path,age_years,split,dataset_tag\n";
  for (const auto& r : records) {
    auto p = r.image_path;
    if (p.is_absolute() && !base.empty()) {
      auto rel = p.lexically_relative(std::filesystem::absolute(base));
      if (!rel.empty() && *rel.begin() != "..") p = rel;
    }
    std::ostringstream age;
    age.precision(10);
    age << r.age_years;
    out << csv_escape(p.generic_string()) << ',' << age.str() << ','
        << (r.split ? std::string(split_name(*r.split)) : std::string()) << ','
        << csv_escape(r.dataset_tag) << '\n';
  }
}

// ---------------------------------------------------------------------------

uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  auto splitmix = [](uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

namespace {

// Fisher-Yates driven by splitmix64 so the permutation does not depend on the
// standard library's distribution implementations.
std::vector<size_t> seeded_permutation(size_t n, uint64_t seed) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  uint64_t state = seed;
  for (size_t i = n; i > 1; --i) {
    state = mix_seed(state, i);
    std::swap(idx[i - 1], idx[state % i]);
  }
  return idx;
}

}  // namespace

DatasetSplits split_dataset(const std::vector<SampleRecord>& records,
                            const std::array<double, 3>& ratios, uint64_t seed) {
  if (records.empty()) throw ContractError("split_dataset: no records");
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-6) {
    throw ConfigError("split ratios must sum to 1");
  }
  const auto n = records.size();
  const auto n_train = std::min(n, static_cast<size_t>(std::llround(ratios[0] * n)));
  const auto n_val = std::min(n - n_train, static_cast<size_t>(std::llround(ratios[1] * n)));
  DatasetSplits out;
  const auto order = seeded_permutation(n, seed);
  for (size_t i = 0; i < n; ++i) {
    auto rec = records[order[i]];
    if (i < n_train) {
      rec.split = Split::kTrain;
      out.train.push_back(std::move(rec));
    } else if (i < n_train + n_val) {
      rec.split = Split::kVal;
      out.val.push_back(std::move(rec));
    } else {
      rec.split = Split::kTest;
      out.test.push_back(std::move(rec));
    }
  }
  return out;
}

DatasetSplits assign_splits(const std::vector<SampleRecord>& records,
                            const std::array<double, 3>& ratios, uint64_t seed) {
  DatasetSplits out;
  std::vector<SampleRecord> pending;
  for (const auto& r : records) {
    if (!r.split) {
      pending.push_back(r);
      continue;
    }
    switch (*r.split) {
      case Split::kTrain: out.train.push_back(r); break;
      case Split::kVal: out.val.push_back(r); break;
      case Split::kTest: out.test.push_back(r); break;
    }
  }
  if (!pending.empty()) {
    auto extra = split_dataset(pending, ratios, seed);
    out.train.insert(out.train.end(), extra.train.begin(), extra.train.end());
    out.val.insert(out.val.end(), extra.val.begin(), extra.val.end());
    out.test.insert(out.test.end(), extra.test.begin(), extra.test.end());
  }
  return out;
}

// ---------------------------------------------------------------------------

torch::Tensor preprocess(const GrayImage& raw, int size) {
  if (raw.empty() || raw.width < 1 || raw.height < 1) throw IngestionError("empty image");
  const auto resized = (raw.width == size && raw.height == size) ? raw : resize_bilinear(raw, size, size);
  return to_model_tensor(resized);
}

AugmentOp make_augment_op(std::string_view name, double magnitude) {
  if (std::find(kAugmentOps.begin(), kAugmentOps.end(), name) == kAugmentOps.end()) {
    throw ConfigError("unknown augmentation op '" + std::string(name) + "'");
  }
  return {std::string(name), magnitude};
}

AugmentPlan sample_augment_plan(uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(-5.0, 5.0);
  std::uniform_real_distribution<double> factor(0.7, 1.3);
  std::uniform_int_distribution<int> bits(4, 7);
  AugmentPlan plan;
  plan.rotation_degrees = angle(rng);
  std::vector<std::string_view> pool(kAugmentOps.begin(), kAugmentOps.end());
  for (int k = 0; k < 2; ++k) {
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    const auto i = pick(rng);
    const auto name = pool[i];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(i));
    double magnitude = 1.0;
    if (name == "posterize") {
      magnitude = bits(rng);
    } else if (name != "auto-contrast") {
      magnitude = factor(rng);
    }
    plan.ops.push_back(make_augment_op(name, magnitude));
  }
  return plan;
}

namespace {

GrayImage rotate(const GrayImage& img, double degrees) {
  if (degrees == 0.0) return img;
  const double rad = degrees * M_PI / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
  GrayImage out(img.width, img.height, 0.0f);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      // Inverse map the output pixel into the source.
      const double dx = x - cx, dy = y - cy;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      if (sx < 0 || sy < 0 || sx > img.width - 1 || sy > img.height - 1) continue;
      const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
      const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
      const double wx = sx - x0, wy = sy - y0;
      out.at(x, y) = static_cast<float>(
          (img.at(x0, y0) * (1 - wx) + img.at(x1, y0) * wx) * (1 - wy) +
          (img.at(x0, y1) * (1 - wx) + img.at(x1, y1) * wx) * wy);
    }
  }
  return out;
}

void clip(GrayImage& img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 255.0f);
}

// Blend towards `degenerate`: out = degenerate + factor (img - degenerate).
void blend(GrayImage& img, const std::vector<float>& degenerate, double factor) {
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = static_cast<float>(degenerate[i] + factor * (img.pixels[i] - degenerate[i]));
  }
}

void apply_op(GrayImage& img, const AugmentOp& op) {
  if (op.name == "auto-contrast") {
    const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    const float a = *lo, b = *hi;
    if (b > a) {
      for (auto& v : img.pixels) v = (v - a) * 255.0f / (b - a);
    }
  } else if (op.name == "contrast") {
    const double mean = std::accumulate(img.pixels.begin(), img.pixels.end(), 0.0) / img.pixels.size();
    blend(img, std::vector<float>(img.pixels.size(), static_cast<float>(mean)), op.magnitude);
  } else if (op.name == "brightness") {
    blend(img, std::vector<float>(img.pixels.size(), 0.0f), op.magnitude);
  } else if (op.name == "sharpness") {
    // Smoothing kernel [1 1 1; 1 5 1; 1 1 1] / 13 on the interior; borders stay put.
    std::vector<float> smooth = img.pixels;
    for (int y = 1; y + 1 < img.height; ++y) {
      for (int x = 1; x + 1 < img.width; ++x) {
        double acc = 4.0 * img.at(x, y);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) acc += img.at(x + dx, y + dy);
        smooth[static_cast<size_t>(y) * img.width + x] = static_cast<float>(acc / 13.0);
      }
    }
    blend(img, smooth, op.magnitude);
  } else if (op.name == "posterize") {
    const int bits = std::clamp(static_cast<int>(op.magnitude), 1, 8);
    const int mask = ~((1 << (8 - bits)) - 1) & 0xff;
    for (auto& v : img.pixels) {
      v = static_cast<float>(static_cast<int>(std::lround(std::clamp(v, 0.0f, 255.0f))) & mask);
    }
  } else {
    throw ConfigError("unknown augmentation op '" + op.name + "'");
  }
  clip(img);
}

}  // namespace

torch::Tensor apply_augment(const torch::Tensor& image, const AugmentPlan& plan) {
  const bool had_channel = image.dim() == 3;
  auto img = rotate(from_model_tensor(image), plan.rotation_degrees);
  for (const auto& op : plan.ops) apply_op(img, op);
  auto out = to_model_tensor(img).clamp(-1.0, 1.0);
  return had_channel ? out : out.squeeze(0);
}

torch::Tensor augment(const torch::Tensor& image, uint64_t seed) {
  return apply_augment(image, sample_augment_plan(seed));
}

// ---------------------------------------------------------------------------

ImageDataset ImageDataset::subset(const std::vector<int64_t>& indices) const {
  ImageDataset out;
  out.images = images.index_select(0, torch::tensor(indices, torch::kLong));
  for (auto i : indices) {
    out.bins.push_back(bins[static_cast<size_t>(i)]);
    out.ages.push_back(ages[static_cast<size_t>(i)]);
    if (!records.empty()) out.records.push_back(records[static_cast<size_t>(i)]);
  }
  return out;
}

ImageDataset load_images(const std::vector<SampleRecord>& records, int size, int num_bins) {
  ImageDataset out;
  std::vector<torch::Tensor> images;
  images.reserve(records.size());
  for (const auto& r : records) {
    images.push_back(preprocess(read_png(r.image_path), size));
    out.bins.push_back(bin_age(r.age_years, num_bins));
    out.ages.push_back(r.age_years);
    out.records.push_back(r);
  }
  out.images = images.empty() ? torch::empty({0, 1, size, size}) : torch::stack(images);
  return out;
}

}  // namespace bapgan
