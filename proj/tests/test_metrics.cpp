#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <torch/torch.h>

#include "bapgan/checkpoint.hpp"
#include "bapgan/errors.hpp"
#include "bapgan/evaluation.hpp"
#include "bapgan/metrics.hpp"
#include "bapgan/trainer.hpp"
#include "bapgan/tsne.hpp"
#include "test_support.hpp"

using namespace bapgan;
using bapgan::testutil::TempDir;

namespace {

FeatureStats stats(Eigen::VectorXd mean, Eigen::MatrixXd cov) {
  FeatureStats s;
  s.n = 100;
  s.mean = std::move(mean);
  s.cov = std::move(cov);
  return s;
}

// Trace of (A B)^{1/2} from the eigenvalues of the non-symmetric product.
double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(a * b);
  double t = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) t += std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
  return t;
}

double fid_oracle(const FeatureStats& a, const FeatureStats& b) {
  return (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2 * trace_sqrt_product(a.cov, b.cov);
}

Eigen::MatrixXd random_spd(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Eigen::MatrixXd g(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g(i, j) = n(rng);
  return g * g.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

Eigen::VectorXd random_vec(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v(i) = n(rng);
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Frechet distance

TEST(Frechet, IdenticalStatsGiveZero) {
  std::mt19937_64 rng(1);
  const auto s = stats(random_vec(6, rng), random_spd(6, rng));
  EXPECT_LT(frechet_distance(s, s), 1e-9);
}

TEST(Frechet, AnalyticMeanShifts) {
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(2, 2);
  EXPECT_NEAR(frechet_distance(stats(Eigen::Vector2d(0, 0), eye), stats(Eigen::Vector2d(1, 0), eye)), 1.0, 1e-6);
  EXPECT_NEAR(frechet_distance(stats(Eigen::Vector2d(0, 0), eye), stats(Eigen::Vector2d(3, 4), eye)), 25.0, 1e-6);
}

TEST(Frechet, FrozenFiveDimensionalOracle) {
  // Statistics and reference value from tests/oracles/fid_oracle.py (scipy sqrtm).
  Eigen::VectorXd mu_a(5), mu_b(5);
  mu_a << -0.3269673054182518, -0.9743151135198309, 0.49458774095422053, 0.42498994033700543,
      -0.44121902020898357;
  mu_b << -0.09967550426459997, -1.8036922783781175, -0.8823798545837249, 0.21658812346361556,
      0.5955474978335934;
  Eigen::MatrixXd sa(5, 5), sb(5, 5);
  sa << 0.6893893445161262, 0.2920668798839287, 0.6236505845238495, -0.8919803216968875,
      -0.13444940301343786, 0.2920668798839287, 1.0014602927580947, 0.6341582806097102,
      -0.7398277648979578, -0.07357843225102277, 0.6236505845238495, 0.6341582806097102,
      1.0217968316662212, -1.138108348867006, -0.17056532559008453, -0.8919803216968875,
      -0.7398277648979578, -1.138108348867006, 1.8923096389135303, -0.04692344930896273,
      -0.13444940301343786, -0.07357843225102277, -0.17056532559008453, -0.04692344930896273,
      0.5835562704753194;
  sb << 1.943737961572396, -0.4989173350165584, -0.10716230656763999, -0.4070188063325328,
      -0.017345235637568727, -0.4989173350165584, 1.0868505825659402, 0.07321748418792828,
      0.6952732259699347, 0.003352073898884704, -0.10716230656763999, 0.07321748418792828,
      0.19580903342948613, 0.03553641983279822, 0.05675511271762925, -0.4070188063325328,
      0.6952732259699347, 0.03553641983279822, 0.8614989276569057, -0.089074309440377,
      -0.017345235637568727, 0.003352073898884704, 0.05675511271762925, -0.089074309440377,
      0.9445196525441087;
  const auto a = stats(mu_a, sa), b = stats(mu_b, sb);
  EXPECT_NEAR(frechet_distance(a, b), 6.437793788226303, 1e-6);
  EXPECT_NEAR(fid_oracle(a, b), 6.437793788226303, 1e-6);
}

TEST(Frechet, RandomCasesAgreeWithNonsymmetricOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + trial % 7;
    const auto a = stats(random_vec(d, rng), random_spd(d, rng));
    const auto b = stats(random_vec(d, rng), random_spd(d, rng));
    const double f = frechet_distance(a, b);
    EXPECT_NEAR(f, fid_oracle(a, b), 1e-6);
    EXPECT_NEAR(f, frechet_distance(b, a), 1e-9);
    EXPECT_GE(f, 0.0);
  }
}

TEST(Frechet, SingularCovarianceStaysNonNegative) {
  Eigen::MatrixXd low = Eigen::MatrixXd::Zero(3, 3);
  low(0, 0) = 1;
  EXPECT_GE(frechet_distance(stats(Eigen::Vector3d::Zero(), low), stats(Eigen::Vector3d::Zero(), low)), 0.0);
  EXPECT_LT(frechet_distance(stats(Eigen::Vector3d::Zero(), low), stats(Eigen::Vector3d::Zero(), low)), 1e-9);
}

TEST(Frechet, DimensionMismatch) {
  EXPECT_THROW(frechet_distance(stats(Eigen::Vector2d::Zero(), Eigen::MatrixXd::Identity(2, 2)),
                                stats(Eigen::Vector3d::Zero(), Eigen::MatrixXd::Identity(3, 3))),
               DimensionError);
}

TEST(Frechet, SameDistributionDistanceShrinksWithSampleSize) {
  // Mean over seeds of the distance between two samples of one Gaussian.
  const int d = 4;
  std::vector<double> means;
  for (int n : {20, 80, 320}) {
    double total = 0;
    for (int seed = 0; seed < 5; ++seed) {
      std::mt19937_64 rng(static_cast<uint64_t>(seed) * 1000 + n);
      std::normal_distribution<double> g;
      Eigen::MatrixXd a(n, d), b(n, d);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
          a(i, j) = g(rng);
          b(i, j) = g(rng);
        }
      total += frechet_distance(feature_stats(a), feature_stats(b));
    }
    means.push_back(total / 5);
  }
  EXPECT_GT(means[0], means[1]);
  EXPECT_GT(means[1], means[2]);
}

TEST(FeatureStats, UnbiasedCovariance) {
  Eigen::MatrixXd f(4, 1);
  f << 1, 2, 3, 4;
  const auto s = feature_stats(f);
  EXPECT_DOUBLE_EQ(s.mean(0), 2.5);
  EXPECT_DOUBLE_EQ(s.cov(0, 0), 5.0 / 3.0);
  EXPECT_THROW(feature_stats(Eigen::MatrixXd(1, 3)), ContractError);
}

// ---------------------------------------------------------------------------
// Feature extraction

TEST(Features, DeskExtractorShapeAndPooling) {
  const auto ex = make_extractor(kDeskExtractor);
  const auto imgs = torch::rand({10, 1, 64, 64}) * 2 - 1;
  const auto f = extract_features(imgs, *ex);
  EXPECT_EQ(f.rows(), 10);
  EXPECT_EQ(f.cols(), 64);
  const auto constant = extract_features(torch::full({1, 1, 64, 64}, 0.5), *ex);
  EXPECT_NEAR(constant.maxCoeff(), 0.75, 1e-12);
  EXPECT_NEAR(constant.minCoeff(), 0.75, 1e-12);
  // Rows follow their images.
  const auto perm = torch::tensor({3, 1, 4, 0, 2, 9, 8, 7, 6, 5}, torch::kLong);
  const auto fp = extract_features(imgs.index_select(0, perm), *ex);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(fp.row(i), f.row(perm[i].item<int64_t>()));
}

TEST(Features, PretrainedInceptionNeedsWeights) {
  try {
    make_extractor(kInceptionExtractor);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("--inception-weights"), std::string::npos);
  }
  EXPECT_THROW(make_extractor(kInceptionExtractor, std::filesystem::path("/nonexistent.pt")), ConfigError);
  EXPECT_THROW(make_extractor("vgg"), ConfigError);
}

TEST(Features, UntrainedReconstructionIsFarFromReal) {
  const auto cfg = testutil::small_config();
  const auto p = init_params(cfg, 1);
  ImageDataset d;
  std::vector<torch::Tensor> imgs;
  for (int i = 0; i < 40; ++i) {
    imgs.push_back(to_model_tensor(generate_phantom({i * 0.45, static_cast<uint64_t>(i), 16, 3}).image));
    d.bins.push_back(bin_age(i * 0.45));
  }
  d.images = torch::stack(imgs);
  const auto ex = make_extractor(kDeskExtractor);
  EXPECT_LT(fid(d.images, d.images, *ex), 1e-9);
  const auto recon = age_invariant_reconstruct(p, d.images, d.bins);
  EXPECT_EQ(recon.sizes(), d.images.sizes());
  EXPECT_GT(fid(d.images, recon, *ex), 1.0);
}

// ---------------------------------------------------------------------------
// Age shifting

TEST(AgeShift, TargetBins) {
  EXPECT_EQ(shifted_bin(1, 8, 5), 3);
  EXPECT_EQ(shifted_bin(2, -8, 5), 0);
  EXPECT_THROW(shifted_bin(4, 8, 5), RangeError);
  EXPECT_THROW(shifted_bin(1, -8, 5), RangeError);
  EXPECT_THROW(shifted_bin(1, 6, 5), ConfigError);
  const auto p = init_params(testutil::small_config(), 2);
  EXPECT_THROW(progress_image(p, torch::zeros({1, 16, 16}), 4, 8), RangeError);
  EXPECT_EQ(progress_image(p, torch::zeros({1, 16, 16}), 1, 8).sizes(), (std::vector<int64_t>{1, 16, 16}));
}

TEST(AgeShift, UsesPureOneHotTarget) {
  const auto p = init_params(testutil::small_config(), 3);
  const auto x = torch::rand({2, 1, 16, 16}) * 2 - 1;
  torch::NoGradGuard guard;
  const auto expected = generate(p, encode(p, x), one_hot_labels({3, 3}, 5));
  EXPECT_TRUE(torch::equal(progress_images(p, x, {1, 1}, 8), expected));
}

TEST(GapMeasure, EdgeCases) {
  EXPECT_EQ(measure_gap_width(torch::ones({1, 32, 32})), 0);
  EXPECT_EQ(measure_gap_width(-torch::ones({32, 32})), 32);
  EXPECT_THROW(measure_gap_width(torch::zeros({2, 1, 8, 8})), DimensionError);
}

// ---------------------------------------------------------------------------
// t-SNE

TEST(Tsne, BandwidthsHitTargetEntropy) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  Eigen::MatrixXd x(200, 20);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng) * (1 + (i % 7));
  const auto aff = calibrate_affinities(x, 50.0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    EXPECT_NEAR(aff.entropy[static_cast<size_t>(i)], std::log(50.0), 1e-3);
    EXPECT_NEAR(aff.p.row(i).sum(), 1.0, 1e-12);
    EXPECT_EQ(aff.p(i, i), 0.0);
    // Recompute the entropy from the returned row.
    double h = 0;
    for (Eigen::Index j = 0; j < x.rows(); ++j) {
      const double v = aff.p(i, j);
      if (v > 0) h -= v * std::log(v);
    }
    EXPECT_NEAR(h, std::log(50.0), 1e-3);
  }
}

TEST(Tsne, DeterministicCentredAndShaped) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  Eigen::MatrixXd x(60, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
  TsneOptions opt;
  opt.perplexity = 10;
  opt.steps = 120;
  opt.seed = 9;
  const auto a = tsne_embed(x, opt);
  const auto b = tsne_embed(x, opt);
  EXPECT_EQ(a.rows(), 60);
  EXPECT_EQ(a.cols(), 2);
  EXPECT_TRUE(a == b);
  EXPECT_TRUE(a.allFinite());
  EXPECT_LT(a.colwise().mean().norm(), 1e-9);
  opt.seed = 10;
  EXPECT_FALSE(a == tsne_embed(x, opt));
}

TEST(Tsne, PerplexityTooLarge) {
  TsneOptions opt;
  opt.perplexity = 50;
  EXPECT_THROW(tsne_embed(Eigen::MatrixXd::Random(150, 3), opt), ConfigError);
}

TEST(Tsne, SeparatesTwoDistantClusters) {
  // Fixture and reference ratio (16.34 with scikit-learn's exact t-SNE) from
  // tests/oracles/tsne_two_clusters.py.
  std::ifstream in(std::string(BAPGAN_ORACLE_DIR) + "/two_clusters.csv");
  ASSERT_TRUE(in) << "missing two_clusters.csv";
  std::vector<int> labels;
  std::vector<std::vector<double>> rows;
  for (std::string line; std::getline(in, line);) {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    labels.push_back(std::stoi(cell));
    rows.emplace_back();
    while (std::getline(ss, cell, ',')) rows.back().push_back(std::stod(cell));
  }
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j) x(i, j) = rows[i][j];
  TsneOptions opt;
  opt.seed = 0;
  const auto y = tsne_embed(x, opt);
  Eigen::Vector2d c[2] = {Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()};
  int n[2] = {0, 0};
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    c[labels[i]] += y.row(i).transpose();
    ++n[labels[i]];
  }
  c[0] /= n[0];
  c[1] /= n[1];
  double intra = 0;
  int pairs = 0;
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    for (Eigen::Index j = i + 1; j < y.rows(); ++j)
      if (labels[i] == labels[j]) {
        intra += (y.row(i) - y.row(j)).norm();
        ++pairs;
      }
  const double ratio = (c[0] - c[1]).norm() / (intra / pairs);
  EXPECT_GT(ratio, 5.0);
}

// ---------------------------------------------------------------------------
// Ablation report

namespace {

std::map<AblationRow, std::filesystem::path> write_row_checkpoints(const std::filesystem::path& dir) {
  std::map<AblationRow, std::filesystem::path> out;
  for (auto row : kAblationRows) {
    TrainConfig cfg;
    cfg.model = ModelConfig::for_row(row, testutil::small_config());
    const auto path = dir / std::string(ablation_row_tag(row));
    save_checkpoint(make_train_state(cfg, 1), cfg, path / "checkpoints" / "final");
    out[row] = path;
  }
  return out;
}

ImageDataset small_phantoms(int n) {
  ImageDataset d;
  std::vector<torch::Tensor> imgs;
  for (int i = 0; i < n; ++i) {
    const double age = 19.9 * i / n;
    imgs.push_back(to_model_tensor(generate_phantom({age, static_cast<uint64_t>(i), 16, 3}).image));
    d.bins.push_back(bin_age(age));
  }
  d.images = torch::stack(imgs);
  return d;
}

}  // namespace

TEST(Ablation, FourRowsInTableOrder) {
  TempDir dir;
  const auto ckpts = write_row_checkpoints(dir.path());
  const auto ex = make_extractor(kDeskExtractor);
  auto report = ablation_report(small_phantoms(20), ckpts, *ex);
  ASSERT_EQ(report.rows.size(), 4u);
  for (size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(report.rows[i].row, kAblationRows[i]);
    EXPECT_TRUE(std::isfinite(report.rows[i].fid));
  }
  const auto csv = report.to_csv();
  std::stringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "Model,D_age,LS,SA,FID");
  std::getline(ss, line);
  EXPECT_EQ(line.rfind("\"CAAE\",no,no,no,", 0), 0u) << line;
  std::getline(ss, line);
  EXPECT_EQ(line.rfind("\"+ D_age, LS\",yes,yes,no,", 0), 0u) << line;
  std::getline(ss, line);
  EXPECT_EQ(line.rfind("\"+ SA\",no,no,yes,", 0), 0u) << line;
  std::getline(ss, line);
  EXPECT_EQ(line.rfind("\"BAPGAN\",yes,yes,yes,", 0), 0u) << line;
  EXPECT_NE(report.to_text().find("BAPGAN"), std::string::npos);
}

TEST(Ablation, MissingCheckpointNamesRow) {
  TempDir dir;
  auto ckpts = write_row_checkpoints(dir.path());
  std::filesystem::remove_all(ckpts[AblationRow::kSa]);
  const auto ex = make_extractor(kDeskExtractor);
  try {
    ablation_report(small_phantoms(10), ckpts, *ex);
    FAIL() << "expected NotFoundError";
  } catch (const NotFoundError& e) {
    EXPECT_NE(std::string(e.what()).find("+ SA"), std::string::npos) << e.what();
  }
}

TEST(Ablation, FlagMismatchIsRejected) {
  TempDir dir;
  auto ckpts = write_row_checkpoints(dir.path());
  std::swap(ckpts[AblationRow::kCaae], ckpts[AblationRow::kBapgan]);
  const auto ex = make_extractor(kDeskExtractor);
  EXPECT_THROW(ablation_report(small_phantoms(10), ckpts, *ex), ConfigError);
}
