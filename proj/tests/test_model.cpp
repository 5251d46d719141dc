#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "bapgan/errors.hpp"
#include "bapgan/model.hpp"
#include "bapgan/objectives.hpp"
#include "bapgan/self_attention.hpp"
#include "bapgan/spectral_norm.hpp"
#include "test_support.hpp"

using namespace bapgan;

namespace {

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  auto m = t.detach().to(torch::kFloat64).contiguous();
  Eigen::MatrixXd out(m.size(0), m.size(1));
  for (int64_t i = 0; i < m.size(0); ++i)
    for (int64_t j = 0; j < m.size(1); ++j) out(i, j) = m[i][j].item<double>();
  return out;
}

double top_singular_value(const torch::Tensor& w) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(w.reshape({w.size(0), -1})));
  return svd.singularValues()(0);
}

}  // namespace

// ---------------------------------------------------------------------------
// Spectral normalization

TEST(SpectralNorm, PersistentPowerIterationMatchesSvd) {
  auto gen = at::detail::createCPUGenerator(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto w = torch::randn({64, 64}, gen, torch::kFloat64);
    auto u = random_unit_vector(64, gen, torch::kFloat64);
    SpectralNormResult r;
    // u persists across calls as it does across training steps.
    for (int call = 0; call < 50; ++call) {
      r = spectral_normalize(w, u, 10);
      u = r.u;
    }
    const double oracle = top_singular_value(w);
    EXPECT_NEAR(r.sigma.item<double>(), oracle, 0.01 * oracle);
    EXPECT_LE(top_singular_value(r.weight), 1.01);
    EXPECT_NEAR(u.norm().item<double>(), 1.0, 1e-9);
  }
}

TEST(SpectralNorm, DiagonalAndIdentity) {
  const auto u0 = torch::tensor({0.6, 0.8}, torch::kFloat64);
  const auto d = spectral_normalize(torch::diag(torch::tensor({3.0, 1.0}, torch::kFloat64)), u0, 60);
  EXPECT_NEAR(d.sigma.item<double>(), 3.0, 1e-12);
  EXPECT_NEAR(top_singular_value(d.weight), 1.0, 1e-12);
  const auto eye = torch::eye(4, torch::kFloat64);
  const auto i = spectral_normalize(eye, torch::full({4}, 0.5, torch::kFloat64), 1);
  EXPECT_NEAR(i.sigma.item<double>(), 1.0, 1e-12);
  EXPECT_TRUE(torch::allclose(i.weight, eye, 0, 1e-12));
}

TEST(SpectralNorm, ConvKernelIsFlattenedByOutputChannel) {
  auto gen = at::detail::createCPUGenerator(3);
  const auto w = torch::randn({8, 3, 5, 5}, gen, torch::kFloat64);
  const auto r = spectral_normalize(w, random_unit_vector(8, gen, torch::kFloat64), 200);
  EXPECT_EQ(r.weight.sizes(), w.sizes());
  EXPECT_NEAR(r.sigma.item<double>(), top_singular_value(w), 1e-6);
}

TEST(SpectralNorm, ZeroMatrixStaysFinite) {
  auto gen = at::detail::createCPUGenerator(5);
  const auto u = random_unit_vector(4, gen, torch::kFloat32);
  const auto r = spectral_normalize(torch::zeros({4, 6}), u, 3);
  EXPECT_TRUE(torch::isfinite(r.weight).all().item<bool>());
  EXPECT_EQ(r.weight.abs().max().item<float>(), 0.0f);
  EXPECT_NEAR(r.sigma.item<double>(), kSigmaFloor, 1e-18);
  EXPECT_TRUE(torch::equal(r.u, u));
}

TEST(SpectralNorm, RejectsBadArguments) {
  auto gen = at::detail::createCPUGenerator(5);
  const auto w = torch::randn({4, 6});
  EXPECT_THROW(spectral_normalize(w, random_unit_vector(4, gen, torch::kFloat32), 0), ContractError);
  EXPECT_THROW(spectral_normalize(w, random_unit_vector(5, gen, torch::kFloat32), 1), DimensionError);
}

TEST(SpectralNorm, DifferentiableWeightAgreesWithNoGradPath) {
  auto gen = at::detail::createCPUGenerator(8);
  const auto w = torch::randn({6, 10}, gen, torch::kFloat64);
  auto u = random_unit_vector(6, gen, torch::kFloat64);
  for (int i = 0; i < 50; ++i) u = spectral_normalize(w, u, 1).u;
  const auto a = spectral_normalize(w, u, 1);
  // Same u in both paths: W / |W^T u|.
  const auto b = spectral_weight(w, a.u);
  const auto sigma = torch::mv(w.t(), a.u).norm();
  EXPECT_TRUE(torch::allclose(b, w / sigma, 1e-12, 1e-12));
}

// ---------------------------------------------------------------------------
// Self-attention

namespace {

SelfAttentionWeights random_attention(int64_t c, int r, torch::Generator& gen, double gamma) {
  SelfAttentionWeights w;
  w.query_w = torch::randn({c / r, c}, gen, torch::kFloat32);
  w.query_b = torch::randn({c / r}, gen, torch::kFloat32);
  w.key_w = torch::randn({c / r, c}, gen, torch::kFloat32);
  w.key_b = torch::randn({c / r}, gen, torch::kFloat32);
  w.value_w = torch::randn({c, c}, gen, torch::kFloat32);
  w.value_b = torch::randn({c}, gen, torch::kFloat32);
  w.gamma = torch::full({}, gamma, torch::kFloat32);
  return w;
}

}  // namespace

TEST(SelfAttention, ZeroGateIsIdentityAndRowsAreDistributions) {
  auto gen = at::detail::createCPUGenerator(21);
  for (int trial = 0; trial < 10; ++trial) {
    const auto f = torch::randn({2, 16, 6, 5}, gen, torch::kFloat32);
    const auto out = self_attention_full(f, random_attention(16, 8, gen, 0.0));
    EXPECT_LT((out.output - f).abs().max().item<float>(), 1e-7f);
    EXPECT_EQ(out.attention.sizes(), (std::vector<int64_t>{2, 30, 30}));
    EXPECT_LT((out.attention.sum(-1) - 1.0).abs().max().item<float>(), 1e-6f);
    EXPECT_GE(out.attention.min().item<float>(), 0.0f);
  }
}

TEST(SelfAttention, SinglePositionAttendsToItself) {
  auto gen = at::detail::createCPUGenerator(23);
  const auto f = torch::randn({1, 4, 1, 1}, gen, torch::kFloat32);
  const auto w = random_attention(4, 2, gen, 0.7);
  const auto out = self_attention_full(f, w);
  EXPECT_FLOAT_EQ(out.attention.item<float>(), 1.0f);
  const auto h = torch::mv(w.value_w, f.view({4})) + w.value_b;
  EXPECT_TRUE(torch::allclose(out.output.view({4}), f.view({4}) + 0.7 * h, 1e-5, 1e-6));
}

TEST(SelfAttention, NonzeroGateMixesPositions) {
  auto gen = at::detail::createCPUGenerator(22);
  const auto f = torch::randn({1, 8, 4, 4}, gen, torch::kFloat32);
  const auto w = random_attention(8, 2, gen, 0.5);
  const auto out = self_attention(f, w);
  EXPECT_GT((out - f).abs().max().item<float>(), 1e-3f);
  // Permuting spatial positions permutes the output the same way.
  const auto perm = torch::randperm(16, gen, torch::kLong);
  const auto fp = f.flatten(2).index_select(2, perm).view({1, 8, 4, 4});
  const auto op = out.flatten(2).index_select(2, perm).view({1, 8, 4, 4});
  EXPECT_TRUE(torch::allclose(self_attention(fp, w), op, 1e-4, 1e-5));
}

TEST(SelfAttention, ChannelsMustDivideByReduction) {
  EXPECT_THROW(check_attention_channels(12, 8), ConfigError);
  EXPECT_NO_THROW(check_attention_channels(16, 8));
}

// ---------------------------------------------------------------------------
// Configuration

TEST(ModelConfig, AblationRowsSetTheFlagTriples) {
  const ModelConfig base;
  EXPECT_EQ(ModelConfig::for_row(AblationRow::kCaae, base).flags(), (std::array<bool, 3>{false, false, false}));
  EXPECT_EQ(ModelConfig::for_row(AblationRow::kDageLs, base).flags(), (std::array<bool, 3>{true, true, false}));
  EXPECT_EQ(ModelConfig::for_row(AblationRow::kSa, base).flags(), (std::array<bool, 3>{false, false, true}));
  EXPECT_EQ(ModelConfig::for_row(AblationRow::kBapgan, base).flags(), (std::array<bool, 3>{true, true, true}));
  EXPECT_FALSE(ModelConfig::for_row(AblationRow::kCaae, base).use_sn);
  EXPECT_EQ(ablation_row_name(AblationRow::kBapgan), "BAPGAN");
  EXPECT_EQ(ablation_row_tag(AblationRow::kDageLs), "dage_ls");
}

TEST(ModelConfig, ValidateRejectsBadShapes) {
  ModelConfig c = ModelConfig::desk();
  c.image_size = 48;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::desk();
  c.sa_resolution = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::desk();
  c.num_age_bins = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(ModelConfig::full_scale().validate());
  EXPECT_NO_THROW(ModelConfig::desk().validate());
}

TEST(ModelConfig, JsonRoundTrip) {
  auto c = testutil::small_config();
  c.use_ls = false;
  c.smoothing = 0.1;
  const nlohmann::json j = c;
  const auto back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

// ---------------------------------------------------------------------------
// Networks

TEST(Model, ShapesAndRanges) {
  for (const auto& config : {testutil::tiny_config(), testutil::small_config(), ModelConfig::desk()}) {
    const auto p = init_params(config, 1);
    const int s = config.image_size;
    auto x = torch::rand({3, 1, s, s}) * 2 - 1;
    const auto z = encode(p, x);
    EXPECT_EQ(z.sizes(), (std::vector<int64_t>{3, config.latent_dim}));
    EXPECT_LE(z.abs().max().item<float>(), 1.0f);
    const auto l = one_hot_labels({0, 1, config.num_age_bins - 1}, config.num_age_bins);
    const auto y = generate(p, z, l);
    EXPECT_EQ(y.sizes(), x.sizes());
    EXPECT_LE(y.abs().max().item<float>(), 1.0f);
    const auto did = discriminate_identity(p, z);
    EXPECT_EQ(did.sizes(), (std::vector<int64_t>{3}));
    const auto judged = discriminate_image(p, x, l);
    EXPECT_EQ(judged.realness.sizes(), (std::vector<int64_t>{3}));
    EXPECT_GT(judged.realness.min().item<float>(), 0.0f);
    EXPECT_LT(judged.realness.max().item<float>(), 1.0f);
    ASSERT_TRUE(judged.age_logits.has_value());
    EXPECT_EQ(judged.age_logits->sizes(), (std::vector<int64_t>{3, config.num_age_bins}));
  }
}

TEST(Model, FullScaleForward) {
  const auto p = init_params(ModelConfig::full_scale(), 2);
  torch::NoGradGuard guard;
  const auto x = torch::zeros({1, 1, 128, 128});
  const auto y = generate(p, encode(p, x), one_hot_labels({2}, 5));
  EXPECT_EQ(y.sizes(), x.sizes());
}

TEST(Model, AgeHeadOnlyWithDage) {
  const auto c = ModelConfig::for_row(AblationRow::kCaae, testutil::small_config());
  const auto p = init_params(c, 3);
  const auto x = torch::zeros({2, 1, 16, 16});
  EXPECT_FALSE(discriminate_image(p, x, one_hot_labels({0, 1}, 5)).age_logits.has_value());
  EXPECT_TRUE(p.names_of(Network::kAgeDiscriminator).empty());
  EXPECT_TRUE(p.sn_vectors.empty());
}

TEST(Model, SelfAttentionStartsClosed) {
  const auto p = init_params(testutil::small_config(), 4);
  int gates = 0;
  for (const auto& [name, t] : p.weights) {
    if (name.ends_with(".sa.gamma")) {
      ++gates;
      EXPECT_EQ(t.item<float>(), 0.0f);
    }
  }
  EXPECT_EQ(gates, 2);  // G and the D trunk
}

TEST(Model, SpectralVectorsCoverDiscriminatorWeightsOnly) {
  const auto p = init_params(testutil::small_config(), 5);
  ASSERT_FALSE(p.sn_vectors.empty());
  for (const auto& [name, u] : p.sn_vectors) {
    const auto net = network_of(name);
    EXPECT_TRUE(net == Network::kIdDiscriminator || net == Network::kImgDiscriminator ||
                net == Network::kAgeDiscriminator)
        << name;
    EXPECT_EQ(u.size(0), p.at(name).size(0));
  }
}

TEST(Model, InitIsSeeded) {
  const auto a = init_params(testutil::small_config(), 9);
  const auto b = init_params(testutil::small_config(), 9);
  const auto c = init_params(testutil::small_config(), 10);
  bool any_diff = false;
  for (const auto& [name, t] : a.weights) {
    EXPECT_TRUE(torch::equal(t, b.at(name))) << name;
    any_diff |= !torch::equal(t, c.at(name));
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, CloneSharesNoStorage) {
  const auto a = init_params(testutil::tiny_config(), 1);
  auto b = a.clone();
  {
    torch::NoGradGuard guard;
    b.weights.at("G.fc.weight").add_(1.0);
  }
  EXPECT_FALSE(torch::equal(a.at("G.fc.weight"), b.at("G.fc.weight")));
}

TEST(Model, ShapeErrors) {
  const auto p = init_params(testutil::small_config(), 1);
  EXPECT_THROW(encode(p, torch::zeros({1, 1, 8, 8})), DimensionError);
  EXPECT_THROW(generate(p, torch::zeros({1, 8}), torch::zeros({1, 4})), DimensionError);
  EXPECT_THROW(generate(p, torch::zeros({1, 7}), torch::zeros({1, 5})), DimensionError);
  EXPECT_THROW(discriminate_identity(p, torch::zeros({2, 3})), DimensionError);
}

TEST(Model, LabelChangesGeneratorOutputWhenWeightsAreNonzero) {
  const auto p = init_params(testutil::small_config(), 6);
  torch::NoGradGuard guard;
  const auto z = torch::zeros({1, 8});
  const auto a = generate(p, z, one_hot_labels({0}, 5));
  const auto b = generate(p, z, one_hot_labels({4}, 5));
  EXPECT_GT((a - b).abs().max().item<float>(), 0.0f);
}

TEST(Model, NetworkOfPrefixes) {
  EXPECT_EQ(network_of("E.conv0.weight"), Network::kEncoder);
  EXPECT_EQ(network_of("G.fc.bias"), Network::kGenerator);
  EXPECT_EQ(network_of("Did.fc1.weight"), Network::kIdDiscriminator);
  EXPECT_EQ(network_of("Dimg.trunk.conv0.weight"), Network::kImgDiscriminator);
  EXPECT_EQ(network_of("Dage.head.weight"), Network::kAgeDiscriminator);
}
