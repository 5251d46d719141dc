#include "bapgan/model.hpp"

#include <bit>
#include <cmath>

#include "bapgan/errors.hpp"
#include "bapgan/spectral_norm.hpp"

namespace bapgan {

// ---------------------------------------------------------------------------
// ModelConfig

std::string_view ablation_row_name(AblationRow row) {
  switch (row) {
    case AblationRow::kCaae: return "CAAE";
    case AblationRow::kDageLs: return "+ D_age, LS";
    case AblationRow::kSa: return "+ SA";
    case AblationRow::kBapgan: return "BAPGAN";
  }
  return "?";
}

std::string_view ablation_row_tag(AblationRow row) {
  switch (row) {
    case AblationRow::kCaae: return "caae";
    case AblationRow::kDageLs: return "dage_ls";
    case AblationRow::kSa: return "sa";
    case AblationRow::kBapgan: return "bapgan";
  }
  return "?";
}

namespace {

int log2_exact(int v) { return std::countr_zero(static_cast<unsigned>(v)); }

int channels_at(int base, int stage) { return base << stage; }

// Channels of the generator map at `resolution`, or -1 when G has no such internal map.
int generator_channels_at(const ModelConfig& c, int resolution) {
  const int n = c.encoder_stages();
  if (resolution == 4) return channels_at(c.base_channels, n - 1);
  for (int i = 0; i + 1 < n; ++i) {
    if ((4 << (i + 1)) == resolution) return channels_at(c.base_channels, n - 2 - i);
  }
  return -1;
}

int trunk_channels_at(const ModelConfig& c, int resolution) {
  for (int i = 0; i < c.trunk_stages(); ++i) {
    if ((c.image_size >> (i + 1)) == resolution) return channels_at(c.base_channels, i);
  }
  return -1;
}

}  // namespace

int ModelConfig::encoder_stages() const { return log2_exact(image_size) - 2; }

int ModelConfig::trunk_stages() const { return std::max(1, log2_exact(image_size) - 3); }

int ModelConfig::effective_sa_resolution() const {
  return sa_resolution > 0 ? sa_resolution : image_size / 4;
}

int ModelConfig::trunk_feature_size() const {
  const int stages = trunk_stages();
  const int side = image_size >> stages;
  return channels_at(base_channels, stages - 1) * side * side;
}

void ModelConfig::validate() const {
  if (image_size < 8 || !std::has_single_bit(static_cast<unsigned>(image_size))) {
    throw ConfigError("image_size must be a power of two >= 8, got " + std::to_string(image_size));
  }
  if (latent_dim < 1) throw ConfigError("latent_dim must be positive");
  if (num_age_bins < 2) throw ConfigError("num_age_bins must be >= 2");
  if (base_channels < 1) throw ConfigError("base_channels must be positive");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("smoothing must lie in [0, 1)");
  if (use_sa) {
    const int r = effective_sa_resolution();
    const int g = generator_channels_at(*this, r);
    const int d = trunk_channels_at(*this, r);
    if (g < 0 || d < 0) {
      throw ConfigError("sa_resolution " + std::to_string(r) +
                        " is not an internal feature-map size of both G and the D trunk");
    }
    check_attention_channels(g, sa_reduction);
    check_attention_channels(d, sa_reduction);
  }
}

ModelConfig ModelConfig::for_row(AblationRow row, ModelConfig base) {
  const bool dage = row == AblationRow::kDageLs || row == AblationRow::kBapgan;
  const bool sa = row == AblationRow::kSa || row == AblationRow::kBapgan;
  base.use_dage = dage;
  base.use_ls = dage;
  base.use_sa = sa;
  base.use_sn = sa;
  return base;
}

ModelConfig ModelConfig::full_scale() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.image_size = 64;
  c.base_channels = 16;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},       {"latent_dim", c.latent_dim},
                     {"num_age_bins", c.num_age_bins},   {"base_channels", c.base_channels},
                     {"sa_resolution", c.sa_resolution}, {"sa_reduction", c.sa_reduction},
                     {"use_dage", c.use_dage},           {"use_ls", c.use_ls},
                     {"use_sa", c.use_sa},               {"use_sn", c.use_sn},
                     {"separate_dage", c.separate_dage}, {"smoothing", c.smoothing}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.num_age_bins = j.value("num_age_bins", d.num_age_bins);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.sa_resolution = j.value("sa_resolution", d.sa_resolution);
  c.sa_reduction = j.value("sa_reduction", d.sa_reduction);
  c.use_dage = j.value("use_dage", d.use_dage);
  c.use_ls = j.value("use_ls", d.use_ls);
  c.use_sa = j.value("use_sa", d.use_sa);
  c.use_sn = j.value("use_sn", c.use_sa);
  c.separate_dage = j.value("separate_dage", d.separate_dage);
  c.smoothing = j.value("smoothing", d.smoothing);
}

// ---------------------------------------------------------------------------
// ModelParams

Network network_of(std::string_view name) {
  if (name.starts_with("E.")) return Network::kEncoder;
  if (name.starts_with("G.")) return Network::kGenerator;
  if (name.starts_with("Did.")) return Network::kIdDiscriminator;
  if (name.starts_with("Dimg.")) return Network::kImgDiscriminator;
  if (name.starts_with("Dage.")) return Network::kAgeDiscriminator;
  throw ContractError("parameter name without a network prefix: " + std::string(name));
}

std::string_view network_name(Network net) {
  switch (net) {
    case Network::kEncoder: return "E";
    case Network::kGenerator: return "G";
    case Network::kIdDiscriminator: return "D_id";
    case Network::kImgDiscriminator: return "D_img";
    case Network::kAgeDiscriminator: return "D_age";
  }
  return "?";
}

const torch::Tensor& ModelParams::at(const std::string& name) const {
  auto it = weights.find(name);
  if (it == weights.end()) throw NotFoundError("no parameter named " + name);
  return it->second;
}

std::vector<std::string> ModelParams::names_of(Network net) const {
  std::vector<std::string> out;
  for (const auto& [name, _] : weights) {
    if (network_of(name) == net) out.push_back(name);
  }
  return out;
}

std::vector<torch::Tensor> ModelParams::tensors_of(Network net) const {
  std::vector<torch::Tensor> out;
  for (const auto& [name, t] : weights) {
    if (network_of(name) == net) out.push_back(t);
  }
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  out.config = config;
  for (const auto& [name, t] : weights) {
    out.weights[name] = t.detach().clone().set_requires_grad(t.requires_grad());
  }
  for (const auto& [name, t] : sn_vectors) out.sn_vectors[name] = t.detach().clone();
  return out;
}

torch::Dtype ModelParams::dtype() const {
  if (weights.empty()) return torch::kFloat32;
  return weights.begin()->second.scalar_type();
}

int64_t ModelParams::parameter_count() const {
  int64_t n = 0;
  for (const auto& [_, t] : weights) n += t.numel();
  return n;
}

namespace {

class ParamBuilder {
 public:
  ParamBuilder(ModelParams& params, uint64_t seed, torch::Dtype dtype)
      : params_(params), gen_(at::detail::createCPUGenerator(seed)), dtype_(dtype) {}

  // He-normal weights scaled by `gain`, zero bias.
  void dense(const std::string& name, std::vector<int64_t> shape, int64_t fan_in, double gain,
             bool spectral) {
    const double stddev = gain / std::sqrt(static_cast<double>(fan_in));
    params_.weights[name + ".weight"] =
        torch::randn(shape, gen_, options()) * stddev;
    params_.weights[name + ".bias"] = torch::zeros({shape[bias_dim(name)]}, options());
    if (spectral) {
      params_.sn_vectors[name + ".weight"] = random_unit_vector(shape[0], gen_, dtype_);
    }
  }

  void matrix(const std::string& name, int64_t rows, int64_t cols, double gain, bool spectral) {
    const double stddev = gain / std::sqrt(static_cast<double>(cols));
    params_.weights[name] = torch::randn({rows, cols}, gen_, options()) * stddev;
    if (spectral) params_.sn_vectors[name] = random_unit_vector(rows, gen_, dtype_);
  }

  void attention(const std::string& prefix, int64_t channels, int reduction, bool spectral) {
    const int64_t reduced = channels / reduction;
    for (const char* part : {"query", "key"}) {
      matrix(prefix + "." + part + ".weight", reduced, channels, 1.0, spectral);
      params_.weights[prefix + "." + part + ".bias"] = torch::zeros({reduced}, options());
    }
    matrix(prefix + ".value.weight", channels, channels, 1.0, spectral);
    params_.weights[prefix + ".value.bias"] = torch::zeros({channels}, options());
    params_.weights[prefix + ".gamma"] = torch::zeros({}, options());
  }

 private:
  // Transposed convolutions store (in, out, k, k); their bias follows dim 1.
  static size_t bias_dim(const std::string& name) {
    return name.find("deconv") != std::string::npos ? 1 : 0;
  }
  torch::TensorOptions options() const { return torch::TensorOptions().dtype(dtype_); }

  ModelParams& params_;
  torch::Generator gen_;
  torch::Dtype dtype_;
};

constexpr int kKernel = 5;
constexpr int kDeconvKernel = 4;
constexpr double kLeak = 0.2;
const double kReluGain = std::sqrt(2.0);

void build_trunk(ParamBuilder& b, const ModelConfig& c, const std::string& prefix, bool spectral) {
  int64_t in = 1;
  const int sa_res = c.effective_sa_resolution();
  for (int i = 0; i < c.trunk_stages(); ++i) {
    const int64_t out = channels_at(c.base_channels, i);
    b.dense(prefix + ".conv" + std::to_string(i), {out, in, kKernel, kKernel},
            in * kKernel * kKernel, kReluGain, spectral);
    if (c.use_sa && (c.image_size >> (i + 1)) == sa_res) {
      b.attention(prefix + ".sa", out, c.sa_reduction, spectral);
    }
    in = out;
  }
}

}  // namespace

ModelParams init_params(const ModelConfig& config, uint64_t seed, torch::Dtype dtype) {
  config.validate();
  ModelParams params;
  params.config = config;
  ParamBuilder b(params, seed, dtype);
  const auto& c = config;
  const bool sn = c.use_sn;
  const int n = c.encoder_stages();

  // Encoder: stride-2 convolutions down to 4x4, then a dense map to d_z.
  int64_t in = 1;
  for (int i = 0; i < n; ++i) {
    const int64_t out = channels_at(c.base_channels, i);
    b.dense("E.conv" + std::to_string(i), {out, in, kKernel, kKernel}, in * kKernel * kKernel,
            kReluGain, false);
    in = out;
  }
  b.dense("E.fc", {c.latent_dim, in * 16}, in * 16, 1.0, false);

  // Generator: dense from [z, l] to a 4x4 map, then stride-2 deconvolutions.
  const int64_t top = channels_at(c.base_channels, n - 1);
  b.dense("G.fc", {top * 16, c.latent_dim + c.num_age_bins}, c.latent_dim + c.num_age_bins,
          kReluGain, false);
  if (c.use_sa && c.effective_sa_resolution() == 4) b.attention("G.sa", top, c.sa_reduction, false);
  in = top;
  for (int i = 0; i < n; ++i) {
    const int64_t out = i + 1 == n ? 1 : channels_at(c.base_channels, n - 2 - i);
    // Each output pixel of a stride-2, k=4 deconvolution sums 2x2 taps per input channel.
    b.dense("G.deconv" + std::to_string(i), {in, out, kDeconvKernel, kDeconvKernel}, in * 4,
            i + 1 == n ? 1.0 : kReluGain, false);
    if (c.use_sa && i + 1 < n && (4 << (i + 1)) == c.effective_sa_resolution()) {
      b.attention("G.sa", out, c.sa_reduction, false);
    }
    in = out;
  }

  // Identity discriminator on the latent code.
  const int64_t did_sizes[] = {c.latent_dim, 64, 32, 16, 1};
  for (int i = 0; i < 4; ++i) {
    b.dense("Did.fc" + std::to_string(i), {did_sizes[i + 1], did_sizes[i]}, did_sizes[i],
            i == 3 ? 1.0 : kReluGain, sn);
  }

  // Image discriminator: trunk + realness head + label projection.
  const int64_t features = c.trunk_feature_size();
  build_trunk(b, c, "Dimg.trunk", sn);
  b.dense("Dimg.head", {1, features}, features, 1.0, sn);
  b.matrix("Dimg.embed.weight", c.num_age_bins, features, 1.0, sn);

  if (c.use_dage) {
    if (c.separate_dage) build_trunk(b, c, "Dage.trunk", sn);
    b.dense("Dage.head", {c.num_age_bins, features}, features, 1.0, sn);
  }

  for (auto& [_, t] : params.weights) t.set_requires_grad(true);
  return params;
}

// ---------------------------------------------------------------------------
// Forward passes

torch::Tensor effective_weight(const ModelParams& params, const std::string& name) {
  const auto& w = params.at(name);
  auto it = params.sn_vectors.find(name);
  if (it == params.sn_vectors.end()) return w;
  return spectral_weight(w, it->second);
}

SelfAttentionWeights attention_weights(const ModelParams& p, const std::string& prefix) {
  return {effective_weight(p, prefix + ".query.weight"), p.at(prefix + ".query.bias"),
          effective_weight(p, prefix + ".key.weight"),   p.at(prefix + ".key.bias"),
          effective_weight(p, prefix + ".value.weight"), p.at(prefix + ".value.bias"),
          p.at(prefix + ".gamma")};
}

namespace {

void check_image(const ModelConfig& c, const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 1 || x.size(2) != c.image_size || x.size(3) != c.image_size) {
    throw DimensionError("expected images of shape B x 1 x " + std::to_string(c.image_size) +
                         " x " + std::to_string(c.image_size));
  }
  if (x.size(0) < 1) throw DimensionError("empty batch");
}

void check_labels(const ModelConfig& c, const torch::Tensor& labels, int64_t batch) {
  if (labels.dim() != 2 || labels.size(1) != c.num_age_bins) {
    throw DimensionError("expected labels of shape B x " + std::to_string(c.num_age_bins));
  }
  if (labels.size(0) != batch) {
    throw DimensionError("batch mismatch: " + std::to_string(batch) + " vs " +
                         std::to_string(labels.size(0)) + " labels");
  }
}

torch::Tensor linear(const ModelParams& p, const std::string& name, const torch::Tensor& x) {
  return torch::linear(x, effective_weight(p, name + ".weight"), p.at(name + ".bias"));
}

torch::Tensor conv(const ModelParams& p, const std::string& name, const torch::Tensor& x) {
  return torch::conv2d(x, effective_weight(p, name + ".weight"), p.at(name + ".bias"), 2,
                       kKernel / 2);
}

torch::Tensor trunk(const ModelParams& p, const std::string& prefix, const torch::Tensor& x) {
  const auto& c = p.config;
  auto h = x;
  for (int i = 0; i < c.trunk_stages(); ++i) {
    h = torch::leaky_relu(conv(p, prefix + ".conv" + std::to_string(i), h), kLeak);
    if (c.use_sa && (c.image_size >> (i + 1)) == c.effective_sa_resolution()) {
      h = self_attention(h, attention_weights(p, prefix + ".sa"));
    }
  }
  return h.flatten(1);
}

torch::Tensor age_head(const ModelParams& p, const torch::Tensor& x,
                       const torch::Tensor& shared_features) {
  const auto features = p.config.separate_dage ? trunk(p, "Dage.trunk", x) : shared_features;
  return linear(p, "Dage.head", features);
}

}  // namespace

torch::Tensor encode(const ModelParams& p, const torch::Tensor& x) {
  const auto& c = p.config;
  check_image(c, x);
  auto h = x;
  for (int i = 0; i < c.encoder_stages(); ++i) {
    h = torch::leaky_relu(conv(p, "E.conv" + std::to_string(i), h), kLeak);
  }
  return torch::tanh(linear(p, "E.fc", h.flatten(1)));
}

torch::Tensor generate(const ModelParams& p, const torch::Tensor& z, const torch::Tensor& labels) {
  const auto& c = p.config;
  if (z.dim() != 2 || z.size(1) != c.latent_dim) {
    throw DimensionError("expected latent codes of shape B x " + std::to_string(c.latent_dim));
  }
  check_labels(c, labels, z.size(0));
  const int n = c.encoder_stages();
  const int sa_res = c.effective_sa_resolution();
  auto h = torch::relu(linear(p, "G.fc", torch::cat({z, labels}, 1)));
  h = h.view({z.size(0), -1, 4, 4});
  if (c.use_sa && sa_res == 4) h = self_attention(h, attention_weights(p, "G.sa"));
  for (int i = 0; i < n; ++i) {
    const std::string name = "G.deconv" + std::to_string(i);
    h = torch::conv_transpose2d(h, p.at(name + ".weight"), p.at(name + ".bias"), 2, 1);
    if (i + 1 == n) break;
    h = torch::relu(h);
    if (c.use_sa && (4 << (i + 1)) == sa_res) h = self_attention(h, attention_weights(p, "G.sa"));
  }
  return torch::tanh(h);
}

torch::Tensor discriminate_identity(const ModelParams& p, const torch::Tensor& z) {
  const auto& c = p.config;
  if (z.dim() != 2 || z.size(1) != c.latent_dim) {
    throw DimensionError("expected latent codes of shape B x " + std::to_string(c.latent_dim));
  }
  auto h = z;
  for (int i = 0; i < 3; ++i) h = torch::leaky_relu(linear(p, "Did.fc" + std::to_string(i), h), kLeak);
  return torch::sigmoid(linear(p, "Did.fc3", h)).squeeze(1);
}

ImageJudgement discriminate_image(const ModelParams& p, const torch::Tensor& x,
                                  const torch::Tensor& labels) {
  const auto& c = p.config;
  check_image(c, x);
  check_labels(c, labels, x.size(0));
  const auto features = trunk(p, "Dimg.trunk", x);
  // Projection conditioning: <l V, phi> adds label-dependent evidence to the realness logit.
  const auto embedded = torch::matmul(labels, effective_weight(p, "Dimg.embed.weight"));
  const auto logit = linear(p, "Dimg.head", features).squeeze(1) + (embedded * features).sum(1);
  ImageJudgement out{torch::sigmoid(logit), std::nullopt};
  if (c.use_dage) out.age_logits = age_head(p, x, features);
  return out;
}

torch::Tensor classify_age(const ModelParams& p, const torch::Tensor& x) {
  const auto& c = p.config;
  if (!c.use_dage) throw ConfigError("model has no age discriminator");
  check_image(c, x);
  const auto features = c.separate_dage ? torch::Tensor() : trunk(p, "Dimg.trunk", x);
  return age_head(p, x, features);
}

void refresh_spectral_vectors(ModelParams& params, int n_iter) {
  for (auto& [name, u] : params.sn_vectors) {
    u = spectral_normalize(params.at(name), u, n_iter).u;
  }
}

}  // namespace bapgan
