#include "bapgan/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "bapgan/checkpoint.hpp"
#include "bapgan/errors.hpp"

namespace bapgan {

void TrainConfig::validate() const {
  model.validate();
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (batch < 1) throw ConfigError("batch must be positive");
  if (!(lr_eg_did >= 0.0) || !(lr_dimg_dage >= 0.0)) {
    throw ConfigError("learning rates must be non-negative");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (checkpoint_period < 0 || eval_every < 0) throw ConfigError("periods must be non-negative");
  if (history_capacity < 1) throw ConfigError("history_capacity must be positive");
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.model = ModelConfig::full_scale();
  c.steps = 50000;
  c.batch = 32;
  c.checkpoint_period = 5000;
  c.eval_every = 1000;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"steps", c.steps},
                     {"batch", c.batch},
                     {"lr_eg_did", c.lr_eg_did},
                     {"lr_dimg_dage", c.lr_dimg_dage},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"lambda1", c.weights.lambda_recon},
                     {"lambda2", c.weights.lambda_age},
                     {"non_saturating", c.non_saturating},
                     {"augment", c.augment},
                     {"seed", c.seed},
                     {"checkpoint_period", c.checkpoint_period},
                     {"eval_every", c.eval_every},
                     {"history_capacity", c.history_capacity}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
  c.steps = j.value("steps", d.steps);
  c.batch = j.value("batch", d.batch);
  c.lr_eg_did = j.value("lr_eg_did", d.lr_eg_did);
  c.lr_dimg_dage = j.value("lr_dimg_dage", d.lr_dimg_dage);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.weights.lambda_recon = j.value("lambda1", d.weights.lambda_recon);
  c.weights.lambda_age = j.value("lambda2", d.weights.lambda_age);
  c.non_saturating = j.value("non_saturating", d.non_saturating);
  c.augment = j.value("augment", d.augment);
  c.seed = j.value("seed", d.seed);
  c.checkpoint_period = j.value("checkpoint_period", d.checkpoint_period);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.history_capacity = j.value("history_capacity", d.history_capacity);
}

TrainState TrainState::clone() const {
  TrainState out;
  out.params = params.clone();
  for (const auto& [name, m] : moments) {
    out.moments[name] = {m.first.clone(), m.second.clone()};
  }
  out.step = step;
  out.seed = seed;
  out.history = history;
  return out;
}

TrainState make_train_state(const TrainConfig& config, uint64_t seed) {
  config.validate();
  TrainState state;
  state.params = init_params(config.model, seed);
  for (const auto& [name, t] : state.params.weights) {
    state.moments[name] = {torch::zeros_like(t), torch::zeros_like(t)};
  }
  state.seed = seed;
  return state;
}

torch::Tensor sample_prior(const TrainState& state, int64_t batch, int latent_dim) {
  auto gen = at::detail::createCPUGenerator(mix_seed(state.seed, static_cast<uint64_t>(state.step), 1));
  return torch::rand({batch, latent_dim}, gen,
                     torch::TensorOptions().dtype(state.params.dtype())) * 2.0 - 1.0;
}

namespace {

torch::Tensor generator_adversarial(const torch::Tensor& scores_fake, bool non_saturating) {
  if (non_saturating) return adversarial_losses(scores_fake, scores_fake).g_loss;
  return saturating_generator_loss(scores_fake);
}

std::vector<std::string> discriminator_names(const ModelParams& p) {
  auto names = p.names_of(Network::kImgDiscriminator);
  for (auto& n : p.names_of(Network::kAgeDiscriminator)) names.push_back(std::move(n));
  return names;
}

std::vector<std::string> autoencoder_names(const ModelParams& p) {
  auto names = p.names_of(Network::kEncoder);
  for (auto& n : p.names_of(Network::kGenerator)) names.push_back(std::move(n));
  return names;
}

std::vector<torch::Tensor> gradients(const torch::Tensor& loss, const ModelParams& p,
                                     const std::vector<std::string>& names) {
  std::vector<torch::Tensor> inputs;
  inputs.reserve(names.size());
  for (const auto& n : names) inputs.push_back(p.at(n));
  auto grads = torch::autograd::grad({loss}, inputs, {}, false, false, true);
  for (size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].defined()) grads[i] = torch::zeros_like(inputs[i]);
  }
  return grads;
}

void check_finite(const LossRecord& r) {
  bool ok = std::isfinite(r.loss_eg) && std::isfinite(r.loss_did) && std::isfinite(r.loss_dimg) &&
            std::isfinite(r.loss_dage);
  for (const auto& [_, v] : r.components) ok = ok && std::isfinite(v);
  if (ok) return;
  std::ostringstream msg;
  msg << "non-finite loss at step " << r.step << ":";
  msg << " loss_eg=" << r.loss_eg << " loss_did=" << r.loss_did << " loss_dimg=" << r.loss_dimg
      << " loss_dage=" << r.loss_dage;
  for (const auto& [k, v] : r.components) msg << ' ' << k << '=' << v;
  throw NumericError(msg.str());
}

}  // namespace

LossBundle evaluate_losses(const ModelParams& p, const BatchInputs& batch,
                           const LossWeights& weights, bool non_saturating) {
  const auto& c = p.config;
  const auto z = encode(p, batch.x);
  const auto fake = generate(p, z, batch.labels);

  LossParts parts;
  parts.recon = reconstruction_loss(batch.x, fake);
  const auto id = adversarial_losses(discriminate_identity(p, batch.prior_z), discriminate_identity(p, z));
  const auto real_j = discriminate_image(p, batch.x, batch.labels);
  const auto fake_j = discriminate_image(p, fake, batch.labels);
  const auto img = adversarial_losses(real_j.realness, fake_j.realness);
  parts.id_adv_d = id.d_loss;
  parts.img_adv_d = img.d_loss;
  parts.id_adv_g = non_saturating ? id.g_loss : saturating_generator_loss(discriminate_identity(p, z));
  parts.img_adv_g = non_saturating ? img.g_loss : saturating_generator_loss(fake_j.realness);
  if (c.use_dage) {
    const auto age = age_classification_losses(*real_j.age_logits, *fake_j.age_logits, batch.labels);
    parts.age_d = age.age_d;
    parts.age_g = age.age_g;
  }
  return compose_losses(c, parts, weights);
}

void adam_update(TrainState& state, const std::vector<std::string>& names,
                 const std::vector<torch::Tensor>& grads, double lr, const TrainConfig& config) {
  torch::NoGradGuard no_grad;
  const double t = static_cast<double>(state.step + 1);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for (size_t i = 0; i < names.size(); ++i) {
    auto& param = state.params.weights.at(names[i]);
    auto& m = state.moments.at(names[i]);
    const auto& g = grads[i];
    m.first.mul_(config.beta1).add_(g, 1.0 - config.beta1);
    m.second.mul_(config.beta2).addcmul_(g, g, 1.0 - config.beta2);
    const auto denom = (m.second / correction2).sqrt_().add_(config.adam_eps);
    param.addcdiv_(m.first, denom, -lr / correction1);
  }
}

LossRecord train_step(TrainState& state, const TrainConfig& config, const torch::Tensor& x_in,
                      const torch::Tensor& one_hot) {
  auto& p = state.params;
  const auto& c = p.config;
  const auto dtype = p.dtype();
  const auto x = x_in.to(dtype);
  if (one_hot.dim() != 2 || one_hot.size(0) != x.size(0)) {
    throw DimensionError("train_step: labels do not match the image batch");
  }

  refresh_spectral_vectors(p, 1);
  const auto prior_z = sample_prior(state, x.size(0), c.latent_dim);
  const auto labels = (c.use_ls ? smooth_age_label(one_hot, c.smoothing) : one_hot).to(dtype);
  const auto& w = config.weights;

  // (3) image discriminator, with the age head when present.
  torch::Tensor img_adv_d, age_d;
  {
    torch::Tensor fake;
    {
      torch::NoGradGuard no_grad;
      fake = generate(p, encode(p, x), labels);
    }
    const auto real_j = discriminate_image(p, x, labels);
    const auto fake_j = discriminate_image(p, fake, labels);
    img_adv_d = adversarial_losses(real_j.realness, fake_j.realness).d_loss;
    auto total = img_adv_d;
    if (c.use_dage) {
      age_d = soft_cross_entropy(*real_j.age_logits, labels);
      total = total + w.lambda_age * age_d;
    }
    const auto names = discriminator_names(p);
    adam_update(state, names, gradients(total, p, names), config.lr_dimg_dage, config);
  }

  // (4) identity discriminator.
  torch::Tensor id_adv_d;
  {
    torch::Tensor z;
    {
      torch::NoGradGuard no_grad;
      z = encode(p, x);
    }
    id_adv_d = adversarial_losses(discriminate_identity(p, prior_z), discriminate_identity(p, z)).d_loss;
    const auto names = p.names_of(Network::kIdDiscriminator);
    adam_update(state, names, gradients(id_adv_d, p, names), config.lr_eg_did, config);
  }

  // (5) encoder and generator jointly.
  LossParts parts;
  const auto z = encode(p, x);
  const auto fake = generate(p, z, labels);
  parts.recon = reconstruction_loss(x, fake);
  parts.id_adv_d = id_adv_d.detach();
  parts.img_adv_d = img_adv_d.detach();
  parts.id_adv_g = generator_adversarial(discriminate_identity(p, z), config.non_saturating);
  const auto fake_j = discriminate_image(p, fake, labels);
  parts.img_adv_g = generator_adversarial(fake_j.realness, config.non_saturating);
  if (c.use_dage) {
    parts.age_d = age_d.detach();
    parts.age_g = soft_cross_entropy(*fake_j.age_logits, labels);
  }
  const auto bundle = compose_losses(c, parts, w);

  LossRecord rec;
  rec.step = state.step + 1;
  rec.loss_eg = bundle.loss_eg.item<double>();
  rec.loss_did = bundle.loss_did.item<double>();
  rec.loss_dimg = bundle.loss_dimg.item<double>();
  rec.loss_dage = bundle.loss_dage.item<double>();
  rec.recon = bundle.components.at("recon");
  rec.components = bundle.components;
  check_finite(rec);

  const auto names = autoencoder_names(p);
  adam_update(state, names, gradients(bundle.loss_eg, p, names), config.lr_eg_did, config);

  state.step += 1;
  state.history.push_back(rec);
  while (state.history.size() > config.history_capacity) state.history.pop_front();
  return rec;
}

double age_accuracy(const ModelParams& params, const ImageDataset& data, int64_t chunk) {
  if (data.empty()) throw ContractError("age_accuracy: empty dataset");
  torch::NoGradGuard no_grad;
  int64_t correct = 0;
  for (int64_t start = 0; start < data.size(); start += chunk) {
    const auto end = std::min(data.size(), start + chunk);
    const auto logits = classify_age(params, data.images.slice(0, start, end).to(params.dtype()));
    const auto pred = logits.argmax(1);
    for (int64_t i = start; i < end; ++i) {
      correct += pred[i - start].item<int64_t>() == data.bins[static_cast<size_t>(i)];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<int64_t> sample_batch_indices(uint64_t seed, int64_t step, int64_t dataset_size,
                                          int batch) {
  std::vector<int64_t> out(static_cast<size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    const auto h = mix_seed(seed, static_cast<uint64_t>(step), 0x1000 + static_cast<uint64_t>(i));
    out[static_cast<size_t>(i)] = static_cast<int64_t>(h % static_cast<uint64_t>(dataset_size));
  }
  return out;
}

std::string format_metric_row(const LossRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,", static_cast<long long>(r.step),
                r.loss_eg, r.loss_did, r.loss_dimg, r.loss_dage, r.recon);
  std::string row = buf;
  if (r.age_val_acc) {
    std::snprintf(buf, sizeof buf, "%.6f", *r.age_val_acc);
    row += buf;
  }
  return row;
}

TrainOutputs train(const TrainConfig& config, const ImageDataset& train_set,
                   const ImageDataset& val_set, const std::filesystem::path& out_dir,
                   std::optional<TrainState> resume, const StepCallback& on_step) {
  config.validate();
  if (train_set.empty()) throw ConfigError("training split is empty");
  if (train_set.images.size(2) != config.model.image_size) {
    throw ConfigError("dataset image size does not match the model configuration");
  }
  TrainState state = resume ? std::move(*resume) : make_train_state(config, config.seed);

  TrainOutputs out;
  out.out_dir = out_dir;
  std::filesystem::create_directories(out_dir / "checkpoints");
  const auto log_path = out_dir / "metrics.csv";
  const bool append = resume.has_value() && state.step > 0 && std::filesystem::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw IngestionError("cannot write " + log_path.string());
  if (!append) log << kMetricHeader << '\n';

  const int bins = config.model.num_age_bins;
  while (state.step < config.steps) {
    const auto idx = sample_batch_indices(config.seed, state.step, train_set.size(), config.batch);
    auto x = train_set.images.index_select(0, torch::tensor(idx, torch::kLong));
    if (config.augment) {
      std::vector<torch::Tensor> augmented;
      augmented.reserve(idx.size());
      for (size_t i = 0; i < idx.size(); ++i) {
        const auto sample_seed = mix_seed(config.seed, static_cast<uint64_t>(state.step),
                                          static_cast<uint64_t>(idx[i]) * 131 + i);
        augmented.push_back(augment(x[static_cast<int64_t>(i)], sample_seed));
      }
      x = torch::stack(augmented);
    }
    std::vector<int> batch_bins;
    for (auto i : idx) batch_bins.push_back(train_set.bins[static_cast<size_t>(i)]);
    auto rec = train_step(state, config, x, one_hot_labels(batch_bins, bins));

    const bool last = state.step == config.steps;
    if (config.model.use_dage && !val_set.empty() && config.eval_every > 0 &&
        (state.step % config.eval_every == 0 || last)) {
      rec.age_val_acc = age_accuracy(state.params, val_set);
      state.history.back().age_val_acc = rec.age_val_acc;
    }
    log << format_metric_row(rec) << '\n';
    out.log.push_back(rec);
    if (on_step) on_step(rec);

    if (config.checkpoint_period > 0 && state.step % config.checkpoint_period == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06lld", static_cast<long long>(state.step));
      const auto dir = out_dir / "checkpoints" / name;
      save_checkpoint(state, config, dir);
      out.checkpoints.push_back(dir);
    }
  }
  log.flush();
  const auto final_dir = out_dir / "checkpoints" / "final";
  save_checkpoint(state, config, final_dir);
  out.checkpoints.push_back(final_dir);
  return out;
}

}  // namespace bapgan
