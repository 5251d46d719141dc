#include "bapgan/cli.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "bapgan/checkpoint.hpp"
#include "bapgan/errors.hpp"
#include "bapgan/evaluation.hpp"
#include "bapgan/metrics.hpp"
#include "bapgan/phantom.hpp"
#include "bapgan/trainer.hpp"
#include "bapgan/tsne.hpp"
#include "bapgan/vtt_server.hpp"

namespace bapgan {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

inline constexpr int kConfigFormatVersion = 1;
inline constexpr std::array<double, 3> kDefaultRatios = {0.7, 0.1, 0.2};

int exit_code_for(const Error& e) {
  const std::string_view c = e.category();
  if (c == "config" || c == "contract") return kExitUsage;
  if (c == "data" || c == "not-found" || c == "checkpoint" || c == "range" || c == "conflict") {
    return kExitData;
  }
  return kExitRuntime;
}

struct Globals {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = false;
};

json read_config(const Globals& g) {
  if (g.config_path.empty()) return json::object();
  std::ifstream in(g.config_path);
  if (!in) throw IngestionError("config file not found: " + g.config_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IngestionError("config file " + g.config_path + " is not valid JSON: " + e.what());
  }
  const int version = j.value("format_version", -1);
  if (version != kConfigFormatVersion) {
    throw ConfigError("config format_version must be " + std::to_string(kConfigFormatVersion) +
                      " (got " + std::to_string(version) + ")");
  }
  return j;
}

fs::path under(const fs::path& out, const fs::path& p) { return p.is_absolute() ? p : out / p; }

fs::path manifest_of(const fs::path& dataset) {
  return fs::is_directory(dataset) ? dataset / "manifest.csv" : dataset;
}

std::vector<SampleRecord> split_records(const fs::path& dataset, std::optional<Split> split,
                                        uint64_t seed) {
  const auto manifest = load_manifest(manifest_of(dataset));
  for (const auto& w : manifest.warnings) std::cerr << "warning: " << w << '\n';
  const auto parts = assign_splits(manifest.records, kDefaultRatios, seed);
  if (!split) return manifest.records;
  switch (*split) {
    case Split::kTrain: return parts.train;
    case Split::kVal: return parts.val;
    case Split::kTest: return parts.test;
  }
  return {};
}

std::optional<Split> split_option(const std::string& s) {
  if (s == "all") return std::nullopt;
  auto split = parse_split(s);
  if (!split) throw ConfigError("unknown split '" + s + "' (train, val, test or all)");
  return split;
}

AblationRow parse_row(const std::string& tag) {
  for (auto row : kAblationRows) {
    if (ablation_row_tag(row) == tag) return row;
  }
  throw ConfigError("unknown model row '" + tag + "' (caae, dage_ls, sa or bapgan)");
}

// Training options shared by train and ablate; flags override the config file.
struct TrainFlags {
  std::optional<int64_t> steps;
  std::optional<int> batch;
  std::optional<int> size;
  std::optional<int> base;
  std::optional<int64_t> checkpoint_period;
  bool no_augment = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--steps", steps, "training steps");
    cmd->add_option("--batch", batch, "batch size");
    cmd->add_option("--size", size, "image size S");
    cmd->add_option("--base-channels", base, "channel width of the first layer");
    cmd->add_option("--checkpoint-every", checkpoint_period, "periodic checkpoint interval (0: off)");
    cmd->add_flag("--no-augment", no_augment, "disable augmentation");
  }

  TrainConfig resolve(const Globals& g) const {
    const auto file = read_config(g);
    TrainConfig cfg = file.contains("train") ? file.at("train").get<TrainConfig>() : TrainConfig{};
    if (steps) cfg.steps = *steps;
    if (batch) cfg.batch = *batch;
    if (size) cfg.model.image_size = *size;
    if (base) cfg.model.base_channels = *base;
    if (checkpoint_period) cfg.checkpoint_period = *checkpoint_period;
    if (no_augment) cfg.augment = false;
    if (g.seed_given) cfg.seed = g.seed;
    return cfg;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

void print_progress(const LossRecord& r, int64_t total) {
  if (r.step % 100 == 0 || r.step == total) {
    std::cerr << "step " << r.step << "/" << total << "  eg " << r.loss_eg << "  recon "
              << r.recon << "  dimg " << r.loss_dimg << "  did " << r.loss_did;
    if (r.age_val_acc) std::cerr << "  age_acc " << *r.age_val_acc;
    std::cerr << '\n';
  }
}

TrainOutputs run_training(const TrainConfig& cfg, const fs::path& dataset, const fs::path& out,
                          const std::optional<fs::path>& resume) {
  cfg.validate();
  const auto train_records = split_records(dataset, Split::kTrain, cfg.seed);
  const auto val_records = split_records(dataset, Split::kVal, cfg.seed);
  const auto train_set = load_images(train_records, cfg.model.image_size, cfg.model.num_age_bins);
  const auto val_set = load_images(val_records, cfg.model.image_size, cfg.model.num_age_bins);
  std::optional<TrainState> state;
  if (resume) state = load_checkpoint(resolve_checkpoint_dir(*resume)).state;
  write_text(out / "config.json",
             json{{"format_version", kConfigFormatVersion}, {"train", cfg}}.dump(2) + "\n");
  return train(cfg, train_set, val_set, out, state,
               [&](const LossRecord& r) { print_progress(r, cfg.steps); });
}

// Gray scatter plot: intensity encodes the age bin, marker shape the source.
GrayImage render_scatter(const Eigen::MatrixXd& y, const std::vector<int>& bins,
                         const std::vector<int>& sources, int num_bins, int px = 640) {
  GrayImage img(px, px, 255.0f);
  const double margin = 24;
  const Eigen::Vector2d lo = y.colwise().minCoeff(), hi = y.colwise().maxCoeff();
  const double span = std::max({hi.x() - lo.x(), hi.y() - lo.y(), 1e-9});
  const auto plot = [&](int x, int yy, float v) {
    if (x >= 0 && yy >= 0 && x < px && yy < px) img.at(x, yy) = v;
  };
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const int cx = static_cast<int>(margin + (y(i, 0) - lo.x()) / span * (px - 2 * margin));
    const int cy = static_cast<int>(px - margin - (y(i, 1) - lo.y()) / span * (px - 2 * margin));
    const float shade = 200.0f * static_cast<float>(bins[i]) / std::max(1, num_bins - 1);
    for (int d = -3; d <= 3; ++d) {
      for (int e = -3; e <= 3; ++e) {
        bool on = false;
        switch (sources[i] % 3) {
          case 0: on = true; break;                                        // filled square
          case 1: on = std::abs(d) == 3 || std::abs(e) == 3; break;        // hollow square
          case 2: on = d == e || d == -e; break;                           // cross
        }
        if (on) plot(cx + d, cy + e, shade);
      }
    }
  }
  return img;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"bapgan: bone age progression GAN workbench"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file (format_version 1)");
  auto* seed_opt = app.add_option("--seed", g.seed, "random seed");
  app.add_flag("--deterministic", g.deterministic, "single-threaded, deterministic kernels");

  // phantom
  auto* phantom = app.add_subcommand("phantom", "generate a synthetic bone-phantom dataset");
  PhantomDatasetOptions ph;
  std::string ph_out;
  phantom->add_option("--n", ph.count, "number of phantoms")->capture_default_str();
  phantom->add_option("--size", ph.size, "image size")->capture_default_str();
  phantom->add_option("--gap-max", ph.gap_max_px, "growth-plate gap at age 0, pixels")->capture_default_str();
  phantom->add_option("--tag", ph.dataset_tag, "dataset tag")->capture_default_str();
  phantom->add_option("--out", ph_out, "output directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "train one model");
  TrainFlags tf;
  tf.add(train_cmd);
  std::string tr_dataset, tr_out, tr_row = "bapgan", tr_resume;
  train_cmd->add_option("--dataset", tr_dataset, "dataset directory or manifest.csv")->required();
  train_cmd->add_option("--out", tr_out, "output directory")->required();
  train_cmd->add_option("--row", tr_row, "model flags: caae, dage_ls, sa or bapgan")->capture_default_str();
  train_cmd->add_option("--resume", tr_resume, "checkpoint to resume from");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train the four ablation rows and report FID");
  TrainFlags af;
  af.add(ablate);
  std::string ab_dataset, ab_out, ab_split = "test", ab_extractor = kDeskExtractor, ab_weights;
  bool ab_reuse = false;
  ablate->add_option("--dataset", ab_dataset, "dataset directory or manifest.csv")->required();
  ablate->add_option("--out", ab_out, "output directory")->required();
  ablate->add_option("--split", ab_split, "split evaluated: train, val, test or all")->capture_default_str();
  ablate->add_option("--extractor", ab_extractor, "desk-extractor or pretrained-inception")->capture_default_str();
  ablate->add_option("--inception-weights", ab_weights, "TorchScript Inception-v3 pool model");
  ablate->add_flag("--reuse", ab_reuse, "skip rows whose final checkpoint already exists");

  // fid
  auto* fid_cmd = app.add_subcommand("fid", "FID of real images vs age-invariant reconstructions");
  std::string fd_dataset, fd_ckpt, fd_out, fd_split = "test", fd_extractor = kDeskExtractor, fd_weights;
  fid_cmd->add_option("--dataset", fd_dataset, "dataset directory or manifest.csv")->required();
  fid_cmd->add_option("--checkpoint", fd_ckpt, "checkpoint or training output directory")->required();
  fid_cmd->add_option("--out", fd_out, "output directory")->required();
  fid_cmd->add_option("--split", fd_split, "split evaluated")->capture_default_str();
  fid_cmd->add_option("--extractor", fd_extractor, "feature extractor")->capture_default_str();
  fid_cmd->add_option("--inception-weights", fd_weights, "TorchScript Inception-v3 pool model");

  // tsne
  auto* tsne_cmd = app.add_subcommand("tsne", "t-SNE of real and synthetic images per age bin");
  std::string ts_dataset, ts_out, ts_split = "test";
  std::vector<std::string> ts_models;
  int ts_per_bin = 42, ts_steps = 500;
  double ts_perplexity = 50;
  tsne_cmd->add_option("--dataset", ts_dataset, "dataset directory or manifest.csv")->required();
  tsne_cmd->add_option("--out", ts_out, "output directory")->required();
  tsne_cmd->add_option("--model", ts_models, "NAME=CHECKPOINT, e.g. bapgan=runs/bapgan (repeatable)");
  tsne_cmd->add_option("--split", ts_split, "split sampled")->capture_default_str();
  tsne_cmd->add_option("--per-bin", ts_per_bin, "images per age bin")->capture_default_str();
  tsne_cmd->add_option("--perplexity", ts_perplexity, "perplexity")->capture_default_str();
  tsne_cmd->add_option("--steps", ts_steps, "optimization steps")->capture_default_str();

  // vtt-serve
  auto* serve = app.add_subcommand("vtt-serve", "serve the visual Turing test API");
  VttServerConfig sc;
  std::string sc_store, sc_data, sc_ckpt;
  serve->add_option("--host", sc.host, "listen address")->capture_default_str();
  serve->add_option("--port", sc.port, "listen port")->capture_default_str();
  serve->add_option("--store", sc_store, "session store directory")->required();
  serve->add_option("--data-root", sc_data, "contains datasets/<tag>/manifest.csv")->required();
  serve->add_option("--checkpoint-root", sc_ckpt, "contains <dataset_tag>/<model_tag>/")->required();

  // progress
  auto* progress = app.add_subcommand("progress", "shift one image by +-8 years");
  std::string pg_ckpt, pg_image, pg_out;
  std::optional<double> pg_age;
  std::optional<int> pg_bin;
  int pg_delta = 8;
  progress->add_option("--checkpoint", pg_ckpt, "checkpoint or training output directory")->required();
  progress->add_option("--image", pg_image, "input PNG")->required();
  progress->add_option("--out", pg_out, "output directory")->required();
  auto* age_opt = progress->add_option("--age", pg_age, "subject age in years");
  auto* bin_opt = progress->add_option("--bin", pg_bin, "subject age bin");
  age_opt->excludes(bin_opt);
  progress->add_option("--delta", pg_delta, "years to shift (+-8)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  g.seed_given = seed_opt->count() > 0;

  try {
    if (g.deterministic) {
      torch::set_num_threads(1);
      at::globalContext().setDeterministicAlgorithms(true, false);
    }

    if (*phantom) {
      if (g.seed_given) ph.seed = g.seed;
      const auto records = write_phantom_dataset(ph_out, ph);
      std::cout << "wrote " << records.size() << " phantoms to " << ph_out << '\n';
    } else if (*train_cmd) {
      auto cfg = tf.resolve(g);
      cfg.model = ModelConfig::for_row(parse_row(tr_row), cfg.model);
      std::optional<fs::path> resume;
      if (!tr_resume.empty()) resume = under(tr_out, tr_resume);
      const auto out = run_training(cfg, tr_dataset, tr_out, resume);
      std::cout << "final checkpoint: " << out.checkpoints.back().string() << '\n';
    } else if (*ablate) {
      const auto base = af.resolve(g);
      const auto ab_split_value = split_option(ab_split);  // fail before any training
      const fs::path out = ab_out;
      std::map<AblationRow, fs::path> checkpoints;
      for (auto row : kAblationRows) {
        auto cfg = base;
        cfg.model = ModelConfig::for_row(row, base.model);
        const auto dir = out / std::string(ablation_row_tag(row));
        checkpoints[row] = dir;
        if (ab_reuse && fs::exists(dir / "checkpoints" / "final" / "manifest.json")) {
          std::cerr << "reusing " << dir.string() << '\n';
          continue;
        }
        std::cerr << "training row " << ablation_row_name(row) << '\n';
        run_training(cfg, ab_dataset, dir, std::nullopt);
      }
      const auto extractor = make_extractor(
          ab_extractor, ab_weights.empty() ? std::nullopt : std::optional<fs::path>(ab_weights));
      const auto records = split_records(ab_dataset, ab_split_value, base.seed);
      const auto data = load_images(records, base.model.image_size, base.model.num_age_bins);
      auto report = ablation_report(data, checkpoints, *extractor);
      report.split = ab_split;
      write_text(out / "ablation.csv", report.to_csv());
      write_text(out / "ablation.txt", report.to_text());
      std::cout << report.to_text();
    } else if (*fid_cmd) {
      const fs::path out = fd_out;
      const auto params = load_model_params(fd_ckpt);
      const auto extractor = make_extractor(
          fd_extractor, fd_weights.empty() ? std::nullopt : std::optional<fs::path>(fd_weights));
      const uint64_t seed = g.seed_given ? g.seed : 0;
      const auto records = split_records(fd_dataset, split_option(fd_split), seed);
      const auto data = load_images(records, params.config.image_size, params.config.num_age_bins);
      const auto recon = age_invariant_reconstruct(params, data.images, data.bins);
      const auto noise = uniform_noise_images(data.size(), params.config.image_size, seed);
      const auto real = feature_stats(extract_features(data.images, *extractor));
      const double fid_recon = frechet_distance(real, feature_stats(extract_features(recon, *extractor)));
      const double fid_noise = frechet_distance(real, feature_stats(extract_features(noise, *extractor)));
      std::ostringstream csv;
      csv << std::setprecision(10) << "split,extractor,n,fid_recon,fid_noise\n"
          << fd_split << ',' << extractor->id() << ',' << data.size() << ',' << fid_recon << ','
          << fid_noise << '\n';
      write_text(out / "fid.csv", csv.str());
      std::cout << csv.str();
    } else if (*tsne_cmd) {
      const fs::path out = ts_out;
      const uint64_t seed = g.seed_given ? g.seed : 0;
      std::vector<std::pair<std::string, ModelParams>> models;
      for (const auto& m : ts_models) {
        const auto eq = m.find('=');
        if (eq == std::string::npos) throw ConfigError("--model expects NAME=CHECKPOINT, got " + m);
        models.emplace_back(m.substr(0, eq), load_model_params(m.substr(eq + 1)));
      }
      const int size = models.empty() ? 64 : models.front().second.config.image_size;
      const int k = models.empty() ? 5 : models.front().second.config.num_age_bins;
      const auto records = split_records(ts_dataset, split_option(ts_split), seed);
      std::vector<std::vector<SampleRecord>> per_bin(static_cast<size_t>(k));
      const auto order = seeded_permutation(records.size(), seed);
      for (auto i : order) {
        auto& bucket = per_bin[static_cast<size_t>(bin_age(records[i].age_years, k))];
        if (static_cast<int>(bucket.size()) < ts_per_bin) bucket.push_back(records[i]);
      }
      std::vector<SampleRecord> chosen;
      for (int b = 0; b < k; ++b) {
        if (static_cast<int>(per_bin[b].size()) < ts_per_bin) {
          throw IngestionError("age bin " + std::to_string(b) + " has " +
                               std::to_string(per_bin[b].size()) + " images, " +
                               std::to_string(ts_per_bin) + " required");
        }
        chosen.insert(chosen.end(), per_bin[b].begin(), per_bin[b].end());
      }
      const auto data = load_images(chosen, size, k);
      std::vector<torch::Tensor> blocks{data.images};
      std::vector<std::string> source_names{"real"};
      for (const auto& [name, params] : models) {
        blocks.push_back(age_invariant_reconstruct(params, data.images, data.bins));
        source_names.push_back(name);
      }
      const auto all = ((torch::cat(blocks) + 1.0) / 2.0).to(torch::kFloat64).flatten(1).contiguous();
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(
          all.data_ptr<double>(), all.size(0), all.size(1));
      TsneOptions opt;
      opt.perplexity = ts_perplexity;
      opt.steps = ts_steps;
      opt.seed = seed;
      const auto y = tsne_embed(Eigen::MatrixXd(x), opt);
      std::ostringstream csv;
      csv << "index,age_bin,source,x,y\n" << std::setprecision(9);
      std::vector<int> bins, sources;
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const auto src = static_cast<size_t>(i / data.size());
        const int bin = data.bins[static_cast<size_t>(i % data.size())];
        bins.push_back(bin);
        sources.push_back(static_cast<int>(src));
        csv << i << ',' << bin << ',' << source_names[src] << ',' << y(i, 0) << ',' << y(i, 1) << '\n';
      }
      write_text(out / "tsne.csv", csv.str());
      write_png(out / "tsne.png", render_scatter(y, bins, sources, k));
      std::cout << "wrote " << (out / "tsne.csv").string() << " and " << (out / "tsne.png").string() << '\n';
    } else if (*serve) {
      sc.store_root = sc_store;
      sc.data_root = sc_data;
      sc.checkpoint_root = sc_ckpt;
      VttServer server(sc, checkpoint_stimulus_factory(sc.data_root, sc.checkpoint_root));
      const int port = server.bind();
      std::cout << "listening on " << sc.host << ":" << port << std::endl;
      server.serve();
    } else if (*progress) {
      if (!pg_age && !pg_bin) throw ConfigError("progress needs --age or --bin");
      const fs::path out = pg_out;
      const auto params = load_model_params(pg_ckpt);
      const int k = params.config.num_age_bins;
      const int source_bin = pg_bin ? *pg_bin : bin_age(*pg_age, k);
      const auto x = preprocess(read_png(pg_image), params.config.image_size);
      const auto y = progress_image(params, x, source_bin, pg_delta);
      const auto target = shifted_bin(source_bin, pg_delta, k);
      const auto file = out / ("progressed_bin" + std::to_string(source_bin) + "_to_bin" +
                               std::to_string(target) + ".png");
      fs::create_directories(out);
      write_png(file, from_model_tensor(y));
      std::cout << file.string() << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "ERROR:" << e.category() << ": " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const json::exception& e) {
    std::cerr << "ERROR:config: " << e.what() << '\n';
    return kExitUsage;
  } catch (const c10::Error& e) {
    std::cerr << "ERROR:runtime: " << e.what_without_backtrace() << '\n';
    return kExitRuntime;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "ERROR:data: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "ERROR:runtime: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace bapgan
