#include "bapgan/vtt_server.hpp"

#include <fstream>
#include <sstream>

#include <httplib.h>

#include "bapgan/checkpoint.hpp"
#include "bapgan/errors.hpp"
#include "bapgan/evaluation.hpp"

namespace bapgan {
namespace fs = std::filesystem;
using nlohmann::json;

StimulusFactory checkpoint_stimulus_factory(const fs::path& data_root,
                                            const fs::path& checkpoint_root) {
  return [data_root, checkpoint_root](const VttSessionSpec& spec) {
    const auto params = load_model_params(checkpoint_root / spec.dataset_tag / spec.model_tag);
    const auto manifest_path = data_root / "datasets" / spec.dataset_tag / "manifest.csv";
    if (!fs::exists(manifest_path)) throw NotFoundError("no dataset manifest at " + manifest_path.string());
    const auto manifest = load_manifest(manifest_path);
    std::vector<SampleRecord> held_out;
    for (const auto& r : manifest.records) {
      if (r.split == Split::kTest) held_out.push_back(r);
    }
    const int k = params.config.num_age_bins;
    const auto data = load_images(held_out, params.config.image_size, k);
    const Synthesizer synth = [&params](const torch::Tensor& x, const std::vector<int>& bins,
                                        VttKind kind) {
      switch (kind) {
        case VttKind::kRealism: return age_invariant_reconstruct(params, x, bins);
        case VttKind::kProgression: return progress_images(params, x, bins, +8);
        case VttKind::kRegression: return progress_images(params, x, bins, -8);
      }
      throw ContractError("unknown session kind");
    };
    return build_stimuli(spec, data, k, synth);
  };
}

struct VttServer::Impl {
  VttServerConfig config;
  StimulusFactory factory;
  SessionStore store;
  httplib::Server http;
  std::mutex create_mutex;

  Impl(VttServerConfig c, StimulusFactory f)
      : config(std::move(c)), factory(std::move(f)), store(config.store_root) {}

  static void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static int status_of(const Error& e) {
    if (dynamic_cast<const NotFoundError*>(&e)) return 404;
    if (dynamic_cast<const ConflictError*>(&e)) return 409;
    if (dynamic_cast<const ContractError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
        dynamic_cast<const IngestionError*>(&e) || dynamic_cast<const RangeError*>(&e)) {
      return 400;
    }
    return 500;
  }

  // Runs a handler, mapping library errors onto HTTP statuses.
  template <typename F>
  static void guarded(httplib::Response& res, F&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      send_json(res, status_of(e), {{"error", e.category()}, {"message", e.what()}});
    } catch (const json::exception& e) {
      send_json(res, 400, {{"error", "contract"}, {"message", std::string("bad JSON: ") + e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", "runtime"}, {"message", e.what()}});
    }
  }

  void routes() {
    http.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto spec = json::parse(req.body).get<VttSessionSpec>();
        spec.validate();
        std::lock_guard lock(create_mutex);
        const auto stimuli = factory(spec);
        const auto id = store.create(spec, stimuli);
        send_json(res, 201, {{"session_id", id}, {"n_trials", stimuli.size()}});
      });
    });
    http.Get("/sessions/:id/next", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto& id = req.path_params.at("id");
        const auto next = store.next(id);
        if (next.done) {
          send_json(res, 200, {{"done", true}, {"report_url", "/sessions/" + id + "/report"}});
          return;
        }
        send_json(res, 200,
                  {{"trial_id", next.trial_id},
                   {"image_url", "/images/" + next.token},
                   {"kind", vtt_kind_name(store.spec(id).kind)},
                   {"answered", next.answered},
                   {"total", next.total}});
      });
    });
    http.Post("/sessions/:id/responses", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = json::parse(req.body);
        if (!body.contains("trial_id") || !body.contains("answer")) {
          throw ContractError("response needs trial_id and answer");
        }
        const auto result = store.submit(req.path_params.at("id"), body.at("trial_id").get<std::string>(),
                                         body.at("answer").get<std::string>());
        send_json(res, 200,
                  {{"status", "ack"}, {"duplicate", result == SessionStore::Submit::kDuplicate}});
      });
    });
    http.Get("/sessions/:id/report", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto flag = req.get_param_value("partial");
        const bool partial = flag == "1" || flag == "true";
        send_json(res, 200, store.report(req.path_params.at("id"), partial).to_json());
      });
    });
    http.Get("/images/:token", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto path = store.image_path(req.path_params.at("token"));
        std::ifstream in(path, std::ios::binary);
        if (!in) throw NotFoundError("image file missing");
        std::ostringstream bytes;
        bytes << in.rdbuf();
        res.status = 200;
        res.set_content(bytes.str(), "image/png");
      });
    });
  }
};

VttServer::VttServer(VttServerConfig config, StimulusFactory factory)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(factory))) {
  impl_->routes();
}

VttServer::~VttServer() { stop(); }

int VttServer::bind() {
  const int port = impl_->config.port == 0 ? impl_->http.bind_to_any_port(impl_->config.host)
                                           : (impl_->http.bind_to_port(impl_->config.host, impl_->config.port)
                                                  ? impl_->config.port
                                                  : -1);
  if (port < 0) {
    throw ConfigError("cannot listen on " + impl_->config.host + ":" + std::to_string(impl_->config.port));
  }
  return port;
}

void VttServer::serve() { impl_->http.listen_after_bind(); }

void VttServer::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

SessionStore& VttServer::store() { return impl_->store; }

}  // namespace bapgan
