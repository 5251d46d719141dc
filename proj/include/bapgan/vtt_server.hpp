#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "bapgan/vtt.hpp"

namespace bapgan {

struct VttServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::filesystem::path store_root;  // sessions and images
  std::filesystem::path data_root;   // datasets/<dataset_tag>/manifest.csv
  std::filesystem::path checkpoint_root;  // <dataset_tag>/<model_tag>/
};

// Produces the stimuli for a new session.
using StimulusFactory = std::function<std::vector<Stimulus>(const VttSessionSpec&)>;

// Stimuli from the dataset's test split and the checkpoint of spec.model_tag.
StimulusFactory checkpoint_stimulus_factory(const std::filesystem::path& data_root,
                                            const std::filesystem::path& checkpoint_root);

// HTTP API (JSON bodies):
//   POST /sessions                    spec -> {session_id, n_trials}
//   GET  /sessions/{id}/next          -> {trial_id, image_url, kind, answered, total} | {done, report_url}
//   POST /sessions/{id}/responses     {trial_id, answer} -> {status}
//   GET  /sessions/{id}/report[?partial=1]
//   GET  /images/{token}              PNG bytes
// Errors are {"error": <category>, "message": ...} with 400/404/409/500.
class VttServer {
 public:
  VttServer(VttServerConfig config, StimulusFactory factory);
  ~VttServer();

  // Binds and returns the port; serve() then blocks until stop().
  int bind();
  void serve();
  void stop();

  SessionStore& store();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace bapgan
