#include "bapgan/checkpoint.hpp"

#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "bapgan/errors.hpp"

namespace bapgan {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<char> to_le_float32(const torch::Tensor& t) {
  const auto flat = t.detach().to(torch::kFloat32).contiguous().view({-1});
  std::vector<char> bytes(static_cast<size_t>(flat.numel()) * 4);
  std::memcpy(bytes.data(), flat.data_ptr<float>(), bytes.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (size_t i = 0; i < bytes.size(); i += 4) std::reverse(bytes.begin() + i, bytes.begin() + i + 4);
  }
  return bytes;
}

torch::Tensor from_le_float32(std::vector<char> bytes, const std::vector<int64_t>& shape) {
  if constexpr (std::endian::native == std::endian::big) {
    for (size_t i = 0; i < bytes.size(); i += 4) std::reverse(bytes.begin() + i, bytes.begin() + i + 4);
  }
  auto t = torch::empty(shape, torch::kFloat32);
  std::memcpy(t.data_ptr<float>(), bytes.data(), bytes.size());
  return t;
}

void write_synced(const fs::path& path, const char* data, size_t size) {
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + path.string());
    out.write(data, static_cast<std::streamsize>(size));
    if (!out) throw CheckpointError("short write to " + path.string());
  }
  // Flush to stable storage before the directory is renamed into place.
  FILE* f = std::fopen(path.c_str(), "rb");
  if (f) {
    ::fsync(fileno(f));
    std::fclose(f);
  }
}

json history_to_json(const std::deque<LossRecord>& history) {
  json rows = json::array();
  for (const auto& r : history) {
    json row{{"step", r.step},           {"loss_eg", r.loss_eg}, {"loss_did", r.loss_did},
             {"loss_dimg", r.loss_dimg}, {"loss_dage", r.loss_dage}, {"recon", r.recon},
             {"components", r.components}};
    if (r.age_val_acc) row["age_val_acc"] = *r.age_val_acc;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::deque<LossRecord> history_from_json(const json& rows) {
  std::deque<LossRecord> out;
  for (const auto& row : rows) {
    LossRecord r;
    r.step = row.at("step").get<int64_t>();
    r.loss_eg = row.at("loss_eg").get<double>();
    r.loss_did = row.at("loss_did").get<double>();
    r.loss_dimg = row.at("loss_dimg").get<double>();
    r.loss_dage = row.at("loss_dage").get<double>();
    r.recon = row.at("recon").get<double>();
    r.components = row.at("components").get<std::map<std::string, double>>();
    if (row.contains("age_val_acc")) r.age_val_acc = row.at("age_val_acc").get<double>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

void save_checkpoint(const TrainState& state, const TrainConfig& config, const fs::path& dir) {
  std::vector<std::pair<std::string, torch::Tensor>> arrays;
  for (const auto& [name, t] : state.params.weights) arrays.emplace_back("param/" + name, t);
  for (const auto& [name, t] : state.params.sn_vectors) arrays.emplace_back("sn_u/" + name, t);
  for (const auto& [name, m] : state.moments) {
    arrays.emplace_back("adam_m/" + name, m.first);
    arrays.emplace_back("adam_v/" + name, m.second);
  }

  const auto parent = dir.parent_path().empty() ? fs::path(".") : dir.parent_path();
  fs::create_directories(parent);
  const auto tmp = parent / (dir.filename().string() + ".tmp-" + std::to_string(::getpid()));
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  json index = json::array();
  for (size_t i = 0; i < arrays.size(); ++i) {
    const auto& [name, t] = arrays[i];
    char file[32];
    std::snprintf(file, sizeof file, "a%05zu.f32", i);
    const auto bytes = to_le_float32(t);
    write_synced(tmp / file, bytes.data(), bytes.size());
    index.push_back({{"name", name}, {"file", file}, {"shape", t.sizes().vec()}, {"length", t.numel()}});
  }
  json manifest{{"format_version", kCheckpointFormatVersion},
                {"kind", "bapgan-train-state"},
                {"config", config},
                {"model_config", state.params.config},
                {"step", state.step},
                {"seed", state.seed},
                {"dtype", "float32-le"},
                {"arrays", index},
                {"history", history_to_json(state.history)}};
  const auto text = manifest.dump(1);
  write_synced(tmp / "manifest.json", text.data(), text.size());

  const auto old = parent / (dir.filename().string() + ".old-" + std::to_string(::getpid()));
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw CheckpointError("checkpoint " + dir.string() + " has no manifest.json");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint manifest unreadable: " + std::string(e.what()));
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError("incompatible checkpoint format version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointFormatVersion) + ")");
  }

  LoadedCheckpoint out;
  try {
    out.config = manifest.at("config").get<TrainConfig>();
    out.state.params.config = manifest.at("model_config").get<ModelConfig>();
    out.state.step = manifest.at("step").get<int64_t>();
    out.state.seed = manifest.at("seed").get<uint64_t>();
    out.state.history = history_from_json(manifest.at("history"));
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint manifest incomplete: " + std::string(e.what()));
  }

  for (const auto& entry : manifest.at("arrays")) {
    const auto name = entry.at("name").get<std::string>();
    const auto file = dir / entry.at("file").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto length = entry.at("length").get<int64_t>();
    int64_t expected = 1;
    for (auto s : shape) expected *= s;
    if (expected != length) throw CheckpointError("array " + name + ": shape and length disagree");
    std::ifstream blob(file, std::ios::binary);
    if (!blob) throw CheckpointError("array " + name + ": missing blob " + file.filename().string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
    if (bytes.size() != static_cast<size_t>(length) * 4) {
      throw CheckpointError("array " + name + ": blob " + file.filename().string() + " holds " +
                            std::to_string(bytes.size()) + " bytes, expected " +
                            std::to_string(length * 4));
    }
    auto t = from_le_float32(std::move(bytes), shape);
    const auto slash = name.find('/');
    const auto kind = name.substr(0, slash);
    const auto key = name.substr(slash + 1);
    if (kind == "param") {
      out.state.params.weights[key] = t.set_requires_grad(true);
    } else if (kind == "sn_u") {
      out.state.params.sn_vectors[key] = t;
    } else if (kind == "adam_m") {
      out.state.moments[key].first = t;
    } else if (kind == "adam_v") {
      out.state.moments[key].second = t;
    } else {
      throw CheckpointError("unknown array kind in checkpoint: " + name);
    }
  }

  // Structural check against a freshly initialized model of the same config.
  const auto reference = init_params(out.state.params.config, 0);
  for (const auto& [name, t] : reference.weights) {
    auto it = out.state.params.weights.find(name);
    if (it == out.state.params.weights.end()) throw CheckpointError("checkpoint lacks parameter " + name);
    if (it->second.sizes() != t.sizes()) throw CheckpointError("parameter " + name + " has the wrong shape");
  }
  for (const auto& [name, _] : reference.sn_vectors) {
    if (!out.state.params.sn_vectors.contains(name)) {
      throw CheckpointError("checkpoint lacks spectral vector for " + name);
    }
  }
  for (const auto& [name, _] : out.state.params.weights) {
    auto it = out.state.moments.find(name);
    if (it == out.state.moments.end() || !it->second.first.defined() || !it->second.second.defined()) {
      throw CheckpointError("checkpoint lacks an Adam moment for " + name);
    }
  }
  return out;
}

}  // namespace bapgan

namespace bapgan {

fs::path resolve_checkpoint_dir(const fs::path& path) {
  if (fs::exists(path / "manifest.json")) return path;
  if (fs::exists(path / "checkpoints" / "final" / "manifest.json")) return path / "checkpoints" / "final";
  throw NotFoundError("no checkpoint at " + path.string());
}

ModelParams load_model_params(const fs::path& path) {
  return load_checkpoint(resolve_checkpoint_dir(path)).state.params;
}

}  // namespace bapgan
