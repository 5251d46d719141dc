#pragma once

#include <filesystem>

#include "bapgan/trainer.hpp"

namespace bapgan {

inline constexpr int kCheckpointFormatVersion = 1;

// Layout: manifest.json (format_version, config echo, step, seed, history and
// an index of named arrays) plus one little-endian float32 blob per array.
// The directory is written under a temporary name and renamed into place.
void save_checkpoint(const TrainState& state, const TrainConfig& config,
                     const std::filesystem::path& dir);

struct LoadedCheckpoint {
  TrainState state;
  TrainConfig config;
};

// Throws CheckpointError on a missing manifest, missing or short blob (named in
// the message), or a format version other than kCheckpointFormatVersion.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace bapgan

namespace bapgan {

// Accepts a checkpoint directory or a training output directory (uses
// checkpoints/final inside it).
std::filesystem::path resolve_checkpoint_dir(const std::filesystem::path& path);
ModelParams load_model_params(const std::filesystem::path& path);

}  // namespace bapgan
