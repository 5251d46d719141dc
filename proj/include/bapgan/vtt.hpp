#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "bapgan/data.hpp"
#include "bapgan/image.hpp"

namespace bapgan {

enum class VttKind { kRealism, kProgression, kRegression };
std::string_view vtt_kind_name(VttKind kind);
std::optional<VttKind> parse_vtt_kind(std::string_view s);

// Ground truth of a trial. Never leaves the server.
enum class Truth { kReal, kSynthetic };

// Answer vocabulary per kind: "real" vs "synthetic" | "progressed" | "regressed".
std::string_view answer_label(VttKind kind, Truth truth);
Truth parse_answer(VttKind kind, std::string_view answer);  // ContractError

struct VttSessionSpec {
  VttKind kind = VttKind::kRealism;
  std::string model_tag = "bapgan";
  std::string dataset_tag;
  int n_real = 50;
  int n_synthetic = 50;
  uint64_t shuffle_seed = 0;

  static VttSessionSpec defaults(VttKind kind);  // 50/50 realism, 25/25 otherwise
  void validate() const;                         // ConfigError
};

void to_json(nlohmann::json& j, const VttSessionSpec& s);
// Missing counts take the defaults of the given kind.
void from_json(const nlohmann::json& j, VttSessionSpec& s);

// Exact fraction; percentages are derived from it only for display.
struct Ratio {
  int64_t num = 0;
  int64_t den = 1;

  double percent() const { return den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / den; }
  int64_t rounded_percent() const;  // nearest integer, halves up
  Ratio complement() const { return {den - num, den}; }
  friend bool operator==(const Ratio& a, const Ratio& b) { return a.num * b.den == b.num * a.den; }
};

struct VttReport {
  std::string session_id;
  VttKind kind = VttKind::kRealism;
  bool partial = false;
  int64_t n_trials = 0;
  int64_t n_answered = 0;
  int64_t real_answered = 0, real_as_real = 0;
  int64_t synthetic_answered = 0, synthetic_as_synthetic = 0;

  Ratio accuracy() const;
  Ratio r_as_r() const;
  Ratio r_as_s() const;
  Ratio s_as_r() const;
  Ratio s_as_s() const;

  // "Accuracy, R as R, R as S, S as R, S as S" for realism;
  // "Accuracy, Progression, Regression" otherwise.
  std::vector<std::string> columns() const;
  nlohmann::json to_json() const;
};

// Scores (truth, answer) pairs. ContractError when nothing was answered.
VttReport score_responses(VttKind kind, const std::vector<std::pair<Truth, Truth>>& answered,
                          int64_t n_trials);

// One row of the age-shift table from a progression and a regression session.
// Accuracy pools both sessions' trials.
struct AgeShiftRow {
  Ratio accuracy, progression, regression;
  nlohmann::json to_json() const;
};
AgeShiftRow combine_age_shift(const VttReport& progression, const VttReport& regression);

// A candidate stimulus before it becomes a trial.
struct Stimulus {
  GrayImage image;
  Truth truth = Truth::kReal;
  std::string source;  // provenance, server-side only
};

// Maps held-out images and bins to synthetic images (N x 1 x S x S in [-1, 1]):
// age-invariant reconstructions for realism, +-8-year shifts for the age-shift kinds.
using Synthesizer =
    std::function<torch::Tensor(const torch::Tensor& x, const std::vector<int>& bins, VttKind kind)>;

// Draws the real and synthetic stimuli for a session from held-out images. The
// returned pool alternates real and synthetic entries. Throws IngestionError,
// with the shortfall of each class, when too few eligible images exist.
std::vector<Stimulus> build_stimuli(const VttSessionSpec& spec, const ImageDataset& held_out,
                                    int num_bins, const Synthesizer& synthesize);

// Seeded Fisher-Yates permutation of 0..n-1 used for trial order.
std::vector<size_t> seeded_permutation(size_t n, uint64_t seed);

struct Trial {
  std::string trial_id;
  std::string token;  // image handle, unguessable
  Truth truth = Truth::kReal;
  std::string source;
  std::optional<Truth> answer;
};

// Sessions persisted as append-only JSON-lines logs under root/sessions, images
// under root/images. A response is fsynced before submit() returns.
class SessionStore {
 public:
  explicit SessionStore(std::filesystem::path root);
  ~SessionStore();

  std::string create(const VttSessionSpec& spec, const std::vector<Stimulus>& stimuli);

  struct Next {
    bool done = false;
    std::string trial_id;
    std::string token;
    int64_t answered = 0;
    int64_t total = 0;
  };
  Next next(const std::string& session_id) const;

  enum class Submit { kAccepted, kDuplicate };
  // NotFoundError for unknown session or trial, ConflictError for a different
  // answer to an answered trial, ContractError for an answer outside the vocabulary.
  Submit submit(const std::string& session_id, const std::string& trial_id,
                std::string_view answer);

  // ContractError when unanswered trials remain and allow_partial is false.
  VttReport report(const std::string& session_id, bool allow_partial = false) const;

  VttSessionSpec spec(const std::string& session_id) const;
  std::vector<Trial> trials(const std::string& session_id) const;  // server-side view
  std::filesystem::path image_path(const std::string& token) const;
  std::vector<std::string> session_ids() const;

 private:
  struct Session;
  std::shared_ptr<Session> find(const std::string& session_id) const;
  void replay(const std::filesystem::path& log);

  std::filesystem::path root_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::string, std::filesystem::path> images_;
};

// 128-bit random hex string.
std::string random_token();

}  // namespace bapgan
