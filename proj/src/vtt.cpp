#include "bapgan/vtt.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "bapgan/errors.hpp"

namespace bapgan {
namespace fs = std::filesystem;
using nlohmann::json;

std::string_view vtt_kind_name(VttKind kind) {
  switch (kind) {
    case VttKind::kRealism: return "realism";
    case VttKind::kProgression: return "progression";
    case VttKind::kRegression: return "regression";
  }
  return "?";
}

std::optional<VttKind> parse_vtt_kind(std::string_view s) {
  for (auto k : {VttKind::kRealism, VttKind::kProgression, VttKind::kRegression}) {
    if (vtt_kind_name(k) == s) return k;
  }
  return std::nullopt;
}

std::string_view answer_label(VttKind kind, Truth truth) {
  if (truth == Truth::kReal) return "real";
  switch (kind) {
    case VttKind::kRealism: return "synthetic";
    case VttKind::kProgression: return "progressed";
    case VttKind::kRegression: return "regressed";
  }
  return "?";
}

Truth parse_answer(VttKind kind, std::string_view answer) {
  if (answer == answer_label(kind, Truth::kReal)) return Truth::kReal;
  if (answer == answer_label(kind, Truth::kSynthetic)) return Truth::kSynthetic;
  throw ContractError("answer must be \"real\" or \"" +
                      std::string(answer_label(kind, Truth::kSynthetic)) + "\" for a " +
                      std::string(vtt_kind_name(kind)) + " session");
}

VttSessionSpec VttSessionSpec::defaults(VttKind kind) {
  VttSessionSpec s;
  s.kind = kind;
  const int n = kind == VttKind::kRealism ? 50 : 25;
  s.n_real = s.n_synthetic = n;
  return s;
}

void VttSessionSpec::validate() const {
  if (n_real < 1 || n_synthetic < 1) throw ConfigError("session counts must be positive");
  if (model_tag.empty()) throw ConfigError("session needs a model_tag");
  if (dataset_tag.empty()) throw ConfigError("session needs a dataset_tag");
  for (const auto* tag : {&model_tag, &dataset_tag}) {
    if (tag->find("..") != std::string::npos || tag->find('/') != std::string::npos) {
      throw ConfigError("tags may not contain path separators: " + *tag);
    }
  }
}

void to_json(json& j, const VttSessionSpec& s) {
  j = json{{"kind", vtt_kind_name(s.kind)}, {"model_tag", s.model_tag},
           {"dataset_tag", s.dataset_tag},  {"n_real", s.n_real},
           {"n_synthetic", s.n_synthetic},  {"shuffle_seed", s.shuffle_seed}};
}

void from_json(const json& j, VttSessionSpec& s) {
  const auto kind_name = j.value("kind", std::string("realism"));
  const auto kind = parse_vtt_kind(kind_name);
  if (!kind) throw ConfigError("unknown session kind '" + kind_name + "'");
  s = VttSessionSpec::defaults(*kind);
  s.model_tag = j.value("model_tag", s.model_tag);
  s.dataset_tag = j.value("dataset_tag", s.dataset_tag);
  s.n_real = j.value("n_real", s.n_real);
  s.n_synthetic = j.value("n_synthetic", s.n_synthetic);
  s.shuffle_seed = j.value("shuffle_seed", s.shuffle_seed);
}

int64_t Ratio::rounded_percent() const {
  if (den == 0) return 0;
  // floor(100 num / den + 1/2) in integers
  return (200 * num + den) / (2 * den);
}

Ratio VttReport::accuracy() const {
  return {real_as_real + synthetic_as_synthetic, real_answered + synthetic_answered};
}
Ratio VttReport::r_as_r() const { return {real_as_real, real_answered}; }
Ratio VttReport::r_as_s() const { return r_as_r().complement(); }
Ratio VttReport::s_as_s() const { return {synthetic_as_synthetic, synthetic_answered}; }
Ratio VttReport::s_as_r() const { return s_as_s().complement(); }

std::vector<std::string> VttReport::columns() const {
  if (kind == VttKind::kRealism) return {"Accuracy", "R as R", "R as S", "S as R", "S as S"};
  return {"Accuracy", "Progression", "Regression"};
}

namespace {

json ratio_json(const Ratio& r) { return json{{"num", r.num}, {"den", r.den}}; }
json percent_json(const Ratio& r) { return r.den == 0 ? json(nullptr) : json(r.rounded_percent()); }

}  // namespace

json VttReport::to_json() const {
  json values, exact;
  const auto put = [&](const std::string& col, const std::optional<Ratio>& r) {
    values[col] = r ? percent_json(*r) : json(nullptr);
    exact[col] = r ? ratio_json(*r) : json(nullptr);
  };
  put("Accuracy", accuracy());
  if (kind == VttKind::kRealism) {
    put("R as R", r_as_r());
    put("R as S", r_as_s());
    put("S as R", s_as_r());
    put("S as S", s_as_s());
  } else {
    put("Progression", kind == VttKind::kProgression ? std::optional(accuracy()) : std::nullopt);
    put("Regression", kind == VttKind::kRegression ? std::optional(accuracy()) : std::nullopt);
  }
  return json{{"session_id", session_id}, {"kind", vtt_kind_name(kind)},
              {"partial", partial},       {"n_trials", n_trials},
              {"n_answered", n_answered}, {"columns", columns()},
              {"values", values},         {"exact", exact}};
}

VttReport score_responses(VttKind kind, const std::vector<std::pair<Truth, Truth>>& answered,
                          int64_t n_trials) {
  if (answered.empty()) throw ContractError("cannot score a session with no answered trials");
  VttReport r;
  r.kind = kind;
  r.n_trials = n_trials;
  r.n_answered = static_cast<int64_t>(answered.size());
  r.partial = r.n_answered < n_trials;
  for (const auto& [truth, answer] : answered) {
    if (truth == Truth::kReal) {
      ++r.real_answered;
      if (answer == Truth::kReal) ++r.real_as_real;
    } else {
      ++r.synthetic_answered;
      if (answer == Truth::kSynthetic) ++r.synthetic_as_synthetic;
    }
  }
  return r;
}

json AgeShiftRow::to_json() const {
  return json{{"columns", {"Accuracy", "Progression", "Regression"}},
              {"values",
               {{"Accuracy", percent_json(accuracy)},
                {"Progression", percent_json(progression)},
                {"Regression", percent_json(regression)}}},
              {"exact",
               {{"Accuracy", ratio_json(accuracy)},
                {"Progression", ratio_json(progression)},
                {"Regression", ratio_json(regression)}}}};
}

AgeShiftRow combine_age_shift(const VttReport& progression, const VttReport& regression) {
  if (progression.kind != VttKind::kProgression || regression.kind != VttKind::kRegression) {
    throw ContractError("age-shift row needs one progression and one regression report");
  }
  const auto p = progression.accuracy();
  const auto g = regression.accuracy();
  return {{p.num + g.num, p.den + g.den}, p, g};
}

std::vector<size_t> seeded_permutation(size_t n, uint64_t seed) {
  std::vector<size_t> perm(n);
  for (size_t i = 0; i < n; ++i) perm[i] = i;
  uint64_t state = mix_seed(seed, 0x7715);
  for (size_t i = n; i > 1; --i) {
    state = mix_seed(state, i);
    std::swap(perm[i - 1], perm[state % i]);
  }
  return perm;
}

std::vector<Stimulus> build_stimuli(const VttSessionSpec& spec, const ImageDataset& held_out,
                                    int num_bins, const Synthesizer& synthesize) {
  spec.validate();
  std::vector<int64_t> eligible;
  for (int64_t i = 0; i < held_out.size(); ++i) {
    const int b = held_out.bins[static_cast<size_t>(i)];
    const bool ok = spec.kind == VttKind::kRealism      ? true
                    : spec.kind == VttKind::kProgression ? b + 2 < num_bins
                                                         : b - 2 >= 0;
    if (ok) eligible.push_back(i);
  }
  const auto order = seeded_permutation(eligible.size(), mix_seed(spec.shuffle_seed, 0x5e1));
  const auto avail = static_cast<int64_t>(eligible.size());
  // Realism draws real and synthetic sources from disjoint images; the age-shift
  // kinds show each source next to its own shifted image.
  const bool disjoint = spec.kind == VttKind::kRealism;
  int64_t real_short = 0, synth_short = 0;
  if (disjoint) {
    real_short = std::max<int64_t>(0, spec.n_real - avail);
    synth_short = std::max<int64_t>(0, spec.n_synthetic - std::max<int64_t>(0, avail - spec.n_real));
  } else {
    real_short = std::max<int64_t>(0, spec.n_real - avail);
    synth_short = std::max<int64_t>(0, spec.n_synthetic - avail);
  }
  if (real_short > 0 || synth_short > 0) {
    std::ostringstream msg;
    msg << vtt_kind_name(spec.kind) << " session needs " << spec.n_real << " real and "
        << spec.n_synthetic << " synthetic images but only " << avail
        << " eligible held-out images exist (real short by " << real_short
        << ", synthetic short by " << synth_short << ")";
    throw IngestionError(msg.str());
  }

  std::vector<int64_t> real_idx, synth_idx;
  for (int i = 0; i < spec.n_real; ++i) real_idx.push_back(eligible[order[static_cast<size_t>(i)]]);
  const size_t synth_offset = disjoint ? static_cast<size_t>(spec.n_real) : 0;
  for (int i = 0; i < spec.n_synthetic; ++i) {
    synth_idx.push_back(eligible[order[synth_offset + static_cast<size_t>(i)]]);
  }
  const auto synth_src = held_out.subset(synth_idx);
  const auto synthetic = synthesize(synth_src.images, synth_src.bins, spec.kind);
  if (synthetic.dim() != 4 || synthetic.size(0) != synth_src.size()) {
    throw DimensionError("synthesizer returned the wrong number of images");
  }

  const auto source_name = [&](int64_t i) {
    const auto& recs = held_out.records;
    return i < static_cast<int64_t>(recs.size()) ? recs[static_cast<size_t>(i)].image_path.string()
                                                 : "#" + std::to_string(i);
  };
  std::vector<Stimulus> pool;
  const size_t n = std::max(real_idx.size(), synth_idx.size());
  for (size_t i = 0; i < n; ++i) {
    if (i < real_idx.size()) {
      pool.push_back({from_model_tensor(held_out.images[real_idx[i]]), Truth::kReal,
                      source_name(real_idx[i])});
    }
    if (i < synth_idx.size()) {
      pool.push_back({from_model_tensor(synthetic[static_cast<int64_t>(i)]), Truth::kSynthetic,
                      std::string(vtt_kind_name(spec.kind)) + ":" + source_name(synth_idx[i])});
    }
  }
  return pool;
}

std::string random_token() {
  static std::mutex mu;
  static std::random_device device;
  std::lock_guard lock(mu);
  char buf[33];
  uint64_t hi = (static_cast<uint64_t>(device()) << 32) ^ device();
  uint64_t lo = (static_cast<uint64_t>(device()) << 32) ^ device();
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(hi),
                static_cast<unsigned long long>(lo));
  return buf;
}

// ---------------------------------------------------------------------------
// Session store

namespace {

std::string_view truth_name(Truth t) { return t == Truth::kReal ? "real" : "synthetic"; }
Truth parse_truth(const std::string& s) {
  if (s == "real") return Truth::kReal;
  if (s == "synthetic") return Truth::kSynthetic;
  throw IngestionError("bad truth value in session log: " + s);
}

void write_all(int fd, const std::string& data, const fs::path& path) {
  size_t off = 0;
  while (off < data.size()) {
    const auto n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) throw Error("write failed on " + path.string());
    off += static_cast<size_t>(n);
  }
}

// One write(2) on an O_APPEND descriptor, then fsync.
void append_line(const fs::path& path, const json& line) {
  const auto text = line.dump() + "\n";
  const int fd = ::open(path.c_str(), O_WRONLY | O_APPEND);
  if (fd < 0) throw Error("cannot open session log " + path.string());
  try {
    write_all(fd, text, path);
  } catch (...) {
    ::close(fd);
    throw;
  }
  const int rc = ::fsync(fd);
  ::close(fd);
  if (rc != 0) throw Error("fsync failed on " + path.string());
}

void write_file_synced(const fs::path& path, const std::string& data) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw Error("cannot create " + path.string());
  try {
    write_all(fd, data, path);
  } catch (...) {
    ::close(fd);
    throw;
  }
  const int rc = ::fsync(fd);
  ::close(fd);
  if (rc != 0) throw Error("fsync failed on " + path.string());
}

}  // namespace

struct SessionStore::Session {
  std::string id;
  VttSessionSpec spec;
  std::vector<Trial> trials;
  std::map<std::string, size_t> by_id;
  fs::path log;
  mutable std::mutex mutex;
};

SessionStore::SessionStore(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_ / "sessions");
  fs::create_directories(root_ / "images");
  for (const auto& entry : fs::directory_iterator(root_ / "sessions")) {
    if (entry.path().extension() == ".jsonl") replay(entry.path());
  }
}

SessionStore::~SessionStore() = default;

void SessionStore::replay(const fs::path& log) {
  std::ifstream in(log);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  auto s = std::make_shared<Session>();
  s->log = log;
  bool have_header = false;
  for (size_t i = 0; i < lines.size(); ++i) {
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::exception&) {
      // A torn final line was never acknowledged; anything earlier is corruption.
      if (i + 1 == lines.size()) break;
      throw IngestionError("corrupt line " + std::to_string(i + 1) + " in " + log.string());
    }
    const auto type = j.value("type", std::string());
    if (type == "session") {
      s->id = j.at("session_id").get<std::string>();
      s->spec = j.at("spec").get<VttSessionSpec>();
      have_header = true;
    } else if (type == "trial") {
      Trial t;
      t.trial_id = j.at("trial_id").get<std::string>();
      t.token = j.at("token").get<std::string>();
      t.truth = parse_truth(j.at("truth").get<std::string>());
      t.source = j.value("source", std::string());
      s->by_id[t.trial_id] = s->trials.size();
      s->trials.push_back(std::move(t));
    } else if (type == "response") {
      auto it = s->by_id.find(j.at("trial_id").get<std::string>());
      if (it == s->by_id.end()) throw IngestionError("response to unknown trial in " + log.string());
      s->trials[it->second].answer = parse_answer(s->spec.kind, j.at("answer").get<std::string>());
    }
  }
  if (!have_header) throw IngestionError("session log without header: " + log.string());
  for (const auto& t : s->trials) images_[t.token] = root_ / "images" / (t.token + ".png");
  sessions_[s->id] = s;
}

std::string SessionStore::create(const VttSessionSpec& spec, const std::vector<Stimulus>& stimuli) {
  spec.validate();
  if (stimuli.empty()) throw ContractError("session needs at least one stimulus");
  auto s = std::make_shared<Session>();
  s->id = random_token();
  s->spec = spec;
  const auto order = seeded_permutation(stimuli.size(), spec.shuffle_seed);
  std::ostringstream log;
  log << json{{"type", "session"}, {"session_id", s->id}, {"spec", spec}}.dump() << '\n';
  std::map<std::string, fs::path> new_images;
  for (size_t i = 0; i < order.size(); ++i) {
    const auto& stim = stimuli[order[i]];
    Trial t;
    char id[16];
    std::snprintf(id, sizeof id, "t%04zu", i + 1);
    t.trial_id = id;
    t.token = random_token();
    t.truth = stim.truth;
    t.source = stim.source;
    const auto png = root_ / "images" / (t.token + ".png");
    const auto bytes = encode_png(stim.image);
    write_file_synced(png, std::string(bytes.begin(), bytes.end()));
    new_images[t.token] = png;
    log << json{{"type", "trial"},
                {"index", i},
                {"trial_id", t.trial_id},
                {"token", t.token},
                {"truth", truth_name(t.truth)},
                {"source", t.source}}
               .dump()
        << '\n';
    s->by_id[t.trial_id] = s->trials.size();
    s->trials.push_back(std::move(t));
  }
  s->log = root_ / "sessions" / (s->id + ".jsonl");
  const auto tmp = s->log;
  const auto staging = fs::path(tmp.string() + ".tmp");
  write_file_synced(staging, log.str());
  fs::rename(staging, s->log);

  std::lock_guard lock(mutex_);
  images_.insert(new_images.begin(), new_images.end());
  sessions_[s->id] = s;
  return s->id;
}

std::shared_ptr<SessionStore::Session> SessionStore::find(const std::string& session_id) const {
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFoundError("unknown session " + session_id);
  return it->second;
}

SessionStore::Next SessionStore::next(const std::string& session_id) const {
  const auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  Next out;
  out.total = static_cast<int64_t>(s->trials.size());
  for (const auto& t : s->trials) {
    if (t.answer) ++out.answered;
  }
  for (const auto& t : s->trials) {
    if (!t.answer) {
      out.trial_id = t.trial_id;
      out.token = t.token;
      return out;
    }
  }
  out.done = true;
  return out;
}

SessionStore::Submit SessionStore::submit(const std::string& session_id,
                                          const std::string& trial_id, std::string_view answer) {
  const auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  auto it = s->by_id.find(trial_id);
  if (it == s->by_id.end()) throw NotFoundError("unknown trial " + trial_id);
  const auto value = parse_answer(s->spec.kind, answer);
  auto& trial = s->trials[it->second];
  if (trial.answer) {
    if (*trial.answer == value) return Submit::kDuplicate;
    throw ConflictError("trial " + trial_id + " was already answered differently");
  }
  append_line(s->log, json{{"type", "response"}, {"trial_id", trial_id}, {"answer", answer}});
  trial.answer = value;
  return Submit::kAccepted;
}

VttReport SessionStore::report(const std::string& session_id, bool allow_partial) const {
  const auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  std::vector<std::pair<Truth, Truth>> answered;
  for (const auto& t : s->trials) {
    if (t.answer) answered.emplace_back(t.truth, *t.answer);
  }
  if (!allow_partial && answered.size() < s->trials.size()) {
    throw ContractError(std::to_string(s->trials.size() - answered.size()) +
                        " trials unanswered; request a partial report explicitly");
  }
  auto r = score_responses(s->spec.kind, answered, static_cast<int64_t>(s->trials.size()));
  r.session_id = s->id;
  return r;
}

VttSessionSpec SessionStore::spec(const std::string& session_id) const { return find(session_id)->spec; }

std::vector<Trial> SessionStore::trials(const std::string& session_id) const {
  const auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  return s->trials;
}

fs::path SessionStore::image_path(const std::string& token) const {
  std::lock_guard lock(mutex_);
  auto it = images_.find(token);
  if (it == images_.end()) throw NotFoundError("unknown image");
  return it->second;
}

std::vector<std::string> SessionStore::session_ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> ids;
  for (const auto& [id, _] : sessions_) ids.push_back(id);
  return ids;
}

}  // namespace bapgan
