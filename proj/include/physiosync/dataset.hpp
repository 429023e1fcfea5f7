#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "physiosync/errors.hpp"
#include "physiosync/io.hpp"

namespace physiosync::data {

namespace fs = std::filesystem;
using Rng = std::mt19937_64;

/// Row-major [channels x samples] float matrix.
struct Signal {
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<float> data;

  Signal() = default;
  Signal(std::size_t c, std::size_t s, float fill = 0.0f) : channels(c), samples(s), data(c * s, fill) {}
  Signal(std::size_t c, std::size_t s, std::vector<float> values) : channels(c), samples(s), data(std::move(values)) {
    if (data.size() != c * s) throw ShapeError("signal data does not match channels x samples");
  }

  float& at(std::size_t c, std::size_t s) { return data[c * samples + s]; }
  float at(std::size_t c, std::size_t s) const { return data[c * samples + s]; }

  /// Columns [start, start + len) of every channel.
  Signal columns(std::size_t start, std::size_t len) const {
    if (start + len > samples) throw ShapeError("signal column range out of bounds");
    Signal out(channels, len);
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(c * samples + start), len,
                  out.data.begin() + static_cast<std::ptrdiff_t>(c * len));
    return out;
  }
};

enum class DatasetKind { deap, dreamer };

inline DatasetKind parse_kind(const std::string& s) {
  if (s == "deap") return DatasetKind::deap;
  if (s == "dreamer") return DatasetKind::dreamer;
  throw SchemaError("unknown rating kind '" + s + "' (expected deap or dreamer)");
}
inline std::string kind_name(DatasetKind k) { return k == DatasetKind::deap ? "deap" : "dreamer"; }

enum class Level { low = 0, high = 1 };

struct RatingScale {
  double min = 1.0;
  double max = 9.0;
  DatasetKind kind = DatasetKind::deap;
};

inline RatingScale scale_for(DatasetKind kind) {
  return kind == DatasetKind::deap ? RatingScale{1.0, 9.0, kind} : RatingScale{1.0, 5.0, kind};
}

/// DEAP: high iff rating >= 5. DREAMER: high iff rating > 3.
inline Level binarize_rating(double rating, DatasetKind kind) {
  const RatingScale scale = scale_for(kind);
  if (!(rating >= scale.min && rating <= scale.max))
    throw DatasetError("rating " + std::to_string(rating) + " outside the " + kind_name(kind) + " scale [" +
                       std::to_string(scale.min) + ", " + std::to_string(scale.max) + "]");
  if (kind == DatasetKind::deap) return rating >= 5.0 ? Level::high : Level::low;
  return rating > 3.0 ? Level::high : Level::low;
}

/// (high,high)->0, (low,high)->1, (high,low)->2, (low,low)->3 for (arousal, valence).
inline int four_class(Level arousal, Level valence) {
  const int a = arousal == Level::high ? 0 : 1;
  const int v = valence == Level::high ? 0 : 2;
  return a + v;
}

struct LabelSet {
  Level arousal = Level::low;
  Level valence = Level::low;
  int four = 3;
};

inline LabelSet make_labels(double arousal_rating, double valence_rating, DatasetKind kind) {
  LabelSet l;
  l.arousal = binarize_rating(arousal_rating, kind);
  l.valence = binarize_rating(valence_rating, kind);
  l.four = four_class(l.arousal, l.valence);
  return l;
}

struct ModalityDescriptor {
  std::string id;
  std::size_t channels = 0;
};

struct TrialDescriptor {
  std::string subject;
  std::string stimulus;
  double duration_seconds = 0.0;
  std::map<std::string, double> ratings;     // "arousal", "valence", ...
  std::map<std::string, fs::path> files;     // modality id -> path relative to the manifest
};

struct DatasetManifest {
  std::string name;
  std::size_t sample_rate_hz = 0;
  std::vector<ModalityDescriptor> modalities;
  std::vector<std::string> subjects;
  std::vector<TrialDescriptor> trials;
  RatingScale rating_scale;
  double baseline_seconds = 0.0;
  fs::path root;  // directory holding the manifest; data paths resolve against it

  std::vector<std::string> stimuli() const {
    std::set<std::string> ids;
    for (const auto& t : trials) ids.insert(t.stimulus);
    return {ids.begin(), ids.end()};
  }
  const ModalityDescriptor& modality(const std::string& id) const {
    for (const auto& m : modalities)
      if (m.id == id) return m;
    throw DatasetError("unknown modality '" + id + "'");
  }
  std::size_t trial_samples(const TrialDescriptor& t) const {
    return static_cast<std::size_t>(std::llround(t.duration_seconds * static_cast<double>(sample_rate_hz)));
  }
  std::uintmax_t expected_bytes(const TrialDescriptor& t, const ModalityDescriptor& m) const {
    return static_cast<std::uintmax_t>(m.channels) * trial_samples(t) * 4u;
  }
};

inline constexpr const char* kManifestFormat = "physiosync-dataset";
inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestFileName = "manifest.json";

/// Conventional location of a trial file: <modality>/<subject>_<stimulus>.bin
inline fs::path trial_file_name(const std::string& modality, const std::string& subject, const std::string& stimulus) {
  return fs::path(modality) / (subject + "_" + stimulus + ".bin");
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["format"] = kManifestFormat;
  j["version"] = kManifestVersion;
  j["name"] = m.name;
  j["sample_rate_hz"] = m.sample_rate_hz;
  j["baseline_seconds"] = m.baseline_seconds;
  j["rating_scale"] = {{"min", m.rating_scale.min}, {"max", m.rating_scale.max}, {"kind", kind_name(m.rating_scale.kind)}};
  j["modalities"] = nlohmann::json::array();
  for (const auto& mod : m.modalities) j["modalities"].push_back({{"id", mod.id}, {"channels", mod.channels}});
  j["subjects"] = m.subjects;
  j["trials"] = nlohmann::json::array();
  for (const auto& t : m.trials) {
    nlohmann::json files = nlohmann::json::object();
    for (const auto& [mod, p] : t.files) files[mod] = p.generic_string();
    j["trials"].push_back({{"subject", t.subject},
                           {"stimulus", t.stimulus},
                           {"duration_seconds", t.duration_seconds},
                           {"ratings", t.ratings},
                           {"files", files}});
  }
  return j;
}

inline void save_manifest(const DatasetManifest& m, const fs::path& dir) {
  io::write_text_file(dir / kManifestFileName, manifest_to_json(m).dump(2) + "\n");
}

/// Validates the manifest's internal invariants and the byte length of every data file.
inline void validate_manifest(const DatasetManifest& m) {
  if (m.sample_rate_hz == 0) throw SchemaError("sample_rate_hz must be positive");
  if (m.modalities.empty()) throw SchemaError("no modalities");
  std::set<std::string> mod_ids;
  for (const auto& mod : m.modalities) {
    if (mod.channels == 0) throw SchemaError("modality '" + mod.id + "' has zero channels");
    if (!mod_ids.insert(mod.id).second) throw SchemaError("duplicate modality '" + mod.id + "'");
  }
  const std::set<std::string> subjects(m.subjects.begin(), m.subjects.end());
  if (subjects.size() != m.subjects.size()) throw SchemaError("duplicate subject ids");
  if (!(m.rating_scale.min < m.rating_scale.max)) throw SchemaError("rating_scale min must be below max");
  if (m.baseline_seconds < 0) throw SchemaError("baseline_seconds must be non-negative");
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& t : m.trials) {
    const std::string where = "trial (" + t.subject + ", " + t.stimulus + ")";
    if (!subjects.count(t.subject)) throw SchemaError(where + ": unknown subject");
    if (!seen.emplace(t.subject, t.stimulus).second) throw SchemaError(where + ": appears more than once");
    if (!(t.duration_seconds > 0)) throw SchemaError(where + ": duration must be positive");
    const double samples = t.duration_seconds * static_cast<double>(m.sample_rate_hz);
    if (std::abs(samples - std::round(samples)) > 1e-6)
      throw SchemaError(where + ": duration x sample rate is not an integer");
    for (const auto& [key, value] : t.ratings)
      if (!(value >= m.rating_scale.min && value <= m.rating_scale.max))
        throw SchemaError(where + ": rating '" + key + "' outside scale");
    for (const auto& mod : m.modalities) {
      auto it = t.files.find(mod.id);
      if (it == t.files.end()) throw SchemaError(where + ": no file for modality '" + mod.id + "'");
      const fs::path path = m.root / it->second;
      if (!fs::exists(path)) throw MissingFileError(path.string());
      const auto actual = fs::file_size(path);
      const auto expected = m.expected_bytes(t, mod);
      if (actual != expected) throw ByteLengthError(path.string(), expected, actual);
    }
    for (const auto& [mod, p] : t.files)
      if (!mod_ids.count(mod)) throw SchemaError(where + ": file for unknown modality '" + mod + "'");
  }
}

/// Reads `path` (a manifest file, or a directory containing manifest.json) and
/// validates it eagerly.
inline DatasetManifest load_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / kManifestFileName : path;
  if (!fs::exists(file)) throw MissingFileError(file.string());
  std::ifstream is(file);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("manifest is not valid JSON: ") + e.what());
  }
  DatasetManifest m;
  m.root = file.parent_path();
  try {
    if (j.at("format").get<std::string>() != kManifestFormat) throw SchemaError("unexpected format tag");
    if (j.at("version").get<int>() != kManifestVersion) throw SchemaError("unsupported manifest version");
    m.name = j.at("name").get<std::string>();
    const auto rate = j.at("sample_rate_hz").get<long long>();
    if (rate <= 0) throw SchemaError("sample_rate_hz must be positive");
    m.sample_rate_hz = static_cast<std::size_t>(rate);
    m.baseline_seconds = j.value("baseline_seconds", 0.0);
    const auto& rs = j.at("rating_scale");
    m.rating_scale = {rs.at("min").get<double>(), rs.at("max").get<double>(), parse_kind(rs.at("kind").get<std::string>())};
    for (const auto& mod : j.at("modalities")) {
      const auto channels = mod.at("channels").get<long long>();
      if (channels <= 0) throw SchemaError("modality channel count must be positive");
      m.modalities.push_back({mod.at("id").get<std::string>(), static_cast<std::size_t>(channels)});
    }
    m.subjects = j.at("subjects").get<std::vector<std::string>>();
    for (const auto& t : j.at("trials")) {
      TrialDescriptor td;
      td.subject = t.at("subject").get<std::string>();
      td.stimulus = t.at("stimulus").get<std::string>();
      td.duration_seconds = t.at("duration_seconds").get<double>();
      td.ratings = t.at("ratings").get<std::map<std::string, double>>();
      for (const auto& [mod, p] : t.at("files").items()) td.files[mod] = fs::path(p.get<std::string>());
      m.trials.push_back(std::move(td));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(e.what());
  }
  validate_manifest(m);
  return m;
}

inline Signal load_trial(const DatasetManifest& m, const TrialDescriptor& t, const std::string& modality) {
  const auto& mod = m.modality(modality);
  const fs::path path = m.root / t.files.at(modality);
  auto values = io::read_f32_file(path);
  const std::size_t samples = m.trial_samples(t);
  if (values.size() != mod.channels * samples)
    throw ByteLengthError(path.string(), m.expected_bytes(t, mod), values.size() * 4u);
  for (float v : values)
    if (!std::isfinite(v)) throw DatasetError("non-finite sample in " + path.string());
  return Signal(mod.channels, samples, std::move(values));
}

/// Subtracts a per-channel 1-second reference, the mean of the baseline's
/// one-second chunks, tiled over the remaining (stimulus) portion.
/// A zero-length baseline returns the signal unchanged.
inline Signal baseline_correct(const Signal& trial, std::size_t fs_hz, double baseline_seconds, double ref_seconds = 1.0) {
  const auto ref_len = static_cast<std::size_t>(std::llround(ref_seconds * static_cast<double>(fs_hz)));
  const auto base_len = static_cast<std::size_t>(std::llround(baseline_seconds * static_cast<double>(fs_hz)));
  if (ref_len == 0) throw ConfigError("baseline reference window must be at least one sample");
  if (base_len % ref_len != 0) throw ConfigError("baseline length is not a multiple of the reference window");
  if (base_len == 0) return trial;
  if (trial.samples < base_len + ref_len)
    throw DatasetError("trial shorter than baseline plus one reference window");
  const std::size_t chunks = base_len / ref_len;
  const std::size_t out_len = trial.samples - base_len;
  Signal out(trial.channels, out_len);
  std::vector<double> ref(ref_len);
  for (std::size_t c = 0; c < trial.channels; ++c) {
    std::fill(ref.begin(), ref.end(), 0.0);
    for (std::size_t b = 0; b < chunks; ++b)
      for (std::size_t k = 0; k < ref_len; ++k) ref[k] += trial.at(c, b * ref_len + k);
    for (auto& r : ref) r /= static_cast<double>(chunks);
    for (std::size_t j = 0; j < out_len; ++j)
      out.at(c, j) = static_cast<float>(trial.at(c, base_len + j) - ref[j % ref_len]);
  }
  return out;
}

struct Clip {
  Signal data;
  std::string modality;
  std::string subject;
  std::string stimulus;
  std::size_t position = 0;
  std::size_t variant = 0;
  double t_seconds = 0.0;
};

inline std::size_t samples_for(double t_seconds, std::size_t fs_hz) {
  const double s = t_seconds * static_cast<double>(fs_hz);
  if (!(t_seconds > 0) || std::abs(s - std::round(s)) > 1e-9 || std::round(s) < 1)
    throw ConfigError("clip length t = " + std::to_string(t_seconds) + " s is not a whole number of samples");
  return static_cast<std::size_t>(std::llround(s));
}

/// Non-overlapping clips of t seconds in temporal order; the remainder is dropped.
inline std::vector<Clip> segment_trial(const Signal& trial, std::size_t fs_hz, double t_seconds,
                                       const std::string& modality = {}, const std::string& subject = {},
                                       const std::string& stimulus = {}) {
  const std::size_t len = samples_for(t_seconds, fs_hz);
  if (len > trial.samples) throw DatasetError("clip length exceeds trial length");
  const std::size_t n = trial.samples / len;
  std::vector<Clip> clips;
  clips.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    clips.push_back({trial.columns(i * len, len), modality, subject, stimulus, i, 0, t_seconds});
  return clips;
}

struct PreprocessOptions {
  double ref_seconds = 1.0;
  // Keep only the final N seconds of each corrected trial (0 keeps everything).
  double keep_last_seconds = 0.0;
};

/// All clips of a dataset at one resolution, indexed by (modality, subject, stimulus).
/// Copies share clip storage.
class ClipSet {
 public:
  using Key = std::tuple<std::string, std::string, std::string>;  // modality, subject, stimulus

  static ClipSet build(const DatasetManifest& m, double t_seconds, const PreprocessOptions& opt = {}) {
    ClipSet set;
    set.t_seconds_ = t_seconds;
    set.sample_rate_ = m.sample_rate_hz;
    for (const auto& mod : m.modalities) set.modalities_.push_back(mod.id);
    for (const auto& t : m.trials) {
      const auto find = [&](const char* key) {
        auto it = t.ratings.find(key);
        if (it == t.ratings.end()) throw SchemaError("trial (" + t.subject + ", " + t.stimulus + ") lacks rating " + key);
        return it->second;
      };
      set.labels_[{t.subject, t.stimulus}] = make_labels(find("arousal"), find("valence"), m.rating_scale.kind);
      for (const auto& mod : m.modalities) {
        Signal corrected = baseline_correct(load_trial(m, t, mod.id), m.sample_rate_hz, m.baseline_seconds, opt.ref_seconds);
        if (opt.keep_last_seconds > 0) {
          const std::size_t keep = samples_for(opt.keep_last_seconds, m.sample_rate_hz);
          if (keep < corrected.samples) corrected = corrected.columns(corrected.samples - keep, keep);
        }
        set.clips_[{mod.id, t.subject, t.stimulus}] = std::make_shared<const std::vector<Clip>>(
            segment_trial(corrected, m.sample_rate_hz, t_seconds, mod.id, t.subject, t.stimulus));
      }
    }
    set.refresh_ids();
    return set;
  }

  /// Adds a trial's clips directly (used by tests and the synthetic generator).
  void insert(const std::string& modality, const std::string& subject, const std::string& stimulus,
              std::vector<Clip> clips, LabelSet labels) {
    if (std::find(modalities_.begin(), modalities_.end(), modality) == modalities_.end()) modalities_.push_back(modality);
    clips_[{modality, subject, stimulus}] = std::make_shared<const std::vector<Clip>>(std::move(clips));
    labels_[{subject, stimulus}] = labels;
    refresh_ids();
  }

  void set_geometry(double t_seconds, std::size_t sample_rate) {
    t_seconds_ = t_seconds;
    sample_rate_ = sample_rate;
  }

  /// Subset keeping only the listed subjects and stimuli.
  ClipSet restrict(const std::vector<std::string>& subjects, const std::vector<std::string>& stimuli) const {
    const std::set<std::string> subj(subjects.begin(), subjects.end()), stim(stimuli.begin(), stimuli.end());
    ClipSet out;
    out.t_seconds_ = t_seconds_;
    out.sample_rate_ = sample_rate_;
    out.modalities_ = modalities_;
    for (const auto& [key, clips] : clips_)
      if (subj.count(std::get<1>(key)) && stim.count(std::get<2>(key))) out.clips_[key] = clips;
    for (const auto& [key, label] : labels_)
      if (subj.count(key.first) && stim.count(key.second)) out.labels_[key] = label;
    out.refresh_ids();
    return out;
  }

  /// Subset keeping only clips whose position lies in [begin, end).
  ClipSet restrict_positions(std::size_t begin, std::size_t end) const {
    ClipSet out = *this;
    for (auto& [key, clips] : out.clips_) {
      std::vector<Clip> kept;
      for (const auto& c : *clips)
        if (c.position >= begin && c.position < end) kept.push_back(c);
      clips = std::make_shared<const std::vector<Clip>>(std::move(kept));
    }
    return out;
  }

  const std::vector<Clip>& trial(const std::string& modality, const std::string& subject, const std::string& stimulus) const {
    auto it = clips_.find({modality, subject, stimulus});
    if (it == clips_.end())
      throw InsufficientDataError("no clips for (" + modality + ", " + subject + ", " + stimulus + ")");
    return *it->second;
  }
  bool has_trial(const std::string& modality, const std::string& subject, const std::string& stimulus) const {
    return clips_.count({modality, subject, stimulus}) > 0;
  }
  const LabelSet& labels(const std::string& subject, const std::string& stimulus) const {
    auto it = labels_.find({subject, stimulus});
    if (it == labels_.end()) throw InsufficientDataError("no labels for (" + subject + ", " + stimulus + ")");
    return it->second;
  }

  const std::vector<std::string>& modalities() const { return modalities_; }
  const std::vector<std::string>& subjects() const { return subjects_; }
  const std::vector<std::string>& stimuli() const { return stimuli_; }
  double t_seconds() const { return t_seconds_; }
  std::size_t sample_rate() const { return sample_rate_; }

  std::size_t clip_count(const std::string& modality) const {
    std::size_t n = 0;
    for (const auto& [key, clips] : clips_)
      if (std::get<0>(key) == modality) n += clips->size();
    return n;
  }
  std::size_t clip_count(const std::string& modality, const std::string& subject) const {
    std::size_t n = 0;
    for (const auto& [key, clips] : clips_)
      if (std::get<0>(key) == modality && std::get<1>(key) == subject) n += clips->size();
    return n;
  }

 private:
  void refresh_ids() {
    std::set<std::string> subj, stim;
    for (const auto& [key, clips] : clips_) {
      subj.insert(std::get<1>(key));
      stim.insert(std::get<2>(key));
    }
    subjects_.assign(subj.begin(), subj.end());
    stimuli_.assign(stim.begin(), stim.end());
  }

  std::map<Key, std::shared_ptr<const std::vector<Clip>>> clips_;
  std::map<std::pair<std::string, std::string>, LabelSet> labels_;
  std::vector<std::string> modalities_;
  std::vector<std::string> subjects_;
  std::vector<std::string> stimuli_;
  double t_seconds_ = 0.0;
  std::size_t sample_rate_ = 0;
};

/// Paired clips for two subjects. clips[modality][subject 0|1][slot]; slot i of
/// subject A and slot i of subject B are positives.
struct MiniBatch {
  std::vector<std::string> modalities;
  std::array<std::string, 2> subjects;
  std::vector<std::array<std::vector<Clip>, 2>> clips;

  std::size_t slots() const { return clips.empty() ? 0 : clips.front()[0].size(); }
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& per_mod : clips) n += per_mod[0].size() + per_mod[1].size();
    return n;
  }
  std::size_t modality_index(const std::string& id) const {
    for (std::size_t i = 0; i < modalities.size(); ++i)
      if (modalities[i] == id) return i;
    throw DatasetError("batch has no modality '" + id + "'");
  }
};

/// Draws K (stimulus, clip position) slots without replacement among those both
/// subjects have for every modality, and takes both subjects' clips at each slot.
inline MiniBatch sample_minibatch(const ClipSet& set, const std::string& subject_a, const std::string& subject_b,
                                  std::size_t k, Rng& rng) {
  if (subject_a == subject_b) throw DatasetError("sample_minibatch: subjects must differ");
  std::vector<std::pair<std::string, std::size_t>> slots;
  for (const auto& stim : set.stimuli()) {
    std::size_t n = std::numeric_limits<std::size_t>::max();
    bool complete = true;
    for (const auto& mod : set.modalities())
      for (const auto& subj : {subject_a, subject_b}) {
        if (!set.has_trial(mod, subj, stim)) {
          complete = false;
          continue;
        }
        n = std::min(n, set.trial(mod, subj, stim).size());
      }
    if (!complete) continue;
    for (std::size_t p = 0; p < n; ++p) slots.emplace_back(stim, p);
  }
  if (k == 0 || k > slots.size())
    throw InsufficientDataError("sample_minibatch: requested " + std::to_string(k) + " slots, " +
                                std::to_string(slots.size()) + " available for (" + subject_a + ", " + subject_b + ")");
  std::shuffle(slots.begin(), slots.end(), rng);
  slots.resize(k);
  MiniBatch batch;
  batch.modalities = set.modalities();
  batch.subjects = {subject_a, subject_b};
  batch.clips.resize(batch.modalities.size());
  for (std::size_t m = 0; m < batch.modalities.size(); ++m)
    for (std::size_t s = 0; s < 2; ++s) {
      auto& out = batch.clips[m][s];
      out.reserve(k);
      for (const auto& [stim, pos] : slots) out.push_back(set.trial(batch.modalities[m], batch.subjects[s], stim)[pos]);
    }
  return batch;
}

}  // namespace physiosync::data
