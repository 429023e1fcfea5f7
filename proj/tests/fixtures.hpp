#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "physiosync/dataset.hpp"

namespace fixtures {

namespace fs = std::filesystem;

/// Fresh scratch directory under the system temp dir, removed on destruction.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = fs::temp_directory_path() / ("physiosync_" + tag + "_" + std::to_string(rd()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

/// Manifest with every (subject, stimulus) trial present. Data files are
/// written with `fill(subject, stimulus, modality, channel, sample)`, or left
/// as sparse zero files when `sparse` is set.
template <class Fill>
physiosync::data::DatasetManifest write_dataset(const fs::path& dir, std::size_t subjects, std::size_t stimuli,
                                                std::vector<physiosync::data::ModalityDescriptor> modalities,
                                                std::size_t fs_hz, double seconds, double baseline, Fill fill,
                                                bool sparse = false) {
  using namespace physiosync;
  data::DatasetManifest m;
  m.name = "fixture";
  m.sample_rate_hz = fs_hz;
  m.baseline_seconds = baseline;
  m.modalities = std::move(modalities);
  m.root = dir;
  for (std::size_t s = 0; s < subjects; ++s) m.subjects.push_back("s" + std::to_string(s));
  const auto samples = static_cast<std::size_t>(std::llround(seconds * static_cast<double>(fs_hz)));
  for (std::size_t s = 0; s < subjects; ++s)
    for (std::size_t v = 0; v < stimuli; ++v) {
      data::TrialDescriptor t;
      t.subject = m.subjects[s];
      t.stimulus = "v" + std::to_string(v);
      t.duration_seconds = seconds;
      t.ratings = {{"arousal", v % 2 ? 7.0 : 2.0}, {"valence", v % 3 ? 6.0 : 3.0}};
      for (const auto& mod : m.modalities) {
        const auto rel = data::trial_file_name(mod.id, t.subject, t.stimulus);
        const auto path = dir / rel;
        if (sparse) {
          fs::create_directories(path.parent_path());
          { std::ofstream touch(path, std::ios::binary); }
          fs::resize_file(path, mod.channels * samples * 4);
        } else {
          std::vector<float> values(mod.channels * samples);
          for (std::size_t c = 0; c < mod.channels; ++c)
            for (std::size_t k = 0; k < samples; ++k) values[c * samples + k] = fill(s, v, mod.id, c, k);
          io::write_f32_file(path, values);
        }
        t.files[mod.id] = rel;
      }
      m.trials.push_back(std::move(t));
    }
  data::save_manifest(m, dir);
  return m;
}

}  // namespace fixtures
