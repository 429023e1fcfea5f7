#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "physiosync/dataset.hpp"

// Synthetic multimodal, multi-subject recordings with a known shared cause.
//
// Each stimulus drives a latent trajectory L(t) in R^latent_dim: a per-stimulus
// offset plus a smooth band-limited fluctuation (a random sum of low-frequency
// sinusoids). Every subject watching that stimulus sees the same L(t). A
// subject's channels for modality m are
//
//   x(t) = A_{s,m} L(t) + P_{s,m} u_{s,trial}(t) + noise
//
// with A_{s,m} = B_m + subject_mixing_noise * D_{s,m} (shared base map plus a
// subject perturbation), u a private smooth process unrelated to the stimulus,
// and white noise at observation_snr_db relative to the clean signal. During
// the baseline only the private process and noise are present. Arousal and
// valence ratings follow the sign of the mean of latent components 0 and 1.
namespace physiosync::synth {

struct SynthConfig {
  std::size_t n_subjects = 4;
  std::size_t n_stimuli = 8;
  double trial_seconds = 60.0;
  double baseline_seconds = 3.0;
  std::size_t fs = 128;
  std::size_t eeg_channels = 8;
  std::size_t pps_channels = 2;
  std::size_t latent_dim = 4;
  double subject_mixing_noise = 0.3;
  double observation_snr_db = 10.0;
  std::size_t private_dim = 2;     // dimension of each subject's private process
  double private_gain = 1.0;       // its amplitude relative to the stimulus latent
  double max_frequency_hz = 1.0;   // bandwidth of the smooth processes
  double latent_fluctuation = 1.0; // std of the latent fluctuation around its offset
  double private_offset = 0.0;     // std of a per-trial constant added to the private process
  std::uint64_t seed = 7;

  void validate() const {
    if (n_subjects == 0 || n_stimuli == 0 || fs == 0 || eeg_channels == 0 || pps_channels == 0)
      throw ConfigError("synth: counts must be positive");
    if (latent_dim < 2) throw ConfigError("synth: latent_dim must be at least 2");
    if (!(trial_seconds > 0) || baseline_seconds < 0) throw ConfigError("synth: invalid trial geometry");
    if (subject_mixing_noise < 0 || private_gain < 0 || latent_fluctuation < 0 || private_offset < 0 || !(max_frequency_hz > 0)) throw ConfigError("synth: invalid amplitudes");
    data::samples_for(trial_seconds, fs);
    if (baseline_seconds > 0) data::samples_for(baseline_seconds, fs);
  }
};

namespace detail {

/// Independent, reproducible stream per purpose and index tuple.
inline data::Rng stream(std::uint64_t seed, std::uint64_t purpose, std::uint64_t a = 0, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return data::Rng(seq);
}

/// dims x samples smooth zero-mean process with unit variance per dimension.
inline std::vector<std::vector<double>> smooth_process(std::size_t dims, std::size_t samples, std::size_t fs,
                                                       double max_hz, data::Rng& rng) {
  constexpr std::size_t kComponents = 24;
  std::uniform_real_distribution<double> freq(0.02, max_hz), phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> amp(0.0, 1.0);
  std::vector<std::vector<double>> out(dims, std::vector<double>(samples, 0.0));
  for (auto& row : out) {
    double power = 0.0;
    for (std::size_t k = 0; k < kComponents; ++k) {
      const double f = freq(rng), ph = phase(rng), a = amp(rng);
      power += 0.5 * a * a;
      const double w = 2.0 * std::numbers::pi * f / static_cast<double>(fs);
      for (std::size_t t = 0; t < samples; ++t) row[t] += a * std::sin(w * static_cast<double>(t) + ph);
    }
    const double norm = power > 0 ? 1.0 / std::sqrt(power) : 0.0;
    for (auto& v : row) v *= norm;
  }
  return out;
}

inline std::vector<double> gaussian_matrix(std::size_t rows, std::size_t cols, double scale, data::Rng& rng) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> m(rows * cols);
  for (auto& v : m) v = n(rng);
  return m;
}

inline std::string id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%02zu", prefix, i + 1);
  return buf;
}

}  // namespace detail

/// Rating on the 1..9 scale: >= 5 exactly when the latent mean is >= 0.
inline double rating_from_latent_mean(double mean) {
  return mean >= 0 ? 5.0 + 4.0 * std::tanh(mean) : 5.0 + 3.999 * std::tanh(mean);
}

/// Writes a dataset container under `out_dir` and returns its manifest.
inline data::DatasetManifest generate(const SynthConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  const std::size_t base_len = config.baseline_seconds > 0 ? data::samples_for(config.baseline_seconds, config.fs) : 0;
  const std::size_t stim_len = data::samples_for(config.trial_seconds, config.fs);
  const std::size_t total_len = base_len + stim_len;
  const std::size_t latent = config.latent_dim;

  data::DatasetManifest manifest;
  manifest.name = "synthetic";
  manifest.sample_rate_hz = config.fs;
  manifest.baseline_seconds = base_len ? config.baseline_seconds : 0.0;
  manifest.rating_scale = data::scale_for(data::DatasetKind::deap);
  manifest.modalities = {{"eeg", config.eeg_channels}, {"pps", config.pps_channels}};
  manifest.root = out_dir;
  for (std::size_t s = 0; s < config.n_subjects; ++s) manifest.subjects.push_back(detail::id("s", s));

  // Stimulus offsets: components 0 and 1 get balanced signs, magnitudes in [0.5, 1.5].
  auto offsets_rng = detail::stream(config.seed, 1);
  std::vector<std::vector<double>> offsets(config.n_stimuli, std::vector<double>(latent, 0.0));
  std::uniform_real_distribution<double> magnitude(0.5, 1.5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t k = 0; k < latent; ++k) {
    std::vector<double> signs(config.n_stimuli);
    for (std::size_t i = 0; i < config.n_stimuli; ++i) signs[i] = i < (config.n_stimuli + 1) / 2 ? 1.0 : -1.0;
    std::shuffle(signs.begin(), signs.end(), offsets_rng);
    for (std::size_t i = 0; i < config.n_stimuli; ++i)
      offsets[i][k] = k < 2 ? signs[i] * magnitude(offsets_rng) : gauss(offsets_rng);
  }

  std::vector<std::vector<std::vector<double>>> latents(config.n_stimuli);
  for (std::size_t i = 0; i < config.n_stimuli; ++i) {
    auto rng = detail::stream(config.seed, 2, i);
    latents[i] = detail::smooth_process(latent, stim_len, config.fs, config.max_frequency_hz, rng);
    for (std::size_t k = 0; k < latent; ++k)
      for (auto& v : latents[i][k]) v = config.latent_fluctuation * v + offsets[i][k];
  }

  const std::vector<std::size_t> channels{config.eeg_channels, config.pps_channels};
  std::vector<std::vector<double>> base_maps;
  for (std::size_t m = 0; m < 2; ++m) {
    auto rng = detail::stream(config.seed, 3, m);
    base_maps.push_back(detail::gaussian_matrix(channels[m], latent, 1.0 / std::sqrt(static_cast<double>(latent)), rng));
  }

  for (std::size_t s = 0; s < config.n_subjects; ++s) {
    std::vector<std::vector<double>> maps, private_maps;
    for (std::size_t m = 0; m < 2; ++m) {
      auto rng = detail::stream(config.seed, 4, s, m);
      auto map = base_maps[m];
      auto d = detail::gaussian_matrix(channels[m], latent, 1.0 / std::sqrt(static_cast<double>(latent)), rng);
      for (std::size_t i = 0; i < map.size(); ++i) map[i] += config.subject_mixing_noise * d[i];
      maps.push_back(std::move(map));
      private_maps.push_back(detail::gaussian_matrix(channels[m], config.private_dim,
                                                     config.private_gain / std::sqrt(static_cast<double>(std::max<std::size_t>(1, config.private_dim))), rng));
    }
    for (std::size_t i = 0; i < config.n_stimuli; ++i) {
      data::TrialDescriptor trial;
      trial.subject = manifest.subjects[s];
      trial.stimulus = detail::id("v", i);
      trial.duration_seconds = static_cast<double>(total_len) / static_cast<double>(config.fs);
      for (std::size_t k = 0; k < 2; ++k) {
        double mean = 0.0;
        for (double v : latents[i][k]) mean += v;
        mean /= static_cast<double>(stim_len);
        trial.ratings[k == 0 ? "arousal" : "valence"] = rating_from_latent_mean(mean);
      }
      auto rng = detail::stream(config.seed, 5, s, i);
      auto priv = detail::smooth_process(config.private_dim, total_len, config.fs, config.max_frequency_hz, rng);
      if (config.private_offset > 0) {
        std::normal_distribution<double> drift(0.0, config.private_offset);
        for (auto& row : priv) {
          const double c = drift(rng);
          for (auto& v : row) v += c;
        }
      }
      for (std::size_t m = 0; m < 2; ++m) {
        const std::size_t c_count = channels[m];
        std::vector<double> clean(c_count * total_len, 0.0);
        for (std::size_t c = 0; c < c_count; ++c)
          for (std::size_t t = 0; t < total_len; ++t) {
            double v = 0.0;
            for (std::size_t p = 0; p < config.private_dim; ++p) v += private_maps[m][c * config.private_dim + p] * priv[p][t];
            if (t >= base_len)
              for (std::size_t k = 0; k < latent; ++k) v += maps[m][c * latent + k] * latents[i][k][t - base_len];
            clean[c * total_len + t] = v;
          }
        std::vector<float> values(clean.size());
        for (std::size_t c = 0; c < c_count; ++c) {
          double power = 0.0;
          for (std::size_t t = base_len; t < total_len; ++t) power += clean[c * total_len + t] * clean[c * total_len + t];
          power /= static_cast<double>(stim_len);
          std::normal_distribution<double> noise(0.0, std::sqrt(power / std::pow(10.0, config.observation_snr_db / 10.0)));
          for (std::size_t t = 0; t < total_len; ++t)
            values[c * total_len + t] = static_cast<float>(clean[c * total_len + t] + noise(rng));
        }
        const std::string mod = manifest.modalities[m].id;
        const auto rel = data::trial_file_name(mod, trial.subject, trial.stimulus);
        io::write_f32_file(out_dir / rel, values);
        trial.files[mod] = rel;
      }
      manifest.trials.push_back(std::move(trial));
    }
  }
  data::save_manifest(manifest, out_dir);
  data::validate_manifest(manifest);
  return manifest;
}

}  // namespace physiosync::synth
