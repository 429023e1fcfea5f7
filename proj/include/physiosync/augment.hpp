#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <utility>

#include "physiosync/dataset.hpp"

namespace physiosync::augment {

using data::Clip;
using data::MiniBatch;
using data::Rng;

struct AugmentPolicy {
  std::pair<double, double> scale_low_range{0.7, 0.8};
  std::pair<double, double> scale_high_range{1.2, 1.3};
  double snr_db = 5.0;
  bool enable_cp = false;  // channel permutation replaces the noise variant
  bool enable_tf = false;  // temporal flip replaces the scale+noise variant
  std::size_t expansion = 5;

  void validate() const {
    auto ok = [](const std::pair<double, double>& r) { return r.first > 0 && r.first <= r.second; };
    if (!ok(scale_low_range) || !ok(scale_high_range)) throw ConfigError("augment: scale ranges must be positive and nonempty");
    if (!std::isfinite(snr_db)) throw ConfigError("augment: snr_db must be finite");
    if (expansion != 1 && expansion != 5)
      throw ConfigError("augment: expansion must be 5 (augmentation on) or 1 (off), got " + std::to_string(expansion));
  }
};

inline Clip scale_clip(const Clip& clip, double factor) {
  if (!(factor > 0)) throw ConfigError("scale_clip: factor must be positive");
  Clip out = clip;
  for (auto& v : out.data.data) v = static_cast<float>(v * factor);
  ++out.variant;
  return out;
}

/// Mean squared sample value over all channels.
inline double signal_power(const data::Signal& s) {
  double p = 0.0;
  for (float v : s.data) p += static_cast<double>(v) * v;
  return s.data.empty() ? 0.0 : p / static_cast<double>(s.data.size());
}

/// Noise variance that puts white noise at `snr_db` below the given signal power.
inline double noise_variance_for(double signal_power, double snr_db) {
  return signal_power / std::pow(10.0, snr_db / 10.0);
}

/// Adds zero-mean Gaussian noise whose variance yields the requested SNR for this clip.
inline Clip add_noise_snr(const Clip& clip, double snr_db, Rng& rng) {
  const double power = signal_power(clip.data);
  if (!(power > 0)) throw NumericError("add_noise_snr: all-zero clip has undefined SNR");
  std::normal_distribution<double> noise(0.0, std::sqrt(noise_variance_for(power, snr_db)));
  Clip out = clip;
  for (auto& v : out.data.data) v = static_cast<float>(v + noise(rng));
  ++out.variant;
  return out;
}

inline Clip channel_permute(const Clip& clip, Rng& rng) {
  std::vector<std::size_t> order(clip.data.channels);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  Clip out = clip;
  const std::size_t n = clip.data.samples;
  for (std::size_t c = 0; c < order.size(); ++c)
    std::copy_n(clip.data.data.begin() + static_cast<std::ptrdiff_t>(order[c] * n), n,
                out.data.data.begin() + static_cast<std::ptrdiff_t>(c * n));
  ++out.variant;
  return out;
}

inline Clip time_flip(const Clip& clip) {
  Clip out = clip;
  const std::size_t n = clip.data.samples;
  for (std::size_t c = 0; c < clip.data.channels; ++c) {
    auto first = out.data.data.begin() + static_cast<std::ptrdiff_t>(c * n);
    std::reverse(first, first + static_cast<std::ptrdiff_t>(n));
  }
  ++out.variant;
  return out;
}

namespace detail {
inline double draw(const std::pair<double, double>& range, Rng& rng) {
  return std::uniform_real_distribution<double>(range.first, range.second)(rng);
}
}  // namespace detail

/// Variant `v` (1..4) of one original clip:
///   1 low-range scale, 2 high-range scale, 3 noise (or channel permutation),
///   4 scale from a randomly chosen range then noise (or temporal flip).
inline Clip make_variant(const Clip& original, std::size_t v, const AugmentPolicy& policy, Rng& rng) {
  Clip out;
  switch (v) {
    case 1: out = scale_clip(original, detail::draw(policy.scale_low_range, rng)); break;
    case 2: out = scale_clip(original, detail::draw(policy.scale_high_range, rng)); break;
    case 3:
      out = policy.enable_cp ? channel_permute(original, rng) : add_noise_snr(original, policy.snr_db, rng);
      break;
    case 4:
      if (policy.enable_tf) {
        out = time_flip(original);
      } else {
        const bool low = std::bernoulli_distribution(0.5)(rng);
        const double factor = detail::draw(low ? policy.scale_low_range : policy.scale_high_range, rng);
        out = add_noise_snr(scale_clip(original, factor), policy.snr_db, rng);
      }
      break;
    default: throw ConfigError("augment: variant index out of range");
  }
  out.variant = v;
  return out;
}

/// Expands every slot into `expansion` variants. Output slot i*expansion + v holds
/// variant v of input slot i for both subjects, so positives stay index-aligned.
/// Random draws are independent per clip; iteration order is fixed.
inline MiniBatch expand_batch(const MiniBatch& batch, const AugmentPolicy& policy, Rng& rng) {
  policy.validate();
  MiniBatch out;
  out.modalities = batch.modalities;
  out.subjects = batch.subjects;
  out.clips.resize(batch.clips.size());
  for (std::size_t m = 0; m < batch.clips.size(); ++m)
    for (std::size_t s = 0; s < 2; ++s) {
      const auto& in = batch.clips[m][s];
      auto& dst = out.clips[m][s];
      dst.reserve(in.size() * policy.expansion);
      for (const auto& clip : in) {
        if (clip.variant != 0) throw DatasetError("expand_batch: input clips must be originals (variant 0)");
        dst.push_back(clip);
        for (std::size_t v = 1; v < policy.expansion; ++v) dst.push_back(make_variant(clip, v, policy, rng));
      }
    }
  return out;
}

}  // namespace physiosync::augment
