#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "physiosync/augment.hpp"

using namespace physiosync;
using namespace physiosync::augment;
using data::Signal;

namespace {

Clip make_clip(std::size_t channels, std::size_t samples, std::size_t seed = 1, std::string subject = "a",
               std::size_t position = 0) {
  Clip c;
  c.data = Signal(channels, samples);
  Rng rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : c.data.data) v = n(rng);
  c.modality = "eeg";
  c.subject = std::move(subject);
  c.stimulus = "v";
  c.position = position;
  c.t_seconds = 1.0;
  return c;
}

MiniBatch make_batch(std::size_t k) {
  MiniBatch b;
  b.modalities = {"eeg", "pps"};
  b.subjects = {"a", "b"};
  b.clips.resize(2);
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t i = 0; i < k; ++i) b.clips[m][s].push_back(make_clip(m == 0 ? 3 : 1, 16, 100 * m + 10 * s + i, b.subjects[s], i));
  return b;
}

}  // namespace

TEST(Scale, IdentityAndInverse) {
  const auto c = make_clip(2, 50);
  EXPECT_EQ(scale_clip(c, 1.0).data.data, c.data.data);
  Clip ones = c;
  std::fill(ones.data.data.begin(), ones.data.data.end(), 1.0f);
  for (float v : scale_clip(ones, 0.5).data.data) EXPECT_EQ(v, 0.5f);
  const auto back = scale_clip(scale_clip(c, 1.3), 1.0 / 1.3);
  for (std::size_t i = 0; i < c.data.data.size(); ++i) EXPECT_NEAR(back.data.data[i], c.data.data[i], 1e-6);
  EXPECT_THROW(scale_clip(c, 0.0), ConfigError);
}

TEST(Noise, VarianceForUnitPowerAtFiveDb) {
  EXPECT_NEAR(noise_variance_for(1.0, 5.0), 0.316227766, 1e-9);
  EXPECT_DOUBLE_EQ(noise_variance_for(2.5, 0.0), 2.5);
}

TEST(Noise, MeasuredSnrOverAMillionSamples) {
  Clip c;
  c.data = Signal(4, 250000);
  for (std::size_t ch = 0; ch < 4; ++ch)
    for (std::size_t t = 0; t < 250000; ++t)
      c.data.at(ch, t) = static_cast<float>(2.0 * std::sin(0.01 * static_cast<double>(t) + static_cast<double>(ch)));
  Rng rng(42);
  const auto noisy = add_noise_snr(c, 5.0, rng);
  double ps = 0, pn = 0;
  for (std::size_t i = 0; i < c.data.data.size(); ++i) {
    const double s = c.data.data[i], n = noisy.data.data[i] - s;
    ps += s * s;
    pn += n * n;
  }
  EXPECT_NEAR(10.0 * std::log10(ps / pn), 5.0, 0.1);
}

TEST(Noise, ZeroClipIsRejected) {
  Clip c;
  c.data = Signal(1, 8);
  Rng rng(1);
  EXPECT_THROW(add_noise_snr(c, 5.0, rng), NumericError);
}

TEST(ChannelPermute, PreservesChannelMultiset) {
  const auto c = make_clip(5, 20);
  Rng rng(3);
  const auto p = channel_permute(c, rng);
  auto rows = [](const Clip& x) {
    std::vector<std::vector<float>> r;
    for (std::size_t ch = 0; ch < x.data.channels; ++ch)
      r.emplace_back(x.data.data.begin() + static_cast<std::ptrdiff_t>(ch * 20), x.data.data.begin() + static_cast<std::ptrdiff_t>((ch + 1) * 20));
    std::sort(r.begin(), r.end());
    return r;
  };
  EXPECT_EQ(rows(p), rows(c));
  const auto single = make_clip(1, 20);
  EXPECT_EQ(channel_permute(single, rng).data.data, single.data.data);
}

TEST(TimeFlip, IsAnInvolution) {
  const auto c = make_clip(3, 11);
  const auto f = time_flip(c);
  EXPECT_EQ(f.data.at(1, 0), c.data.at(1, 10));
  EXPECT_EQ(time_flip(f).data.data, c.data.data);
}

TEST(Expand, FiveTimesWithAlignedVariants) {
  const auto batch = make_batch(8);
  Rng rng(5);
  const auto out = expand_batch(batch, AugmentPolicy{}, rng);
  EXPECT_EQ(out.size(), 5 * batch.size());
  EXPECT_EQ(out.slots(), 40u);
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t i = 0; i < out.slots(); ++i) {
      const auto& a = out.clips[m][0][i];
      const auto& b = out.clips[m][1][i];
      EXPECT_EQ(a.variant, i % 5);
      EXPECT_EQ(b.variant, a.variant);
      EXPECT_EQ(a.position, b.position);
      EXPECT_EQ(a.position, i / 5);
      if (a.variant == 0) {
        EXPECT_EQ(a.data.data, batch.clips[m][0][i / 5].data.data);
      }
    }
}

TEST(Expand, ScaledVariantsStayInRange) {
  const auto batch = make_batch(4);
  Rng rng(6);
  const auto out = expand_batch(batch, AugmentPolicy{}, rng);
  for (std::size_t i = 0; i < out.slots(); ++i) {
    const auto& orig = batch.clips[0][0][i / 5].data.data;
    const auto& v = out.clips[0][0][i];
    if (v.variant != 1 && v.variant != 2) continue;
    const double ratio = v.data.data[0] / orig[0];
    if (v.variant == 1) {
      EXPECT_TRUE(ratio >= 0.7 - 1e-6 && ratio <= 0.8 + 1e-6) << ratio;
    } else {
      EXPECT_TRUE(ratio >= 1.2 - 1e-6 && ratio <= 1.3 + 1e-6) << ratio;
    }
  }
}

TEST(Expand, DisabledIsIdentityAndInputMustBeOriginal) {
  const auto batch = make_batch(3);
  AugmentPolicy off;
  off.expansion = 1;
  Rng rng(7);
  const auto out = expand_batch(batch, off, rng);
  EXPECT_EQ(out.size(), batch.size());
  EXPECT_THROW(expand_batch(expand_batch(batch, AugmentPolicy{}, rng), AugmentPolicy{}, rng), DatasetError);
  AugmentPolicy bad;
  bad.expansion = 3;
  EXPECT_THROW(expand_batch(batch, bad, rng), ConfigError);
}

TEST(Expand, AlternativeVariants) {
  const auto batch = make_batch(2);
  AugmentPolicy p;
  p.enable_cp = true;
  p.enable_tf = true;
  Rng rng(8);
  const auto out = expand_batch(batch, p, rng);
  const auto& flipped = out.clips[0][0][4];
  EXPECT_EQ(flipped.variant, 4u);
  EXPECT_EQ(flipped.data.data, time_flip(batch.clips[0][0][0]).data.data);
}

TEST(Expand, SeededRunsAreIdentical) {
  const auto batch = make_batch(4);
  Rng r1(9), r2(9);
  const auto a = expand_batch(batch, AugmentPolicy{}, r1), b = expand_batch(batch, AugmentPolicy{}, r2);
  for (std::size_t i = 0; i < a.slots(); ++i) EXPECT_EQ(a.clips[1][1][i].data.data, b.clips[1][1][i].data.data);
}
