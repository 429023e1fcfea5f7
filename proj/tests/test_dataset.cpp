#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "fixtures.hpp"
#include "physiosync/dataset.hpp"

using namespace physiosync;
using namespace physiosync::data;

namespace {

float ramp(std::size_t s, std::size_t v, const std::string& mod, std::size_t c, std::size_t k) {
  return static_cast<float>(s * 1000 + v * 100 + (mod == "eeg" ? 0 : 50) + c * 10) + static_cast<float>(k) * 0.001f;
}

Signal iota_signal(std::size_t channels, std::size_t samples) {
  Signal s(channels, samples);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t k = 0; k < samples; ++k) s.at(c, k) = static_cast<float>(c * samples + k);
  return s;
}

}  // namespace

TEST(Manifest, SyntheticGeometryCountsTrials) {
  fixtures::TempDir dir("manifest");
  fixtures::write_dataset(dir.path, 4, 8, {{"eeg", 2}, {"pps", 1}}, 16, 4.0, 1.0, ramp);
  const auto m = load_manifest(dir.path);
  EXPECT_EQ(m.trials.size(), 32u);
  EXPECT_EQ(m.subjects.size(), 4u);
  EXPECT_EQ(m.stimuli().size(), 8u);
  EXPECT_EQ(m.modality("eeg").channels, 2u);
}

TEST(Manifest, RoundTripsThroughJson) {
  fixtures::TempDir dir("roundtrip");
  const auto written = fixtures::write_dataset(dir.path, 2, 3, {{"eeg", 2}, {"pps", 1}}, 16, 2.0, 0.0, ramp);
  const auto loaded = load_manifest(dir.path / "manifest.json");
  EXPECT_EQ(manifest_to_json(loaded), manifest_to_json(written));
  const auto sig = load_trial(loaded, loaded.trials[1], "eeg");
  EXPECT_EQ(sig.channels, 2u);
  EXPECT_EQ(sig.samples, 32u);
  EXPECT_FLOAT_EQ(sig.at(1, 3), ramp(0, 1, "eeg", 1, 3));
}

TEST(Manifest, TruncatedFileIsByteLengthError) {
  fixtures::TempDir dir("truncated");
  const auto m = fixtures::write_dataset(dir.path, 2, 2, {{"eeg", 2}}, 16, 2.0, 0.0, ramp);
  fs::resize_file(dir.path / m.trials[0].files.at("eeg"), 100);
  EXPECT_THROW(load_manifest(dir.path), ByteLengthError);
}

TEST(Manifest, DistinctErrorsForMissingFileAndSchema) {
  fixtures::TempDir dir("errors");
  EXPECT_THROW(load_manifest(dir.path), MissingFileError);
  const auto m = fixtures::write_dataset(dir.path, 2, 2, {{"eeg", 2}}, 16, 2.0, 0.0, ramp);
  fs::remove(dir.path / m.trials[0].files.at("eeg"));
  EXPECT_THROW(load_manifest(dir.path), MissingFileError);

  io::write_text_file(dir.path / "manifest.json", "{\"format\": \"something-else\"}");
  EXPECT_THROW(load_manifest(dir.path), SchemaError);
  io::write_text_file(dir.path / "manifest.json", "not json");
  EXPECT_THROW(load_manifest(dir.path), SchemaError);
}

TEST(Manifest, RejectsDuplicateTrialsAndBadRatings) {
  fixtures::TempDir dir("dupes");
  auto m = fixtures::write_dataset(dir.path, 2, 2, {{"eeg", 1}}, 16, 2.0, 0.0, ramp);
  auto dup = m;
  dup.trials.push_back(dup.trials.front());
  EXPECT_THROW(validate_manifest(dup), SchemaError);
  auto bad = m;
  bad.trials[0].ratings["arousal"] = 12.0;
  EXPECT_THROW(validate_manifest(bad), SchemaError);
}

TEST(Manifest, DeapGeometryLoads1280Trials) {
  fixtures::TempDir dir("deap");
  auto zero = [](std::size_t, std::size_t, const std::string&, std::size_t, std::size_t) { return 0.0f; };
  fixtures::write_dataset(dir.path, 32, 40, {{"eeg", 32}}, 128, 63.0, 3.0, zero, /*sparse=*/true);
  const auto m = load_manifest(dir.path);
  EXPECT_EQ(m.trials.size(), 1280u);
  EXPECT_EQ(m.expected_bytes(m.trials[0], m.modality("eeg")), 32u * 8064u * 4u);
}

TEST(Baseline, ConstantSignalCancels) {
  Signal s(2, 128 * 5, 3.5f);
  const auto out = baseline_correct(s, 128, 3.0);
  EXPECT_EQ(out.samples, 256u);
  for (float v : out.data) EXPECT_EQ(v, 0.0f);
}

TEST(Baseline, DeapTrialKeeps7680Samples) {
  Signal s(1, 8064, 1.0f);
  EXPECT_EQ(baseline_correct(s, 128, 3.0).samples, 7680u);
}

TEST(Baseline, HandAveragedReference) {
  // fs = 1: three one-sample baseline chunks 1, 2, 3 then emotion value 10.
  Signal s(1, 7);
  const float v[] = {1, 2, 3, 10, 10, 10, 10};
  std::copy(std::begin(v), std::end(v), s.data.begin());
  const auto out = baseline_correct(s, 1, 3.0);
  ASSERT_EQ(out.samples, 4u);
  for (float x : out.data) EXPECT_FLOAT_EQ(x, 8.0f);
}

TEST(Baseline, ReferenceIsPerSampleWithinTheWindow) {
  // fs = 2: chunks (0, 4) and (2, 8) average to (1, 6), tiled over the emotion part.
  Signal s(1, 8);
  const float v[] = {0, 4, 2, 8, 5, 5, 7, 7};
  std::copy(std::begin(v), std::end(v), s.data.begin());
  const auto out = baseline_correct(s, 2, 2.0);
  const std::vector<float> expected{4, -1, 6, 1};
  EXPECT_EQ(out.data, expected);
}

TEST(Baseline, ZeroBaselineRegionIsIdempotent) {
  Signal s(2, 10);
  for (std::size_t k = 5; k < 10; ++k) s.at(0, k) = static_cast<float>(k), s.at(1, k) = -static_cast<float>(k);
  const auto once = baseline_correct(s, 1, 5.0);
  Signal again(2, 10);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t k = 0; k < 5; ++k) again.at(c, 5 + k) = once.at(c, k);
  EXPECT_EQ(baseline_correct(again, 1, 5.0).data, once.data);
}

TEST(Baseline, Errors) {
  EXPECT_THROW(baseline_correct(Signal(1, 3), 1, 3.0), DatasetError);
  EXPECT_THROW(baseline_correct(Signal(1, 100), 2, 1.5), ConfigError);
  const Signal s = iota_signal(1, 4);
  EXPECT_EQ(baseline_correct(s, 1, 0.0).data, s.data);
}

TEST(Segment, PaperGeometry) {
  const Signal trial(3, 60 * 128);
  const auto five = segment_trial(trial, 128, 5.0);
  ASSERT_EQ(five.size(), 12u);
  EXPECT_EQ(five[0].data.channels, 3u);
  EXPECT_EQ(five[0].data.samples, 640u);
  EXPECT_EQ(segment_trial(trial, 128, 1.0).size(), 60u);
  EXPECT_EQ(segment_trial(trial, 128, 7.0).size(), 8u);
  EXPECT_EQ(five.size() * 40, 480u);
}

TEST(Segment, ConcatenationReproducesThePrefix) {
  const Signal trial = iota_signal(2, 103);
  const auto clips = segment_trial(trial, 10, 2.0, "eeg", "s", "v");
  ASSERT_EQ(clips.size(), 5u);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < clips.size(); ++i) {
      EXPECT_EQ(clips[i].position, i);
      for (std::size_t k = 0; k < 20; ++k) EXPECT_EQ(clips[i].data.at(c, k), trial.at(c, i * 20 + k));
    }
}

TEST(Segment, Errors) {
  EXPECT_THROW(segment_trial(Signal(1, 10), 10, 2.0), DatasetError);
  EXPECT_THROW(segment_trial(Signal(1, 100), 10, 0.25), ConfigError);
  EXPECT_THROW(segment_trial(Signal(1, 100), 10, -1.0), ConfigError);
}

TEST(Labels, Binarization) {
  EXPECT_EQ(binarize_rating(5.0, DatasetKind::deap), Level::high);
  EXPECT_EQ(binarize_rating(4.99, DatasetKind::deap), Level::low);
  EXPECT_EQ(binarize_rating(3.0, DatasetKind::dreamer), Level::low);
  EXPECT_EQ(binarize_rating(3.5, DatasetKind::dreamer), Level::high);
  EXPECT_THROW(binarize_rating(0.5, DatasetKind::deap), DatasetError);
  EXPECT_THROW(binarize_rating(6.0, DatasetKind::dreamer), DatasetError);
}

TEST(Labels, FourClassIsABijection) {
  EXPECT_EQ(four_class(Level::high, Level::high), 0);
  EXPECT_EQ(four_class(Level::low, Level::high), 1);
  EXPECT_EQ(four_class(Level::high, Level::low), 2);
  EXPECT_EQ(four_class(Level::low, Level::low), 3);
  std::set<int> seen;
  for (auto a : {Level::low, Level::high})
    for (auto v : {Level::low, Level::high}) seen.insert(four_class(a, v));
  EXPECT_EQ(seen.size(), 4u);
}

class ClipSetTest : public ::testing::Test {
 protected:
  void SetUp() override {
    fixtures::write_dataset(dir.path, 3, 4, {{"eeg", 2}, {"pps", 1}}, 8, 7.0, 1.0, ramp);
    set = ClipSet::build(load_manifest(dir.path), 2.0);
  }
  fixtures::TempDir dir{"clipset"};
  ClipSet set;
};

TEST_F(ClipSetTest, BuildsEveryTrial) {
  EXPECT_EQ(set.subjects().size(), 3u);
  EXPECT_EQ(set.stimuli().size(), 4u);
  EXPECT_EQ(set.clip_count("eeg"), 3u * 4u * 3u);
  EXPECT_EQ(set.clip_count("pps", "s1"), 12u);
  EXPECT_EQ(set.trial("eeg", "s0", "v1").front().data.samples, 16u);
  EXPECT_EQ(set.labels("s0", "v1").arousal, Level::high);
  EXPECT_EQ(set.labels("s0", "v0").valence, Level::low);
}

TEST_F(ClipSetTest, RestrictKeepsRequestedIds) {
  const auto sub = set.restrict({"s0", "s2"}, {"v1"});
  EXPECT_EQ(sub.subjects(), (std::vector<std::string>{"s0", "s2"}));
  EXPECT_EQ(sub.stimuli(), (std::vector<std::string>{"v1"}));
  EXPECT_FALSE(sub.has_trial("eeg", "s1", "v1"));
  const auto early = set.restrict_positions(0, 2);
  EXPECT_EQ(early.trial("eeg", "s0", "v0").size(), 2u);
  EXPECT_EQ(early.trial("eeg", "s0", "v0").back().position, 1u);
}

TEST_F(ClipSetTest, MinibatchPairsSlotsAcrossSubjects) {
  Rng rng(3);
  const auto batch = sample_minibatch(set, "s0", "s2", 8, rng);
  EXPECT_EQ(batch.slots(), 8u);
  EXPECT_EQ(batch.size(), 32u);
  std::set<std::pair<std::string, std::size_t>> seen;
  for (std::size_t m = 0; m < batch.modalities.size(); ++m)
    for (std::size_t i = 0; i < 8; ++i) {
      const auto& a = batch.clips[m][0][i];
      const auto& b = batch.clips[m][1][i];
      EXPECT_EQ(a.subject, "s0");
      EXPECT_EQ(b.subject, "s2");
      EXPECT_EQ(a.stimulus, b.stimulus);
      EXPECT_EQ(a.position, b.position);
      EXPECT_EQ(a.variant, 0u);
      EXPECT_EQ(a.modality, batch.modalities[m]);
      if (m == 0) {
        EXPECT_TRUE(seen.emplace(a.stimulus, a.position).second);
      }
    }
}

TEST_F(ClipSetTest, MinibatchIsReproducibleAndValidated) {
  Rng r1(9), r2(9);
  const auto a = sample_minibatch(set, "s0", "s1", 5, r1);
  const auto b = sample_minibatch(set, "s0", "s1", 5, r2);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a.clips[0][0][i].data.data, b.clips[0][0][i].data.data);
  Rng rng(1);
  EXPECT_THROW(sample_minibatch(set, "s0", "s0", 2, rng), DatasetError);
  EXPECT_THROW(sample_minibatch(set, "s0", "s1", 13, rng), InsufficientDataError);
  EXPECT_NO_THROW(sample_minibatch(set, "s0", "s1", 12, rng));
}

TEST(DeapGeometry, Yields15360Segments) {
  fixtures::TempDir dir("deapclips");
  auto zero = [](std::size_t, std::size_t, const std::string&, std::size_t, std::size_t) { return 0.0f; };
  fixtures::write_dataset(dir.path, 32, 40, {{"eeg", 1}}, 128, 63.0, 3.0, zero, /*sparse=*/true);
  const auto set = ClipSet::build(load_manifest(dir.path), 5.0);
  EXPECT_EQ(set.trial("eeg", "s0", "v0").size(), 12u);
  EXPECT_EQ(set.clip_count("eeg", "s0"), 480u);
  EXPECT_EQ(set.clip_count("eeg"), 15360u);
}
