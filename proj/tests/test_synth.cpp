#include <gtest/gtest.h>

#include <cmath>

#include <Eigen/Dense>

#include "fixtures.hpp"
#include "physiosync/synth.hpp"

using namespace physiosync;

namespace {

synth::SynthConfig tiny() {
  synth::SynthConfig c;
  c.trial_seconds = 20.0;
  c.fs = 32;
  c.eeg_channels = 4;
  return c;
}

// Mean canonical correlation between two trials' channel sets.
double canonical_correlation(const data::Signal& a, const data::Signal& b) {
  auto centered = [](const data::Signal& s) {
    Eigen::MatrixXd m(s.samples, s.channels);
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t t = 0; t < s.samples; ++t) m(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) = s.at(c, t);
    return Eigen::MatrixXd(m.rowwise() - m.colwise().mean());
  };
  const auto x = centered(a), y = centered(b);
  auto inv_sqrt = [](const Eigen::MatrixXd& c) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
    return Eigen::MatrixXd(es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose());
  };
  const Eigen::MatrixXd k = inv_sqrt(x.transpose() * x) * (x.transpose() * y) * inv_sqrt(y.transpose() * y);
  return Eigen::JacobiSVD<Eigen::MatrixXd>(k).singularValues().mean();
}

}  // namespace

TEST(Synth, GeometryAndDeterminism) {
  fixtures::TempDir a("synth_a"), b("synth_b");
  const auto cfg = tiny();
  const auto m = synth::generate(cfg, a.path);
  synth::generate(cfg, b.path);
  EXPECT_EQ(m.trials.size(), 32u);
  EXPECT_EQ(m.trial_samples(m.trials[0]), static_cast<std::size_t>(23 * 32));
  for (const auto& t : m.trials)
    for (const auto& [mod, file] : t.files) EXPECT_EQ(io::read_f32_file(a.path / file), io::read_f32_file(b.path / file));
  EXPECT_NO_THROW(data::load_manifest(a.path));
}

TEST(Synth, LabelsAreBalanced) {
  fixtures::TempDir dir("synth_labels");
  const auto m = synth::generate(tiny(), dir.path);
  std::size_t high_a = 0, high_v = 0;
  for (const auto& t : m.trials) {
    high_a += data::binarize_rating(t.ratings.at("arousal"), data::DatasetKind::deap) == data::Level::high;
    high_v += data::binarize_rating(t.ratings.at("valence"), data::DatasetKind::deap) == data::Level::high;
  }
  EXPECT_EQ(high_a, 16u);
  EXPECT_EQ(high_v, 16u);
}

TEST(Synth, LabelsBalancedAcrossSeeds) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    fixtures::TempDir dir("synth_seed");
    auto cfg = tiny();
    cfg.n_stimuli = 7;
    cfg.seed = seed;
    const auto m = synth::generate(cfg, dir.path);
    double high = 0;
    for (const auto& t : m.trials) high += data::binarize_rating(t.ratings.at("arousal"), data::DatasetKind::deap) == data::Level::high;
    EXPECT_NEAR(high / static_cast<double>(m.trials.size()), 0.5, 0.2) << seed;
  }
}

TEST(Synth, SameStimulusTrialsCorrelateAcrossSubjects) {
  fixtures::TempDir dir("synth_corr");
  const auto m = synth::generate(tiny(), dir.path);
  auto trial = [&](std::size_t s, std::size_t v) {
    return data::baseline_correct(data::load_trial(m, m.trials[s * 8 + v], "eeg"), 32, 3.0);
  };
  double same = 0, cross = 0;
  for (std::size_t v = 0; v < 8; ++v) {
    same += canonical_correlation(trial(0, v), trial(1, v));
    cross += canonical_correlation(trial(0, v), trial(1, (v + 1) % 8));
  }
  EXPECT_GT(same / 8, cross / 8);
}

TEST(Synth, ValidatesConfig) {
  auto c = tiny();
  c.latent_dim = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.trial_seconds = 0.01;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_DOUBLE_EQ(synth::rating_from_latent_mean(0.0), 5.0);
  EXPECT_LT(synth::rating_from_latent_mean(-1e-9), 5.0);
  EXPECT_GE(synth::rating_from_latent_mean(-100.0), 1.0);
}
