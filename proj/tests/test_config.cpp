#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "physiosync/config.hpp"

using namespace physiosync;

TEST(Config, DefaultsFollowThePaperSettings) {
  RunConfig c;
  EXPECT_EQ(c.pretrain.epochs, 500u);
  EXPECT_DOUBLE_EQ(c.pretrain.lr, 1e-4);
  EXPECT_EQ(c.finetune.epochs, 15u);
  EXPECT_DOUBLE_EQ(c.finetune.lr, 1e-3);
  EXPECT_EQ(c.finetune.batch, 256u);
  EXPECT_DOUBLE_EQ(c.loss.alpha, 0.5);
  EXPECT_DOUBLE_EQ(c.loss.gamma, 1.0);
  EXPECT_DOUBLE_EQ(c.augment.snr_db, 5.0);
  EXPECT_EQ(c.effective_augment().expansion, 5u);
  EXPECT_EQ(task_classes(c.task), 2u);
  EXPECT_EQ(task_classes(Task::four), 4u);
}

TEST(Config, JsonRoundTrip) {
  RunConfig c;
  c.seed = 99;
  c.task = Task::four;
  c.plan.use_short = false;
  c.augment.scale_low_range = {0.6, 0.65};
  c.finetune.fusion = model::FusionStrategy::decision_average;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(from_json(j)), j);
  EXPECT_EQ(from_json(j).augment.scale_low_range.second, 0.65);
}

TEST(Config, RejectsUnknownKeysAndWrongTypes) {
  EXPECT_THROW(from_json(json{{"sede", 3}}), ConfigError);
  EXPECT_THROW(from_json(json{{"encoder", {{"layers", 2}}}}), ConfigError);
  EXPECT_THROW(from_json(json{{"encoder", {{"views", "many"}}}}), ConfigError);
  EXPECT_THROW(from_json(json{{"toggles", 1}}), ConfigError);
  EXPECT_THROW(from_json(json{{"task", "dominance"}}), ConfigError);
  EXPECT_THROW(from_json(json{{"loss", {{"tau", 0.0}}}}), ConfigError);
}

TEST(Config, DottedOverrides) {
  auto j = apply_overrides(json::object(), {"pretrain.epochs=20", "toggles.use_da=false", "task=valence", "augment.scale_low=[0.5,0.6]"});
  auto c = from_json(j);
  EXPECT_EQ(c.pretrain.epochs, 20u);
  EXPECT_FALSE(c.use_da);
  EXPECT_EQ(c.effective_augment().expansion, 1u);
  EXPECT_EQ(c.task, Task::valence);
  EXPECT_DOUBLE_EQ(c.augment.scale_low_range.first, 0.5);
  EXPECT_THROW(apply_overrides(json::object(), {"pretrain.epoch=20"}), ConfigError);
  EXPECT_THROW(apply_overrides(json::object(), {"noequals"}), ConfigError);
}

TEST(Config, TogglesAdjustWeights) {
  RunConfig c;
  c.use_cmcl = false;
  EXPECT_DOUBLE_EQ(c.effective_weights().gamma, 0.0);
  EXPECT_DOUBLE_EQ(c.effective_weights().alpha, 0.5);
  c.use_tcl = false;
  EXPECT_THROW(c.validate(), ConfigError);
  c.pretrain.enabled = false;
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, LoadsFromFile) {
  fixtures::TempDir dir("config");
  io::write_text_file(dir.path / "run.json", R"({"seed": 5, "finetune": {"epochs": 3}})");
  auto c = load_config(dir.path / "run.json", {"seed=6"});
  EXPECT_EQ(c.seed, 6u);
  EXPECT_EQ(c.finetune.epochs, 3u);
  io::write_text_file(dir.path / "bad.json", "{seed: 5");
  EXPECT_THROW(load_config(dir.path / "bad.json"), ConfigError);
  EXPECT_THROW(load_config(dir.path / "missing.json"), ConfigError);
}

TEST(Config, SynthSectionOverrides) {
  auto c = from_json(apply_overrides(json::object(), {"synth.n_subjects=6", "synth.seed=3"}));
  EXPECT_EQ(c.synth.n_subjects, 6u);
  EXPECT_EQ(c.synth.seed, 3u);
  EXPECT_THROW(from_json(json{{"synth", {{"latent_dim", 1}}}}), ConfigError);
}
