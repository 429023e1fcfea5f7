#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "physiosync/augment.hpp"
#include "physiosync/contrastive.hpp"
#include "physiosync/fusion.hpp"
#include "physiosync/optim.hpp"
#include "physiosync/synth.hpp"

namespace physiosync {

using nlohmann::json;

enum class Task { arousal, valence, four };

inline Task parse_task(const std::string& s) {
  if (s == "arousal") return Task::arousal;
  if (s == "valence") return Task::valence;
  if (s == "four") return Task::four;
  throw ConfigError("unknown task '" + s + "' (expected arousal, valence or four)");
}
inline std::string task_name(Task t) {
  switch (t) {
    case Task::arousal: return "arousal";
    case Task::valence: return "valence";
    case Task::four: return "four";
  }
  return "?";
}
inline std::size_t task_classes(Task t) { return t == Task::four ? 4 : 2; }

struct PretrainConfig {
  bool enabled = true;  // false: fine-tune from randomly initialized encoders
  std::size_t epochs = 500;
  double epoch_scale = 1.0;  // multiplies epochs (desk-scale runs)
  double lr = 1e-4;
  std::size_t k = 8;
  std::size_t cycles = 3;

  std::size_t effective_epochs() const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(epochs) * epoch_scale)));
  }
};

struct FinetuneConfig {
  std::size_t epochs = 15;
  double lr = 1e-3;
  std::size_t batch = 256;
  std::size_t cycles = 3;
  bool freeze_encoders = false;
  double aux_loss_weight = 0.5;
  model::FusionStrategy fusion = model::FusionStrategy::mcp;
  std::size_t hidden_dim = 256;
};

struct RunConfig {
  std::uint64_t seed = 1;
  Task task = Task::arousal;
  std::string eeg_modality = "eeg";
  std::string pps_modality = "pps";
  data::PreprocessOptions preprocess;
  model::ResolutionPlan plan;
  model::EncoderConfig encoder;  // input_dim is derived per modality and resolution
  model::ProjectorConfig projector;
  model::LossWeights loss;
  augment::AugmentPolicy augment;
  bool use_tcl = true;
  bool use_da = true;
  bool use_cmcl = true;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  optim::AdamConfig adam;
  double validation_fraction = 0.1;
  synth::SynthConfig synth;  // used by the synth subcommand only

  /// Loss weights after applying the module toggles.
  model::LossWeights effective_weights() const {
    model::LossWeights w = loss;
    if (!use_tcl) w.alpha = w.beta = 0.0;
    if (!use_cmcl) w.gamma = 0.0;
    return w;
  }
  augment::AugmentPolicy effective_augment() const {
    augment::AugmentPolicy p = augment;
    p.expansion = use_da ? 5 : 1;
    return p;
  }

  void validate() const {
    if (!use_tcl && !use_cmcl && pretrain.enabled) throw ConfigError("pretraining needs use_tcl or use_cmcl");
    loss.validate();
    augment.validate();
    plan.shorts_per_long();
    if (encoder.embed_dim == 0 || encoder.heads == 0 || encoder.embed_dim % encoder.heads != 0)
      throw ConfigError("encoder.embed_dim must be a positive multiple of encoder.heads");
    if (pretrain.epochs == 0 || !(pretrain.epoch_scale > 0) || !(pretrain.lr > 0) || pretrain.k < 2)
      throw ConfigError("pretrain: epochs, epoch_scale, lr must be positive and k >= 2");
    if (finetune.epochs == 0 || !(finetune.lr > 0) || finetune.batch < 2)
      throw ConfigError("finetune: epochs and lr must be positive and batch >= 2");
    if (!(validation_fraction >= 0 && validation_fraction < 1)) throw ConfigError("validation_fraction must lie in [0, 1)");
    if (projector.hidden_dim == 0 || projector.out_dim == 0) throw ConfigError("projector dims must be positive");
    synth.validate();
  }
};

inline json to_json(const RunConfig& c) {
  return json{
      {"seed", c.seed},
      {"task", task_name(c.task)},
      {"modalities", {{"eeg", c.eeg_modality}, {"pps", c.pps_modality}}},
      {"preprocess", {{"ref_seconds", c.preprocess.ref_seconds}, {"keep_last_seconds", c.preprocess.keep_last_seconds}}},
      {"plan",
       {{"t_long", c.plan.t_long},
        {"t_short", c.plan.t_short},
        {"use_short", c.plan.use_short},
        {"short_pooling", c.plan.short_pooling == model::ShortPooling::mean ? "mean" : "concat"}}},
      {"encoder",
       {{"views", c.encoder.views},
        {"embed_dim", c.encoder.embed_dim},
        {"heads", c.encoder.heads},
        {"blocks", c.encoder.blocks},
        {"ffn_dim", c.encoder.ffn_dim},
        {"prompts", c.encoder.prompts},
        {"dropout", c.encoder.dropout}}},
      {"projector", {{"hidden_dim", c.projector.hidden_dim}, {"out_dim", c.projector.out_dim}, {"dropout", c.projector.dropout}}},
      {"loss",
       {{"alpha", c.loss.alpha},
        {"beta", c.loss.beta},
        {"gamma", c.loss.gamma},
        {"tau", c.loss.tau},
        {"exclude_positive_in_s3", c.loss.exclude_positive_in_s3}}},
      {"augment",
       {{"scale_low", {c.augment.scale_low_range.first, c.augment.scale_low_range.second}},
        {"scale_high", {c.augment.scale_high_range.first, c.augment.scale_high_range.second}},
        {"snr_db", c.augment.snr_db},
        {"enable_cp", c.augment.enable_cp},
        {"enable_tf", c.augment.enable_tf}}},
      {"toggles", {{"use_tcl", c.use_tcl}, {"use_da", c.use_da}, {"use_cmcl", c.use_cmcl}}},
      {"pretrain",
       {{"enabled", c.pretrain.enabled},
        {"epochs", c.pretrain.epochs},
        {"epoch_scale", c.pretrain.epoch_scale},
        {"lr", c.pretrain.lr},
        {"k", c.pretrain.k},
        {"cycles", c.pretrain.cycles}}},
      {"finetune",
       {{"epochs", c.finetune.epochs},
        {"lr", c.finetune.lr},
        {"batch", c.finetune.batch},
        {"cycles", c.finetune.cycles},
        {"freeze_encoders", c.finetune.freeze_encoders},
        {"aux_loss_weight", c.finetune.aux_loss_weight},
        {"fusion", model::strategy_name(c.finetune.fusion)},
        {"hidden_dim", c.finetune.hidden_dim}}},
      {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
      {"validation_fraction", c.validation_fraction},
      {"synth",
       {{"n_subjects", c.synth.n_subjects},
        {"n_stimuli", c.synth.n_stimuli},
        {"trial_seconds", c.synth.trial_seconds},
        {"baseline_seconds", c.synth.baseline_seconds},
        {"fs", c.synth.fs},
        {"eeg_channels", c.synth.eeg_channels},
        {"pps_channels", c.synth.pps_channels},
        {"latent_dim", c.synth.latent_dim},
        {"subject_mixing_noise", c.synth.subject_mixing_noise},
        {"observation_snr_db", c.synth.observation_snr_db},
        {"private_dim", c.synth.private_dim},
        {"private_gain", c.synth.private_gain},
        {"max_frequency_hz", c.synth.max_frequency_hz},
        {"latent_fluctuation", c.synth.latent_fluctuation},
        {"private_offset", c.synth.private_offset},
        {"seed", c.synth.seed}}},
  };
}

namespace detail {

template <class V>
V get(const json& j, const std::string& path) {
  try {
    return j.at(json::json_pointer(path)).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError("config key " + path + ": " + e.what());
  }
}

inline std::pair<double, double> get_range(const json& j, const std::string& path) {
  const auto v = get<std::vector<double>>(j, path);
  if (v.size() != 2) throw ConfigError("config key " + path + " must be a two-element range");
  return {v[0], v[1]};
}

/// Overlays `patch` onto `base`, rejecting keys that `base` does not define.
inline void merge_strict(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("config section " + (where.empty() ? "/" : where) + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where + "/" + key;
    if (!base.contains(key)) throw ConfigError("unknown config key " + path);
    if (base[key].is_object()) {
      merge_strict(base[key], value, path);
    } else {
      if (base[key].is_number() != value.is_number() || base[key].is_boolean() != value.is_boolean() ||
          base[key].is_string() != value.is_string() || base[key].is_array() != value.is_array())
        throw ConfigError("config key " + path + " has the wrong type");
      base[key] = value;
    }
  }
}

}  // namespace detail

inline RunConfig from_json(const json& j) {
  json full = to_json(RunConfig{});
  detail::merge_strict(full, j, "");
  using detail::get;
  RunConfig c;
  c.seed = get<std::uint64_t>(full, "/seed");
  c.task = parse_task(get<std::string>(full, "/task"));
  c.eeg_modality = get<std::string>(full, "/modalities/eeg");
  c.pps_modality = get<std::string>(full, "/modalities/pps");
  c.preprocess.ref_seconds = get<double>(full, "/preprocess/ref_seconds");
  c.preprocess.keep_last_seconds = get<double>(full, "/preprocess/keep_last_seconds");
  c.plan.t_long = get<double>(full, "/plan/t_long");
  c.plan.t_short = get<double>(full, "/plan/t_short");
  c.plan.use_short = get<bool>(full, "/plan/use_short");
  const auto pooling = get<std::string>(full, "/plan/short_pooling");
  if (pooling != "mean" && pooling != "concat") throw ConfigError("plan.short_pooling must be mean or concat");
  c.plan.short_pooling = pooling == "mean" ? model::ShortPooling::mean : model::ShortPooling::concat;
  c.encoder.views = get<std::size_t>(full, "/encoder/views");
  c.encoder.embed_dim = get<std::size_t>(full, "/encoder/embed_dim");
  c.encoder.heads = get<std::size_t>(full, "/encoder/heads");
  c.encoder.blocks = get<std::size_t>(full, "/encoder/blocks");
  c.encoder.ffn_dim = get<std::size_t>(full, "/encoder/ffn_dim");
  c.encoder.prompts = get<std::size_t>(full, "/encoder/prompts");
  c.encoder.dropout = get<double>(full, "/encoder/dropout");
  c.projector.hidden_dim = get<std::size_t>(full, "/projector/hidden_dim");
  c.projector.out_dim = get<std::size_t>(full, "/projector/out_dim");
  c.projector.dropout = get<double>(full, "/projector/dropout");
  c.loss.alpha = get<double>(full, "/loss/alpha");
  c.loss.beta = get<double>(full, "/loss/beta");
  c.loss.gamma = get<double>(full, "/loss/gamma");
  c.loss.tau = get<double>(full, "/loss/tau");
  c.loss.exclude_positive_in_s3 = get<bool>(full, "/loss/exclude_positive_in_s3");
  c.augment.scale_low_range = detail::get_range(full, "/augment/scale_low");
  c.augment.scale_high_range = detail::get_range(full, "/augment/scale_high");
  c.augment.snr_db = get<double>(full, "/augment/snr_db");
  c.augment.enable_cp = get<bool>(full, "/augment/enable_cp");
  c.augment.enable_tf = get<bool>(full, "/augment/enable_tf");
  c.use_tcl = get<bool>(full, "/toggles/use_tcl");
  c.use_da = get<bool>(full, "/toggles/use_da");
  c.use_cmcl = get<bool>(full, "/toggles/use_cmcl");
  c.pretrain.enabled = get<bool>(full, "/pretrain/enabled");
  c.pretrain.epochs = get<std::size_t>(full, "/pretrain/epochs");
  c.pretrain.epoch_scale = get<double>(full, "/pretrain/epoch_scale");
  c.pretrain.lr = get<double>(full, "/pretrain/lr");
  c.pretrain.k = get<std::size_t>(full, "/pretrain/k");
  c.pretrain.cycles = get<std::size_t>(full, "/pretrain/cycles");
  c.finetune.epochs = get<std::size_t>(full, "/finetune/epochs");
  c.finetune.lr = get<double>(full, "/finetune/lr");
  c.finetune.batch = get<std::size_t>(full, "/finetune/batch");
  c.finetune.cycles = get<std::size_t>(full, "/finetune/cycles");
  c.finetune.freeze_encoders = get<bool>(full, "/finetune/freeze_encoders");
  c.finetune.aux_loss_weight = get<double>(full, "/finetune/aux_loss_weight");
  c.finetune.fusion = model::parse_strategy(get<std::string>(full, "/finetune/fusion"));
  c.finetune.hidden_dim = get<std::size_t>(full, "/finetune/hidden_dim");
  c.adam.beta1 = get<double>(full, "/adam/beta1");
  c.adam.beta2 = get<double>(full, "/adam/beta2");
  c.adam.eps = get<double>(full, "/adam/eps");
  c.validation_fraction = get<double>(full, "/validation_fraction");
  c.synth.n_subjects = get<std::size_t>(full, "/synth/n_subjects");
  c.synth.n_stimuli = get<std::size_t>(full, "/synth/n_stimuli");
  c.synth.trial_seconds = get<double>(full, "/synth/trial_seconds");
  c.synth.baseline_seconds = get<double>(full, "/synth/baseline_seconds");
  c.synth.fs = get<std::size_t>(full, "/synth/fs");
  c.synth.eeg_channels = get<std::size_t>(full, "/synth/eeg_channels");
  c.synth.pps_channels = get<std::size_t>(full, "/synth/pps_channels");
  c.synth.latent_dim = get<std::size_t>(full, "/synth/latent_dim");
  c.synth.subject_mixing_noise = get<double>(full, "/synth/subject_mixing_noise");
  c.synth.observation_snr_db = get<double>(full, "/synth/observation_snr_db");
  c.synth.private_dim = get<std::size_t>(full, "/synth/private_dim");
  c.synth.private_gain = get<double>(full, "/synth/private_gain");
  c.synth.max_frequency_hz = get<double>(full, "/synth/max_frequency_hz");
  c.synth.latent_fluctuation = get<double>(full, "/synth/latent_fluctuation");
  c.synth.private_offset = get<double>(full, "/synth/private_offset");
  c.synth.seed = get<std::uint64_t>(full, "/synth/seed");
  c.validate();
  return c;
}

/// Applies "dotted.key=value" overrides. The value is parsed as JSON when
/// possible (numbers, booleans, arrays) and taken as a string otherwise.
inline json apply_overrides(json j, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    // Build the nested patch {"a": {"b": value}} for key "a.b".
    json patch = value;
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1) parts.push_back(key.substr(start, dot - start));
    parts.push_back(key.substr(start));
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    json full = to_json(from_json(j));
    detail::merge_strict(full, patch, "");
    j = full;
  }
  return j;
}

inline RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
    }
  }
  return from_json(apply_overrides(j, overrides));
}

}  // namespace physiosync
