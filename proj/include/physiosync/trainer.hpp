#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "physiosync/ad/checkpoint.hpp"
#include "physiosync/augment.hpp"
#include "physiosync/config.hpp"
#include "physiosync/contrastive.hpp"
#include "physiosync/dataset.hpp"
#include "physiosync/encoder.hpp"
#include "physiosync/fusion.hpp"
#include "physiosync/metrics.hpp"
#include "physiosync/optim.hpp"

namespace physiosync::train {

namespace fs = std::filesystem;
using ad::Tensor;
using model::Mode;
using LogFn = std::function<void(const std::string&)>;

inline std::string t_label(double t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%gs", t);
  return buf;
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// Independent stream for (seed, purpose, a, b).
inline ad::Rng derive_rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t a = 0, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(b), 0x5053u};
  return ad::Rng(seq);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t a = 0) {
  auto rng = derive_rng(seed, purpose, a);
  return rng();
}

// ---------------------------------------------------------------------------
// Data views

/// Subjects, stimuli and a half-open range of long-clip positions.
struct Split {
  std::vector<std::string> subjects;
  std::vector<std::string> stimuli;
  std::size_t position_begin = 0;
  std::size_t position_end = std::numeric_limits<std::size_t>::max();
};

/// Clips at the long resolution and, when the plan uses it, the short one.
struct Corpus {
  data::ClipSet long_clips;
  std::optional<data::ClipSet> short_clips;
  model::ResolutionPlan plan;

  static Corpus build(const data::DatasetManifest& m, const RunConfig& cfg) {
    Corpus c;
    c.plan = cfg.plan;
    c.long_clips = data::ClipSet::build(m, cfg.plan.t_long, cfg.preprocess);
    if (cfg.plan.use_short) c.short_clips = data::ClipSet::build(m, cfg.plan.t_short, cfg.preprocess);
    for (const auto& id : {cfg.eeg_modality, cfg.pps_modality}) {
      const auto& mods = c.long_clips.modalities();
      if (std::find(mods.begin(), mods.end(), id) == mods.end())
        throw SchemaError("dataset has no modality '" + id + "'");
    }
    return c;
  }

  Corpus select(const Split& s) const {
    Corpus out;
    out.plan = plan;
    out.long_clips = long_clips.restrict(s.subjects, s.stimuli);
    if (s.position_begin != 0 || s.position_end != std::numeric_limits<std::size_t>::max())
      out.long_clips = out.long_clips.restrict_positions(s.position_begin, s.position_end);
    if (short_clips) {
      const std::size_t n = plan.shorts_per_long();
      out.short_clips = short_clips->restrict(s.subjects, s.stimuli);
      const std::size_t end = s.position_end == std::numeric_limits<std::size_t>::max() ? s.position_end : s.position_end * n;
      if (s.position_begin != 0 || end != std::numeric_limits<std::size_t>::max())
        out.short_clips = out.short_clips->restrict_positions(s.position_begin * n, end);
    }
    return out;
  }

  Corpus with_stimuli(const std::vector<std::string>& stimuli) const {
    Split s;
    s.subjects = long_clips.subjects();
    s.stimuli = stimuli;
    return select(s);
  }
};

/// Flattens the referenced clips into [B x C*S].
template <class T>
Tensor<T> rows_to_tensor(const std::vector<const data::Clip*>& clips) {
  if (clips.empty()) throw ShapeError("empty clip batch");
  const std::size_t width = clips.front()->data.data.size();
  std::vector<T> values;
  values.reserve(clips.size() * width);
  for (const auto* c : clips) {
    if (c->modality != clips.front()->modality) throw DatasetError("clip batch mixes modalities");
    if (c->data.data.size() != width) throw ShapeError("clip batch mixes clip sizes");
    values.insert(values.end(), c->data.data.begin(), c->data.data.end());
  }
  return Tensor<T>({clips.size(), width}, std::move(values));
}

inline std::size_t input_dim(const data::ClipSet& set, const std::string& modality) {
  for (const auto& subj : set.subjects())
    for (const auto& stim : set.stimuli())
      if (set.has_trial(modality, subj, stim) && !set.trial(modality, subj, stim).empty())
        return set.trial(modality, subj, stim).front().data.data.size();
  throw InsufficientDataError("no clips for modality '" + modality + "'");
}

// ---------------------------------------------------------------------------
// Leakage audit

/// (modality, subject, stimulus, long-clip position): the time span a clip covers.
using ClipKey = std::tuple<std::string, std::string, std::string, std::size_t>;

inline ClipKey clip_key(const data::Clip& c, double t_long) {
  const auto pos = static_cast<std::size_t>(std::floor(static_cast<double>(c.position) * c.t_seconds / t_long + 1e-9));
  return {c.modality, c.subject, c.stimulus, pos};
}

struct UsageLog {
  double t_long = 5.0;
  std::set<ClipKey> keys;
  void add(const data::Clip& c) { keys.insert(clip_key(c, t_long)); }
  void add_set(const data::ClipSet& set) {
    for (const auto& mod : set.modalities())
      for (const auto& subj : set.subjects())
        for (const auto& stim : set.stimuli())
          if (set.has_trial(mod, subj, stim))
            for (const auto& c : set.trial(mod, subj, stim)) add(c);
  }
};

inline std::size_t leakage_count(const std::set<ClipKey>& used, const std::set<ClipKey>& test) {
  std::size_t n = 0;
  for (const auto& k : test) n += used.count(k);
  return n;
}

/// Throws when any test clip was used for training.
inline void audit_no_leakage(const std::set<ClipKey>& used, const std::set<ClipKey>& test, const std::string& where) {
  for (const auto& k : test)
    if (used.count(k))
      throw DatasetError("leakage in " + where + ": clip (" + std::get<0>(k) + ", " + std::get<1>(k) + ", " + std::get<2>(k) +
                         ", " + std::to_string(std::get<3>(k)) + ") is used for training and testing");
}

// ---------------------------------------------------------------------------
// Pre-training

template <class T>
ad::ParamRefs<T> prefixed(ad::ParamRefs<T> refs, const std::string& prefix) {
  for (auto& p : refs.params) p.name = prefix + "." + p.name;
  for (auto& s : refs.bn_states) s.first = prefix + "." + s.first;
  return refs;
}

/// Encoders and projectors of both modalities at one resolution plus the
/// shared cross-modal linear map.
template <class T>
class PretrainModel {
 public:
  struct Losses {
    Tensor<T> total;
    double eeg = 0.0, pps = 0.0, cc = 0.0;
  };

  PretrainModel() = default;
  PretrainModel(const RunConfig& cfg, std::array<std::size_t, 2> input_dims, ad::Rng& rng)
      : weights_(cfg.effective_weights()), mods_{cfg.eeg_modality, cfg.pps_modality} {
    for (std::size_t m = 0; m < 2; ++m) {
      auto ec = cfg.encoder;
      ec.input_dim = input_dims[m];
      enc_[m] = model::Encoder<T>(ec, rng);
      proj_[m] = model::Projector<T>(ec.embed_dim, cfg.projector, rng);
    }
    cross_ = ad::Linear<T>(cfg.projector.out_dim, cfg.projector.out_dim, rng);
  }

  model::Encoder<T>& encoder(std::size_t m) { return enc_[m]; }
  model::Projector<T>& projector(std::size_t m) { return proj_[m]; }
  ad::Linear<T>& cross() { return cross_; }
  const model::LossWeights& weights() const { return weights_; }

  Tensor<T> embed(std::size_t m, const std::vector<const data::Clip*>& clips, const Mode& mode) {
    return proj_[m](enc_[m].encode(rows_to_tensor<T>(clips), mode), mode);
  }

  Losses loss(const data::MiniBatch& batch, const Mode& mode) {
    const std::size_t slots = batch.slots();
    std::array<Tensor<T>, 2> z;
    for (std::size_t m = 0; m < 2; ++m) {
      const auto& per_subject = batch.clips[batch.modality_index(mods_[m])];
      std::vector<const data::Clip*> rows;
      rows.reserve(2 * slots);
      for (std::size_t s = 0; s < 2; ++s)
        for (const auto& c : per_subject[s]) rows.push_back(&c);
      z[m] = embed(m, rows, mode);
    }
    Losses out;
    out.total = Tensor<T>::zeros({1});
    const auto& w = weights_;
    if (w.alpha > 0 || w.beta > 0) {
      for (std::size_t m = 0; m < 2; ++m) {
        auto l = model::tcl_batch_loss(ad::slice(z[m], 0, 0, slots), ad::slice(z[m], 0, slots, slots), w.tau,
                                       w.exclude_positive_in_s3);
        (m == 0 ? out.eeg : out.pps) = static_cast<double>(l.item());
        out.total = ad::add(out.total, ad::scale(l, static_cast<T>(m == 0 ? w.alpha : w.beta)));
      }
    }
    if (w.gamma > 0) {
      auto e = cross_(z[0]), p = cross_(z[1]);
      auto l = model::cmcl_loss(ad::slice(e, 0, 0, slots), ad::slice(e, 0, slots, slots), ad::slice(p, 0, 0, slots),
                                ad::slice(p, 0, slots, slots), w.tau, w.exclude_positive_in_s3);
      out.cc = static_cast<double>(l.item());
      out.total = ad::add(out.total, ad::scale(l, static_cast<T>(w.gamma)));
    }
    return out;
  }

  ad::ParamRefs<T> parameters() {
    ad::ParamRefs<T> refs;
    for (std::size_t m = 0; m < 2; ++m) {
      refs.append(prefixed(enc_[m].parameters(), "enc_" + mods_[m]));
      refs.append(prefixed(proj_[m].parameters(), "proj_" + mods_[m]));
    }
    ad::ParamRefs<T> cm;
    cross_.collect("cm", cm);
    refs.append(cm);
    return refs;
  }

  /// Archive entries enc_<modality>_<t>.*, proj_<modality>_<t>.*, cm_<t>.*
  void store(ad::Archive& archive, double t) {
    const auto tl = t_label(t);
    for (std::size_t m = 0; m < 2; ++m) {
      ad::store(archive, "enc_" + mods_[m] + "_" + tl, enc_[m].parameters());
      ad::store(archive, "proj_" + mods_[m] + "_" + tl, proj_[m].parameters());
    }
    ad::ParamRefs<T> cm;
    cross_.collect("linear", cm);
    ad::store(archive, "cm_" + tl, cm);
  }

  void restore(const ad::Archive& archive, double t) {
    const auto tl = t_label(t);
    for (std::size_t m = 0; m < 2; ++m) {
      auto e = enc_[m].parameters();
      ad::restore(archive, "enc_" + mods_[m] + "_" + tl, e);
      auto p = proj_[m].parameters();
      ad::restore(archive, "proj_" + mods_[m] + "_" + tl, p);
    }
    ad::ParamRefs<T> cm;
    cross_.collect("linear", cm);
    ad::restore(archive, "cm_" + tl, cm);
  }

 private:
  model::LossWeights weights_;
  std::array<std::string, 2> mods_;
  std::array<model::Encoder<T>, 2> enc_;
  std::array<model::Projector<T>, 2> proj_;
  ad::Linear<T> cross_;
};

struct LossRow {
  std::size_t epoch = 0;
  double train = 0.0;
  std::optional<double> val;
};

inline void write_loss_csv(const fs::path& path, const std::vector<LossRow>& rows) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss\n";
  for (const auto& r : rows) os << r.epoch << ',' << format_real(r.train) << ',' << (r.val ? format_real(*r.val) : "") << '\n';
  io::write_text_file(path, os.str());
}

struct PretrainReport {
  ad::Archive checkpoint;
  std::map<double, std::vector<LossRow>> curves;  // keyed by clip length
  std::map<double, std::size_t> best_epoch;
  std::size_t skipped_steps = 0;
};

inline std::vector<std::pair<std::string, std::string>> subject_pairs(const std::vector<std::string>& subjects) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (std::size_t i = 0; i < subjects.size(); ++i)
    for (std::size_t j = i + 1; j < subjects.size(); ++j) pairs.emplace_back(subjects[i], subjects[j]);
  return pairs;
}

inline std::vector<double> pretrain_resolutions(const model::ResolutionPlan& plan) {
  if (plan.use_short) return {plan.t_short, plan.t_long};
  return {plan.t_long};
}

/// Contrastive pre-training at every resolution of the plan. `val` (optional)
/// holds held-out stimuli for checkpoint selection; without it the final
/// epoch is kept.
template <class T = float>
PretrainReport pretrain(const RunConfig& cfg, const Corpus& train, const Corpus* val, std::uint64_t seed,
                        UsageLog* usage = nullptr, const LogFn& log = {}) {
  cfg.validate();
  PretrainReport report;
  const std::size_t epochs = cfg.pretrain.effective_epochs();
  const auto policy = cfg.effective_augment();
  const std::array<std::string, 2> mods{cfg.eeg_modality, cfg.pps_modality};
  for (const double t : pretrain_resolutions(cfg.plan)) {
    const bool is_long = t == cfg.plan.t_long;
    const data::ClipSet& set = is_long ? train.long_clips : *train.short_clips;
    const auto subjects = set.subjects();
    if (subjects.size() < 2) throw InsufficientDataError("pretraining needs at least 2 subjects, got " + std::to_string(subjects.size()));
    const auto pairs = subject_pairs(subjects);
    const std::uint64_t r = is_long ? 1 : 0;

    auto init_rng = derive_rng(seed, 10, r);
    PretrainModel<T> model(cfg, std::array<std::size_t, 2>{input_dim(set, mods[0]), input_dim(set, mods[1])}, init_rng);
    auto refs = model.parameters();
    optim::Adam<T> adam(cfg.adam);
    const optim::ScheduleConfig schedule{cfg.pretrain.lr, 0.0, epochs, cfg.pretrain.cycles, 3};
    auto sample_rng = derive_rng(seed, 11, r), aug_rng = derive_rng(seed, 12, r), drop_rng = derive_rng(seed, 13, r);

    std::vector<data::MiniBatch> val_batches;
    if (val) {
      const data::ClipSet& vset = is_long ? val->long_clips : *val->short_clips;
      auto vrng = derive_rng(seed, 14, r), vaug = derive_rng(seed, 15, r);
      const auto vpairs = subject_pairs(vset.subjects());
      for (const auto& [a, b] : vpairs) {
        std::size_t available = 0;
        for (const auto& stim : vset.stimuli())
          if (vset.has_trial(mods[0], a, stim)) available += vset.trial(mods[0], a, stim).size();
        const std::size_t k = std::min(cfg.pretrain.k, available);
        if (k < 2) continue;
        auto batch = data::sample_minibatch(vset, a, b, k, vrng);
        if (usage)
          for (const auto& per_mod : batch.clips)
            for (const auto& side : per_mod)
              for (const auto& c : side) usage->add(c);
        val_batches.push_back(policy.expansion > 1 ? augment::expand_batch(batch, policy, vaug) : batch);
      }
    }

    auto& curve = report.curves[t];
    double best = std::numeric_limits<double>::infinity();
    ad::Archive best_archive;
    std::size_t best_epoch = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
      const double lr = optim::lr_at(epoch, schedule);
      double total = 0.0;
      for (const auto& [a, b] : pairs) {
        auto batch = data::sample_minibatch(set, a, b, cfg.pretrain.k, sample_rng);
        if (usage)
          for (const auto& per_mod : batch.clips)
            for (const auto& side : per_mod)
              for (const auto& c : side) usage->add(c);
        if (policy.expansion > 1) batch = augment::expand_batch(batch, policy, aug_rng);
        refs.zero_grad();
        auto losses = model.loss(batch, Mode{true, &drop_rng});
        const double value = static_cast<double>(losses.total.item());
        if (!std::isfinite(value))
          throw NumericError("pretraining diverged at t=" + t_label(t) + ", epoch " + std::to_string(epoch) + ", pair (" + a +
                             ", " + b + "): loss " + format_real(value) + " (eeg " + format_real(losses.eeg) + ", pps " +
                             format_real(losses.pps) + ", cross-modal " + format_real(losses.cc) + ")");
        losses.total.backward();
        if (!adam.step(refs, lr)) ++report.skipped_steps;
        total += value;
      }
      LossRow row{epoch, total / static_cast<double>(pairs.size()), std::nullopt};
      if (!val_batches.empty()) {
        ad::NoGradGuard guard;
        double v = 0.0;
        for (const auto& vb : val_batches) v += static_cast<double>(model.loss(vb, Mode{}).total.item());
        row.val = v / static_cast<double>(val_batches.size());
        if (!std::isfinite(*row.val)) throw NumericError("validation loss is not finite at epoch " + std::to_string(epoch));
        if (*row.val < best) {
          best = *row.val;
          best_epoch = epoch;
          best_archive = ad::Archive{};
          model.store(best_archive, t);
        }
      }
      curve.push_back(row);
      if (log && (epoch + 1 == epochs || epoch % 10 == 0))
        log("pretrain " + t_label(t) + " epoch " + std::to_string(epoch) + " lr " + format_real(lr) + " train " +
            format_real(row.train) + (row.val ? " val " + format_real(*row.val) : ""));
    }
    if (val_batches.empty()) {
      best_epoch = epochs - 1;
      model.store(best_archive, t);
    }
    report.best_epoch[t] = best_epoch;
    for (const auto& [name, entry] : best_archive.entries()) report.checkpoint.put(name, entry.shape, entry.values);
  }
  return report;
}

/// Rebuilds the pre-training model of resolution t from an archive.
template <class T>
PretrainModel<T> load_pretrain_model(const RunConfig& cfg, const data::ClipSet& set, const ad::Archive& archive, double t) {
  auto rng = derive_rng(0, 0);
  PretrainModel<T> model(cfg, std::array<std::size_t, 2>{input_dim(set, cfg.eeg_modality), input_dim(set, cfg.pps_modality)}, rng);
  model.restore(archive, t);
  return model;
}

struct Alignment {
  double positive = 0.0;  // mean cosine of same (stimulus, position) cross-subject pairs
  double negative = 0.0;  // mean cosine of different-stimulus cross-subject pairs
  double gap() const { return positive - negative; }
};

/// Mean cosine similarities of projected embeddings (eval mode), averaged
/// over both modalities. With `anchor` set, only pairs involving that subject count.
template <class T>
Alignment projected_alignment(PretrainModel<T>& model, const data::ClipSet& set, const std::array<std::string, 2>& mods,
                              const std::string& anchor = {}) {
  ad::NoGradGuard guard;
  Alignment out;
  for (std::size_t m = 0; m < 2; ++m) {
    std::vector<const data::Clip*> clips;
    for (const auto& subj : set.subjects())
      for (const auto& stim : set.stimuli())
        if (set.has_trial(mods[m], subj, stim))
          for (const auto& c : set.trial(mods[m], subj, stim)) clips.push_back(&c);
    std::vector<std::vector<double>> emb;
    for (std::size_t start = 0; start < clips.size(); start += 256) {
      std::vector<const data::Clip*> chunk(clips.begin() + static_cast<std::ptrdiff_t>(start),
                                           clips.begin() + static_cast<std::ptrdiff_t>(std::min(clips.size(), start + 256)));
      auto z = model.embed(m, chunk, Mode{});
      const std::size_t d = z.dim(1);
      for (std::size_t r = 0; r < chunk.size(); ++r)
        emb.emplace_back(z.values().begin() + static_cast<std::ptrdiff_t>(r * d), z.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
    double pos = 0, neg = 0;
    std::size_t np = 0, nn = 0;
    for (std::size_t i = 0; i < clips.size(); ++i)
      for (std::size_t j = i + 1; j < clips.size(); ++j) {
        if (clips[i]->subject == clips[j]->subject) continue;
        if (!anchor.empty() && clips[i]->subject != anchor && clips[j]->subject != anchor) continue;
        const double s = model::cosine_sim(emb[i], emb[j]);
        if (clips[i]->stimulus == clips[j]->stimulus && clips[i]->position == clips[j]->position) {
          pos += s;
          ++np;
        } else if (clips[i]->stimulus != clips[j]->stimulus) {
          neg += s;
          ++nn;
        }
      }
    if (np == 0 || nn == 0) throw InsufficientDataError("alignment needs cross-subject positive and negative pairs");
    out.positive += pos / static_cast<double>(np) / 2.0;
    out.negative += neg / static_cast<double>(nn) / 2.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct Sample {
  const data::Clip* eeg = nullptr;
  const data::Clip* pps = nullptr;
  std::size_t label = 0;
};

inline std::size_t label_for(const data::LabelSet& l, Task task) {
  switch (task) {
    case Task::arousal: return l.arousal == data::Level::high ? 1 : 0;
    case Task::valence: return l.valence == data::Level::high ? 1 : 0;
    case Task::four: return static_cast<std::size_t>(l.four);
  }
  return 0;
}

/// One sample per (subject, stimulus, position) present in both modalities.
inline std::vector<Sample> make_samples(const data::ClipSet& set, const RunConfig& cfg) {
  std::vector<Sample> out;
  for (const auto& subj : set.subjects())
    for (const auto& stim : set.stimuli()) {
      if (!set.has_trial(cfg.eeg_modality, subj, stim) || !set.has_trial(cfg.pps_modality, subj, stim)) continue;
      const auto& e = set.trial(cfg.eeg_modality, subj, stim);
      const auto& p = set.trial(cfg.pps_modality, subj, stim);
      if (e.size() != p.size()) throw DatasetError("modalities disagree on clip count for (" + subj + ", " + stim + ")");
      const std::size_t label = label_for(set.labels(subj, stim), cfg.task);
      for (std::size_t i = 0; i < e.size(); ++i) out.push_back({&e[i], &p[i], label});
    }
  return out;
}

/// Long (and optionally short) encoders per modality with the fusion head.
template <class T>
class FusionModel {
 public:
  FusionModel() = default;
  FusionModel(const RunConfig& cfg, std::array<std::size_t, 2> long_dims, ad::Rng& rng)
      : plan_(cfg.plan), mods_{cfg.eeg_modality, cfg.pps_modality} {
    const std::size_t n = plan_.use_short ? plan_.shorts_per_long() : 1;
    for (std::size_t m = 0; m < 2; ++m) {
      auto ec = cfg.encoder;
      ec.input_dim = long_dims[m];
      long_[m] = model::Encoder<T>(ec, rng);
      if (plan_.use_short) {
        if (long_dims[m] % n != 0) throw ConfigError("long clip size is not divisible into short clips");
        ec.input_dim = long_dims[m] / n;
        short_.push_back(model::Encoder<T>(ec, rng));
      }
    }
    model::FusionConfig fc;
    fc.strategy = cfg.finetune.fusion;
    fc.classes = task_classes(cfg.task);
    fc.feature_dim = plan_.feature_dim(cfg.encoder.embed_dim);
    fc.hidden_dim = cfg.finetune.hidden_dim;
    fc.aux_loss_weight = cfg.finetune.aux_loss_weight;
    head_ = model::FusionHead<T>(fc, rng);
  }

  const model::FusionHead<T>& head() const { return head_; }
  std::size_t classes() const { return head_.config().classes; }

  /// Copies pre-trained encoder weights; throws when a required entry is missing.
  void load_pretrained(const ad::Archive& archive) {
    for (std::size_t m = 0; m < 2; ++m) {
      const auto long_name = "enc_" + mods_[m] + "_" + t_label(plan_.t_long);
      if (!archive.has_prefix(long_name + ".")) throw IoError("checkpoint lacks " + long_name);
      auto refs = long_[m].parameters();
      ad::restore(archive, long_name, refs);
      if (plan_.use_short) {
        const auto short_name = "enc_" + mods_[m] + "_" + t_label(plan_.t_short);
        if (!archive.has_prefix(short_name + ".")) throw IoError("checkpoint lacks " + short_name);
        auto srefs = short_[m].parameters();
        ad::restore(archive, short_name, srefs);
      }
    }
  }

  Tensor<T> modality_features(std::size_t m, const std::vector<const data::Clip*>& clips, const Mode& mode) {
    auto h_long = long_[m].encode(rows_to_tensor<T>(clips), mode);
    if (!plan_.use_short) return h_long;
    std::vector<data::Clip> shorts;
    shorts.reserve(clips.size() * plan_.shorts_per_long());
    for (const auto* c : clips)
      for (auto& s : model::decompose_long(*c, plan_.t_short)) shorts.push_back(std::move(s));
    std::vector<const data::Clip*> ptrs;
    ptrs.reserve(shorts.size());
    for (const auto& s : shorts) ptrs.push_back(&s);
    auto h_short = short_[m].encode(rows_to_tensor<T>(ptrs), mode);
    const std::size_t n = plan_.shorts_per_long();
    std::optional<Tensor<T>> grouped = ad::reshape(h_short, {clips.size(), n, h_short.dim(1)});
    return model::modality_feature(h_long, grouped, plan_);
  }

  model::FusionOutput<T> forward(const std::vector<const Sample*>& batch, const Mode& mode) {
    std::vector<const data::Clip*> eeg, pps;
    for (const auto* s : batch) {
      eeg.push_back(s->eeg);
      pps.push_back(s->pps);
    }
    return head_(modality_features(0, eeg, mode), modality_features(1, pps, mode));
  }

  Tensor<T> loss(const model::FusionOutput<T>& out, const std::vector<std::size_t>& labels) const { return head_.loss(out, labels); }

  ad::ParamRefs<T> parameters(bool include_encoders = true) {
    ad::ParamRefs<T> refs;
    if (include_encoders)
      for (std::size_t m = 0; m < 2; ++m) {
        refs.append(prefixed(long_[m].parameters(), encoder_name(m, plan_.t_long)));
        if (plan_.use_short) refs.append(prefixed(short_[m].parameters(), encoder_name(m, plan_.t_short)));
      }
    refs.append(prefixed(head_.parameters(), "fusion_head"));
    return refs;
  }

  /// Encoders under enc_<modality>_<t>, the head under fusion_head.
  void store(ad::Archive& archive) {
    for (std::size_t m = 0; m < 2; ++m) {
      ad::store(archive, encoder_name(m, plan_.t_long), long_[m].parameters());
      if (plan_.use_short) ad::store(archive, encoder_name(m, plan_.t_short), short_[m].parameters());
    }
    ad::store(archive, "fusion_head", head_.parameters());
  }

  void restore(const ad::Archive& archive) {
    for (std::size_t m = 0; m < 2; ++m) {
      auto l = long_[m].parameters();
      ad::restore(archive, encoder_name(m, plan_.t_long), l);
      if (plan_.use_short) {
        auto s = short_[m].parameters();
        ad::restore(archive, encoder_name(m, plan_.t_short), s);
      }
    }
    auto h = head_.parameters();
    ad::restore(archive, "fusion_head", h);
  }

 private:
  std::string encoder_name(std::size_t m, double t) const { return "enc_" + mods_[m] + "_" + t_label(t); }

  model::ResolutionPlan plan_;
  std::array<std::string, 2> mods_;
  std::array<model::Encoder<T>, 2> long_;
  std::vector<model::Encoder<T>> short_;
  model::FusionHead<T> head_;
};

template <class T>
std::vector<std::size_t> predict(FusionModel<T>& model, const std::vector<Sample>& samples, std::size_t chunk = 256) {
  ad::NoGradGuard guard;
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<const Sample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + chunk); ++i) batch.push_back(&samples[i]);
    auto res = model.forward(batch, Mode{});
    const std::size_t n = res.probs.dim(1);
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const auto row = res.probs.values().begin() + static_cast<std::ptrdiff_t>(r * n);
      out.push_back(static_cast<std::size_t>(std::max_element(row, row + static_cast<std::ptrdiff_t>(n)) - row));
    }
  }
  return out;
}

template <class T>
metrics::Metrics evaluate(FusionModel<T>& model, const std::vector<Sample>& samples) {
  if (samples.empty()) throw InsufficientDataError("evaluate: empty split");
  std::vector<std::size_t> truth;
  truth.reserve(samples.size());
  for (const auto& s : samples) truth.push_back(s.label);
  return metrics::compute_metrics(truth, predict(model, samples), model.classes());
}

template <class T>
double mean_loss(FusionModel<T>& model, const std::vector<Sample>& samples, std::size_t chunk = 256) {
  ad::NoGradGuard guard;
  double total = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<const Sample*> batch;
    std::vector<std::size_t> labels;
    for (std::size_t i = start; i < std::min(samples.size(), start + chunk); ++i) {
      batch.push_back(&samples[i]);
      labels.push_back(samples[i].label);
    }
    total += static_cast<double>(model.loss(model.forward(batch, Mode{}), labels).item()) * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(samples.size());
}

template <class T>
struct FinetuneReport {
  FusionModel<T> model;
  std::vector<LossRow> curve;
  std::size_t best_epoch = 0;
  std::size_t skipped_steps = 0;
};

/// Shuffled mini-batches of at most `batch` indices; a trailing singleton is
/// merged into the previous batch (batch norm needs two rows).
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch, ad::Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch)));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

/// Supervised fine-tuning. With `pretrained` null the encoders keep their
/// random initialization. Returns the epoch with the lowest validation loss
/// (the final epoch when `val` is null).
template <class T = float>
FinetuneReport<T> finetune(const RunConfig& cfg, const Corpus& train, const Corpus* val, const ad::Archive* pretrained,
                           std::uint64_t seed, UsageLog* usage = nullptr, const LogFn& log = {}) {
  cfg.validate();
  auto init_rng = derive_rng(seed, 20);
  FinetuneReport<T> report{FusionModel<T>(cfg, {input_dim(train.long_clips, cfg.eeg_modality), input_dim(train.long_clips, cfg.pps_modality)}, init_rng), {}, 0, 0};
  auto& model = report.model;
  if (pretrained) model.load_pretrained(*pretrained);
  const auto samples = make_samples(train.long_clips, cfg);
  if (samples.size() < 2) throw InsufficientDataError("fine-tuning needs at least 2 samples");
  const auto val_samples = val ? make_samples(val->long_clips, cfg) : std::vector<Sample>{};
  if (usage) {
    usage->add_set(train.long_clips);
    if (val) usage->add_set(val->long_clips);
  }
  auto refs = model.parameters(!cfg.finetune.freeze_encoders);
  optim::Adam<T> adam(cfg.adam);
  const optim::ScheduleConfig schedule{cfg.finetune.lr, 0.0, cfg.finetune.epochs, cfg.finetune.cycles, 3};
  auto shuffle_rng = derive_rng(seed, 21), drop_rng = derive_rng(seed, 22);
  double best = std::numeric_limits<double>::infinity();
  ad::Archive best_archive;
  for (std::size_t epoch = 0; epoch < cfg.finetune.epochs; ++epoch) {
    const double lr = optim::lr_at(epoch, schedule);
    double total = 0.0;
    for (const auto& idx : make_batches(samples.size(), cfg.finetune.batch, shuffle_rng)) {
      std::vector<const Sample*> batch;
      std::vector<std::size_t> labels;
      for (auto i : idx) {
        batch.push_back(&samples[i]);
        labels.push_back(samples[i].label);
      }
      model.parameters().zero_grad();
      auto loss = model.loss(model.forward(batch, Mode{true, &drop_rng}), labels);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) throw NumericError("fine-tuning diverged at epoch " + std::to_string(epoch));
      loss.backward();
      if (!adam.step(refs, lr)) ++report.skipped_steps;
      total += value * static_cast<double>(idx.size());
    }
    LossRow row{epoch, total / static_cast<double>(samples.size()), std::nullopt};
    if (!val_samples.empty()) {
      row.val = mean_loss(model, val_samples);
      if (*row.val < best) {
        best = *row.val;
        report.best_epoch = epoch;
        best_archive = ad::Archive{};
        model.store(best_archive);
      }
    }
    report.curve.push_back(row);
    if (log)
      log("finetune epoch " + std::to_string(epoch) + " lr " + format_real(lr) + " train " + format_real(row.train) +
          (row.val ? " val " + format_real(*row.val) : ""));
  }
  if (!val_samples.empty()) {
    model.restore(best_archive);
  } else {
    report.best_epoch = cfg.finetune.epochs - 1;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Protocols

/// round(fraction * n) stimuli drawn with the seed, at least one left for training.
inline std::vector<std::string> choose_validation(std::vector<std::string> stimuli, double fraction, std::uint64_t seed) {
  if (stimuli.size() < 2 || fraction <= 0) return {};
  std::size_t n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(stimuli.size())));
  n = std::min(n, stimuli.size() - 1);
  auto rng = derive_rng(seed, 30);
  std::shuffle(stimuli.begin(), stimuli.end(), rng);
  stimuli.resize(n);
  std::sort(stimuli.begin(), stimuli.end());
  return stimuli;
}

inline std::vector<std::string> minus(const std::vector<std::string>& all, const std::vector<std::string>& drop) {
  std::vector<std::string> out;
  for (const auto& s : all)
    if (std::find(drop.begin(), drop.end(), s) == drop.end()) out.push_back(s);
  return out;
}

struct FoldSpec {
  std::string name;
  Split train;
  Split test;
};

/// Ten folds over stimulus ids (shuffled with the seed); earlier folds take the remainder.
inline std::vector<FoldSpec> tenfold_folds(const std::vector<std::string>& subjects, std::vector<std::string> stimuli,
                                           std::uint64_t seed) {
  if (stimuli.size() < 10) throw InsufficientDataError("ten-fold CV needs at least 10 stimuli, got " + std::to_string(stimuli.size()));
  auto rng = derive_rng(seed, 31);
  std::shuffle(stimuli.begin(), stimuli.end(), rng);
  std::vector<FoldSpec> folds;
  const std::size_t base = stimuli.size() / 10, extra = stimuli.size() % 10;
  std::size_t start = 0;
  for (std::size_t k = 0; k < 10; ++k) {
    const std::size_t len = base + (k < extra ? 1 : 0);
    std::vector<std::string> test(stimuli.begin() + static_cast<std::ptrdiff_t>(start), stimuli.begin() + static_cast<std::ptrdiff_t>(start + len));
    std::sort(test.begin(), test.end());
    start += len;
    char name[16];
    std::snprintf(name, sizeof(name), "fold%02zu", k);
    FoldSpec f;
    f.name = name;
    f.test = {subjects, test};
    auto rest = minus(stimuli, test);
    std::sort(rest.begin(), rest.end());
    f.train = {subjects, rest};
    folds.push_back(std::move(f));
  }
  return folds;
}

inline std::vector<FoldSpec> loso_folds(const std::vector<std::string>& subjects, const std::vector<std::string>& stimuli) {
  if (subjects.size() < 2) throw InsufficientDataError("LOSO needs at least 2 subjects");
  std::vector<FoldSpec> folds;
  for (const auto& s : subjects) {
    FoldSpec f;
    f.name = s;
    f.test = {{s}, stimuli};
    f.train = {minus(subjects, {s}), stimuli};
    folds.push_back(std::move(f));
  }
  return folds;
}

struct FoldOutcome {
  std::string name;
  metrics::Metrics metrics;
  std::size_t train_keys = 0;
  std::size_t test_keys = 0;
  std::size_t leaked = 0;
};

/// Pre-trains (when enabled) and fine-tunes on the training side of a fold,
/// audits leakage, and evaluates on the test side. Artifacts go to out_dir
/// when it is non-empty.
template <class T = float>
FoldOutcome run_fold(const RunConfig& cfg, const Corpus& corpus, const FoldSpec& spec, std::uint64_t seed,
                     const fs::path& out_dir = {}, const LogFn& log = {}) {
  const Corpus train_side = corpus.select(spec.train);
  const Corpus test_side = corpus.select(spec.test);
  const auto val_stimuli = choose_validation(train_side.long_clips.stimuli(), cfg.validation_fraction, seed);
  const Corpus fit = train_side.with_stimuli(minus(train_side.long_clips.stimuli(), val_stimuli));
  std::optional<Corpus> val;
  if (!val_stimuli.empty()) val = train_side.with_stimuli(val_stimuli);

  UsageLog usage{cfg.plan.t_long, {}};
  std::optional<PretrainReport> pre;
  if (cfg.pretrain.enabled) {
    pre = pretrain<T>(cfg, fit, val ? &*val : nullptr, derive_seed(seed, 1), &usage, log);
    if (!out_dir.empty()) {
      for (const auto& [t, rows] : pre->curves) write_loss_csv(out_dir / ("loss_pretrain_" + t_label(t) + ".csv"), rows);
      pre->checkpoint.save(out_dir / "pretrain.ckpt");
    }
  }
  auto ft = finetune<T>(cfg, fit, val ? &*val : nullptr, pre ? &pre->checkpoint : nullptr, derive_seed(seed, 2), &usage, log);
  if (!out_dir.empty()) {
    write_loss_csv(out_dir / ("loss_finetune_" + t_label(cfg.plan.t_long) + ".csv"), ft.curve);
    ad::Archive a;
    ft.model.store(a);
    a.save(out_dir / "model.ckpt");
  }
  UsageLog test_usage{cfg.plan.t_long, {}};
  test_usage.add_set(test_side.long_clips);
  FoldOutcome out;
  out.name = spec.name;
  out.train_keys = usage.keys.size();
  out.test_keys = test_usage.keys.size();
  out.leaked = leakage_count(usage.keys, test_usage.keys);
  audit_no_leakage(usage.keys, test_usage.keys, spec.name);
  out.metrics = evaluate(ft.model, make_samples(test_side.long_clips, cfg));
  return out;
}

struct CvReport {
  std::vector<FoldOutcome> folds;
  metrics::Summary accuracy, f1;
  std::vector<std::vector<std::size_t>> confusion;
};

/// Runs every fold (up to `jobs` concurrently) and aggregates in fold order.
template <class T = float>
CvReport run_protocol(const RunConfig& cfg, const Corpus& corpus, const std::vector<FoldSpec>& folds, const fs::path& out_dir,
                      std::size_t jobs = 1, const LogFn& log = {}) {
  CvReport report;
  report.folds.resize(folds.size());
  std::mutex log_mutex;
  const LogFn safe_log = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    log(msg);
  };
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(folds.size());
  auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < folds.size();) {
      try {
        const fs::path dir = out_dir.empty() ? fs::path{} : out_dir / folds[k].name;
        const LogFn fold_log = [&, k](const std::string& m) { safe_log("[" + folds[k].name + "] " + m); };
        report.folds[k] = run_fold<T>(cfg, corpus, folds[k], derive_seed(cfg.seed, 40, k), dir, fold_log);
        safe_log("[" + folds[k].name + "] acc " + format_real(report.folds[k].metrics.accuracy) + " f1 " +
                 format_real(report.folds[k].metrics.f1));
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, folds.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<double> acc, f1;
  for (const auto& f : report.folds) {
    acc.push_back(f.metrics.accuracy);
    f1.push_back(f.metrics.f1);
    if (report.confusion.empty()) report.confusion = f.metrics.confusion;
    else
      for (std::size_t i = 0; i < report.confusion.size(); ++i)
        for (std::size_t j = 0; j < report.confusion.size(); ++j) report.confusion[i][j] += f.metrics.confusion[i][j];
  }
  report.accuracy = metrics::summarize(acc);
  report.f1 = metrics::summarize(f1);
  return report;
}

inline void write_metrics_csv(const fs::path& path, const CvReport& r) {
  std::ostringstream os;
  os << "fold,acc,f1\n";
  for (const auto& f : r.folds) os << f.name << ',' << format_real(f.metrics.accuracy) << ',' << format_real(f.metrics.f1) << '\n';
  os << "mean," << format_real(r.accuracy.mean) << ',' << format_real(r.f1.mean) << '\n';
  os << "std," << format_real(r.accuracy.std) << ',' << format_real(r.f1.std) << '\n';
  io::write_text_file(path, os.str());
}

inline void write_confusion_csv(const fs::path& path, const std::vector<std::vector<std::size_t>>& confusion) {
  std::ostringstream os;
  os << "true\\pred";
  for (std::size_t c = 0; c < confusion.size(); ++c) os << ',' << c;
  os << '\n';
  for (std::size_t r = 0; r < confusion.size(); ++r) {
    os << r;
    for (auto v : confusion[r]) os << ',' << v;
    os << '\n';
  }
  io::write_text_file(path, os.str());
}

inline void write_reports(const fs::path& out_dir, const CvReport& r, Task task) {
  write_metrics_csv(out_dir / ("metrics_" + task_name(task) + ".csv"), r);
  write_confusion_csv(out_dir / ("confusion_" + task_name(task) + ".csv"), r.confusion);
}

}  // namespace physiosync::train
