#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "physiosync/encoder.hpp"

namespace physiosync::model {

enum class FusionStrategy { mcp, feature_concat, decision_average };

inline FusionStrategy parse_strategy(const std::string& s) {
  if (s == "mcp") return FusionStrategy::mcp;
  if (s == "feature_concat") return FusionStrategy::feature_concat;
  if (s == "decision_average") return FusionStrategy::decision_average;
  throw ConfigError("unknown fusion strategy '" + s + "'");
}

inline std::string strategy_name(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::mcp: return "mcp";
    case FusionStrategy::feature_concat: return "feature_concat";
    case FusionStrategy::decision_average: return "decision_average";
  }
  return "?";
}

enum class ShortPooling { mean, concat };

struct ResolutionPlan {
  double t_long = 5.0;
  double t_short = 1.0;
  bool use_short = true;
  ShortPooling short_pooling = ShortPooling::mean;

  std::size_t shorts_per_long() const {
    const double n = t_long / t_short;
    if (!(t_short > 0) || std::abs(n - std::round(n)) > 1e-9 || std::round(n) < 1)
      throw ConfigError("t_long must be a whole multiple of t_short");
    return static_cast<std::size_t>(std::llround(n));
  }
  /// Width of a modality feature given encoder width d_e.
  std::size_t feature_dim(std::size_t embed_dim) const {
    if (!use_short) return embed_dim;
    return embed_dim * (short_pooling == ShortPooling::mean ? 2 : 1 + shorts_per_long());
  }
};

/// Splits a long clip into contiguous short clips of t_short seconds, in order.
inline std::vector<data::Clip> decompose_long(const data::Clip& clip, double t_short) {
  const double n_real = clip.t_seconds / t_short;
  if (!(t_short > 0) || std::abs(n_real - std::round(n_real)) > 1e-9 || std::round(n_real) < 1)
    throw ConfigError("decompose_long: clip length is not a whole multiple of t_short");
  const std::size_t n = static_cast<std::size_t>(std::llround(n_real));
  if (clip.data.samples % n != 0) throw ConfigError("decompose_long: samples not divisible into short clips");
  const std::size_t len = clip.data.samples / n;
  std::vector<data::Clip> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    data::Clip c = clip;
    c.data = clip.data.columns(k * len, len);
    c.position = clip.position * n + k;
    c.t_seconds = t_short;
    out.push_back(std::move(c));
  }
  return out;
}

/// H_m = concat(long, mean(shorts)) when short features are used, else long.
/// long_feat: [B x d]; short_feats: [B x n x d].
template <class T>
Tensor<T> modality_feature(const Tensor<T>& long_feat, const std::optional<Tensor<T>>& short_feats, const ResolutionPlan& plan) {
  if (!plan.use_short) return long_feat;
  if (!short_feats) throw ConfigError("modality_feature: plan uses short features but none given");
  const auto& s = *short_feats;
  if (s.rank() != 3 || s.dim(0) != long_feat.dim(0) || s.dim(2) != long_feat.dim(1))
    throw ShapeError("modality_feature: short features " + ad::to_string(s.shape()) + " vs long " + ad::to_string(long_feat.shape()));
  if (plan.short_pooling == ShortPooling::mean) return ad::concat<T>({long_feat, ad::mean(s, 1)}, 1);
  return ad::concat<T>({long_feat, ad::reshape(s, {s.dim(0), s.dim(1) * s.dim(2)})}, 1);
}

/// Maximum class probability of a probability vector.
inline double mcp(std::span<const double> probs) {
  if (probs.empty()) throw NumericError("mcp: empty probability vector");
  double total = 0;
  for (double p : probs) {
    if (!(p >= 0)) throw NumericError("mcp: negative probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-5) throw NumericError("mcp: probabilities do not sum to 1");
  return *std::max_element(probs.begin(), probs.end());
}

/// -log p[label], with p clamped at 1e-12.
inline double ce_loss(std::span<const double> probs, std::size_t label) {
  if (label >= probs.size()) throw ConfigError("ce_loss: label out of range");
  return -std::log(std::max(probs[label], 1e-12));
}

/// Mean cross-entropy over a batch of probability rows [B x n].
template <class T>
Tensor<T> ce_loss(const Tensor<T>& probs, const std::vector<std::size_t>& labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) throw ShapeError("ce_loss: label count mismatch");
  const std::size_t n = probs.dim(1);
  std::vector<T> onehot(probs.size(), T{0});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= n) throw ConfigError("ce_loss: label out of range");
    onehot[r * n + labels[r]] = T{1};
  }
  auto picked = ad::sum(ad::hadamard(probs, Tensor<T>(probs.shape(), std::move(onehot))), 1);
  return ad::scale(ad::sum_all(ad::log(picked, static_cast<T>(1e-12))), static_cast<T>(-1.0 / static_cast<double>(labels.size())));
}

struct FusionConfig {
  FusionStrategy strategy = FusionStrategy::mcp;
  std::size_t classes = 2;
  std::size_t feature_dim = 0;  // per modality
  std::size_t hidden_dim = 256;
  double aux_loss_weight = 0.5;

  bool has_aux() const { return strategy != FusionStrategy::feature_concat; }
  bool has_joint() const { return strategy != FusionStrategy::decision_average; }
};

template <class T>
struct FusionOutput {
  Tensor<T> probs;                     // [B x n]
  std::optional<Tensor<T>> aux_eeg;    // [B x n] softmax of the EEG auxiliary head
  std::optional<Tensor<T>> aux_pps;
  std::vector<T> weight_eeg, weight_pps;  // per-row confidence weights (mcp only)
};

/// Two-modality fusion and classification.
///  mcp:              w_m = max softmax(aux_m(H_m)) (no gradient through w_m);
///                    probs = softmax(joint([w_eeg H_eeg, w_pps H_pps]))
///  feature_concat:   probs = softmax(joint([H_eeg, H_pps]))
///  decision_average: probs = (softmax(aux_eeg(H_eeg)) + softmax(aux_pps(H_pps))) / 2
template <class T>
class FusionHead {
 public:
  FusionHead() = default;
  FusionHead(const FusionConfig& config, Rng& rng) : config_(config) {
    if (config.classes != 2 && config.classes != 4) throw ConfigError("fusion: class count must be 2 or 4");
    if (config.feature_dim == 0) throw ConfigError("fusion: feature_dim must be positive");
    if (config.has_aux()) {
      aux_eeg_ = ad::Linear<T>(config.feature_dim, config.classes, rng);
      aux_pps_ = ad::Linear<T>(config.feature_dim, config.classes, rng);
    }
    if (config.has_joint()) {
      joint1_ = ad::Linear<T>(2 * config.feature_dim, config.hidden_dim, rng);
      joint2_ = ad::Linear<T>(config.hidden_dim, config.classes, rng);
    }
  }

  const FusionConfig& config() const { return config_; }

  /// `pinned_weights` replaces the confidence weights (tests and ablations).
  FusionOutput<T> operator()(const Tensor<T>& h_eeg, const Tensor<T>& h_pps,
                             std::optional<std::pair<T, T>> pinned_weights = std::nullopt) const {
    if (h_eeg.rank() != 2 || h_eeg.shape() != h_pps.shape() || h_eeg.dim(1) != config_.feature_dim)
      throw ShapeError("fusion: modality features must both be [B x " + std::to_string(config_.feature_dim) + "]");
    FusionOutput<T> out;
    if (config_.has_aux()) {
      out.aux_eeg = ad::softmax(aux_eeg_(h_eeg));
      out.aux_pps = ad::softmax(aux_pps_(h_pps));
    }
    switch (config_.strategy) {
      case FusionStrategy::decision_average:
        out.probs = ad::scale(ad::add(*out.aux_eeg, *out.aux_pps), T(0.5));
        return out;
      case FusionStrategy::feature_concat:
        out.probs = joint(ad::concat<T>({h_eeg, h_pps}, 1));
        return out;
      case FusionStrategy::mcp: {
        const std::size_t rows = h_eeg.dim(0), n = config_.classes;
        out.weight_eeg.resize(rows);
        out.weight_pps.resize(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          if (pinned_weights) {
            out.weight_eeg[r] = pinned_weights->first;
            out.weight_pps[r] = pinned_weights->second;
            continue;
          }
          T we{0}, wp{0};
          for (std::size_t c = 0; c < n; ++c) {
            we = std::max(we, (*out.aux_eeg)[r * n + c]);
            wp = std::max(wp, (*out.aux_pps)[r * n + c]);
          }
          out.weight_eeg[r] = we;
          out.weight_pps[r] = wp;
        }
        out.probs = joint(ad::concat<T>({row_scale(h_eeg, out.weight_eeg), row_scale(h_pps, out.weight_pps)}, 1));
        return out;
      }
    }
    throw ConfigError("fusion: unknown strategy");
  }

  /// CE(fused) + aux_loss_weight * (CE(aux_eeg) + CE(aux_pps)) when auxiliary heads exist.
  Tensor<T> loss(const FusionOutput<T>& out, const std::vector<std::size_t>& labels) const {
    auto total = ce_loss(out.probs, labels);
    if (config_.has_aux() && config_.aux_loss_weight > 0) {
      auto aux = ad::add(ce_loss(*out.aux_eeg, labels), ce_loss(*out.aux_pps, labels));
      total = ad::add(total, ad::scale(aux, static_cast<T>(config_.aux_loss_weight)));
    }
    return total;
  }

  ad::ParamRefs<T> parameters() {
    ad::ParamRefs<T> refs;
    if (config_.has_aux()) {
      aux_eeg_.collect("aux_eeg", refs);
      aux_pps_.collect("aux_pps", refs);
    }
    if (config_.has_joint()) {
      joint1_.collect("joint1", refs);
      joint2_.collect("joint2", refs);
    }
    return refs;
  }

 private:
  Tensor<T> joint(const Tensor<T>& h) const { return ad::softmax(joint2_(ad::relu(joint1_(h)))); }

  // Multiplies row r by a constant weight; the weights carry no gradient.
  static Tensor<T> row_scale(const Tensor<T>& h, const std::vector<T>& w) {
    const std::size_t d = h.dim(1);
    std::vector<T> factors(h.size());
    for (std::size_t i = 0; i < factors.size(); ++i) factors[i] = w[i / d];
    return ad::hadamard(h, Tensor<T>(h.shape(), std::move(factors)));
  }

  FusionConfig config_;
  ad::Linear<T> aux_eeg_, aux_pps_, joint1_, joint2_;
};

}  // namespace physiosync::model
