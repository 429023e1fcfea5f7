#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "physiosync/encoder.hpp"

namespace physiosync::model {

struct ProjectorConfig {
  std::size_t hidden_dim = 256;  // d_p1
  std::size_t out_dim = 128;     // d_p
  double dropout = 0.1;
};

/// Nonlinear projection head:
///   h1 = ReLU(BN(W1 H + b1)); h2 = Dropout(BN(W2 h1 + b2)); z = W3 h2 + b3
template <class T>
class Projector {
 public:
  Projector() = default;
  Projector(std::size_t in_dim, const ProjectorConfig& config, Rng& rng)
      : config_(config),
        fc1_(in_dim, config.hidden_dim, rng),
        bn1_(config.hidden_dim),
        fc2_(config.hidden_dim, config.hidden_dim, rng),
        bn2_(config.hidden_dim),
        fc3_(config.hidden_dim, config.out_dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& h, const Mode& mode) {
    if (h.rank() != 2 || h.dim(1) != fc1_.in_features())
      throw ShapeError("projector expects [B x " + std::to_string(fc1_.in_features()) + "], got " + ad::to_string(h.shape()));
    auto h1 = ad::relu(bn1_(fc1_(h), mode.train));
    auto h2 = apply_dropout(bn2_(fc2_(h1), mode.train), config_.dropout, mode);
    return fc3_(h2);
  }

  ad::ParamRefs<T> parameters() {
    ad::ParamRefs<T> refs;
    fc1_.collect("fc1", refs);
    bn1_.collect("bn1", refs);
    fc2_.collect("fc2", refs);
    bn2_.collect("bn2", refs);
    fc3_.collect("fc3", refs);
    return refs;
  }

  ad::Linear<T>& fc1() { return fc1_; }
  ad::Linear<T>& fc2() { return fc2_; }
  ad::Linear<T>& fc3() { return fc3_; }
  ad::BatchNorm<T>& bn1() { return bn1_; }
  ad::BatchNorm<T>& bn2() { return bn2_; }

 private:
  ProjectorConfig config_;
  ad::Linear<T> fc1_;
  ad::BatchNorm<T> bn1_;
  ad::Linear<T> fc2_;
  ad::BatchNorm<T> bn2_;
  ad::Linear<T> fc3_;
};

struct LossWeights {
  double alpha = 0.5;  // EEG temporal term
  double beta = 0.5;   // PPS temporal term
  double gamma = 1.0;  // cross-modal term
  double tau = 0.1;
  // Canonical NT-Xent drops the positive from the cross-subject sum; off by default.
  bool exclude_positive_in_s3 = false;

  void validate() const {
    if (!(alpha >= 0 && beta >= 0 && gamma >= 0)) throw ConfigError("loss weights must be non-negative");
    if (!(tau > 0)) throw ConfigError("temperature must be positive");
  }
};

/// a . b / (|a| |b|), in [-1, 1].
inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_sim: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0 && nb > 0)) throw NumericError("cosine_sim: zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Per-anchor temporal contrastive losses for anchors in `anchors` against
/// `others` (both [M x d], row i of each forming the positive pair):
///   L_i = -log(S1 / (S2 + S3))
///   S1 = exp(s(a_i, o_i)/tau)
///   S2 = sum_{j != i} exp(s(a_i, a_j)/tau)
///   S3 = sum_j exp(s(a_i, o_j)/tau)      (j = i kept unless exclude_positive)
/// Returns [M].
template <class T>
Tensor<T> tcl_anchor_losses(const Tensor<T>& anchors, const Tensor<T>& others, double tau, bool exclude_positive = false) {
  if (anchors.rank() != 2 || anchors.shape() != others.shape())
    throw ShapeError("tcl: misaligned embedding batches " + ad::to_string(anchors.shape()) + " vs " + ad::to_string(others.shape()));
  const std::size_t m = anchors.dim(0);
  if (m < 2) throw ShapeError("tcl: need at least 2 slots per subject");
  if (!(tau > 0)) throw ConfigError("tcl: temperature must be positive");
  const T inv_tau = static_cast<T>(1.0 / tau);
  auto a = ad::normalize_rows(anchors);
  auto o = ad::normalize_rows(others);
  auto same = ad::matmul(a, ad::transpose(a));
  auto cross = ad::matmul(a, ad::transpose(o));
  auto logits = ad::scale(ad::concat<T>({same, cross}, 1), inv_tau);
  std::vector<T> mask(2 * m * m, T{0});
  for (std::size_t i = 0; i < m; ++i) {
    mask[i * 2 * m + i] = -std::numeric_limits<T>::infinity();
    if (exclude_positive) mask[i * 2 * m + m + i] = -std::numeric_limits<T>::infinity();
  }
  auto masked = ad::add(logits, Tensor<T>({m, 2 * m}, std::move(mask)));
  auto positive = ad::scale(ad::sum(ad::hadamard(a, o), 1), inv_tau);
  return ad::sub(ad::logsumexp(masked), positive);
}

/// L for a single anchor i of subject A.
template <class T>
Tensor<T> tcl_anchor_loss(const Tensor<T>& anchors, const Tensor<T>& others, std::size_t i, double tau,
                          bool exclude_positive = false) {
  return ad::slice(tcl_anchor_losses(anchors, others, tau, exclude_positive), 0, i, 1);
}

/// Mini-batch loss: sum over slots of the A-anchored and B-anchored terms.
template <class T>
Tensor<T> tcl_batch_loss(const Tensor<T>& emb_a, const Tensor<T>& emb_b, double tau, bool exclude_positive = false) {
  return ad::add(ad::sum_all(tcl_anchor_losses(emb_a, emb_b, tau, exclude_positive)),
                 ad::sum_all(tcl_anchor_losses(emb_b, emb_a, tau, exclude_positive)));
}

/// Cross-modal loss. The two modalities take the roles of the two subjects in
/// the temporal loss, over both subjects' clips stacked (A rows then B rows):
/// (slot, subject, eeg) is positive only with (slot, subject, pps).
template <class T>
Tensor<T> cmcl_loss(const Tensor<T>& eeg_a, const Tensor<T>& eeg_b, const Tensor<T>& pps_a, const Tensor<T>& pps_b,
                    double tau, bool exclude_positive = false) {
  return tcl_batch_loss(ad::concat<T>({eeg_a, eeg_b}, 0), ad::concat<T>({pps_a, pps_b}, 0), tau, exclude_positive);
}

/// alpha * L_eeg + beta * L_pps + gamma * L_cc
inline double total_loss(double l_eeg, double l_pps, double l_cc, const LossWeights& w) {
  return w.alpha * l_eeg + w.beta * l_pps + w.gamma * l_cc;
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& l_eeg, const Tensor<T>& l_pps, const Tensor<T>& l_cc, const LossWeights& w) {
  return ad::add(ad::add(ad::scale(l_eeg, static_cast<T>(w.alpha)), ad::scale(l_pps, static_cast<T>(w.beta))),
                 ad::scale(l_cc, static_cast<T>(w.gamma)));
}

}  // namespace physiosync::model
