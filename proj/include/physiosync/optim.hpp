#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "physiosync/ad/nn.hpp"

namespace physiosync::optim {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. State is positional: always pass the same
/// ParamRefs ordering to a given optimizer.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Returns false (and leaves parameters untouched) when any gradient is non-finite.
  bool step(ad::ParamRefs<T>& refs, double lr) {
    if (first_.empty()) {
      for (const auto& p : refs.params) {
        first_.emplace_back(p.tensor.size(), 0.0);
        second_.emplace_back(p.tensor.size(), 0.0);
      }
    }
    if (first_.size() != refs.params.size()) throw ConfigError("adam: parameter list changed between steps");
    for (const auto& p : refs.params)
      if (p.tensor.has_grad())
        for (T g : p.tensor.grad())
          if (!std::isfinite(static_cast<double>(g))) {
            ++skipped_;
            return false;
          }
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < refs.params.size(); ++k) {
      auto& tensor = refs.params[k].tensor;
      auto& values = tensor.mutable_values();
      const bool has = tensor.has_grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = has ? static_cast<double>(tensor.grad()[i]) : 0.0;
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
        const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
        values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
      }
    }
    return true;
  }

  std::size_t steps() const { return steps_; }
  std::size_t skipped() const { return skipped_; }
  const std::vector<std::vector<double>>& first_moments() const { return first_; }
  const std::vector<std::vector<double>>& second_moments() const { return second_; }

 private:
  AdamConfig config_;
  std::vector<std::vector<double>> first_, second_;
  std::size_t steps_ = 0;
  std::size_t skipped_ = 0;
};

struct ScheduleConfig {
  double lr_max = 1e-4;
  double lr_min = 0.0;
  std::size_t total_epochs = 500;
  std::size_t cycles = 3;
  // Cycles shorter than this many epochs fall back to a constant rate.
  std::size_t min_cycle_epochs = 3;
};

/// Cosine annealing with warm restarts. The epochs are split into `cycles`
/// near-equal integer-length cycles (earlier cycles take the remainder); within
/// a cycle of length T at offset t, lr = lr_min + (lr_max - lr_min)(1 + cos(pi t / T)) / 2.
inline double lr_at(std::size_t epoch, const ScheduleConfig& c) {
  if (c.total_epochs == 0) throw ConfigError("schedule: total_epochs must be positive");
  if (epoch >= c.total_epochs) throw ConfigError("schedule: epoch beyond total");
  if (c.cycles == 0 || c.total_epochs / c.cycles < c.min_cycle_epochs) return c.lr_max;
  const std::size_t base = c.total_epochs / c.cycles, extra = c.total_epochs % c.cycles;
  std::size_t start = 0;
  for (std::size_t k = 0; k < c.cycles; ++k) {
    const std::size_t len = base + (k < extra ? 1 : 0);
    if (epoch < start + len) {
      const double t = static_cast<double>(epoch - start);
      return c.lr_min + 0.5 * (c.lr_max - c.lr_min) * (1.0 + std::cos(std::numbers::pi * t / static_cast<double>(len)));
    }
    start += len;
  }
  return c.lr_min;
}

}  // namespace physiosync::optim
