#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "physiosync/errors.hpp"

namespace physiosync::metrics {

struct Metrics {
  double accuracy = 0.0;
  double f1 = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t total = 0;
};

/// F1 of one class from a confusion matrix; 0 when precision + recall is 0.
inline double class_f1(const std::vector<std::vector<std::size_t>>& confusion, std::size_t c) {
  std::size_t tp = confusion[c][c], fp = 0, fn = 0;
  for (std::size_t k = 0; k < confusion.size(); ++k) {
    if (k == c) continue;
    fp += confusion[k][c];
    fn += confusion[c][k];
  }
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

/// Binary tasks (2 classes): F1 of class 1 ("high"). Otherwise macro F1 over
/// the classes that occur in either the labels or the predictions.
inline Metrics compute_metrics(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& predicted,
                               std::size_t classes) {
  if (truth.empty()) throw DatasetError("metrics: empty split");
  if (truth.size() != predicted.size()) throw ShapeError("metrics: prediction count mismatch");
  Metrics m;
  m.total = truth.size();
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= classes || predicted[i] >= classes) throw ConfigError("metrics: class index out of range");
    ++m.confusion[truth[i]][predicted[i]];
  }
  std::size_t correct = 0;
  for (std::size_t c = 0; c < classes; ++c) correct += m.confusion[c][c];
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.total);
  if (classes == 2) {
    m.f1 = class_f1(m.confusion, 1);
  } else {
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      std::size_t support = 0, predicted_count = 0;
      for (std::size_t k = 0; k < classes; ++k) {
        support += m.confusion[c][k];
        predicted_count += m.confusion[k][c];
      }
      if (support + predicted_count == 0) continue;
      sum += class_f1(m.confusion, c);
      ++present;
    }
    m.f1 = present ? sum / static_cast<double>(present) : 0.0;
  }
  return m;
}

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

inline Summary summarize(const std::vector<double>& values) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / n)};
}

}  // namespace physiosync::metrics
