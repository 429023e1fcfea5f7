#pragma once

// Loop-based reference implementations used as test oracles. Nothing here
// shares code with the library under test.

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return dot / std::sqrt(na * nb);
}

// -log(S1 / (S2 + S3)) for anchor row i of `a` against `b`.
inline double anchor_loss(const Matrix& a, const Matrix& b, std::size_t i, double tau, bool exclude_positive = false) {
  const std::size_t m = a.size();
  const double s1 = std::exp(cosine(a[i], b[i]) / tau);
  double s2 = 0.0, s3 = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    if (j != i) s2 += std::exp(cosine(a[i], a[j]) / tau);
    if (j != i || !exclude_positive) s3 += std::exp(cosine(a[i], b[j]) / tau);
  }
  return -std::log(s1 / (s2 + s3));
}

inline double batch_loss(const Matrix& a, const Matrix& b, double tau, bool exclude_positive = false) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    total += anchor_loss(a, b, i, tau, exclude_positive) + anchor_loss(b, a, i, tau, exclude_positive);
  return total;
}

// Both subjects' rows stacked, modalities in the subject roles.
inline double cross_modal_loss(const Matrix& eeg_a, const Matrix& eeg_b, const Matrix& pps_a, const Matrix& pps_b,
                               double tau) {
  Matrix eeg = eeg_a, pps = pps_a;
  eeg.insert(eeg.end(), eeg_b.begin(), eeg_b.end());
  pps.insert(pps.end(), pps_b.begin(), pps_b.end());
  return batch_loss(eeg, pps, tau);
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, std::vector<double>(cols));
  for (auto& row : m)
    for (auto& v : row) v = n(rng);
  return m;
}

inline std::vector<double> flatten(const Matrix& m) {
  std::vector<double> out;
  for (const auto& row : m) out.insert(out.end(), row.begin(), row.end());
  return out;
}

inline double rel_error(double got, double want) { return std::abs(got - want) / std::max(1e-300, std::abs(want)); }

}  // namespace oracle
