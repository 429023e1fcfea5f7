#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "physiosync/ad/ops.hpp"

namespace physiosync::ad {

using Rng = std::mt19937_64;

/// A trainable tensor with a stable name (unique within a model).
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

/// Borrowed views over a model's parameters and batch-norm states, in a fixed order.
template <class T>
struct ParamRefs {
  std::vector<Parameter<T>> params;
  std::vector<std::pair<std::string, BatchNormState<T>*>> bn_states;

  void add(std::string name, const Tensor<T>& t) { params.push_back({std::move(name), t}); }
  void add_state(std::string name, BatchNormState<T>& s) { bn_states.emplace_back(std::move(name), &s); }
  void append(const ParamRefs& other) {
    params.insert(params.end(), other.params.begin(), other.params.end());
    bn_states.insert(bn_states.end(), other.bn_states.begin(), other.bn_states.end());
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.size();
    return n;
  }
  void zero_grad() {
    for (auto& p : params) p.tensor.zero_grad();
  }
};

template <class T>
Tensor<T> uniform_tensor(Shape shape, T bound, Rng& rng, bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(values), requires_grad);
}

template <class T>
Tensor<T> normal_tensor(Shape shape, T stddev, Rng& rng, bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(values), requires_grad);
}

/// y = x W + b with W stored [in x out]. Weights and bias drawn from U(-1/sqrt(in), 1/sqrt(in)).
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) {
    const T bound = T{1} / std::sqrt(static_cast<T>(in));
    weight = uniform_tensor<T>({in, out}, bound, rng);
    bias = uniform_tensor<T>({out}, bound, rng);
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  /// Accepts [N x in] or [..., in]; leading axes are flattened and restored.
  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() == 2) return add_bias(matmul(x, weight), bias);
    const std::size_t in = in_features();
    Shape out_shape = x.shape();
    out_shape.back() = out_features();
    auto flat = reshape(x, {x.size() / in, in});
    return reshape(add_bias(matmul(flat, weight), bias), std::move(out_shape));
  }

  void collect(const std::string& prefix, ParamRefs<T>& refs) const {
    refs.add(prefix + ".weight", weight);
    refs.add(prefix + ".bias", bias);
  }
};

/// Batch normalization over [N x F] with its running statistics.
template <class T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> state;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t features)
      : gamma(Tensor<T>(Shape{features}, std::vector<T>(features, T{1}), true)),
        beta(Tensor<T>::zeros({features}, true)),
        state(features) {}

  Tensor<T> operator()(const Tensor<T>& x, bool train) { return batch_norm(x, gamma, beta, state, train); }

  void collect(const std::string& prefix, ParamRefs<T>& refs) {
    refs.add(prefix + ".gamma", gamma);
    refs.add(prefix + ".beta", beta);
    refs.add_state(prefix, state);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t features)
      : gamma(Tensor<T>(Shape{features}, std::vector<T>(features, T{1}), true)),
        beta(Tensor<T>::zeros({features}, true)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, ParamRefs<T>& refs) const {
    refs.add(prefix + ".gamma", gamma);
    refs.add(prefix + ".beta", beta);
  }
};

/// Tensor filled with copies of a row vector: [rows x n]. Implemented as a bias
/// add on zeros so gradients sum back into the vector.
template <class T>
Tensor<T> repeat_rows(const Tensor<T>& row, std::size_t rows) {
  return add_bias(Tensor<T>::zeros({rows, row.size()}), reshape(row, {row.size()}));
}

}  // namespace physiosync::ad
