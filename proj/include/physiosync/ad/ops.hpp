#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "physiosync/ad/tensor.hpp"

// Differentiable primitives. Every op computes its forward value eagerly and,
// when an input requires gradients, registers the matching backward rule.
// Broadcasting is limited to add_bias (row vector over the last axis).
namespace physiosync::ad {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

// Splits a shape around `axis` into (outer, axis extent, inner).
inline std::array<std::size_t, 3> split_axis(const Shape& shape, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = detail::parent_grad(n, k))
        for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
    if (auto* g = detail::parent_grad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] -= n.grad[i];
  });
}

template <class T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "hadamard");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * bv[i];
    if (auto* g = detail::parent_grad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * av[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& n) {
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * s;
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& n) {
    if (auto* g = detail::parent_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
  });
}

/// x[..., n] + bias[n], the bias repeated over every leading index.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require(bias.rank() == 1 && x.rank() >= 1 && x.shape().back() == bias.dim(0),
                  "add_bias: bias " + to_string(bias.shape()) + " vs input " + to_string(x.shape()));
  const std::size_t n = bias.dim(0);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % n];
  return detail::make_result<T>(x.shape(), std::move(out), {x, bias}, [n](Node<T>& node) {
    if (auto* g = detail::parent_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) (*g)[i] += node.grad[i];
    if (auto* g = detail::parent_grad(node, 1))
      for (std::size_t i = 0; i < node.grad.size(); ++i) (*g)[i % n] += node.grad[i];
  });
}

/// [m x k] . [k x n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: " + to_string(a.shape()) + " . " + to_string(b.shape()));
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::MapMat<T>(out.data(), m, n).noalias() =
      detail::CMapMat<T>(a.values().data(), m, k) * detail::CMapMat<T>(b.values().data(), k, n);
  return detail::make_result<T>({a.dim(0), b.dim(1)}, std::move(out), {a, b}, [m, k, n](Node<T>& node) {
    detail::CMapMat<T> dc(node.grad.data(), m, n);
    if (auto* g = detail::parent_grad(node, 0))
      detail::MapMat<T>(g->data(), m, k).noalias() +=
          dc * detail::CMapMat<T>(node.parents[1]->value.data(), k, n).transpose();
    if (auto* g = detail::parent_grad(node, 1))
      detail::MapMat<T>(g->data(), k, n).noalias() +=
          detail::CMapMat<T>(node.parents[0]->value.data(), m, k).transpose() * dc;
  });
}

/// Batched [g x m x k] . [g x k x n]
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                  "bmm: " + to_string(a.shape()) + " . " + to_string(b.shape()));
  const std::size_t groups = a.dim(0);
  const auto m = static_cast<Eigen::Index>(a.dim(1));
  const auto k = static_cast<Eigen::Index>(a.dim(2));
  const auto n = static_cast<Eigen::Index>(b.dim(2));
  const std::size_t sa = m * k, sb = k * n, sc = m * n;
  std::vector<T> out(groups * sc);
  for (std::size_t g = 0; g < groups; ++g)
    detail::MapMat<T>(out.data() + g * sc, m, n).noalias() =
        detail::CMapMat<T>(a.values().data() + g * sa, m, k) *
        detail::CMapMat<T>(b.values().data() + g * sb, k, n);
  return detail::make_result<T>(
      {groups, a.dim(1), b.dim(2)}, std::move(out), {a, b}, [=](Node<T>& node) {
        auto* ga = detail::parent_grad(node, 0);
        auto* gb = detail::parent_grad(node, 1);
        for (std::size_t g = 0; g < groups; ++g) {
          detail::CMapMat<T> dc(node.grad.data() + g * sc, m, n);
          if (ga)
            detail::MapMat<T>(ga->data() + g * sa, m, k).noalias() +=
                dc * detail::CMapMat<T>(node.parents[1]->value.data() + g * sb, k, n).transpose();
          if (gb)
            detail::MapMat<T>(gb->data() + g * sb, k, n).noalias() +=
                detail::CMapMat<T>(node.parents[0]->value.data() + g * sa, m, k).transpose() * dc;
        }
      });
}

/// Axis permutation for tensors of rank <= 4.
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  detail::require(r >= 1 && r <= 4 && perm.size() == r, "permute: rank " + std::to_string(r));
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    detail::require(p < r && !used[p], "permute: invalid permutation");
    used[p] = true;
  }
  // Pad to rank 4 so a single loop nest covers every case.
  std::array<std::size_t, 4> in_dims{1, 1, 1, 1}, in_strides{0, 0, 0, 0};
  const std::size_t pad = 4 - r;
  for (std::size_t i = 0; i < r; ++i) in_dims[pad + i] = x.dim(i);
  std::size_t stride = 1;
  for (std::size_t i = 4; i-- > 0;) {
    in_strides[i] = stride;
    stride *= in_dims[i];
  }
  std::array<std::size_t, 4> out_dims{1, 1, 1, 1}, src_stride{0, 0, 0, 0};
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_dims[pad + i] = in_dims[pad + perm[i]];
    src_stride[pad + i] = in_strides[pad + perm[i]];
    out_shape[i] = x.dim(perm[i]);
  }
  std::vector<std::size_t> index(x.size());
  std::size_t o = 0;
  for (std::size_t a = 0; a < out_dims[0]; ++a)
    for (std::size_t b = 0; b < out_dims[1]; ++b)
      for (std::size_t c = 0; c < out_dims[2]; ++c)
        for (std::size_t d = 0; d < out_dims[3]; ++d)
          index[o++] = a * src_stride[0] + b * src_stride[1] + c * src_stride[2] + d * src_stride[3];
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[index[i]];
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x},
                                [index = std::move(index)](Node<T>& node) {
                                  if (auto* g = detail::parent_grad(node, 0))
                                    for (std::size_t i = 0; i < index.size(); ++i)
                                      (*g)[index[i]] += node.grad[i];
                                });
}

/// Swaps the last two axes (rank 2 or 3).
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() == 2) return permute(x, {1, 0});
  detail::require(x.rank() == 3, "transpose: rank must be 2 or 3");
  return permute(x, {0, 2, 1});
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.size(),
                  "reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  return detail::make_result<T>(std::move(shape), x.values(), {x}, [](Node<T>& node) {
    if (auto* g = detail::parent_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) (*g)[i] += node.grad[i];
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& ref = parts.front().shape();
  detail::require(axis < ref.size(), "concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == ref.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis)
        detail::require(p.dim(i) == ref[i], "concat: shape mismatch " + to_string(p.shape()) +
                                                " vs " + to_string(ref));
    out_shape[axis] += p.dim(axis);
  }
  const auto [outer, total, inner] = detail::split_axis(out_shape, axis);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    offsets.push_back(offset);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.values().data() + o * len * inner, len * inner,
                  out.data() + (o * total + offset) * inner);
    offset += len;
  }
  std::vector<std::size_t> lens;
  for (const auto& p : parts) lens.push_back(p.dim(axis));
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), parts,
      [outer = outer, total = total, inner = inner, offsets, lens](Node<T>& node) {
        for (std::size_t k = 0; k < lens.size(); ++k) {
          auto* g = detail::parent_grad(node, k);
          if (!g) continue;
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < lens[k] * inner; ++j)
              (*g)[o * lens[k] * inner + j] += node.grad[(o * total + offsets[k]) * inner + j];
        }
      });
}

/// x[..., start:start+len, ...] along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  detail::require(axis < x.rank() && start + len <= x.dim(axis) && len > 0,
                  "slice: out of range on " + to_string(x.shape()));
  const auto [outer, total, inner] = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  std::vector<T> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.values().data() + (o * total + start) * inner, len * inner,
                out.data() + o * len * inner);
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x},
                                [outer = outer, total = total, inner = inner, start, len](Node<T>& node) {
                                  auto* g = detail::parent_grad(node, 0);
                                  if (!g) return;
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t j = 0; j < len * inner; ++j)
                                      (*g)[(o * total + start) * inner + j] += node.grad[o * len * inner + j];
                                });
}

/// Sum over one axis; the axis is removed from the shape.
template <class T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "sum: axis out of range");
  const auto [outer, total, inner] = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(outer * inner, T{0});
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t a = 0; a < total; ++a)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * total + a) * inner + i];
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x},
                                [outer = outer, total = total, inner = inner](Node<T>& node) {
                                  auto* g = detail::parent_grad(node, 0);
                                  if (!g) return;
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t a = 0; a < total; ++a)
                                      for (std::size_t i = 0; i < inner; ++i)
                                        (*g)[(o * total + a) * inner + i] += node.grad[o * inner + i];
                                });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  return scale(sum(x, axis), T{1} / static_cast<T>(x.dim(axis)));
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T total{0};
  for (T v : x.values()) total += v;
  return detail::make_result<T>({1}, {total}, {x}, [](Node<T>& node) {
    if (auto* g = detail::parent_grad(node, 0))
      for (auto& v : *g) v += node.grad[0];
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T{1} / static_cast<T>(x.size()));
}

namespace detail {
template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& x, F f, D dfdx_from_xy) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, [dfdx_from_xy](Node<T>& node) {
    auto* g = parent_grad(node, 0);
    if (!g) return;
    const auto& xv = node.parents[0]->value;
    for (std::size_t i = 0; i < node.grad.size(); ++i)
      (*g)[i] += node.grad[i] * dfdx_from_xy(xv[i], node.value[i]);
  });
}
}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

/// Natural log with inputs clamped from below at `floor`; the gradient is zero
/// inside the clamped region.
template <class T>
Tensor<T> log(const Tensor<T>& x, T floor = T{0}) {
  return detail::unary(
      x, [floor](T v) { return std::log(std::max(v, floor)); },
      [floor](T v, T) { return v > floor ? T{1} / v : T{0}; });
}

namespace detail {
template <class T>
void require_last_axis(const Tensor<T>& x, const char* op) {
  require(x.rank() >= 1 && x.shape().back() > 0, std::string(op) + ": empty last axis");
}
}  // namespace detail

/// Softmax over the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  detail::require_last_axis(x, "softmax");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [n, rows](Node<T>& node) {
    auto* g = detail::parent_grad(node, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = node.value.data() + r * n;
      const T* dy = node.grad.data() + r * n;
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) (*g)[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

/// log(sum(exp(x))) over the last axis; -inf entries act as masked out.
template <class T>
Tensor<T> logsumexp(const Tensor<T>& x) {
  detail::require_last_axis(x, "logsumexp");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * n;
    const T mx = *std::max_element(in, in + n);
    detail::require(std::isfinite(mx), "logsumexp: row with no finite entry");
    T total{0};
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    out[r] = mx + std::log(total);
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x}, [n, rows](Node<T>& node) {
    auto* g = detail::parent_grad(node, 0);
    if (!g) return;
    const auto& xv = node.parents[0]->value;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j)
        (*g)[r * n + j] += node.grad[r] * std::exp(xv[r * n + j] - node.value[r]);
  });
}

/// Scales each row (last axis) to unit Euclidean norm.
template <class T>
Tensor<T> normalize_rows(const Tensor<T>& x) {
  detail::require_last_axis(x, "normalize_rows");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  std::vector<T> out(x.size());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss{0};
    for (std::size_t j = 0; j < n; ++j) ss += x[r * n + j] * x[r * n + j];
    if (!(ss > T{0})) throw NumericError("normalize_rows: zero vector at row " + std::to_string(r));
    norms[r] = std::sqrt(ss);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] / norms[r];
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x},
                                [n, rows, norms = std::move(norms)](Node<T>& node) {
                                  auto* g = detail::parent_grad(node, 0);
                                  if (!g) return;
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = node.value.data() + r * n;
                                    const T* dy = node.grad.data() + r * n;
                                    T dot{0};
                                    for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                                    for (std::size_t j = 0; j < n; ++j)
                                      (*g)[r * n + j] += (dy[j] - y[j] * dot) / norms[r];
                                  }
                                });
}

/// Running statistics for batch normalization, kept outside the graph.
template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(std::size_t features = 0)
      : running_mean(features, T{0}), running_var(features, T{1}) {}
  std::size_t features() const { return running_mean.size(); }
};

/// Batch normalization over axis 0 of [N x F] with affine gamma/beta.
/// Train mode normalizes with batch statistics (biased variance) and updates the
/// running estimates with the unbiased variance; eval mode uses the running estimates.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool train) {
  detail::require(x.rank() == 2, "batch_norm: expects [N x F], got " + to_string(x.shape()));
  const std::size_t rows = x.dim(0), f = x.dim(1);
  detail::require(gamma.size() == f && beta.size() == f && state.features() == f,
                  "batch_norm: feature count mismatch");
  if (train) detail::require(rows >= 2, "batch_norm: train mode needs batch >= 2");
  std::vector<T> mu(f, T{0}), inv_std(f);
  if (train) {
    std::vector<T> var(f, T{0});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < f; ++j) mu[j] += x[r * f + j];
    for (auto& m : mu) m /= static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < f; ++j) {
        const T d = x[r * f + j] - mu[j];
        var[j] += d * d;
      }
    for (std::size_t j = 0; j < f; ++j) {
      const T biased = var[j] / static_cast<T>(rows);
      inv_std[j] = T{1} / std::sqrt(biased + state.eps);
      const T unbiased = var[j] / static_cast<T>(rows - 1);
      state.running_mean[j] = (T{1} - state.momentum) * state.running_mean[j] + state.momentum * mu[j];
      state.running_var[j] = (T{1} - state.momentum) * state.running_var[j] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      mu[j] = state.running_mean[j];
      inv_std[j] = T{1} / std::sqrt(state.running_var[j] + state.eps);
    }
  }
  std::vector<T> xhat(x.size()), out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < f; ++j) {
      const std::size_t i = r * f + j;
      xhat[i] = (x[i] - mu[j]) * inv_std[j];
      out[i] = gamma[j] * xhat[i] + beta[j];
    }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, f, train, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node<T>& node) {
        const auto& dy = node.grad;
        const auto& gam = node.parents[1]->value;
        if (auto* g = detail::parent_grad(node, 1))
          for (std::size_t i = 0; i < dy.size(); ++i) (*g)[i % f] += dy[i] * xhat[i];
        if (auto* g = detail::parent_grad(node, 2))
          for (std::size_t i = 0; i < dy.size(); ++i) (*g)[i % f] += dy[i];
        auto* gx = detail::parent_grad(node, 0);
        if (!gx) return;
        if (!train) {
          for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i] * gam[i % f] * inv_std[i % f];
          return;
        }
        std::vector<T> sum_d(f, T{0}), sum_dx(f, T{0});
        for (std::size_t i = 0; i < dy.size(); ++i) {
          const T d = dy[i] * gam[i % f];
          sum_d[i % f] += d;
          sum_dx[i % f] += d * xhat[i];
        }
        const T inv_n = T{1} / static_cast<T>(rows);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          const std::size_t j = i % f;
          const T d = dy[i] * gam[j];
          (*gx)[i] += inv_std[j] * (d - inv_n * sum_d[j] - xhat[i] * inv_n * sum_dx[j]);
        }
      });
}

/// Layer normalization over the last axis with affine gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require_last_axis(x, "layer_norm");
  const std::size_t f = x.shape().back();
  const std::size_t rows = x.size() / f;
  detail::require(gamma.size() == f && beta.size() == f, "layer_norm: feature count mismatch");
  std::vector<T> inv_std(rows), xhat(x.size()), out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * f;
    T mu{0}, var{0};
    for (std::size_t j = 0; j < f; ++j) mu += in[j];
    mu /= static_cast<T>(f);
    for (std::size_t j = 0; j < f; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(f);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < f; ++j) {
      xhat[r * f + j] = (in[j] - mu) * inv_std[r];
      out[r * f + j] = gamma[j] * xhat[r * f + j] + beta[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, f, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node<T>& node) {
        const auto& dy = node.grad;
        const auto& gam = node.parents[1]->value;
        if (auto* g = detail::parent_grad(node, 1))
          for (std::size_t i = 0; i < dy.size(); ++i) (*g)[i % f] += dy[i] * xhat[i];
        if (auto* g = detail::parent_grad(node, 2))
          for (std::size_t i = 0; i < dy.size(); ++i) (*g)[i % f] += dy[i];
        auto* gx = detail::parent_grad(node, 0);
        if (!gx) return;
        const T inv_f = T{1} / static_cast<T>(f);
        for (std::size_t r = 0; r < rows; ++r) {
          T sum_d{0}, sum_dx{0};
          for (std::size_t j = 0; j < f; ++j) {
            const T d = dy[r * f + j] * gam[j];
            sum_d += d;
            sum_dx += d * xhat[r * f + j];
          }
          for (std::size_t j = 0; j < f; ++j) {
            const T d = dy[r * f + j] * gam[j];
            (*gx)[r * f + j] += inv_std[r] * (d - inv_f * sum_d - xhat[r * f + j] * inv_f * sum_dx);
          }
        }
      });
}

/// Inverted dropout: kept entries are scaled by 1/(1-p) at train time; identity in eval.
template <class T, class Rng>
Tensor<T> dropout(const Tensor<T>& x, T p, Rng& rng, bool train) {
  if (!(p >= T{0} && p < T{1})) throw ConfigError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (!train || p == T{0}) return x;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const T s = T{1} / (T{1} - p);
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = keep(rng) ? s : T{0};
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node<T>& node) {
    if (auto* g = detail::parent_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) (*g)[i] += node.grad[i] * mask[i];
  });
}

}  // namespace physiosync::ad
