#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dge/macs.hpp"
#include "dge/rng.hpp"

namespace dge {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << " x ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

namespace detail {

inline std::uint64_t next_node_id() {
  static std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

}  // namespace detail

// Disables graph recording in a scope. Forward values are still computed.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;
};

// Value-semantic handle onto a graph node. Copies share the node.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(shape_numel(t.node_->shape), v);
    t.node_->requires_grad = requires_grad;
    t.node_->id = detail::next_node_id();
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data,
                     bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("tensor: " + shape_str(shape) +
                                  " does not hold " +
                                  std::to_string(data.size()) + " elements");
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    t.node_->id = detail::next_node_id();
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }

  const std::vector<T>& value() const { return node_->value; }
  // Direct mutation is reserved for leaves (init, optimizer, tests).
  std::vector<T>& raw_value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (node_->grad.empty())
      throw std::runtime_error("tensor: gradient not populated");
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
  void drop_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1)
      throw std::invalid_argument("tensor: item() on non-scalar " +
                                  shape_str(shape()));
    return node_->value[0];
  }

  // Same values, detached from the graph.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->id = detail::next_node_id();
    return t;
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <class T>
Tensor<T> make_op_node(Shape shape,
                       std::initializer_list<Tensor<T>> parents) {
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  bool wants = false;
  if (grad_mode()) {
    for (const auto& p : parents) wants = wants || p.node()->requires_grad;
  }
  if (wants) {
    out.node()->requires_grad = true;
    out.node()->leaf = false;
    for (const auto& p : parents) out.node()->parents.push_back(p.node());
  }
  return out;
}

template <class T>
void ensure_grad(TensorNode<T>& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T(0));
}

// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  MacCounter::add(static_cast<std::uint64_t>(m) * k * n);
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  MacCounter::add(static_cast<std::uint64_t>(m) * k * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

// C[k x n] (+)= A[m x k]^T * B[m x n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  MacCounter::add(static_cast<std::uint64_t>(m) * k * n);
  if (!accumulate) std::fill(c, c + k * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.shape().size() != 2)
    throw std::invalid_argument(std::string(op) + ": expected a 2-D tensor, got " +
                                shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw std::invalid_argument("matmul: inner dimensions disagree: " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Tensor<T> out = detail::make_op_node<T>({m, n}, {a, b});
  detail::gemm_nn(a.value().data(), b.value().data(),
                  out.raw_value().data(), m, k, n, false);
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backward = [an, bn, m, k, n](TensorNode<T>& o) {
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        detail::gemm_nt(o.grad.data(), bn->value.data(), an->grad.data(), m,
                        n, k, true);
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        detail::gemm_tn(an->value.data(), o.grad.data(), bn->grad.data(), m,
                        k, n, true);
      }
    };
  }
  return out;
}

// a[m x k] * b[n x k]^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw std::invalid_argument("matmul_nt: inner dimensions disagree: " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Tensor<T> out = detail::make_op_node<T>({m, n}, {a, b});
  detail::gemm_nt(a.value().data(), b.value().data(),
                  out.raw_value().data(), m, k, n, false);
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backward = [an, bn, m, k, n](TensorNode<T>& o) {
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        detail::gemm_nn(o.grad.data(), bn->value.data(), an->grad.data(), m,
                        n, k, true);
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        detail::gemm_tn(o.grad.data(), an->value.data(), bn->grad.data(), m,
                        n, k, true);
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> out = detail::make_op_node<T>({n, m}, {a});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.raw_value()[j * m + i] = a.value()[i * n + j];
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward = [an, m, n](TensorNode<T>& o) {
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          an->grad[i * n + j] += o.grad[j * m + i];
    };
  }
  return out;
}

namespace detail {

template <class T, class Fwd>
Tensor<T> binary_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                            const char* name, Fwd fwd) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(name) + ": shape mismatch: " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Tensor<T> out = make_op_node<T>(a.shape(), {a, b});
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i)
    out.raw_value()[i] = fwd(a.value()[i], b.value()[i]);
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_same_shape<T>(
      a, b, "add", [](T x, T y) { return x + y; });
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    const std::size_t n = a.size();
    out.node()->backward = [an, bn, n](TensorNode<T>& o) {
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += o.grad[i];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += o.grad[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_same_shape<T>(
      a, b, "sub", [](T x, T y) { return x - y; });
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    const std::size_t n = a.size();
    out.node()->backward = [an, bn, n](TensorNode<T>& o) {
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += o.grad[i];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] -= o.grad[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_same_shape<T>(
      a, b, "mul", [](T x, T y) { return x * y; });
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    const std::size_t n = a.size();
    out.node()->backward = [an, bn, n](TensorNode<T>& o) {
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < n; ++i)
          an->grad[i] += o.grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t i = 0; i < n; ++i)
          bn->grad[i] += o.grad[i] * an->value[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out = detail::make_op_node<T>(a.shape(), {a});
  for (std::size_t i = 0; i < a.size(); ++i)
    out.raw_value()[i] = a.value()[i] * c;
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward = [an, c](TensorNode<T>& o) {
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        an->grad[i] += o.grad[i] * c;
    };
  }
  return out;
}

template <class T>
Tensor<T> add_const(const Tensor<T>& a, T c) {
  Tensor<T> out = detail::make_op_node<T>(a.shape(), {a});
  for (std::size_t i = 0; i < a.size(); ++i)
    out.raw_value()[i] = a.value()[i] + c;
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward = [an](TensorNode<T>& o) {
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        an->grad[i] += o.grad[i];
    };
  }
  return out;
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return mul(a, a);
}

// Row-broadcast bias add: a[m x n] + b[n] (or [1 x n]).
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "add_rowvec");
  const std::size_t m = a.rows(), n = a.cols();
  if (b.size() != n)
    throw std::invalid_argument("add_rowvec: bias " + shape_str(b.shape()) +
                                " does not match row width " +
                                std::to_string(n));
  Tensor<T> out = detail::make_op_node<T>({m, n}, {a, b});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.raw_value()[i * n + j] = a.value()[i * n + j] + b.value()[j];
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node();
    out.node()->backward = [an, bn, m, n](TensorNode<T>& o) {
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < m * n; ++i) an->grad[i] += o.grad[i];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j)
            bn->grad[j] += o.grad[i * n + j];
      }
    };
  }
  return out;
}

// a - s, s scalar tensor broadcast over a.
template <class T>
Tensor<T> sub_bscalar(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.size() != 1)
    throw std::invalid_argument("sub_bscalar: expected scalar, got " +
                                shape_str(s.shape()));
  Tensor<T> out = detail::make_op_node<T>(a.shape(), {a, s});
  const T sv = s.value()[0];
  for (std::size_t i = 0; i < a.size(); ++i)
    out.raw_value()[i] = a.value()[i] - sv;
  if (out.requires_grad()) {
    auto an = a.node(), sn = s.node();
    out.node()->backward = [an, sn](TensorNode<T>& o) {
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          an->grad[i] += o.grad[i];
      }
      if (sn->requires_grad) {
        detail::ensure_grad(*sn);
        T acc = 0;
        for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i];
        sn->grad[0] -= acc;
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  Tensor<T> out = detail::make_op_node<T>(a.shape(), {a});
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T x = a.value()[i];
    out.raw_value()[i] = x * T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
  }
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward = [an, inv_sqrt2](TensorNode<T>& o) {
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      const T inv_sqrt2pi = T(0.39894228040143267794);
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const T x = an->value[i];
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        an->grad[i] += o.grad[i] * (cdf + x * pdf);
      }
    };
  }
  return out;
}

// Numerically stable row softmax. axis 1 normalizes rows, axis 0 columns.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis = 1) {
  detail::require_2d(a, "softmax");
  if (axis == 0) return transpose(softmax(transpose(a), 1));
  if (axis != 1)
    throw std::invalid_argument("softmax: axis must be 0 or 1");
  const std::size_t m = a.rows(), n = a.cols();
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::isnan(static_cast<double>(a.value()[i])))
      throw std::runtime_error("softmax: NaN input");
  Tensor<T> out = detail::make_op_node<T>({m, n}, {a});
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = a.value().data() + i * n;
    T* orow = out.raw_value().data() + i * n;
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward = [an, m, n](TensorNode<T>& o) {
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < m; ++i) {
        const T* y = o.value.data() + i * n;
        const T* g = o.grad.data() + i * n;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        T* ga = an->grad.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) ga[j] += (g[j] - dot) * y[j];
      }
    };
  }
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(kLayerNormEps)) {
  detail::require_2d(a, "layer_norm");
  const std::size_t m = a.rows(), n = a.cols();
  if (gain.size() != n || bias.size() != n)
    throw std::invalid_argument(
        "layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
        shape_str(bias.shape()) + " do not match channel count " +
        std::to_string(n));
  Tensor<T> out = detail::make_op_node<T>({m, n}, {a, gain, bias});
  std::vector<T> inv_sigma(m), mu(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = a.value().data() + i * n;
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += row[j];
    const T mean = s / T(n);
    T v = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T d = row[j] - mean;
      v += d * d;
    }
    v /= T(n);
    const T is = T(1) / std::sqrt(v + eps);
    mu[i] = mean;
    inv_sigma[i] = is;
    T* orow = out.raw_value().data() + i * n;
    for (std::size_t j = 0; j < n; ++j)
      orow[j] = (row[j] - mean) * is * gain.value()[j] + bias.value()[j];
  }
  if (out.requires_grad()) {
    auto an = a.node(), gn = gain.node(), bn = bias.node();
    out.node()->backward = [an, gn, bn, m, n, mu,
                            inv_sigma](TensorNode<T>& o) {
      std::vector<T> xhat(n), dxhat(n);
      for (std::size_t i = 0; i < m; ++i) {
        const T* row = an->value.data() + i * n;
        const T* g = o.grad.data() + i * n;
        const T is = inv_sigma[i];
        for (std::size_t j = 0; j < n; ++j) {
          xhat[j] = (row[j] - mu[i]) * is;
          dxhat[j] = g[j] * gn->value[j];
        }
        if (gn->requires_grad) {
          detail::ensure_grad(*gn);
          for (std::size_t j = 0; j < n; ++j) gn->grad[j] += g[j] * xhat[j];
        }
        if (bn->requires_grad) {
          detail::ensure_grad(*bn);
          for (std::size_t j = 0; j < n; ++j) bn->grad[j] += g[j];
        }
        if (an->requires_grad) {
          detail::ensure_grad(*an);
          T mean_dx = 0, mean_dx_xhat = 0;
          for (std::size_t j = 0; j < n; ++j) {
            mean_dx += dxhat[j];
            mean_dx_xhat += dxhat[j] * xhat[j];
          }
          mean_dx /= T(n);
          mean_dx_xhat /= T(n);
          T* ga = an->grad.data() + i * n;
          for (std::size_t j = 0; j < n; ++j)
            ga[j] += is * (dxhat[j] - mean_dx - xhat[j] * mean_dx_xhat);
        }
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tensor<T> out = detail::make_op_node<T>({1}, {a});
  T s = 0;
  for (T v : a.value()) s += v;
  out.raw_value()[0] = s;
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward = [an](TensorNode<T>& o) {
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < an->grad.size(); ++i)
        an->grad[i] += o.grad[0];
    };
  }
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T(1) / T(a.size()));
}

template <class T>
Tensor<T> variance_all(const Tensor<T>& a) {
  Tensor<T> centered = sub_bscalar(a, mean_all(a));
  return mean_all(square(centered));
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t r0, std::size_t r1) {
  detail::require_2d(a, "slice_rows");
  const std::size_t n = a.cols();
  if (r0 > r1 || r1 > a.rows())
    throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) +
                                ", " + std::to_string(r1) +
                                ") out of bounds for " +
                                shape_str(a.shape()));
  const std::size_t m = r1 - r0;
  Tensor<T> out = detail::make_op_node<T>({m, n}, {a});
  std::copy(a.value().begin() + r0 * n, a.value().begin() + r1 * n,
            out.raw_value().begin());
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward = [an, r0, m, n](TensorNode<T>& o) {
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < m * n; ++i)
        an->grad[r0 * n + i] += o.grad[i];
    };
  }
  return out;
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
  detail::require_2d(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (c0 > c1 || c1 > n)
    throw std::invalid_argument("slice_cols: range out of bounds for " +
                                shape_str(a.shape()));
  const std::size_t w = c1 - c0;
  Tensor<T> out = detail::make_op_node<T>({m, w}, {a});
  for (std::size_t i = 0; i < m; ++i)
    std::copy(a.value().begin() + i * n + c0, a.value().begin() + i * n + c1,
              out.raw_value().begin() + i * w);
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward = [an, c0, m, n, w](TensorNode<T>& o) {
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j)
          an->grad[i * n + c0 + j] += o.grad[i * w + j];
    };
  }
  return out;
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.cols() != n)
      throw std::invalid_argument("concat_rows: column mismatch");
    m += p.rows();
  }
  Tensor<T> out = Tensor<T>::zeros({m, n});
  bool wants = false;
  if (detail::grad_mode())
    for (const auto& p : parts) wants = wants || p.requires_grad();
  if (wants) {
    out.node()->requires_grad = true;
    out.node()->leaf = false;
    for (const auto& p : parts) out.node()->parents.push_back(p.node());
  }
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.value().begin(), p.value().end(),
              out.raw_value().begin() + r * n);
    r += p.rows();
  }
  if (wants) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    std::vector<std::size_t> row_counts;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      row_counts.push_back(p.rows());
    }
    out.node()->backward = [nodes, row_counts, n](TensorNode<T>& o) {
      std::size_t r = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        auto& pn = *nodes[pi];
        if (pn.requires_grad) {
          detail::ensure_grad(pn);
          for (std::size_t i = 0; i < row_counts[pi] * n; ++i)
            pn.grad[i] += o.grad[r * n + i];
        }
        r += row_counts[pi];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    n += p.cols();
  }
  Tensor<T> out = Tensor<T>::zeros({m, n});
  bool wants = false;
  if (detail::grad_mode())
    for (const auto& p : parts) wants = wants || p.requires_grad();
  if (wants) {
    out.node()->requires_grad = true;
    out.node()->leaf = false;
    for (const auto& p : parts) out.node()->parents.push_back(p.node());
  }
  std::size_t c = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy(p.value().begin() + i * w, p.value().begin() + (i + 1) * w,
                out.raw_value().begin() + i * n + c);
    c += w;
  }
  if (wants) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      widths.push_back(p.cols());
    }
    out.node()->backward = [nodes, widths, m, n](TensorNode<T>& o) {
      std::size_t c = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        auto& pn = *nodes[pi];
        const std::size_t w = widths[pi];
        if (pn.requires_grad) {
          detail::ensure_grad(pn);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
              pn.grad[i * w + j] += o.grad[i * n + c + j];
        }
        c += w;
      }
    };
  }
  return out;
}

// Row gather; backward is scatter-add.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<std::size_t> idx) {
  detail::require_2d(a, "gather_rows");
  const std::size_t n = a.cols();
  for (std::size_t r : idx)
    if (r >= a.rows())
      throw std::invalid_argument("gather_rows: index " + std::to_string(r) +
                                  " out of bounds for " +
                                  shape_str(a.shape()));
  Tensor<T> out = detail::make_op_node<T>({idx.size(), n}, {a});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(a.value().begin() + idx[i] * n,
              a.value().begin() + (idx[i] + 1) * n,
              out.raw_value().begin() + i * n);
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward = [an, idx = std::move(idx), n](TensorNode<T>& o) {
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j)
          an->grad[idx[i] * n + j] += o.grad[i * n + j];
    };
  }
  return out;
}

// out[i] = a[i, idx[i]] for a [R x K]; result shape {R}.
template <class T>
Tensor<T> gather_per_row(const Tensor<T>& a, std::vector<std::size_t> idx) {
  detail::require_2d(a, "gather_per_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (idx.size() != m)
    throw std::invalid_argument("gather_per_row: need one index per row");
  for (std::size_t j : idx)
    if (j >= n) throw std::invalid_argument("gather_per_row: index out of bounds");
  Tensor<T> out = detail::make_op_node<T>({m}, {a});
  for (std::size_t i = 0; i < m; ++i)
    out.raw_value()[i] = a.value()[i * n + idx[i]];
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward = [an, idx = std::move(idx), n](TensorNode<T>& o) {
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < idx.size(); ++i)
        an->grad[i * n + idx[i]] += o.grad[i];
    };
  }
  return out;
}

// Mean over row groups: out[g] = mean of a[rows in groups[g]].
// Every group must be non-empty.
template <class T>
Tensor<T> pool_rows(const Tensor<T>& a,
                    const std::vector<std::vector<std::size_t>>& groups) {
  detail::require_2d(a, "pool_rows");
  const std::size_t n = a.cols();
  for (const auto& g : groups) {
    if (g.empty()) throw std::invalid_argument("pool_rows: empty group");
    for (std::size_t r : g)
      if (r >= a.rows())
        throw std::invalid_argument("pool_rows: row index out of bounds");
  }
  Tensor<T> out = detail::make_op_node<T>({groups.size(), n}, {a});
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    T* orow = out.raw_value().data() + gi * n;
    for (std::size_t r : groups[gi]) {
      const T* row = a.value().data() + r * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += row[j];
    }
    const T inv = T(1) / T(groups[gi].size());
    for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backward = [an, groups, n](TensorNode<T>& o) {
      if (!an->requires_grad) return;
      detail::ensure_grad(*an);
      for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const T inv = T(1) / T(groups[gi].size());
        const T* g = o.grad.data() + gi * n;
        for (std::size_t r : groups[gi]) {
          T* ga = an->grad.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) ga[j] += g[j] * inv;
        }
      }
    };
  }
  return out;
}

// Broadcast each source row q[assign[r]] to output row r. assign[r] == -1
// leaves the row at zero (no source). Backward sums row grads into sources.
template <class T>
Tensor<T> unpool_rows(const Tensor<T>& q, const std::vector<long>& assign) {
  detail::require_2d(q, "unpool_rows");
  const std::size_t n = q.cols();
  Tensor<T> out = detail::make_op_node<T>({assign.size(), n}, {q});
  for (std::size_t r = 0; r < assign.size(); ++r) {
    if (assign[r] < 0) continue;
    if (static_cast<std::size_t>(assign[r]) >= q.rows())
      throw std::invalid_argument("unpool_rows: source index out of bounds");
    std::copy(q.value().begin() + assign[r] * n,
              q.value().begin() + (assign[r] + 1) * n,
              out.raw_value().begin() + r * n);
  }
  if (out.requires_grad()) {
    auto qn = q.node();
    out.node()->backward = [qn, assign, n](TensorNode<T>& o) {
      if (!qn->requires_grad) return;
      detail::ensure_grad(*qn);
      for (std::size_t r = 0; r < assign.size(); ++r) {
        if (assign[r] < 0) continue;
        T* gq = qn->grad.data() + assign[r] * n;
        const T* g = o.grad.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) gq[j] += g[j];
      }
    };
  }
  return out;
}

// out[r] = a[r] * s[map[r]]; the actual multiply used by surrogate paths.
template <class T>
Tensor<T> row_scale(const Tensor<T>& a, const Tensor<T>& s,
                    const std::vector<std::size_t>& map) {
  detail::require_2d(a, "row_scale");
  const std::size_t m = a.rows(), n = a.cols();
  if (map.size() != m)
    throw std::invalid_argument("row_scale: need one scale index per row");
  Tensor<T> out = detail::make_op_node<T>({m, n}, {a, s});
  for (std::size_t i = 0; i < m; ++i) {
    const T sv = s.value().at(map[i]);
    for (std::size_t j = 0; j < n; ++j)
      out.raw_value()[i * n + j] = a.value()[i * n + j] * sv;
  }
  if (out.requires_grad()) {
    auto an = a.node(), sn = s.node();
    out.node()->backward = [an, sn, map, m, n](TensorNode<T>& o) {
      for (std::size_t i = 0; i < m; ++i) {
        const T sv = sn->value[map[i]];
        if (an->requires_grad) {
          detail::ensure_grad(*an);
          for (std::size_t j = 0; j < n; ++j)
            an->grad[i * n + j] += o.grad[i * n + j] * sv;
        }
        if (sn->requires_grad) {
          detail::ensure_grad(*sn);
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j)
            acc += o.grad[i * n + j] * an->value[i * n + j];
          sn->grad[map[i]] += acc;
        }
      }
    };
  }
  return out;
}

// Straight-through scale. Forward is the identity on `a`; backward behaves
// as if the op were row_scale(a, s, map): row grads are scaled by s and the
// inner product <grad, a> accumulates into s.
template <class T>
Tensor<T> ste_scale_rows(const Tensor<T>& a, const Tensor<T>& s,
                         const std::vector<std::size_t>& map) {
  detail::require_2d(a, "ste_scale_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (map.size() != m)
    throw std::invalid_argument("ste_scale_rows: need one scale index per row");
  for (std::size_t i : map)
    if (i >= s.size())
      throw std::invalid_argument("ste_scale_rows: scale index out of bounds");
  Tensor<T> out = detail::make_op_node<T>({m, n}, {a, s});
  std::copy(a.value().begin(), a.value().end(), out.raw_value().begin());
  if (out.requires_grad()) {
    auto an = a.node(), sn = s.node();
    out.node()->backward = [an, sn, map, m, n](TensorNode<T>& o) {
      for (std::size_t i = 0; i < m; ++i) {
        const T sv = sn->value[map[i]];
        if (an->requires_grad) {
          detail::ensure_grad(*an);
          for (std::size_t j = 0; j < n; ++j)
            an->grad[i * n + j] += o.grad[i * n + j] * sv;
        }
        if (sn->requires_grad) {
          detail::ensure_grad(*sn);
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j)
            acc += o.grad[i * n + j] * an->value[i * n + j];
          sn->grad[map[i]] += acc;
        }
      }
    };
  }
  return out;
}

// Cross entropy from raw logits (single example). logits is {n} or [1 x n].
template <class T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, std::size_t label) {
  const std::size_t n = logits.size();
  if (label >= n)
    throw std::invalid_argument("cross_entropy_logits: label " +
                                std::to_string(label) + " out of range " +
                                std::to_string(n));
  Tensor<T> out = detail::make_op_node<T>({1}, {logits});
  const T* x = logits.value().data();
  T mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
  out.raw_value()[0] = mx + std::log(sum) - x[label];
  if (out.requires_grad()) {
    auto ln = logits.node();
    out.node()->backward = [ln, label, n, mx, sum](TensorNode<T>& o) {
      if (!ln->requires_grad) return;
      detail::ensure_grad(*ln);
      const T g = o.grad[0];
      for (std::size_t j = 0; j < n; ++j) {
        T p = std::exp(ln->value[j] - mx) / sum;
        if (j == label) p -= T(1);
        ln->grad[j] += g * p;
      }
    };
  }
  return out;
}

// Standard Gumbel(0,1) samples; not part of the differentiable graph.
template <class T>
Tensor<T> gumbel_sample(RngStream& rng, Shape shape) {
  Tensor<T> out = Tensor<T>::zeros(shape);
  for (auto& v : out.raw_value()) v = static_cast<T>(rng.gumbel());
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined())
    throw std::invalid_argument("backward: undefined tensor");
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                shape_str(loss.shape()));
  auto root = loss.node();
  if (!root->requires_grad) return;

  // Reachable requires-grad subgraph, processed children-before-parents.
  // Node ids increase with creation order, so descending id is a valid
  // topological order.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<TensorNode<T>*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    TensorNode<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second)
        stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const TensorNode<T>* a, const TensorNode<T>* b) {
              return a->id > b->id;
            });

  // Interior grads are transient per backward call; leaf grads accumulate.
  for (TensorNode<T>* n : order)
    if (!n->leaf) n->grad.assign(n->value.size(), T(0));
  detail::ensure_grad(*root);
  root->grad[0] += T(1);

  for (TensorNode<T>* n : order)
    if (n->backward) n->backward(*n);
}

}  // namespace dge
