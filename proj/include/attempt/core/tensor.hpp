#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "attempt/core/error.hpp"
#include "attempt/core/rng.hpp"

namespace attempt {

// Reverse-mode autodiff over dense row-major arrays. Each operation records
// a backprop closure referencing its parent nodes; backward() runs a
// topological sort from the loss and visits every node exactly once.
// Scalar type is a template parameter: float for training, double for
// gradient verification.

namespace detail {
inline std::uint64_t next_node_id() {
  static std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}
}  // namespace detail

// Disables graph recording in scope; used for evaluation / greedy decoding.
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_enabled_flag()) {
    detail::grad_enabled_flag() = false;
  }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }

 private:
  bool prev_;
};

template <class T>
struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated only when this node receives gradient
  bool requires_grad = false;
  bool backward_done = false;
  std::uint64_t id = detail::next_node_id();
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(numel_of(n->shape), T(0));
    n->requires_grad = requires_grad && detail::grad_enabled_flag();
    return Tensor(std::move(n));
  }

  static Tensor full(std::vector<std::size_t> shape, T fill, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), fill);
    return t;
  }

  static Tensor from_vector(std::vector<std::size_t> shape, std::vector<T> data,
                            bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    if (numel_of(n->shape) != data.size())
      throw DimensionError("from_vector: shape " + detail::shape_str(n->shape) +
                           " does not match data length " + std::to_string(data.size()));
    n->value = std::move(data);
    n->requires_grad = requires_grad && detail::grad_enabled_flag();
    return Tensor(std::move(n));
  }

  static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double scale,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    rng.fill_normal(t.node_->value, scale);
    return t;
  }

  bool valid() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }
  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t node_id() const { return node_->id; }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  const std::vector<T>& grad() const {
    if (node_->grad.size() != node_->value.size())
      throw Error("grad not populated for this tensor");
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar tensor");
    return node_->value[0];
  }

  std::shared_ptr<Node> node() const { return node_; }

  // Reverse pass from a scalar loss. A second call on the same node errors.
  void backward() {
    if (numel() != 1) throw DimensionError("backward() requires a scalar loss");
    if (node_->backward_done)
      throw Error("backward() already run on this tape; rebuild the graph");
    node_->backward_done = true;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.push_back({node_.get(), 0});
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node* p = n->parents[idx++].get();
        if (seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    // order is children-after-parents reversed; traverse from the loss down.
    node_->ensure_grad();
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backprop && n->grad.size() == n->value.size()) n->backprop(*n);
    }
  }

  // Detached copy of the current values (constant leaf).
  Tensor detach() const {
    auto n = std::make_shared<Node>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(std::move(n));
  }

 private:
  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <class T>
std::shared_ptr<TensorNode<T>> make_result(std::vector<std::size_t> shape,
                                           std::vector<T> value,
                                           std::initializer_list<Tensor<T>> inputs) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool track = grad_enabled_flag();
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (track && any) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->parents.push_back(in.node());
  }
  return n;
}

template <class T>
void accumulate(const std::shared_ptr<TensorNode<T>>& p, std::size_t i, T v) {
  p->ensure_grad();
  p->grad[i] += v;
}

template <class T>
void check_finite(const std::vector<T>& v, const char* what) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw NumericError(std::string(what) + ": non-finite value encountered");
}

}  // namespace detail

// ---- elementwise ----

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto n = detail::make_result(a.shape(), std::move(out), {a, b});
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](TensorNode<T>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("sub: shape mismatch " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto n = detail::make_result(a.shape(), std::move(out), {a, b});
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](TensorNode<T>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
      }
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto n = detail::make_result(a.shape(), std::move(out), {a, b});
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](TensorNode<T>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i] += self.grad[i] * pa->value[i];
      }
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto n = detail::make_result(a.shape(), std::move(out), {a});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa, c](TensorNode<T>& self) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * c;
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  detail::check_finite(x.data(), "silu");
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T s = T(1) / (T(1) + std::exp(-x.data()[i]));
    out[i] = x.data()[i] * s;
  }
  auto n = detail::make_result(x.shape(), std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.node();
    n->backprop = [px](TensorNode<T>& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        T v = px->value[i];
        T s = T(1) / (T(1) + std::exp(-v));
        px->grad[i] += self.grad[i] * s * (T(1) + v * (T(1) - s));
      }
    };
  }
  return Tensor<T>(n);
}

// ---- matrix products ----

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes " + detail::shape_str(a.shape()) +
                         " x " + detail::shape_str(b.shape()));
  const std::size_t p = a.rows(), q = a.cols(), s = b.cols();
  std::vector<T> out(p * s, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t k = 0; k < q; ++k) {
      const T aik = A[i * q + k];
      const T* brow = B + k * s;
      T* orow = out.data() + i * s;
      for (std::size_t j = 0; j < s; ++j) orow[j] += aik * brow[j];
    }
  auto n = detail::make_result({p, s}, std::move(out), {a, b});
  if (n->requires_grad) {
    auto pa = a.node(), pb = b.node();
    n->backprop = [pa, pb, p, q, s](TensorNode<T>& self) {
      const T* G = self.grad.data();
      if (pa->requires_grad) {
        pa->ensure_grad();  // dA = G * B^T
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t k = 0; k < q; ++k) {
            T acc = T(0);
            const T* grow = G + i * s;
            const T* brow = pb->value.data() + k * s;
            for (std::size_t j = 0; j < s; ++j) acc += grow[j] * brow[j];
            pa->grad[i * q + k] += acc;
          }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();  // dB = A^T * G
        for (std::size_t i = 0; i < p; ++i) {
          const T* arow = pa->value.data() + i * q;
          const T* grow = G + i * s;
          for (std::size_t k = 0; k < q; ++k) {
            const T aik = arow[k];
            T* brow = pb->grad.data() + k * s;
            for (std::size_t j = 0; j < s; ++j) brow[j] += aik * grow[j];
          }
        }
      }
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.shape().size() != 2)
    throw DimensionError("transpose: expected 2-D, got " + detail::shape_str(a.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  auto n = detail::make_result({c, r}, std::move(out), {a});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa, r, c](TensorNode<T>& self) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) pa->grad[i * c + j] += self.grad[j * r + i];
    };
  }
  return Tensor<T>(n);
}

// y = A x, A: [n x d], x: [d] -> [n]
template <class T>
Tensor<T> matvec(const Tensor<T>& a, const Tensor<T>& x) {
  if (a.shape().size() != 2 || x.shape().size() != 1 || a.cols() != x.numel())
    throw DimensionError("matvec: incompatible shapes " + detail::shape_str(a.shape()) +
                         " x " + detail::shape_str(x.shape()));
  const std::size_t r = a.rows(), d = a.cols();
  std::vector<T> out(r, T(0));
  for (std::size_t i = 0; i < r; ++i) {
    T acc = T(0);
    for (std::size_t j = 0; j < d; ++j) acc += a.data()[i * d + j] * x.data()[j];
    out[i] = acc;
  }
  auto n = detail::make_result({r}, std::move(out), {a, x});
  if (n->requires_grad) {
    auto pa = a.node(), px = x.node();
    n->backprop = [pa, px, r, d](TensorNode<T>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < d; ++j)
            pa->grad[i * d + j] += self.grad[i] * px->value[j];
      }
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < d; ++j)
            px->grad[j] += self.grad[i] * pa->value[i * d + j];
      }
    };
  }
  return Tensor<T>(n);
}

// y = x^T W, x: [d], W: [d x r] -> [r]
template <class T>
Tensor<T> vecmat(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.shape().size() != 1 || w.shape().size() != 2 || x.numel() != w.rows())
    throw DimensionError("vecmat: incompatible shapes " + detail::shape_str(x.shape()) +
                         " x " + detail::shape_str(w.shape()));
  const std::size_t d = w.rows(), r = w.cols();
  std::vector<T> out(r, T(0));
  for (std::size_t i = 0; i < d; ++i) {
    const T xi = x.data()[i];
    for (std::size_t j = 0; j < r; ++j) out[j] += xi * w.data()[i * r + j];
  }
  auto n = detail::make_result({r}, std::move(out), {x, w});
  if (n->requires_grad) {
    auto px = x.node(), pw = w.node();
    n->backprop = [px, pw, d, r](TensorNode<T>& self) {
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t i = 0; i < d; ++i) {
          T acc = T(0);
          for (std::size_t j = 0; j < r; ++j) acc += self.grad[j] * pw->value[i * r + j];
          px->grad[i] += acc;
        }
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        for (std::size_t i = 0; i < d; ++i) {
          const T xi = px->value[i];
          for (std::size_t j = 0; j < r; ++j) pw->grad[i * r + j] += self.grad[j] * xi;
        }
      }
    };
  }
  return Tensor<T>(n);
}

// Adds a length-c vector to every row of an [r x c] matrix.
template <class T>
Tensor<T> add_row_broadcast(const Tensor<T>& a, const Tensor<T>& bias) {
  if (a.shape().size() != 2 || bias.shape().size() != 1 || a.cols() != bias.numel())
    throw DimensionError("add_row_broadcast: shapes " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(bias.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] + bias.data()[j];
  auto n = detail::make_result(a.shape(), std::move(out), {a, bias});
  if (n->requires_grad) {
    auto pa = a.node(), pb = bias.node();
    n->backprop = [pa, pb, r, c](TensorNode<T>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) pb->grad[j] += self.grad[i * c + j];
      }
    };
  }
  return Tensor<T>(n);
}

// ---- softmax ----

// Stabilized softmax over a 1-D tensor.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.shape().size() != 1 || x.numel() == 0)
    throw DimensionError("softmax: expected non-empty 1-D tensor");
  detail::check_finite(x.data(), "softmax");
  const std::size_t m = x.numel();
  std::vector<T> out(m);
  T mx = x.data()[0];
  for (T v : x.data()) mx = std::max(mx, v);
  T sum = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    out[i] = std::exp(x.data()[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  auto n = detail::make_result(x.shape(), std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.node();
    n->backprop = [px, m](TensorNode<T>& self) {
      px->ensure_grad();
      T dot = T(0);
      for (std::size_t i = 0; i < m; ++i) dot += self.grad[i] * self.value[i];
      for (std::size_t i = 0; i < m; ++i)
        px->grad[i] += self.value[i] * (self.grad[i] - dot);
    };
  }
  return Tensor<T>(n);
}

// Stabilized softmax over each row of an [r x c] matrix.
template <class T>
Tensor<T> row_softmax(const Tensor<T>& x) {
  if (x.shape().size() != 2)
    throw DimensionError("row_softmax: expected 2-D tensor");
  detail::check_finite(x.data(), "row_softmax");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.data().data() + i * c;
    T mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(row[j] - mx);
      sum += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= sum;
  }
  auto n = detail::make_result(x.shape(), std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.node();
    n->backprop = [px, r, c](TensorNode<T>& self) {
      px->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const T* y = self.value.data() + i * c;
        const T* g = self.grad.data() + i * c;
        T dot = T(0);
        for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < c; ++j) px->grad[i * c + j] += y[j] * (g[j] - dot);
      }
    };
  }
  return Tensor<T>(n);
}

// ---- layer norm ----

// Per-row layer norm; accepts [d] (single row) or [l x d].
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps) {
  if (eps <= T(0)) throw DimensionError("layer_norm: eps must be positive");
  const bool is_vec = x.shape().size() == 1;
  const std::size_t d = is_vec ? x.numel() : x.cols();
  const std::size_t l = is_vec ? 1 : x.rows();
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm: gain/bias length must match feature dim");
  std::vector<T> out(l * d);
  for (std::size_t i = 0; i < l; ++i) {
    const T* row = x.data().data() + i * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = (row[j] - mean) * inv * gain.data()[j] + bias.data()[j];
  }
  auto n = detail::make_result(x.shape(), std::move(out), {x, gain, bias});
  if (n->requires_grad) {
    auto px = x.node(), pg = gain.node(), pb = bias.node();
    n->backprop = [px, pg, pb, l, d, eps](TensorNode<T>& self) {
      for (std::size_t i = 0; i < l; ++i) {
        const T* row = px->value.data() + i * d;
        T mean = T(0);
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= T(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        const T* g = self.grad.data() + i * d;
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (std::size_t j = 0; j < d; ++j)
            pg->grad[j] += g[j] * (row[j] - mean) * inv;
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t j = 0; j < d; ++j) pb->grad[j] += g[j];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          // dxhat = g * gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          T mean_dh = T(0), mean_dhx = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = g[j] * pg->value[j];
            const T xh = (row[j] - mean) * inv;
            mean_dh += dh;
            mean_dhx += dh * xh;
          }
          mean_dh /= T(d);
          mean_dhx /= T(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = g[j] * pg->value[j];
            const T xh = (row[j] - mean) * inv;
            px->grad[i * d + j] += inv * (dh - mean_dh - xh * mean_dhx);
          }
        }
      }
    };
  }
  return Tensor<T>(n);
}

// ---- pooling ----

// Per-dimension max over unmasked rows of [l x d]. Gradient is routed to the
// argmax row of each dimension; ties break to the lowest row index.
template <class T>
Tensor<T> max_pool_seq(const Tensor<T>& x, const std::vector<bool>& mask) {
  if (x.shape().size() != 2)
    throw DimensionError("max_pool_seq: expected 2-D tensor");
  const std::size_t l = x.rows(), d = x.cols();
  if (mask.size() != l)
    throw DimensionError("max_pool_seq: mask length must equal row count");
  std::size_t first = l;
  for (std::size_t i = 0; i < l; ++i)
    if (mask[i]) {
      first = i;
      break;
    }
  if (first == l) throw DataError("max_pool_seq: all positions masked (empty pool)");
  std::vector<T> out(d);
  std::vector<std::size_t> argmax(d, first);
  for (std::size_t j = 0; j < d; ++j) out[j] = x.data()[first * d + j];
  for (std::size_t i = first + 1; i < l; ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < d; ++j) {
      const T v = x.data()[i * d + j];
      if (v > out[j]) {
        out[j] = v;
        argmax[j] = i;
      }
    }
  }
  auto n = detail::make_result<T>({d}, std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.node();
    n->backprop = [px, argmax, d](TensorNode<T>& self) {
      px->ensure_grad();
      for (std::size_t j = 0; j < d; ++j)
        px->grad[argmax[j] * d + j] += self.grad[j];
    };
  }
  return Tensor<T>(n);
}

// ---- loss ----

// Mean of -log softmax(logits)[target] over positions whose target is not
// ignore_index.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                        int ignore_index) {
  if (logits.shape().size() != 2)
    throw DimensionError("cross_entropy: expected 2-D logits");
  const std::size_t n_pos = logits.rows(), v = logits.cols();
  if (targets.size() != n_pos)
    throw DimensionError("cross_entropy: targets length must equal logit rows");
  std::size_t n_valid = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw DataError("cross_entropy: target id out of range");
    ++n_valid;
  }
  if (n_valid == 0)
    throw DataError("cross_entropy: every target ignored (degenerate batch)");
  T loss = T(0);
  for (std::size_t i = 0; i < n_pos; ++i) {
    if (targets[i] == ignore_index) continue;
    const T* row = logits.data().data() + i * v;
    T mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    loss += -(row[targets[i]] - mx - std::log(sum));
  }
  loss /= T(n_valid);
  auto n = detail::make_result<T>({1}, {loss}, {logits});
  if (n->requires_grad) {
    auto pl = logits.node();
    n->backprop = [pl, targets, ignore_index, n_pos, v, n_valid](TensorNode<T>& self) {
      pl->ensure_grad();
      const T g = self.grad[0] / T(n_valid);
      for (std::size_t i = 0; i < n_pos; ++i) {
        if (targets[i] == ignore_index) continue;
        const T* row = pl->value.data() + i * v;
        T mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < v; ++j) {
          T p = std::exp(row[j] - mx) / sum;
          pl->grad[i * v + j] +=
              g * (p - (static_cast<int>(j) == targets[i] ? T(1) : T(0)));
        }
      }
    };
  }
  return Tensor<T>(n);
}

// ---- structure ----

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.cols() != c)
      throw DimensionError("concat_rows: column mismatch");
    total += p.rows();
  }
  std::vector<T> out;
  out.reserve(total * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = {total, c};
  n->value = std::move(out);
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (detail::grad_enabled_flag() && any) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node());
    std::vector<std::size_t> row_counts;
    for (const auto& p : parts) row_counts.push_back(p.rows());
    auto parents = n->parents;
    n->backprop = [parents, row_counts, c](TensorNode<T>& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < parents.size(); ++k) {
        auto& p = parents[k];
        const std::size_t sz = row_counts[k] * c;
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < sz; ++i) p->grad[i] += self.grad[off + i];
        }
        off += sz;
      }
    };
  }
  return Tensor<T>(n);
}

// Stacks k equal-length 1-D tensors into a [k x c] matrix.
template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no inputs");
  const std::size_t c = rows[0].numel();
  std::vector<T> out;
  out.reserve(rows.size() * c);
  for (const auto& r : rows) {
    if (r.shape().size() != 1 || r.numel() != c)
      throw DimensionError("stack_rows: length mismatch");
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = {rows.size(), c};
  n->value = std::move(out);
  bool any = false;
  for (const auto& r : rows) any = any || r.requires_grad();
  if (detail::grad_enabled_flag() && any) {
    n->requires_grad = true;
    for (const auto& r : rows) n->parents.push_back(r.node());
    auto parents = n->parents;
    n->backprop = [parents, c](TensorNode<T>& self) {
      for (std::size_t k = 0; k < parents.size(); ++k) {
        auto& p = parents[k];
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (std::size_t j = 0; j < c; ++j) p->grad[j] += self.grad[k * c + j];
      }
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
  if (a.shape().size() != 2 || c1 > a.cols() || c0 >= c1)
    throw DimensionError("slice_cols: bad column range");
  const std::size_t r = a.rows(), c = a.cols(), w = c1 - c0;
  std::vector<T> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.data()[i * c + c0 + j];
  auto n = detail::make_result({r, w}, std::move(out), {a});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa, r, c, c0, w](TensorNode<T>& self) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j)
          pa->grad[i * c + c0 + j] += self.grad[i * w + j];
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t r0, std::size_t r1) {
  if (a.shape().size() != 2 || r1 > a.rows() || r0 >= r1)
    throw DimensionError("slice_rows: bad row range");
  const std::size_t c = a.cols(), h = r1 - r0;
  std::vector<T> out(a.data().begin() + r0 * c, a.data().begin() + r1 * c);
  auto n = detail::make_result({h, c}, std::move(out), {a});
  if (n->requires_grad) {
    auto pa = a.node();
    n->backprop = [pa, r0, h, c](TensorNode<T>& self) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < h * c; ++i) pa->grad[r0 * c + i] += self.grad[i];
    };
  }
  return Tensor<T>(n);
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.rows() != r)
      throw DimensionError("concat_cols: row mismatch");
    total += p.cols();
  }
  std::vector<T> out(r * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = p.data()[i * w + j];
    off += w;
  }
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = {r, total};
  n->value = std::move(out);
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (detail::grad_enabled_flag() && any) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node());
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.cols());
    auto parents = n->parents;
    n->backprop = [parents, widths, r, total](TensorNode<T>& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < parents.size(); ++k) {
        auto& p = parents[k];
        const std::size_t w = widths[k];
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j)
              p->grad[i * w + j] += self.grad[i * total + off + j];
        }
        off += w;
      }
    };
  }
  return Tensor<T>(n);
}

// Row gather: out[i] = table[idx[i]]. Gradient scatter-adds into the table.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& idx) {
  if (table.shape().size() != 2)
    throw DimensionError("gather_rows: expected 2-D table");
  const std::size_t r = table.rows(), c = table.cols();
  std::vector<T> out;
  out.reserve(idx.size() * c);
  for (int i : idx) {
    if (i < 0 || static_cast<std::size_t>(i) >= r)
      throw DataError("gather_rows: index out of range");
    out.insert(out.end(), table.data().begin() + i * c,
               table.data().begin() + (i + 1) * c);
  }
  auto n = detail::make_result({idx.size(), c}, std::move(out), {table});
  if (n->requires_grad) {
    auto pt = table.node();
    n->backprop = [pt, idx, c](TensorNode<T>& self) {
      pt->ensure_grad();
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (std::size_t j = 0; j < c; ++j)
          pt->grad[idx[k] * c + j] += self.grad[k * c + j];
    };
  }
  return Tensor<T>(n);
}

// ---- reductions ----

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto n = detail::make_result<T>({1}, {acc}, {x});
  if (n->requires_grad) {
    auto px = x.node();
    n->backprop = [px](TensorNode<T>& self) {
      px->ensure_grad();
      for (auto& g : px->grad) g += self.grad[0];
    };
  }
  return Tensor<T>(n);
}

// Weighted sum of equally-shaped matrices: out = sum_j w[j] * mats[j].
// Gradient reaches both the weights and the (trainable) matrices.
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& weights, const std::vector<Tensor<T>>& mats) {
  if (weights.shape().size() != 1 || weights.numel() != mats.size())
    throw DimensionError("weighted_sum: weight count " +
                         std::to_string(weights.numel()) + " vs " +
                         std::to_string(mats.size()) + " matrices");
  if (mats.empty()) throw DimensionError("weighted_sum: no matrices");
  const auto shape = mats[0].shape();
  for (const auto& m : mats)
    if (m.shape() != shape) throw DimensionError("weighted_sum: shape mismatch");
  const std::size_t sz = mats[0].numel();
  std::vector<T> out(sz, T(0));
  for (std::size_t k = 0; k < mats.size(); ++k) {
    const T w = weights.data()[k];
    for (std::size_t i = 0; i < sz; ++i) out[i] += w * mats[k].data()[i];
  }
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = shape;
  n->value = std::move(out);
  bool any = weights.requires_grad();
  for (const auto& m : mats) any = any || m.requires_grad();
  if (detail::grad_enabled_flag() && any) {
    n->requires_grad = true;
    n->parents.push_back(weights.node());
    for (const auto& m : mats) n->parents.push_back(m.node());
    auto pw = weights.node();
    std::vector<std::shared_ptr<TensorNode<T>>> pm;
    for (const auto& m : mats) pm.push_back(m.node());
    n->backprop = [pw, pm, sz](TensorNode<T>& self) {
      if (pw->requires_grad) {
        pw->ensure_grad();
        for (std::size_t k = 0; k < pm.size(); ++k) {
          T acc = T(0);
          for (std::size_t i = 0; i < sz; ++i) acc += self.grad[i] * pm[k]->value[i];
          pw->grad[k] += acc;
        }
      }
      for (std::size_t k = 0; k < pm.size(); ++k) {
        if (!pm[k]->requires_grad) continue;
        pm[k]->ensure_grad();
        const T w = pw->value[k];
        for (std::size_t i = 0; i < sz; ++i) pm[k]->grad[i] += w * self.grad[i];
      }
    };
  }
  return Tensor<T>(n);
}

}  // namespace attempt
