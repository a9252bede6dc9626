#pragma once

// Minimal reverse-mode differentiation over Tensor<T>.
//
// A Var is a handle onto a graph node. Operations create new nodes whose
// backward rule accumulates the node's gradient into its inputs. Nodes are
// never mutated after construction (only their grad buffer), so backward
// rules can read input values directly.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "simipu/error.hpp"
#include "simipu/tensor.hpp"

namespace simipu::diff {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::uint64_t id = next_node_id();
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool has_grad() const { return !grad.empty(); }

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }

  void accumulate(const Tensor<T>& g) {
    auto& buf = grad_buffer();
    auto dst = buf.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var parameter(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t id() const { return node_->id; }
  const char* op() const { return node_->op; }

  /// Accumulated gradient; zeros if nothing reached this node.
  Tensor<T> grad() const {
    return node_->has_grad() ? node_->grad : Tensor<T>(node_->value.shape());
  }
  bool has_grad() const { return node_->has_grad(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Build a node from an already-computed value. `backward` receives the
/// finished node and must route node.grad into node.inputs.
template <class T>
Var<T> make_op(const char* name, Tensor<T> value, std::vector<Var<T>> inputs,
               std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = name;
  for (auto& in : inputs) {
    n->requires_grad = n->requires_grad || in.requires_grad();
    n->inputs.push_back(in.node());
  }
  if (n->requires_grad) n->backward = std::move(backward);
  return Var<T>(std::move(n));
}

/// Nodes reachable from root through requires_grad edges, inputs before
/// consumers. Order depends only on graph structure.
template <class T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  if (!root->requires_grad) return order;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Reverse pass from a scalar root. Gradients accumulate into every
/// reachable requires_grad node, leaves included.
template <class T>
void backward(const Var<T>& root) {
  if (root.size() != 1) {
    throw DimensionError("backward needs a scalar root, got " + shape_string(root.shape()));
  }
  auto order = topological_order(root.node().get());
  if (order.empty()) return;
  root.node()->accumulate(Tensor<T>(root.shape(), T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
}

namespace detail {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <class T>
void require_rank(const Var<T>& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
  }
}

template <class T>
bool wants_grad(const std::shared_ptr<Node<T>>& n) {
  return n->requires_grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return make_op<T>("add", std::move(out), {a, b}, [](Node<T>& n) {
    for (auto& in : n.inputs)
      if (in->requires_grad) in->accumulate(n.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return make_op<T>("sub", std::move(out), {a, b}, [](Node<T>& n) {
    if (n.inputs[0]->requires_grad) n.inputs[0]->accumulate(n.grad);
    if (n.inputs[1]->requires_grad) {
      Tensor<T> neg = n.grad;
      for (auto& v : neg.data()) v = -v;
      n.inputs[1]->accumulate(neg);
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return make_op<T>("mul", std::move(out), {a, b}, [](Node<T>& n) {
    for (int k = 0; k < 2; ++k) {
      auto& in = n.inputs[k];
      if (!in->requires_grad) continue;
      const auto other = n.inputs[1 - k]->value.data();
      Tensor<T> g = n.grad;
      auto gd = g.data();
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] *= other[i];
      in->accumulate(g);
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return make_op<T>("scale", std::move(out), {a}, [factor](Node<T>& n) {
    Tensor<T> g = n.grad;
    for (auto& v : g.data()) v *= factor;
    n.inputs[0]->accumulate(g);
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return make_op<T>("relu", std::move(out), {a}, [](Node<T>& n) {
    Tensor<T> g = n.grad;
    auto x = n.inputs[0]->value.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i)
      if (!(x[i] > T(0))) gd[i] = T(0);
    n.inputs[0]->accumulate(g);
  });
}

template <class T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= v;
  return make_op<T>("square", std::move(out), {a}, [](Node<T>& n) {
    Tensor<T> g = n.grad;
    auto x = n.inputs[0]->value.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] *= T(2) * x[i];
    n.inputs[0]->accumulate(g);
  });
}

/// Elementwise square root. The derivative at exactly 0 is taken as 0.
template <class T>
Var<T> sqrt(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) {
    if (v < T(0)) throw NumericError("sqrt of negative value " + std::to_string(v));
    v = std::sqrt(v);
  }
  return make_op<T>("sqrt", std::move(out), {a}, [](Node<T>& n) {
    Tensor<T> g = n.grad;
    auto y = n.value.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] = y[i] > T(0) ? gd[i] / (T(2) * y[i]) : T(0);
    n.inputs[0]->accumulate(g);
  });
}

/// Identity in value; blocks every gradient to x and its ancestors.
template <class T>
Var<T> stop_gradient(const Var<T>& x) {
  auto n = std::make_shared<Node<T>>();
  n->value = x.value();
  n->op = "stop_gradient";
  return Var<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  T total = T(0);
  for (T v : a.value().data()) total += v;
  return make_op<T>("sum", Tensor<T>::scalar(total), {a}, [](Node<T>& n) {
    n.inputs[0]->accumulate(Tensor<T>(n.inputs[0]->value.shape(), n.grad[0]));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  if (a.size() == 0) throw DimensionError("mean of an empty array");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m x k] * b[k x n].
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  if (a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  }
  Tensor<T> out(Shape{a.shape()[0], b.shape()[1]});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return make_op<T>("matmul", std::move(out), {a, b}, [](Node<T>& n) {
    auto& A = n.inputs[0];
    auto& B = n.inputs[1];
    if (A->requires_grad) A->grad_buffer().matrix().noalias() += n.grad.matrix() * B->value.matrix().transpose();
    if (B->requires_grad) B->grad_buffer().matrix().noalias() += A->value.matrix().transpose() * n.grad.matrix();
  });
}

/// a[m x k] * b[n x k]^T.
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  if (a.shape()[1] != b.shape()[1]) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()) + "^T");
  }
  Tensor<T> out(Shape{a.shape()[0], b.shape()[0]});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix().transpose();
  return make_op<T>("matmul_nt", std::move(out), {a, b}, [](Node<T>& n) {
    auto& A = n.inputs[0];
    auto& B = n.inputs[1];
    if (A->requires_grad) A->grad_buffer().matrix().noalias() += n.grad.matrix() * B->value.matrix();
    if (B->requires_grad) B->grad_buffer().matrix().noalias() += n.grad.matrix().transpose() * A->value.matrix();
  });
}

/// x[m x n] + bias[n] broadcast over rows.
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  detail::require_rank(x, 2, "add_bias");
  if (bias.size() != x.shape()[1]) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not fit " +
                         shape_string(x.shape()));
  }
  Tensor<T> out = x.value();
  const std::size_t m = x.shape()[0], cols = x.shape()[1];
  auto bv = bias.value().data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < cols; ++c) out(r, c) += bv[c];
  return make_op<T>("add_bias", std::move(out), {x, bias}, [](Node<T>& n) {
    if (n.inputs[0]->requires_grad) n.inputs[0]->accumulate(n.grad);
    if (n.inputs[1]->requires_grad) {
      auto& gb = n.inputs[1]->grad_buffer();
      const std::size_t rows = n.grad.dim(0), cols = n.grad.dim(1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += n.grad(r, c);
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing and shape

/// Select leading-axis rows; repeated indices accumulate in backward.
template <class T>
Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> indices) {
  const std::size_t rows = a.value().rows();
  const std::size_t width = a.value().row_size();
  Shape shape = a.shape();
  shape[0] = indices.size();
  Tensor<T> out(shape);
  auto src = a.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                           shape_string(a.shape()));
    }
    std::copy_n(src.begin() + indices[i] * width, width, dst.begin() + i * width);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_op<T>("gather_rows", std::move(out), {a}, [idx = std::move(idx), width](Node<T>& n) {
    auto& g = n.inputs[0]->grad_buffer();
    auto gd = g.data();
    auto up = n.grad.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < width; ++c) gd[idx[i] * width + c] += up[i * width + c];
  });
}

/// [m x p] ++ [m x q] -> [m x (p+q)].
template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a, 2, "concat_cols");
  detail::require_rank(b, 2, "concat_cols");
  if (a.shape()[0] != b.shape()[0]) {
    throw DimensionError("concat_cols: row counts differ, " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  Tensor<T> out(Shape{m, p + q});
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < p; ++c) out(r, c) = a.value()(r, c);
    for (std::size_t c = 0; c < q; ++c) out(r, p + c) = b.value()(r, c);
  }
  return make_op<T>("concat_cols", std::move(out), {a, b}, [p, q](Node<T>& n) {
    const std::size_t rows = n.grad.dim(0);
    if (n.inputs[0]->requires_grad) {
      auto& g = n.inputs[0]->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < p; ++c) g(r, c) += n.grad(r, c);
    }
    if (n.inputs[1]->requires_grad) {
      auto& g = n.inputs[1]->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < q; ++c) g(r, c) += n.grad(r, p + c);
    }
  });
}

/// Max over consecutive blocks of `group` rows: [G*group x d] -> [G x d].
/// Gradient goes to the first row attaining the maximum.
template <class T>
Var<T> segment_max(const Var<T>& a, std::size_t group) {
  detail::require_rank(a, 2, "segment_max");
  if (group == 0 || a.shape()[0] % group != 0) {
    throw DimensionError("segment_max: " + std::to_string(a.shape()[0]) +
                         " rows do not split into groups of " + std::to_string(group));
  }
  const std::size_t groups = a.shape()[0] / group, d = a.shape()[1];
  Tensor<T> out(Shape{groups, d});
  std::vector<std::size_t> argmax(groups * d);
  const auto& x = a.value();
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t c = 0; c < d; ++c) {
      std::size_t best = g * group;
      for (std::size_t r = best + 1; r < (g + 1) * group; ++r)
        if (x(r, c) > x(best, c)) best = r;
      out(g, c) = x(best, c);
      argmax[g * d + c] = best;
    }
  }
  return make_op<T>("segment_max", std::move(out), {a}, [argmax = std::move(argmax), d](Node<T>& n) {
    auto& g = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) g(argmax[i], i % d) += n.grad[i];
  });
}

/// Divide each trailing-axis vector by max(||v||, epsilon).
template <class T>
Var<T> l2_normalize(const Var<T>& x, T epsilon = T(1e-12)) {
  if (!(epsilon > T(0))) throw ConfigError("l2_normalize: epsilon must be positive");
  const std::size_t d = x.shape().back();
  const std::size_t count = x.size() / d;
  Tensor<T> out = x.value();
  std::vector<T> norms(count);
  auto o = out.data();
  for (std::size_t r = 0; r < count; ++r) {
    T ss = T(0);
    for (std::size_t c = 0; c < d; ++c) ss += o[r * d + c] * o[r * d + c];
    const T norm = std::sqrt(ss);
    norms[r] = norm;
    const T denom = norm > epsilon ? norm : epsilon;
    for (std::size_t c = 0; c < d; ++c) o[r * d + c] /= denom;
  }
  return make_op<T>("l2_normalize", std::move(out), {x},
                    [norms = std::move(norms), d, epsilon](Node<T>& n) {
                      auto& g = n.inputs[0]->grad_buffer();
                      auto gd = g.data();
                      auto up = n.grad.data();
                      auto y = n.value.data();
                      for (std::size_t r = 0; r < norms.size(); ++r) {
                        if (norms[r] > epsilon) {
                          // d(v/|v|) = (I - y y^T) / |v|
                          T dot = T(0);
                          for (std::size_t c = 0; c < d; ++c) dot += up[r * d + c] * y[r * d + c];
                          for (std::size_t c = 0; c < d; ++c)
                            gd[r * d + c] += (up[r * d + c] - dot * y[r * d + c]) / norms[r];
                        } else {
                          for (std::size_t c = 0; c < d; ++c) gd[r * d + c] += up[r * d + c] / epsilon;
                        }
                      }
                    });
}

/// Per-row softmax cross-entropy: logits[m x n], targets[m] -> losses[m].
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::size_t> targets) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t m = logits.shape()[0], cols = logits.shape()[1];
  if (targets.size() != m) throw DimensionError("softmax_cross_entropy: one target per row required");
  const auto& z = logits.value();
  Tensor<T> probs(Shape{m, cols});
  Tensor<T> out(Shape{m});
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] >= cols) throw DimensionError("softmax_cross_entropy: target out of range");
    T peak = z(r, 0);
    for (std::size_t c = 1; c < cols; ++c) peak = std::max(peak, z(r, c));
    T denom = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      probs(r, c) = std::exp(z(r, c) - peak);
      denom += probs(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c) probs(r, c) /= denom;
    out[r] = std::log(denom) + peak - z(r, targets[r]);
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_op<T>("softmax_cross_entropy", std::move(out), {logits},
                    [probs = std::move(probs), tgt = std::move(tgt)](Node<T>& n) {
                      auto& g = n.inputs[0]->grad_buffer();
                      const std::size_t rows = probs.dim(0), cols = probs.dim(1);
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T up = n.grad[r];
                        for (std::size_t c = 0; c < cols; ++c) g(r, c) += up * probs(r, c);
                        g(r, tgt[r]) -= up;
                      }
                    });
}

// ---------------------------------------------------------------------------
// Image operators (channel-first, single image)

namespace detail {

/// Output columns [lo, hi) whose input column ox * stride + kx - padding
/// falls inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t kx, std::size_t stride, std::size_t padding,
                                                      std::size_t w, std::size_t wo) {
  const auto off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(padding);
  const auto st = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + st - 1) / st;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(w) - 1 - off) < 0 ? 0 : (static_cast<std::ptrdiff_t>(w) - 1 - off) / st + 1;
  lo = std::min<std::ptrdiff_t>(lo, static_cast<std::ptrdiff_t>(wo));
  hi = std::clamp<std::ptrdiff_t>(hi, lo, static_cast<std::ptrdiff_t>(wo));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// x[ci x h x w] -> cols[(ci k k) x (ho wo)], zero outside the image.
template <class T>
void im2col(const T* x, std::size_t ci, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t padding, std::size_t ho, std::size_t wo, T* cols) {
  const std::size_t pixels = ho * wo;
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * pixels;
        const auto [lo, hi] = valid_span(kx, stride, padding, w, wo);
        for (std::size_t oy = 0; oy < ho; ++oy) {
          T* dst = row + oy * wo;
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (c * h + static_cast<std::size_t>(iy)) * w;
          std::fill(dst, dst + lo, T(0));
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride + kx - padding];
          std::fill(dst + hi, dst + wo, T(0));
        }
      }
}

/// Adjoint of im2col: scatter-add cols back onto gx.
template <class T>
void col2im(const T* cols, std::size_t ci, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t padding, std::size_t ho, std::size_t wo, T* gx) {
  const std::size_t pixels = ho * wo;
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * pixels;
        const auto [lo, hi] = valid_span(kx, stride, padding, w, wo);
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = gx + (c * h + static_cast<std::size_t>(iy)) * w;
          const T* src = row + oy * wo;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * stride + kx - padding] += src[ox];
        }
      }
}

}  // namespace detail

/// Cross-correlation of x[Ci x H x W] with kernel[Co x Ci x k x k].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(kernel, 4, "conv2d");
  const std::size_t ci = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t co = kernel.shape()[0], k = kernel.shape()[2];
  if (kernel.shape()[1] != ci || kernel.shape()[3] != k) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) + " does not fit input " +
                         shape_string(x.shape()));
  }
  if (k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  const std::size_t span_h = h + 2 * padding, span_w = w + 2 * padding;
  if (span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0) {
    throw ConfigError("conv2d: output size is not integral for input " + shape_string(x.shape()) +
                      ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
                      ", padding " + std::to_string(padding));
  }
  const std::size_t ho = (span_h - k) / stride + 1, wo = (span_w - k) / stride + 1;
  const std::size_t patch = ci * k * k, pixels = ho * wo;

  auto cols = std::make_shared<RowMatrix<T>>(patch, pixels);
  detail::im2col(x.value().data().data(), ci, h, w, k, stride, padding, ho, wo, cols->data());

  Tensor<T> out(Shape{co, ho, wo});
  Eigen::Map<const RowMatrix<T>> kmat(kernel.value().data().data(), static_cast<Eigen::Index>(co),
                                      static_cast<Eigen::Index>(patch));
  Eigen::Map<RowMatrix<T>>(out.data().data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(pixels))
      .noalias() = kmat * (*cols);

  return make_op<T>("conv2d", std::move(out), {x, kernel},
                    [cols, ci, h, w, co, k, stride, padding, ho, wo, patch, pixels](Node<T>& n) {
                      Eigen::Map<const RowMatrix<T>> up(n.grad.data().data(), static_cast<Eigen::Index>(co),
                                                        static_cast<Eigen::Index>(pixels));
                      auto& X = n.inputs[0];
                      auto& K = n.inputs[1];
                      if (K->requires_grad) {
                        Eigen::Map<RowMatrix<T>>(K->grad_buffer().data().data(), static_cast<Eigen::Index>(co),
                                                 static_cast<Eigen::Index>(patch))
                            .noalias() += up * cols->transpose();
                      }
                      if (X->requires_grad) {
                        Eigen::Map<const RowMatrix<T>> kmat(K->value.data().data(), static_cast<Eigen::Index>(co),
                                                            static_cast<Eigen::Index>(patch));
                        RowMatrix<T> dcols = kmat.transpose() * up;
                        detail::col2im(dcols.data(), ci, h, w, k, stride, padding, ho, wo,
                                       X->grad_buffer().data().data());
                      }
                    });
}

/// Non-overlapping window average, x[C x H x W] -> [C x H/window x W/window].
template <class T>
Var<T> avg_pool2d(const Var<T>& x, std::size_t window = 2) {
  detail::require_rank(x, 3, "avg_pool2d");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (window == 0 || h % window != 0 || w % window != 0) {
    throw ConfigError("avg_pool2d: " + shape_string(x.shape()) + " is not divisible by window " +
                      std::to_string(window));
  }
  const std::size_t ho = h / window, wo = w / window;
  const T inv = T(1) / static_cast<T>(window * window);
  Tensor<T> out(Shape{c, ho, wo});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out(ch, y / window, xx / window) += xv(ch, y, xx) * inv;
  return make_op<T>("avg_pool2d", std::move(out), {x}, [window, inv](Node<T>& n) {
    auto& g = n.inputs[0]->grad_buffer();
    const std::size_t c = g.dim(0), h = g.dim(1), w = g.dim(2);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) g(ch, y, xx) += n.grad(ch, y / window, xx / window) * inv;
  });
}

namespace detail {

template <class T>
Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> channel_map(T* base, std::size_t ch, std::size_t hw) {
  return {base + ch * hw, static_cast<Eigen::Index>(hw)};
}

template <class T>
Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> channel_map(const T* base, std::size_t ch, std::size_t hw) {
  return {base + ch * hw, static_cast<Eigen::Index>(hw)};
}

}  // namespace detail

/// Running per-channel statistics owned by a normalization layer.
template <class T>
struct NormStats {
  Tensor<T> mean;
  Tensor<T> var;

  static NormStats identity(std::size_t channels) {
    return {Tensor<T>(Shape{channels}, T(0)), Tensor<T>(Shape{channels}, T(1))};
  }
};

enum class NormMode {
  kBatch,   ///< normalize with the statistics of the current input
  kFrozen,  ///< normalize with the running statistics, which are not touched
};

/// Per-channel affine normalization of x[C x H x W].
///
/// kBatch uses the current input's mean and biased variance over H x W and,
/// when `update` is non-null, folds them into the running statistics with
/// the given momentum (unbiased variance). kFrozen is a fixed affine map.
template <class T>
Var<T> channel_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, NormStats<T>& stats,
                    NormMode mode, bool update = false, T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require_rank(x, 3, "channel_norm");
  const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  if (gamma.size() != c || beta.size() != c || stats.mean.size() != c || stats.var.size() != c) {
    throw DimensionError("channel_norm: parameters do not match " + std::to_string(c) + " channels");
  }
  std::vector<T> mu(c), inv_std(c);
  const auto xd = x.value().data();
  if (mode == NormMode::kBatch) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const auto xc = detail::channel_map(xd.data(), ch, hw);
      const T m = xc.sum() / static_cast<T>(hw);
      const T ss = (xc.array() - m).square().sum();
      const T var = ss / static_cast<T>(hw);
      mu[ch] = m;
      inv_std[ch] = T(1) / std::sqrt(var + eps);
      if (update) {
        const T unbiased = hw > 1 ? ss / static_cast<T>(hw - 1) : var;
        stats.mean[ch] = (T(1) - momentum) * stats.mean[ch] + momentum * m;
        stats.var[ch] = (T(1) - momentum) * stats.var[ch] + momentum * unbiased;
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.mean[ch];
      inv_std[ch] = T(1) / std::sqrt(stats.var[ch] + eps);
    }
  }
  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    auto xh = detail::channel_map(xhat.data().data(), ch, hw);
    xh = (detail::channel_map(xd.data(), ch, hw).array() - mu[ch]) * inv_std[ch];
    detail::channel_map(out.data().data(), ch, hw) = xh.array() * gv[ch] + bv[ch];
  }
  return make_op<T>(
      "channel_norm", std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), mode, c, hw](Node<T>& n) {
        const auto up = n.grad.data();
        auto& X = n.inputs[0];
        auto& G = n.inputs[1];
        auto& B = n.inputs[2];
        std::vector<T> sum_up(c, T(0)), sum_up_xhat(c, T(0));
        for (std::size_t ch = 0; ch < c; ++ch) {
          const auto u = detail::channel_map(up.data(), ch, hw);
          sum_up[ch] = u.sum();
          sum_up_xhat[ch] = u.dot(detail::channel_map(xhat.data().data(), ch, hw));
        }
        if (G->requires_grad) {
          auto& g = G->grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_up_xhat[ch];
        }
        if (B->requires_grad) {
          auto& g = B->grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_up[ch];
        }
        if (X->requires_grad) {
          auto& g = X->grad_buffer();
          const auto gv = G->value.data();
          const T inv_n = T(1) / static_cast<T>(hw);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T k = gv[ch] * inv_std[ch];
            auto gc = detail::channel_map(g.data().data(), ch, hw);
            const auto u = detail::channel_map(up.data(), ch, hw);
            if (mode == NormMode::kBatch) {
              const auto xh = detail::channel_map(xhat.data().data(), ch, hw);
              gc.array() += k * (u.array() - sum_up[ch] * inv_n - xh.array() * (sum_up_xhat[ch] * inv_n));
            } else {
              gc.array() += k * u.array();
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckReport {
  std::vector<double> errors;  ///< per coordinate
  double max_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = false;
};

/// Compare the analytic gradient of scalar f at x against central
/// differences (f(x+h) - f(x-h)) / 2h, coordinate by coordinate.
///
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|):
/// relative for gradients of magnitude >= 1, absolute below that, so that
/// coordinates whose true gradient is 0 do not divide round-off by zero.
inline GradCheckReport grad_check(const std::function<Var<double>(const Var<double>&)>& f,
                                  const Tensor<double>& x, double h = 1e-5, double tol = 1e-5) {
  auto param = Var<double>::parameter(x);
  auto y = f(param);
  if (y.size() != 1) throw DimensionError("grad_check: function must return a scalar");
  if (!std::isfinite(y.value()[0])) throw NumericError("grad_check: non-finite function value at x");
  backward(y);
  const Tensor<double> analytic = param.grad();

  GradCheckReport report;
  report.errors.resize(x.size());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double fp = f(Var<double>::constant(probe)).value()[0];
    probe[i] = saved - h;
    const double fm = f(Var<double>::constant(probe)).value()[0];
    probe[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
      throw NumericError("grad_check: non-finite gradient at coordinate " + std::to_string(i));
    }
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    const double err = std::abs(analytic[i] - numeric) / denom;
    report.errors[i] = err;
    if (err > report.max_error) {
      report.max_error = err;
      report.worst_index = i;
    }
  }
  report.passed = report.max_error < tol;
  return report;
}

}  // namespace simipu::diff
