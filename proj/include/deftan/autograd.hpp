#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "deftan/tensor.hpp"

namespace deftan {

//           leaf (param)      leaf (input)
//               \                /
//                \              /
//              op node -- op node -- ... -- scalar root
//
// Reverse-mode accumulation over a dynamically built graph. Each op node
// stores its value, its parents and a closure that routes the node's
// gradient into the parents' gradient buffers. backward() runs the
// closures in reverse topological order, so every buffer only ever
// receives += contributions in a fixed sequence.

template <class S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> backprop;

  Tensor<S>& ensure_grad() {
    if (!has_grad) {
      if (grad.same_shape(value))
        grad.fill(S(0));
      else
        grad = Tensor<S>(value.shape());
      has_grad = true;
    }
    return grad;
  }
};

namespace detail {
inline thread_local int nograd_depth = 0;
}

inline bool grad_enabled() { return detail::nograd_depth == 0; }

// Disables graph construction in scope; forward passes become plain
// tensor computations and temporaries are freed as references drop.
struct NoGradGuard {
  NoGradGuard() { ++detail::nograd_depth; }
  ~NoGradGuard() { --detail::nograd_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class S>
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor<S> t, bool requires_grad = false) {
    Var v;
    v.n_ = std::make_shared<Node<S>>();
    v.n_->value = std::move(t);
    v.n_->requires_grad = requires_grad && grad_enabled();
    return v;
  }

  // Builds an op node. Parents and closure are dropped when gradients are
  // globally disabled or no parent needs them.
  static Var op(Tensor<S> value, std::vector<Var> parents,
                std::function<void(Node<S>&)> backprop) {
    Var v;
    v.n_ = std::make_shared<Node<S>>();
    v.n_->value = std::move(value);
    bool need = false;
    if (grad_enabled())
      for (const Var& p : parents) need = need || p.requires_grad();
    if (need) {
      v.n_->requires_grad = true;
      v.n_->parents.reserve(parents.size());
      for (Var& p : parents) v.n_->parents.push_back(std::move(p.n_));
      v.n_->backprop = std::move(backprop);
    }
    return v;
  }

  bool defined() const { return n_ != nullptr; }
  const Tensor<S>& value() const { return n_->value; }
  Tensor<S>& mutable_value() { return n_->value; }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  bool has_grad() const { return n_->has_grad; }
  const Tensor<S>& grad() const { return n_->grad; }
  Tensor<S> grad_or_zeros() const {
    return n_->has_grad ? n_->grad : Tensor<S>(n_->value.shape());
  }
  void zero_grad() { n_->has_grad = false; }

  std::shared_ptr<Node<S>> node() const { return n_; }

  const Shape& shape() const { return n_->value.shape(); }
  int64_t numel() const { return n_->value.numel(); }

  // Reverse pass from a scalar root.
  void backward() const {
    if (numel() != 1)
      throw ParamError("backward() requires a scalar root, got shape " +
                       shape_str(shape()));
    if (!n_->requires_grad) return;

    // Iterative post-order DFS; recursion would overflow on long
    // recurrent chains.
    std::vector<Node<S>*> topo;
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<Node<S>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<S>* p = node->parents[next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        topo.push_back(node);
        stack.pop_back();
      }
    }

    n_->ensure_grad().fill(S(1));
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node<S>* node = *it;
      if (node->backprop && node->has_grad) node->backprop(*node);
    }
  }

 private:
  std::shared_ptr<Node<S>> n_;
};

// ---------------------------------------------------------------------------
// Elementwise and view ops. These are glue; the heavy kernels live in
// nn_ops.hpp.

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<S> out(a.shape());
  const S* pa = a.value().data();
  const S* pb = b.value().data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  return Var<S>::op(std::move(out), {a, b}, [](Node<S>& n) {
    const Tensor<S>& g = n.grad;
    for (int k = 0; k < 2; ++k)
      if (n.parents[k]->requires_grad) {
        Tensor<S>& pg = n.parents[k]->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i];
      }
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<S> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = a.value()[i] - b.value()[i];
  return Var<S>::op(std::move(out), {a, b}, [](Node<S>& n) {
    const Tensor<S>& g = n.grad;
    if (n.parents[0]->requires_grad) {
      Tensor<S>& pg = n.parents[0]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor<S>& pg = n.parents[1]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) pg[i] -= g[i];
    }
  });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<S> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = a.value()[i] * b.value()[i];
  return Var<S>::op(std::move(out), {a, b}, [](Node<S>& n) {
    const Tensor<S>& g = n.grad;
    const Tensor<S>& va = n.parents[0]->value;
    const Tensor<S>& vb = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<S>& pg = n.parents[0]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i] * vb[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor<S>& pg = n.parents[1]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) pg[i] += g[i] * va[i];
    }
  });
}

// a*x + b
template <class S>
Var<S> affine(const Var<S>& x, S a, S b) {
  Tensor<S> out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * x.value()[i] + b;
  return Var<S>::op(std::move(out), {x}, [a](Node<S>& n) {
    Tensor<S>& pg = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) pg[i] += a * n.grad[i];
  });
}

// |x|; subgradient 0 at the kink.
template <class S>
Var<S> eabs(const Var<S>& x) {
  Tensor<S> out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(x.value()[i]);
  return Var<S>::op(std::move(out), {x}, [](Node<S>& n) {
    const Tensor<S>& v = n.parents[0]->value;
    Tensor<S>& pg = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      S s = v[i] > S(0) ? S(1) : (v[i] < S(0) ? S(-1) : S(0));
      pg[i] += n.grad[i] * s;
    }
  });
}

template <class S>
Var<S> etanh(const Var<S>& x) {
  Tensor<S> out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(x.value()[i]);
  return Var<S>::op(std::move(out), {x}, [](Node<S>& n) {
    const Tensor<S>& y = n.value;
    Tensor<S>& pg = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      pg[i] += n.grad[i] * (S(1) - y[i] * y[i]);
  });
}

template <class S>
Var<S> esigmoid(const Var<S>& x) {
  Tensor<S> out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = S(1) / (S(1) + std::exp(-x.value()[i]));
  return Var<S>::op(std::move(out), {x}, [](Node<S>& n) {
    const Tensor<S>& y = n.value;
    Tensor<S>& pg = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      pg[i] += n.grad[i] * y[i] * (S(1) - y[i]);
  });
}

template <class S>
Var<S> mean_all(const Var<S>& x) {
  S acc = S(0);
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.value()[i];
  int64_t n = x.numel();
  Tensor<S> out(Shape{1});
  out[0] = acc / static_cast<S>(n);
  return Var<S>::op(std::move(out), {x}, [n](Node<S>& n_) {
    S g = n_.grad[0] / static_cast<S>(n);
    Tensor<S>& pg = n_.parents[0]->ensure_grad();
    for (int64_t i = 0; i < pg.numel(); ++i) pg[i] += g;
  });
}

template <class S>
Var<S> sum_all(const Var<S>& x) {
  S acc = S(0);
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.value()[i];
  Tensor<S> out(Shape{1});
  out[0] = acc;
  return Var<S>::op(std::move(out), {x}, [](Node<S>& n_) {
    S g = n_.grad[0];
    Tensor<S>& pg = n_.parents[0]->ensure_grad();
    for (int64_t i = 0; i < pg.numel(); ++i) pg[i] += g;
  });
}

template <class S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  Tensor<S> out(shape);
  std::copy(x.value().data(), x.value().data() + x.numel(), out.data());
  return Var<S>::op(std::move(out), {x}, [](Node<S>& n) {
    Tensor<S>& pg = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) pg[i] += n.grad[i];
  });
}

namespace detail {

inline Shape permuted_shape(const Shape& s, const std::vector<int>& perm) {
  Shape out(s.size());
  for (size_t i = 0; i < perm.size(); ++i)
    out[i] = s[static_cast<size_t>(perm[i])];
  return out;
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

// out[idx] = in[idx permuted]; used for forward and (with the inverse
// permutation) backward.
template <class S, class AccumOp>
void permute_copy(const Tensor<S>& in, Tensor<S>& out,
                  const std::vector<int>& perm, AccumOp accum) {
  const int r = in.rank();
  const auto in_strides = row_major_strides(in.shape());
  const Shape& os = out.shape();
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  const int64_t n = out.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t src = 0;
    for (int i = 0; i < r; ++i)
      src += idx[static_cast<size_t>(i)] *
             in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    accum(out[flat], in[src]);
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < os[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
}

}  // namespace detail

template <class S>
Var<S> permute(const Var<S>& x, std::vector<int> perm) {
  if (perm.size() != static_cast<size_t>(x.value().rank()))
    throw ShapeError("permute: rank mismatch");
  Tensor<S> out(detail::permuted_shape(x.shape(), perm));
  detail::permute_copy(x.value(), out, perm, [](S& o, S i) { o = i; });
  return Var<S>::op(std::move(out), {x}, [perm](Node<S>& n) {
    // inverse permutation routes grads back
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i)
      inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    Tensor<S>& pg = n.parents[0]->ensure_grad();
    Tensor<S> scratch(pg.shape());
    detail::permute_copy(n.grad, scratch, inv, [](S& o, S i) { o = i; });
    for (int64_t i = 0; i < pg.numel(); ++i) pg[i] += scratch[i];
  });
}

template <class S>
Var<S> narrow(const Var<S>& x, int axis, int64_t start, int64_t len) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= x.value().rank())
    throw ShapeError("narrow: bad axis");
  if (start < 0 || len <= 0 || start + len > s[static_cast<size_t>(axis)])
    throw ShapeError("narrow: range out of bounds on axis " +
                     std::to_string(axis));
  Shape os = s;
  os[static_cast<size_t>(axis)] = len;
  // view as (outer, axis, inner)
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < x.value().rank(); ++i)
    inner *= s[static_cast<size_t>(i)];
  const int64_t full = s[static_cast<size_t>(axis)];
  Tensor<S> out(os);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t a = 0; a < len; ++a)
      std::copy(x.value().data() + (o * full + start + a) * inner,
                x.value().data() + (o * full + start + a) * inner + inner,
                out.data() + (o * len + a) * inner);
  return Var<S>::op(std::move(out), {x},
                    [outer, inner, full, start, len](Node<S>& n) {
                      Tensor<S>& pg = n.parents[0]->ensure_grad();
                      for (int64_t o = 0; o < outer; ++o)
                        for (int64_t a = 0; a < len; ++a) {
                          const S* g = n.grad.data() + (o * len + a) * inner;
                          S* p = pg.data() + (o * full + start + a) * inner;
                          for (int64_t i = 0; i < inner; ++i) p[i] += g[i];
                        }
                    });
}

template <class S>
Var<S> cat(const std::vector<Var<S>>& xs, int axis) {
  if (xs.empty()) throw ParamError("cat: empty input list");
  const int r = xs[0].value().rank();
  if (axis < 0 || axis >= r) throw ShapeError("cat: bad axis");
  Shape os = xs[0].shape();
  int64_t total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (static_cast<int>(s.size()) != r)
      throw ShapeError("cat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && s[static_cast<size_t>(i)] != os[static_cast<size_t>(i)])
        throw ShapeError("cat: shape mismatch on axis " + std::to_string(i) +
                         ": " + shape_str(s) + " vs " + shape_str(os));
    total += s[static_cast<size_t>(axis)];
  }
  os[static_cast<size_t>(axis)] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= os[static_cast<size_t>(i)];

  Tensor<S> out(os);
  std::vector<int64_t> lens;
  int64_t off = 0;
  for (const auto& x : xs) {
    int64_t len = x.shape()[static_cast<size_t>(axis)];
    lens.push_back(len);
    for (int64_t o = 0; o < outer; ++o)
      std::copy(x.value().data() + o * len * inner,
                x.value().data() + (o + 1) * len * inner,
                out.data() + (o * total + off) * inner);
    off += len;
  }
  return Var<S>::op(std::move(out), xs, [outer, inner, total, lens](Node<S>& n) {
    int64_t off2 = 0;
    for (size_t k = 0; k < n.parents.size(); ++k) {
      int64_t len = lens[k];
      if (n.parents[k]->requires_grad) {
        Tensor<S>& pg = n.parents[k]->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
          const S* g = n.grad.data() + (o * total + off2) * inner;
          S* p = pg.data() + o * len * inner;
          for (int64_t i = 0; i < len * inner; ++i) p[i] += g[i];
        }
      }
      off2 += len;
    }
  });
}

}  // namespace deftan
