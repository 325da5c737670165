#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <utility>

#include "dcg/tensor.hpp"

namespace dcg {

template <class T>
class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the Tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

// Gradients of a scalar loss, keyed by the id of each requires-grad leaf on the tape.
template <class T>
class GradientMap {
 public:
  bool contains(Var<T> v) const { return grads_.count(v.id) != 0; }
  const Tensor<T>& at(Var<T> v) const {
    auto it = grads_.find(v.id);
    if (it == grads_.end()) throw std::out_of_range("gradient: variable is not a requires-grad leaf");
    return it->second;
  }
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }
  void insert(std::size_t id, Tensor<T> g) { grads_.emplace(id, std::move(g)); }

 private:
  std::map<std::size_t, Tensor<T>> grads_;
};

// Records primitive applications in creation order, which is a topological
// order: a node's parents always have smaller ids.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, true, {}); }
  Var<T> variable(Tensor<T> v) { return push(std::move(v), true, true, {}); }

  Var<T> record(Tensor<T> v, std::initializer_list<Var<T>> parents, Backward bw) {
    bool rg = false;
    for (auto p : parents) rg = rg || nodes_[p.id].requires_grad;
    return push(std::move(v), rg, false, rg ? std::move(bw) : Backward{});
  }
  Var<T> record(Tensor<T> v, const std::vector<Var<T>>& parents, Backward bw) {
    bool rg = false;
    for (auto p : parents) rg = rg || nodes_[p.id].requires_grad;
    return push(std::move(v), rg, false, rg ? std::move(bw) : Backward{});
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return visits_; }

  // Gradient accumulator for v, or nullptr when v does not require grad.
  Tensor<T>* grad_buffer(Var<T> v) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }

  void accumulate(Var<T> v, const Tensor<T>& g) {
    if (auto* buf = grad_buffer(v)) *buf += g;
  }

  GradientMap<T> gradient(Var<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("gradient: loss belongs to a different tape");
    if (value(loss).size() != 1)
      throw ShapeError("gradient: loss must be scalar, got shape " + shape_str(value(loss).shape()));
    for (auto& n : nodes_) n.grad = Tensor<T>();
    visits_ = 0;
    if (auto* g = grad_buffer(loss)) (*g)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.leaf || n.grad.empty() || !n.backward) continue;
      ++visits_;
      const Tensor<T> g = n.grad;
      n.backward(*this, g);
    }
    GradientMap<T> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      auto& n = nodes_[i];
      if (!n.leaf || !n.requires_grad) continue;
      out.insert(i, n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad);
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool leaf = false;
    Backward backward;
  };

  Var<T> push(Tensor<T> v, bool rg, bool leaf, Backward bw) {
    nodes_.push_back(Node{std::move(v), Tensor<T>(), rg, leaf, std::move(bw)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

// ---------------------------------------------------------------------------
// Primitives. Each computes its forward value and records a closure that
// accumulates parent gradients.

namespace detail {

enum class Broadcast { same, row, scalar };

template <class T>
Broadcast broadcast_kind(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::same;
  if (b.size() == 1 && !a.empty() && a.back() == b[0]) return Broadcast::row;
  if (shape_count(b) == 1 && b.size() <= 1) return Broadcast::scalar;
  shape_fail(op, a, b);
}

template <class T>
std::size_t bindex(Broadcast k, std::size_t i, std::size_t row) {
  switch (k) {
    case Broadcast::same: return i;
    case Broadcast::row: return i % row;
    case Broadcast::scalar: return 0;
  }
  return 0;
}

template <class T, class Fwd, class Da, class Db>
Var<T> binary(const char* op, Var<T> a, Var<T> b, Fwd fwd, Da da, Db db) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = broadcast_kind<T>(op, av.shape(), bv.shape());
  const std::size_t row = bv.size();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[bindex<T>(kind, i, row)]);
  return a.tape->record(std::move(out), {a, b}, [a, b, kind, row, da, db](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * da(av[i], bv[bindex<T>(kind, i, row)]);
    if (auto* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i)
        (*gb)[bindex<T>(kind, i, row)] += g[i] * db(av[i], bv[bindex<T>(kind, i, row)]);
  });
}

// Row view helpers: treat a tensor as [rows, last].
inline std::pair<std::size_t, std::size_t> rows_cols(const Shape& s) {
  if (s.empty()) return {1, 1};
  const std::size_t cols = s.back();
  return {cols ? shape_count(s) / cols : 0, cols};
}

inline Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - (s.empty() ? 0 : 1)); }

}  // namespace detail

// Elementwise map; `deriv(x, y)` sees both input and output.
template <class T, class Fwd, class Deriv>
Var<T> map_unary(Var<T> a, Fwd fwd, Deriv deriv) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  Tensor<T> saved = out;
  return a.tape->record(std::move(out), {a}, [a, deriv, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
    auto* ga = t.grad_buffer(a);
    if (!ga) return;
    const auto& x = t.value(a);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * deriv(x[i], saved[i]);
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary<T>("add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
                           [](T, T) { return T{1}; });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary<T>("sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
                           [](T, T) { return T{-1}; });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary<T>("mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                           [](T x, T) { return x; });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  return detail::binary<T>("div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T{1} / y; },
                           [](T x, T y) { return -x / (y * y); });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  return map_unary(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
  return map_unary(a, [c](T x) { return x + c; }, [](T, T) { return T{1}; });
}

template <class T>
Var<T> relu(Var<T> a) {
  return map_unary(a, [](T x) { return x > T{0} ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <class T>
Var<T> tanh(Var<T> a) {
  return map_unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  return map_unary(
      a,
      [](T x) {
        if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
        const T e = std::exp(x);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> sin(Var<T> a) {
  return map_unary(a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <class T>
Var<T> cos(Var<T> a) {
  return map_unary(a, [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}

template <class T>
Var<T> exp(Var<T> a) {
  return map_unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(Var<T> a) {
  return map_unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <class T>
Var<T> square(Var<T> a) {
  return map_unary(a, [](T x) { return x * x; }, [](T x, T) { return T{2} * x; });
}

// Derivative is zero outside [lo, hi].
template <class T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return map_unary(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T{1} : T{0}; });
}

template <class T>
Var<T> reshape(Var<T> a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value().values()) s += v;
  return a.tape->record(Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.grad_buffer(a))
      for (auto& v : ga->values()) v += g[0];
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

// Reduces one axis.
template <class T>
Var<T> sum(Var<T> a, std::size_t axis) {
  const auto& s = a.value().shape();
  if (axis >= s.size()) throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(os);
  const auto& av = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * n + k) * inner + i];
  return a.tape->record(std::move(out), {a}, [a, outer, inner, n](Tape<T>& t, const Tensor<T>& g) {
    auto* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) (*ga)[(o * n + k) * inner + i] += g[o * inner + i];
  });
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.extent(1) != bv.extent(0)) shape_fail("matmul", av.shape(), bv.shape());
  const std::size_t n = av.extent(0), k = av.extent(1), m = bv.extent(1);
  Tensor<T> out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T x = av[i * k + p];
      if (x == T{0}) continue;
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += x * bv[p * m + j];
    }
  return a.tape->record(std::move(out), {a, b}, [a, b, n, k, m](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T s{0};
          for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * bv[p * m + j];
          (*ga)[i * k + p] += s;
        }
    if (auto* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T x = av[i * k + p];
          if (x == T{0}) continue;
          for (std::size_t j = 0; j < m; ++j) (*gb)[p * m + j] += x * g[i * m + j];
        }
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  const auto& av = a.value();
  if (av.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(av.shape()));
  const std::size_t r = av.extent(0), c = av.extent(1);
  Tensor<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return a.tape->record(std::move(out), {a}, [a, r, c](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[j * r + i];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].value().shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (auto& p : parts) {
    const Shape& s = p.value().shape();
    Shape x = s, y = s0;
    if (s.size() != s0.size()) shape_fail("concat", s0, s);
    x[axis] = y[axis] = 0;
    if (x != y) shape_fail("concat", s0, s);
    widths.push_back(s[axis]);
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  Tensor<T> out(os);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data() + o * widths[p] * inner, widths[p] * inner, out.data() + (o * total + offset) * inner);
    offset += widths[p];
  }
  auto parts_copy = parts;
  return parts[0].tape->record(std::move(out), parts, [parts_copy, widths, outer, inner, total](Tape<T>& t, const Tensor<T>& g) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts_copy.size(); ++p) {
      if (auto* gp = t.grad_buffer(parts_copy[p]))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[p] * inner; ++i)
            (*gp)[o * widths[p] * inner + i] += g[(o * total + offset) * inner + i];
      offset += widths[p];
    }
  });
}

// Contiguous range [start, start + len) along one axis.
template <class T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& s = a.value().shape();
  if (axis >= s.size() || start + len > s[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") invalid on axis " + std::to_string(axis) + " of " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape os = s;
  os[axis] = len;
  Tensor<T> out(os);
  const auto& av = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.data() + (o * n + start) * inner, len * inner, out.data() + o * len * inner);
  return a.tape->record(std::move(out), {a}, [a, outer, inner, n, start, len](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len * inner; ++i) (*ga)[(o * n + start) * inner + i] += g[o * len * inner + i];
  });
}

// Softmax over the last axis, max-subtracted.
template <class T>
Var<T> softmax(Var<T> a) {
  const auto& av = a.value();
  auto [rows, cols] = detail::rows_cols(av.shape());
  if (cols == 0 || av.rank() == 0) throw ShapeError("softmax: empty axis in shape " + shape_str(av.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * cols;
    T* y = out.data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T z{0};
    for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  Tensor<T> saved = out;
  return a.tape->record(std::move(out), {a}, [a, rows, cols, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
    auto* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * saved[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += saved[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

// Softmax over the entries of each last-axis row where mask != 0; other entries are 0.
template <class T>
Var<T> masked_softmax(Var<T> a, const Tensor<T>& mask) {
  const auto& av = a.value();
  if (mask.shape() != av.shape()) shape_fail("masked_softmax", av.shape(), mask.shape());
  auto [rows, cols] = detail::rows_cols(av.shape());
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (mask[r * cols + c] != T{0}) mx = std::max(mx, av[r * cols + c]);
    if (!std::isfinite(mx)) throw ShapeError("masked_softmax: row " + std::to_string(r) + " has empty support");
    T z{0};
    for (std::size_t c = 0; c < cols; ++c)
      if (mask[r * cols + c] != T{0}) z += (out[r * cols + c] = std::exp(av[r * cols + c] - mx));
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  Tensor<T> saved = out;
  return a.tape->record(std::move(out), {a}, [a, rows, cols, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
    auto* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * saved[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += saved[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

template <class T>
Var<T> log_softmax(Var<T> a) {
  const auto& av = a.value();
  auto [rows, cols] = detail::rows_cols(av.shape());
  if (cols == 0 || av.rank() == 0) throw ShapeError("log_softmax: empty axis in shape " + shape_str(av.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T z{0};
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    const T lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[c] - lz;
  }
  Tensor<T> saved = out;
  return a.tape->record(std::move(out), {a}, [a, rows, cols, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
    auto* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      T gs{0};
      for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        (*ga)[r * cols + c] += g[r * cols + c] - std::exp(saved[r * cols + c]) * gs;
    }
  });
}

// log(sum(exp(x))) over the last axis.
template <class T>
Var<T> logsumexp(Var<T> a) {
  const auto& av = a.value();
  auto [rows, cols] = detail::rows_cols(av.shape());
  if (cols == 0 || av.rank() == 0) throw ShapeError("logsumexp: empty axis in shape " + shape_str(av.shape()));
  Tensor<T> out(detail::drop_last(av.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T z{0};
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    out[r] = mx + std::log(z);
  }
  Tensor<T> saved = out;
  return a.tape->record(std::move(out), {a}, [a, rows, cols, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
    auto* ga = t.grad_buffer(a);
    if (!ga) return;
    const auto& av = t.value(a);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += g[r] * std::exp(av[r * cols + c] - saved[r]);
  });
}

// Euclidean norm: of the whole vector for rank 1, of each row for rank 2.
template <class T>
Var<T> l2norm(Var<T> a) {
  const auto& av = a.value();
  if (av.rank() != 1 && av.rank() != 2) throw ShapeError("l2norm: expected rank 1 or 2, got " + shape_str(av.shape()));
  auto [rows, cols] = detail::rows_cols(av.shape());
  Tensor<T> out(av.rank() == 1 ? Shape{} : Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    T s{0};
    for (std::size_t c = 0; c < cols; ++c) s += av[r * cols + c] * av[r * cols + c];
    out[r] = std::sqrt(s);
  }
  Tensor<T> saved = out;
  return a.tape->record(std::move(out), {a}, [a, rows, cols, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
    auto* ga = t.grad_buffer(a);
    if (!ga) return;
    const auto& av = t.value(a);
    for (std::size_t r = 0; r < rows; ++r) {
      if (saved[r] == T{0}) continue;
      for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += g[r] * av[r * cols + c] / saved[r];
    }
  });
}

// Pairwise cosine similarity of the rows of V ([n, d] -> [n, n]). Rows whose
// norm is below `eps` have similarity 0 with everything, themselves included.
template <class T>
Var<T> cosine_matrix(Var<T> v, T eps = T(1e-12)) {
  const auto& vv = v.value();
  if (vv.rank() != 2) throw ShapeError("cosine_matrix: expected rank 2, got " + shape_str(vv.shape()));
  const std::size_t n = vv.extent(0), d = vv.extent(1);
  Tensor<T> unit(vv.shape());
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s{0};
    for (std::size_t c = 0; c < d; ++c) s += vv[i * d + c] * vv[i * d + c];
    norms[i] = std::sqrt(s);
    if (norms[i] < eps) continue;
    for (std::size_t c = 0; c < d; ++c) unit[i * d + c] = vv[i * d + c] / norms[i];
  }
  Tensor<T> out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T s{0};
      for (std::size_t c = 0; c < d; ++c) s += unit[i * d + c] * unit[j * d + c];
      out[i * n + j] = s;
    }
  return v.tape->record(std::move(out), {v}, [v, n, d, eps, unit = std::move(unit), norms = std::move(norms)](Tape<T>& t, const Tensor<T>& g) {
    auto* gv = t.grad_buffer(v);
    if (!gv) return;
    for (std::size_t i = 0; i < n; ++i) {
      if (norms[i] < eps) continue;
      std::vector<T> du(d, T{0});
      for (std::size_t j = 0; j < n; ++j) {
        const T w = g[i * n + j] + g[j * n + i];
        if (w == T{0}) continue;
        for (std::size_t c = 0; c < d; ++c) du[c] += w * unit[j * d + c];
      }
      T proj{0};
      for (std::size_t c = 0; c < d; ++c) proj += du[c] * unit[i * d + c];
      for (std::size_t c = 0; c < d; ++c) (*gv)[i * d + c] += (du[c] - unit[i * d + c] * proj) / norms[i];
    }
  });
}

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x: [N, C, H, W], w: [O, C, KH, KW], b: [O]. Zero padding.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, Conv2dAttrs attrs = {}) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.extent(1) != wv.extent(1)) shape_fail("conv2d", xv.shape(), wv.shape());
  if (bv.rank() != 1 || bv.extent(0) != wv.extent(0)) shape_fail("conv2d", wv.shape(), bv.shape());
  const std::size_t N = xv.extent(0), C = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
  const std::size_t O = wv.extent(0), KH = wv.extent(2), KW = wv.extent(3);
  const std::size_t s = attrs.stride, p = attrs.padding;
  if (s == 0 || H + 2 * p < KH || W + 2 * p < KW) shape_fail("conv2d", xv.shape(), wv.shape());
  const std::size_t OH = (H + 2 * p - KH) / s + 1, OW = (W + 2 * p - KW) / s + 1;
  Tensor<T> out(Shape{N, O, OH, OW});
  // Visits every valid (output, kernel tap, input) triple.
  auto for_taps = [=](auto&& fn) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < KH; ++ky)
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const std::size_t widx = ((o * C + c) * KH + ky) * KW + kx;
              for (std::size_t oy = 0; oy < OH; ++oy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - static_cast<std::ptrdiff_t>(p);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t ox = 0; ox < OW; ++ox) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - static_cast<std::ptrdiff_t>(p);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                  const std::size_t xidx = ((n * C + c) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix);
                  const std::size_t oidx = ((n * O + o) * OH + oy) * OW + ox;
                  fn(oidx, widx, xidx);
                }
              }
            }
  };
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      std::fill_n(out.data() + (n * O + o) * OH * OW, OH * OW, bv[o]);
  for_taps([&](std::size_t oi, std::size_t wi, std::size_t xi) { out[oi] += wv[wi] * xv[xi]; });
  return x.tape->record(std::move(out), {x, w, b}, [x, w, b, N, O, OH, OW, for_taps](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    auto* gx = t.grad_buffer(x);
    auto* gw = t.grad_buffer(w);
    if (gx || gw)
      for_taps([&](std::size_t oi, std::size_t wi, std::size_t xi) {
        if (gx) (*gx)[xi] += g[oi] * wv[wi];
        if (gw) (*gw)[wi] += g[oi] * xv[xi];
      });
    if (auto* gb = t.grad_buffer(b))
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t i = 0; i < OH * OW; ++i) (*gb)[o] += g[(n * O + o) * OH * OW + i];
  });
}

// Non-overlapping max pooling (kernel == stride), floor on ragged edges. Ties go to the first element.
template <class T>
Var<T> maxpool2d(Var<T> x, std::size_t k = 2) {
  const auto& xv = x.value();
  if (xv.rank() != 4 || k == 0 || xv.extent(2) < k || xv.extent(3) < k)
    throw ShapeError("maxpool2d: cannot pool shape " + shape_str(xv.shape()) + " with kernel " + std::to_string(k));
  const std::size_t NC = xv.extent(0) * xv.extent(1), H = xv.extent(2), W = xv.extent(3);
  const std::size_t OH = H / k, OW = W / k;
  Tensor<T> out(Shape{xv.extent(0), xv.extent(1), OH, OW});
  std::vector<std::size_t> arg(out.size());
  for (std::size_t nc = 0; nc < NC; ++nc)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = (nc * H + oy * k) * W + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = (nc * H + oy * k + dy) * W + ox * k + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t oi = (nc * OH + oy) * OW + ox;
        out[oi] = xv[best];
        arg[oi] = best;
      }
  return x.tape->record(std::move(out), {x}, [x, arg = std::move(arg)](Tape<T>& t, const Tensor<T>& g) {
    if (auto* gx = t.grad_buffer(x))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[arg[i]] += g[i];
  });
}

enum class NormMode { train, eval };

template <class T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
};

// Per-channel normalization of x: [N, C, ...]. Train mode uses biased batch
// statistics (reported through `observed`); eval mode uses `running`.
template <class T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, NormMode mode, const BatchNormStats<T>& running,
                 BatchNormStats<T>* observed = nullptr, T eps = T(1e-5)) {
  const auto& xv = x.value();
  if (xv.rank() < 2 || xv.extent(0) < 1) throw ShapeError("batchnorm: expected [N, C, ...] with N >= 1, got " + shape_str(xv.shape()));
  const std::size_t N = xv.extent(0), C = xv.extent(1);
  const std::size_t inner = xv.size() / (N * C);
  if (gamma.value().shape() != Shape{C}) shape_fail("batchnorm", xv.shape(), gamma.value().shape());
  if (beta.value().shape() != Shape{C}) shape_fail("batchnorm", xv.shape(), beta.value().shape());
  const std::size_t count = N * inner;
  Tensor<T> mu(Shape{C}), var(Shape{C});
  if (mode == NormMode::train) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < inner; ++i) mu[c] += xv[(n * C + c) * inner + i];
    for (std::size_t c = 0; c < C; ++c) mu[c] /= static_cast<T>(count);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < inner; ++i) {
          const T d = xv[(n * C + c) * inner + i] - mu[c];
          var[c] += d * d;
        }
    for (std::size_t c = 0; c < C; ++c) var[c] /= static_cast<T>(count);
    if (observed) *observed = {mu, var};
  } else {
    if (running.mean.shape() != Shape{C} || running.var.shape() != Shape{C})
      shape_fail("batchnorm", xv.shape(), running.mean.shape());
    mu = running.mean;
    var = running.var;
  }
  Tensor<T> inv_std(Shape{C});
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = T{1} / std::sqrt(var[c] + eps);
  Tensor<T> xhat(xv.shape()), out(xv.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (n * C + c) * inner + i;
        xhat[idx] = (xv[idx] - mu[c]) * inv_std[c];
        out[idx] = gv[c] * xhat[idx] + bv[c];
      }
  return x.tape->record(std::move(out), {x, gamma, beta}, [x, gamma, beta, mode, N, C, inner, count, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& g) {
    const auto& gv = t.value(gamma);
    std::vector<T> sum_g(C, T{0}), sum_gx(C, T{0});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t idx = (n * C + c) * inner + i;
          sum_g[c] += g[idx];
          sum_gx[c] += g[idx] * xhat[idx];
        }
    if (auto* gb = t.grad_buffer(beta))
      for (std::size_t c = 0; c < C; ++c) (*gb)[c] += sum_g[c];
    if (auto* gg = t.grad_buffer(gamma))
      for (std::size_t c = 0; c < C; ++c) (*gg)[c] += sum_gx[c];
    auto* gx = t.grad_buffer(x);
    if (!gx) return;
    const T cnt = static_cast<T>(count);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t idx = (n * C + c) * inner + i;
          if (mode == NormMode::train)
            (*gx)[idx] += gv[c] * inv_std[c] * (g[idx] - sum_g[c] / cnt - xhat[idx] * sum_gx[c] / cnt);
          else
            (*gx)[idx] += gv[c] * inv_std[c] * g[idx];
        }
  });
}

// ---------------------------------------------------------------------------

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
  bool deterministic = true;

  bool passed(double tol) const { return deterministic && max_rel_error < tol; }
};

// Compares the reverse-mode gradient of a scalar function against central
// differences at `point`. `fn(tape, x)` must build a scalar loss from x.
template <class Fn>
FdReport finite_difference_check(Fn&& fn, const Tensor<double>& point, double h = 1e-5) {
  auto eval = [&](const Tensor<double>& x) {
    Tape<double> t;
    return fn(t, t.constant(x)).value().item();
  };
  FdReport report;
  report.coordinates = point.size();
  Tape<double> tape;
  Var<double> x = tape.variable(point);
  Var<double> loss = fn(tape, x);
  const auto grads = tape.gradient(loss);
  const Tensor<double>& analytic = grads.at(x);
  if (eval(point) != loss.value().item() || eval(point) != eval(point)) {
    report.deterministic = false;
    report.max_rel_error = std::numeric_limits<double>::infinity();
    return report;
  }
  Tensor<double> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + h;
    const double up = eval(probe);
    probe[i] = point[i] - h;
    const double down = eval(probe);
    probe[i] = point[i];
    const double err = relative_error(analytic[i], (up - down) / (2 * h));
    if (!(err <= report.max_rel_error)) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  return report;
}

}  // namespace dcg
