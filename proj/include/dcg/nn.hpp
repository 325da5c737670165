#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "dcg/autodiff.hpp"

namespace dcg {

using Rng = std::mt19937_64;

// splitmix64 finalizer; combines seeds into an independent stream seed.
constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }
inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

template <class T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(stddev * standard_normal(rng));
  return t;
}

template <class T>
struct Parameter {
  Tensor<T> value;
  bool trainable = true;
};

// Named tensors of a model, ordered by name so iteration is deterministic.
template <class T>
class ParameterStore {
 public:
  void add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (!params_.emplace(name, Parameter<T>{std::move(value), trainable}).second)
      throw std::invalid_argument("parameter '" + name + "' registered twice");
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const { return const_cast<ParameterStore*>(this)->at(name); }
  Tensor<T>& value(const std::string& name) { return at(name).value; }
  const Tensor<T>& value(const std::string& name) const { return at(name).value; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (auto& [_, p] : params_)
      if (p.trainable) n += p.value.size();
    return n;
  }

  template <class U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (auto& [name, p] : params_) out.add(name, p.value.template cast<U>(), p.trainable);
    return out;
  }

 private:
  std::map<std::string, Parameter<T>> params_;
};

// Lazily places parameters on one tape: trainable ones as variables, the rest
// as constants. Parameters never touched by a forward pass are never bound.
// A frozen binder places everything as constants.
template <class T>
class Binder {
 public:
  Binder(Tape<T>& tape, const ParameterStore<T>& store, bool frozen = false) : tape_(tape), store_(store), frozen_(frozen) {}

  Var<T> operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    const auto& p = store_.at(name);
    Var<T> v = p.trainable && !frozen_ ? tape_.variable(p.value) : tape_.constant(p.value);
    bound_.emplace(name, v);
    return v;
  }

  // Uses `v` for parameter `name` instead of the stored value.
  void bind(const std::string& name, Var<T> v) {
    (void)store_.at(name);
    bound_.insert_or_assign(name, v);
  }

  Var<T> constant(Tensor<T> t) { return tape_.constant(std::move(t)); }
  Tape<T>& tape() { return tape_; }
  const std::map<std::string, Var<T>>& bound() const { return bound_; }

  // Gradients by parameter name, only for bound trainable parameters.
  std::map<std::string, Tensor<T>> named(const GradientMap<T>& grads) const {
    std::map<std::string, Tensor<T>> out;
    for (auto& [name, v] : bound_)
      if (grads.contains(v)) out.emplace(name, grads.at(v));
    return out;
  }

 private:
  Tape<T>& tape_;
  const ParameterStore<T>& store_;
  bool frozen_;
  std::map<std::string, Var<T>> bound_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  std::size_t steps() const { return t_; }

  // Updates every trainable parameter that has a gradient.
  void step(ParameterStore<T>& store, const std::map<std::string, Tensor<T>>& grads, double lr) {
    ++t_;
    double scale = 1.0;
    if (cfg_.clip_norm > 0) {
      double sq = 0;
      for (auto& [_, g] : grads)
        for (T v : g.values()) sq += static_cast<double>(v) * v;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, g] : grads) {
      auto& p = store.at(name);
      if (!p.trainable) continue;
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m = Tensor<double>(g.shape());
        st.v = Tensor<double>(g.shape());
      }
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = scale * static_cast<double>(g[i]);
        st.m[i] = cfg_.beta1 * st.m[i] + (1 - cfg_.beta1) * gi;
        st.v[i] = cfg_.beta2 * st.v[i] + (1 - cfg_.beta2) * gi * gi;
        const double mh = st.m[i] / bc1, vh = st.v[i] / bc2;
        p.value[i] = static_cast<T>(p.value[i] - lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

 private:
  struct Moments {
    Tensor<double> m, v;
  };
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// x: [N, in] -> [N, out] with parameters <name>.w [in, out] and <name>.b [out].
template <class T>
Var<T> linear(Binder<T>& p, const std::string& name, Var<T> x) {
  return add(matmul(x, p(name + ".w")), p(name + ".b"));
}

template <class T>
void add_linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  store.add(name + ".w", normal_tensor<T>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  store.add(name + ".b", Tensor<T>(Shape{out}));
}

}  // namespace dcg
