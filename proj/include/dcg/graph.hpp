#pragma once

#include <cmath>
#include <vector>

#include "dcg/autodiff.hpp"

namespace dcg {

constexpr double kTop1Weight = 0.5;
constexpr double kTop2Weight = 0.2;
constexpr double kGlobalWeight = 0.5;
constexpr double kZeroNorm = 1e-12;

// uᵀv / (|u| |v|); 0 when either norm is below 1e-12.
template <class T>
T cosine_similarity(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) shape_fail("cosine_similarity", Shape{u.size()}, Shape{v.size()});
  T dot{0}, nu{0}, nv{0};
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  nu = std::sqrt(nu);
  nv = std::sqrt(nv);
  if (nu < T(kZeroNorm) || nv < T(kZeroNorm)) return T{0};
  return dot / (nu * nv);
}

// Strongest and second-strongest neighbor of each row (self excluded); -1 when
// absent. Ties go to the lower index.
struct TopTwo {
  std::vector<std::ptrdiff_t> first;
  std::vector<std::ptrdiff_t> second;
};

template <class T>
TopTwo select_top_two(const Tensor<T>& scores) {
  const std::size_t n = scores.extent(0);
  TopTwo out{std::vector<std::ptrdiff_t>(n, -1), std::vector<std::ptrdiff_t>(n, -1)};
  for (std::size_t i = 0; i < n; ++i) {
    auto& a = out.first[i];
    auto& b = out.second[i];
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const T s = scores(i, j);
      const auto jj = static_cast<std::ptrdiff_t>(j);
      if (a < 0 || s > scores(i, static_cast<std::size_t>(a))) {
        b = a;
        a = jj;
      } else if (b < 0 || s > scores(i, static_cast<std::size_t>(b))) {
        b = jj;
      }
    }
  }
  return out;
}

// 0.5 / 0.2 at the top-two positions of each row, zero elsewhere.
template <class T>
Tensor<T> top_two_weights(const TopTwo& sel) {
  const std::size_t n = sel.first.size();
  Tensor<T> w(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    if (sel.first[i] >= 0) w(i, static_cast<std::size_t>(sel.first[i])) = T(kTop1Weight);
    if (sel.second[i] >= 0) w(i, static_cast<std::size_t>(sel.second[i])) = T(kTop2Weight);
  }
  return w;
}

template <class T>
Tensor<T> identity(std::size_t n) {
  Tensor<T> t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
  return t;
}

// Structural nonzeros of the masked adjacency: diagonal plus selected neighbors.
template <class T>
Tensor<T> adjacency_support(const TopTwo& sel) {
  Tensor<T> s = identity<T>(sel.first.size());
  s += top_two_weights<T>(sel);
  for (auto& v : s.values()) v = v != T{0} ? T{1} : T{0};
  return s;
}

// A(i,i) = 1, A(i,j*) = 0.5 α(i,j*), A(i,j') = 0.2 α(i,j'), else 0, with α the
// cosine similarity of patch embeddings V ([M, dim]).
template <class T>
Var<T> build_masked_adjacency(Var<T> patch_embeddings, TopTwo* selection = nullptr) {
  Var<T> alpha = cosine_matrix(patch_embeddings, T(kZeroNorm));
  TopTwo sel = select_top_two(alpha.value());
  Tape<T>& tape = *patch_embeddings.tape;
  const std::size_t m = alpha.value().extent(0);
  Var<T> a = add(mul(alpha, tape.constant(top_two_weights<T>(sel))), tape.constant(identity<T>(m)));
  if (selection) *selection = std::move(sel);
  return a;
}

template <class T>
Tensor<T> build_masked_adjacency(const Tensor<T>& patch_embeddings) {
  Tape<T> tape;
  return build_masked_adjacency(tape.constant(patch_embeddings)).value();
}

// Ã = [[0.5, 0ᵀ], [0.5·1, A]].
template <class T>
Var<T> extend_with_global(Var<T> a) {
  const auto& av = a.value();
  if (av.rank() != 2 || av.extent(0) != av.extent(1)) throw ShapeError("extend_with_global: A must be square, got " + shape_str(av.shape()));
  const std::size_t m = av.extent(0);
  Tape<T>& tape = *a.tape;
  Tensor<T> top(Shape{1, m + 1});
  top[0] = T(kGlobalWeight);
  Var<T> left = tape.constant(Tensor<T>(Shape{m, 1}, T(kGlobalWeight)));
  Var<T> lower = concat<T>({left, a}, 1);
  return concat<T>({tape.constant(std::move(top)), lower}, 0);
}

template <class T>
Tensor<T> extend_with_global(const Tensor<T>& a) {
  Tape<T> tape;
  return extend_with_global(tape.constant(a)).value();
}

// Support of Ã given the support of A.
template <class T>
Tensor<T> extend_support(const Tensor<T>& support) {
  const std::size_t m = support.extent(0);
  Tensor<T> s(Shape{m + 1, m + 1});
  s(0, 0) = T{1};
  for (std::size_t i = 0; i < m; ++i) {
    s(i + 1, 0) = T{1};
    for (std::size_t j = 0; j < m; ++j) s(i + 1, j + 1) = support(i, j);
  }
  return s;
}

// Â = D^-1/2 Ã D^-1/2 with D(i,i) the i-th row sum of Ã.
template <class T>
Var<T> sym_normalize(Var<T> a) {
  const auto& av = a.value();
  if (av.rank() != 2 || av.extent(0) != av.extent(1)) throw ShapeError("sym_normalize: matrix must be square, got " + shape_str(av.shape()));
  const std::size_t n = av.extent(0);
  Var<T> deg = sum(a, 1);
  for (std::size_t i = 0; i < n; ++i)
    if (!(deg.value()[i] > T{0}))
      throw std::domain_error("sym_normalize: row " + std::to_string(i) + " has non-positive degree");
  Var<T> inv_sqrt = exp(scale(log(deg), T(-0.5)));
  Var<T> outer = matmul(reshape(inv_sqrt, {n, 1}), reshape(inv_sqrt, {1, n}));
  return mul(a, outer);
}

template <class T>
Tensor<T> sym_normalize(const Tensor<T>& a) {
  Tape<T> tape;
  return sym_normalize(tape.constant(a)).value();
}

// Ablation where absolute PEs enter the edge coefficients:
// α'(i,j) = (v_i + P(i))ᵀ (v_j + P(j)), masked to the top two as usual.
template <class T>
Var<T> pe_in_edges_adjacency(Var<T> patch_embeddings, const Tensor<T>& pe_rows, TopTwo* selection = nullptr) {
  Tape<T>& tape = *patch_embeddings.tape;
  Var<T> w = add(patch_embeddings, tape.constant(pe_rows));
  Var<T> alpha = matmul(w, transpose(w));
  TopTwo sel = select_top_two(alpha.value());
  const std::size_t m = alpha.value().extent(0);
  Var<T> a = add(mul(alpha, tape.constant(top_two_weights<T>(sel))), tape.constant(identity<T>(m)));
  if (selection) *selection = std::move(sel);
  return a;
}

// Row-wise softmax of the extended adjacency over its structural support.
template <class T>
Var<T> softmax_over_support(Var<T> extended, const Tensor<T>& support) {
  return masked_softmax(extended, support);
}

}  // namespace dcg
