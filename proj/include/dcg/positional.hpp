#pragma once

#include <cmath>
#include <cstdlib>
#include <span>

#include "dcg/tensor.hpp"

namespace dcg {

// Sinusoidal encoding of drawing-order position `pos`:
//   P(pos, 2d) = sin(pos / 10000^(2d/dim)),  P(pos, 2d+1) = cos(same).
template <class T = double>
std::vector<T> absolute_pe(std::size_t pos, std::size_t dim) {
  if (dim % 2 != 0) throw std::invalid_argument("absolute_pe: dim must be even, got " + std::to_string(dim));
  std::vector<T> out(dim);
  for (std::size_t d = 0; d < dim / 2; ++d) {
    const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * d) / static_cast<double>(dim));
    out[2 * d] = static_cast<T>(std::sin(angle));
    out[2 * d + 1] = static_cast<T>(std::cos(angle));
  }
  return out;
}

// Node-aligned absolute table for a graph of M patches plus the global node:
// row 0 is the fixed placeholder (zeros), row m is absolute_pe(m).
template <class T>
Tensor<T> pe_table_for_graph(std::size_t patches, std::size_t dim) {
  if (patches < 1) throw std::invalid_argument("pe_table_for_graph: need at least one patch");
  Tensor<T> table(Shape{patches + 1, dim});
  for (std::size_t m = 1; m <= patches; ++m) {
    auto row = absolute_pe<T>(m, dim);
    std::copy(row.begin(), row.end(), table.data() + m * dim);
  }
  return table;
}

// Read-only view of the learnable relative encodings: one vector per
// drawing-order offset k = |i - j| in [0, M), plus the global-node placeholder.
template <class T>
class RelativePEBank {
 public:
  RelativePEBank(const Tensor<T>& offsets, const Tensor<T>& placeholder) : offsets_(offsets), placeholder_(placeholder) {
    if (offsets.rank() != 2 || placeholder.shape() != Shape{offsets.extent(1)})
      shape_fail("RelativePEBank", offsets.shape(), placeholder.shape());
  }

  std::size_t patches() const { return offsets_.extent(0); }
  std::size_t dim() const { return offsets_.extent(1); }

  // Node indices run over 0..M with 0 the global node.
  std::span<const T> lookup(std::size_t i, std::size_t j) const {
    const std::size_t m = patches();
    if (i > m || j > m)
      throw std::out_of_range("relative_pe: node index out of range (" + std::to_string(i) + ", " + std::to_string(j) +
                              ") for M = " + std::to_string(m));
    if (i == 0 || j == 0) return {placeholder_.data(), dim()};
    const std::size_t k = i > j ? i - j : j - i;
    return {offsets_.data() + k * dim(), dim()};
  }

 private:
  const Tensor<T>& offsets_;
  const Tensor<T>& placeholder_;
};

// Constant selectors that turn a normalized adjacency Â ((M+1) x (M+1),
// flattened) into per-node offset weights:
//   offsets:     [(M+1)^2, (M+1)*M],  C(i, k)  = sum_j Â(i, j) [|i-j| = k, i, j >= 1]
//   placeholder: [(M+1)^2, (M+1)],    c0(i)    = sum_j Â(i, j) [i = 0 or j = 0]
template <class T>
struct RelativeSelectors {
  Tensor<T> offsets;
  Tensor<T> placeholder;
};

template <class T>
RelativeSelectors<T> relative_selectors(std::size_t patches) {
  const std::size_t n = patches + 1;
  RelativeSelectors<T> s{Tensor<T>(Shape{n * n, n * patches}), Tensor<T>(Shape{n * n, n})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t flat = i * n + j;
      if (i == 0 || j == 0) {
        s.placeholder(flat, i) = T{1};
      } else {
        const std::size_t k = i > j ? i - j : j - i;
        s.offsets(flat, i * patches + k) = T{1};
      }
    }
  return s;
}

}  // namespace dcg
