#pragma once

#include <cstddef>
#include <span>
#include <vector>

// Data-parallel inner loops used by the autodiff ops and the geometry code.
// Every OpenMP kernel splits work over independent outputs only, so results
// are bit-identical for any thread count. The `reference` namespace holds
// plain serial versions that the tests compare against.
namespace pointnorm::kernels {

// Number of OpenMP threads kernels may use (1 when built without OpenMP).
int max_threads();
void set_num_threads(int threads);

// C[M,N] = alpha * op(A) * op(B) + beta * C, all row-major.
// op(A) is A[M,K] or, when trans_a, the transpose of A[K,M]; likewise for B.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          std::span<const T> a, std::span<const T> b, T beta, std::span<T> c);

// out[r, c] += bias[c] for r < rows.
template <typename T>
void add_row_bias(std::size_t rows, std::size_t cols, std::span<const T> bias, std::span<T> out);

// sums[c] = sum over rows of x[r, c] (sum of squares when `squared`).
template <typename T>
void column_sums(std::size_t rows, std::size_t cols, std::span<const T> x, std::span<T> sums,
                 bool squared = false);

// Max over the middle axis of x[outer, extent, inner]; argmax keeps the
// first occurrence.
template <typename T>
void max_middle_axis(std::size_t outer, std::size_t extent, std::size_t inner, std::span<const T> x,
                     std::span<T> out, std::span<std::size_t> argmax);

// Squared distances from one query to every point of an n x 3 cloud.
template <typename T>
void squared_distances(std::span<const T> coords, const T* query, std::span<T> out);

// Greedy farthest point sampling starting at `first`. Selected points are
// never re-selected; ties go to the lowest index.
template <typename T>
std::vector<std::size_t> farthest_point_sample(std::span<const T> coords, std::size_t m,
                                               std::size_t first);

// Row-major m x k neighbor indices, each row ascending by (distance, index).
template <typename T>
std::vector<std::size_t> knn(std::span<const T> coords, std::span<const std::size_t> queries,
                             std::size_t k);

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          std::span<const T> a, std::span<const T> b, T beta, std::span<T> c);

template <typename T>
void column_sums(std::size_t rows, std::size_t cols, std::span<const T> x, std::span<T> sums,
                 bool squared = false);

template <typename T>
void max_middle_axis(std::size_t outer, std::size_t extent, std::size_t inner, std::span<const T> x,
                     std::span<T> out, std::span<std::size_t> argmax);

template <typename T>
std::vector<std::size_t> farthest_point_sample(std::span<const T> coords, std::size_t m,
                                               std::size_t first);

template <typename T>
std::vector<std::size_t> knn(std::span<const T> coords, std::span<const std::size_t> queries,
                             std::size_t k);

}  // namespace reference
}  // namespace pointnorm::kernels
