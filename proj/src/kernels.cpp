#define EIGEN_DONT_PARALLELIZE
#include "pointnorm/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <limits>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pointnorm::kernels {

namespace {

// Row chunk for the parallel GEMM. Fixed so each chunk product (and thus
// its summation order) does not depend on the thread count.
constexpr std::size_t kGemmRowChunk = 256;
constexpr std::size_t kParallelMin = 1 << 14;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

template <typename T>
T sq_dist(const T* a, const T* b) {
  const T dx = a[0] - b[0];
  const T dy = a[1] - b[1];
  const T dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_num_threads(int threads) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, threads));
#else
  (void)threads;
#endif
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          std::span<const T> a, std::span<const T> b, T beta, std::span<T> c) {
  if (m == 0 || n == 0) return;
  Map<T> cm(c.data(), m, n);
  if (k == 0) {
    cm *= beta;
    return;
  }
  const auto a_rows = static_cast<Eigen::Index>(trans_a ? k : m);
  const auto a_cols = static_cast<Eigen::Index>(trans_a ? m : k);
  const auto b_rows = static_cast<Eigen::Index>(trans_b ? n : k);
  const auto b_cols = static_cast<Eigen::Index>(trans_b ? k : n);
  ConstMap<T> am(a.data(), a_rows, a_cols);
  ConstMap<T> bm(b.data(), b_rows, b_cols);

  const std::size_t chunks = (m + kGemmRowChunk - 1) / kGemmRowChunk;
  auto run_chunk = [&](std::size_t chunk) {
    const auto r0 = static_cast<Eigen::Index>(chunk * kGemmRowChunk);
    const auto rows = static_cast<Eigen::Index>(std::min(kGemmRowChunk, m - chunk * kGemmRowChunk));
    auto out = cm.middleRows(r0, rows);
    if (beta == T(0)) {
      out.setZero();
    } else if (beta != T(1)) {
      out *= beta;
    }
    if (!trans_a && !trans_b) {
      out.noalias() += alpha * am.middleRows(r0, rows) * bm;
    } else if (!trans_a && trans_b) {
      out.noalias() += alpha * am.middleRows(r0, rows) * bm.transpose();
    } else if (trans_a && !trans_b) {
      out.noalias() += alpha * am.middleCols(r0, rows).transpose() * bm;
    } else {
      out.noalias() += alpha * am.middleCols(r0, rows).transpose() * bm.transpose();
    }
  };
#pragma omp parallel for schedule(dynamic, 1) if (chunks > 1)
  for (std::size_t chunk = 0; chunk < chunks; ++chunk) run_chunk(chunk);
}

template <typename T>
void add_row_bias(std::size_t rows, std::size_t cols, std::span<const T> bias, std::span<T> out) {
#pragma omp parallel for schedule(static) if (rows * cols > kParallelMin)
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += bias[c];
  }
}

template <typename T>
void column_sums(std::size_t rows, std::size_t cols, std::span<const T> x, std::span<T> sums,
                 bool squared) {
  // Each thread owns a contiguous column range and sweeps the rows in order,
  // so every column is summed in the same order for any thread count.
  constexpr std::size_t kMinCols = 16;
  const std::size_t ranges =
      rows * cols > kParallelMin ? std::max<std::size_t>(1, std::min<std::size_t>(max_threads(), cols / kMinCols)) : 1;
#pragma omp parallel for schedule(static) if (ranges > 1)
  for (std::size_t part = 0; part < ranges; ++part) {
    const std::size_t c0 = cols * part / ranges;
    const std::size_t c1 = cols * (part + 1) / ranges;
    T* acc = sums.data();
    std::fill(acc + c0, acc + c1, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = x.data() + r * cols;
      if (squared) {
        for (std::size_t c = c0; c < c1; ++c) acc[c] += row[c] * row[c];
      } else {
        for (std::size_t c = c0; c < c1; ++c) acc[c] += row[c];
      }
    }
  }
}

template <typename T>
void max_middle_axis(std::size_t outer, std::size_t extent, std::size_t inner, std::span<const T> x,
                     std::span<T> out, std::span<std::size_t> argmax) {
#pragma omp parallel for schedule(static) if (outer * extent * inner > kParallelMin)
  for (std::size_t o = 0; o < outer; ++o) {
    const T* base = x.data() + o * extent * inner;
    T* dst = out.data() + o * inner;
    std::size_t* arg = argmax.data() + o * inner;
    std::copy(base, base + inner, dst);
    std::fill(arg, arg + inner, std::size_t{0});
    for (std::size_t e = 1; e < extent; ++e) {
      const T* row = base + e * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        if (row[i] > dst[i]) {
          dst[i] = row[i];
          arg[i] = e;
        }
      }
    }
  }
}

template <typename T>
void squared_distances(std::span<const T> coords, const T* query, std::span<T> out) {
  const std::size_t n = coords.size() / 3;
#pragma omp parallel for schedule(static) if (n > kParallelMin)
  for (std::size_t i = 0; i < n; ++i) out[i] = sq_dist(coords.data() + 3 * i, query);
}

template <typename T>
std::vector<std::size_t> farthest_point_sample(std::span<const T> coords, std::size_t m,
                                               std::size_t first) {
  const std::size_t n = coords.size() / 3;
  std::vector<std::size_t> picked;
  picked.reserve(m);
  if (m == 0) return picked;
  std::vector<T> min_dist(n, std::numeric_limits<T>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t current = first;
  for (std::size_t step = 0; step < m; ++step) {
    picked.push_back(current);
    taken[current] = 1;
    if (step + 1 == m) break;
    const T* q = coords.data() + 3 * current;
    std::size_t best = n;
    T best_dist = -std::numeric_limits<T>::infinity();
#pragma omp parallel if (n > kParallelMin)
    {
      std::size_t local_best = n;
      T local_dist = -std::numeric_limits<T>::infinity();
#pragma omp for schedule(static) nowait
      for (std::size_t i = 0; i < n; ++i) {
        const T d = sq_dist(coords.data() + 3 * i, q);
        if (d < min_dist[i]) min_dist[i] = d;
        if (!taken[i] && min_dist[i] > local_dist) {
          local_dist = min_dist[i];
          local_best = i;
        }
      }
#pragma omp critical
      {
        if (local_best < n &&
            (local_dist > best_dist || (local_dist == best_dist && local_best < best))) {
          best_dist = local_dist;
          best = local_best;
        }
      }
    }
    current = best;
  }
  return picked;
}

namespace {

template <typename T>
void knn_row(std::span<const T> coords, std::size_t query, std::size_t k, std::vector<T>& dist,
             std::vector<std::size_t>& order, std::size_t* out) {
  const std::size_t n = coords.size() / 3;
  const T* q = coords.data() + 3 * query;
  for (std::size_t i = 0; i < n; ++i) dist[i] = sq_dist(coords.data() + 3 * i, q);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto closer = [&](std::size_t lhs, std::size_t rhs) {
    return dist[lhs] < dist[rhs] || (dist[lhs] == dist[rhs] && lhs < rhs);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    closer);
  std::copy(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), out);
}

}  // namespace

template <typename T>
std::vector<std::size_t> knn(std::span<const T> coords, std::span<const std::size_t> queries,
                             std::size_t k) {
  const std::size_t n = coords.size() / 3;
  const std::size_t m = queries.size();
  std::vector<std::size_t> out(m * k);
#pragma omp parallel if (m * n > kParallelMin)
  {
    std::vector<T> dist(n);
    std::vector<std::size_t> order(n);
#pragma omp for schedule(static)
    for (std::size_t i = 0; i < m; ++i) knn_row(coords, queries[i], k, dist, order, out.data() + i * k);
  }
  return out;
}

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          std::span<const T> a, std::span<const T> b, T beta, std::span<T> c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = alpha * acc + (beta == T(0) ? T(0) : beta * c[i * n + j]);
    }
  }
}

template <typename T>
void column_sums(std::size_t rows, std::size_t cols, std::span<const T> x, std::span<T> sums,
                 bool squared) {
  std::fill(sums.begin(), sums.begin() + static_cast<std::ptrdiff_t>(cols), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const T v = x[r * cols + c];
      sums[c] += squared ? v * v : v;
    }
  }
}

template <typename T>
void max_middle_axis(std::size_t outer, std::size_t extent, std::size_t inner, std::span<const T> x,
                     std::span<T> out, std::span<std::size_t> argmax) {
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = 0;
      for (std::size_t e = 1; e < extent; ++e) {
        if (x[(o * extent + e) * inner + i] > x[(o * extent + best) * inner + i]) best = e;
      }
      out[o * inner + i] = x[(o * extent + best) * inner + i];
      argmax[o * inner + i] = best;
    }
  }
}

template <typename T>
std::vector<std::size_t> farthest_point_sample(std::span<const T> coords, std::size_t m,
                                               std::size_t first) {
  const std::size_t n = coords.size() / 3;
  std::vector<std::size_t> picked;
  if (m == 0) return picked;
  std::vector<T> min_dist(n, std::numeric_limits<T>::infinity());
  std::vector<char> taken(n, 0);
  picked.push_back(first);
  taken[first] = 1;
  while (picked.size() < m) {
    const T* q = coords.data() + 3 * picked.back();
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], sq_dist(coords.data() + 3 * i, q));
      if (!taken[i] && (best == n || min_dist[i] > min_dist[best])) best = i;
    }
    picked.push_back(best);
    taken[best] = 1;
  }
  return picked;
}

template <typename T>
std::vector<std::size_t> knn(std::span<const T> coords, std::span<const std::size_t> queries,
                             std::size_t k) {
  const std::size_t n = coords.size() / 3;
  std::vector<std::size_t> out(queries.size() * k);
  std::vector<T> dist(n);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < queries.size(); ++i) knn_row(coords, queries[i], k, dist, order, out.data() + i * k);
  return out;
}

}  // namespace reference

#define POINTNORM_INSTANTIATE_KERNELS(T)                                                          \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, T, std::span<const T>, \
                        std::span<const T>, T, std::span<T>);                                     \
  template void add_row_bias<T>(std::size_t, std::size_t, std::span<const T>, std::span<T>);      \
  template void column_sums<T>(std::size_t, std::size_t, std::span<const T>, std::span<T>, bool); \
  template void max_middle_axis<T>(std::size_t, std::size_t, std::size_t, std::span<const T>,     \
                                   std::span<T>, std::span<std::size_t>);                         \
  template void squared_distances<T>(std::span<const T>, const T*, std::span<T>);                 \
  template std::vector<std::size_t> farthest_point_sample<T>(std::span<const T>, std::size_t,     \
                                                             std::size_t);                        \
  template std::vector<std::size_t> knn<T>(std::span<const T>, std::span<const std::size_t>,      \
                                           std::size_t);                                          \
  template void reference::gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, T,          \
                                   std::span<const T>, std::span<const T>, T, std::span<T>);      \
  template void reference::column_sums<T>(std::size_t, std::size_t, std::span<const T>,           \
                                          std::span<T>, bool);                                    \
  template void reference::max_middle_axis<T>(std::size_t, std::size_t, std::size_t,              \
                                              std::span<const T>, std::span<T>,                   \
                                              std::span<std::size_t>);                            \
  template std::vector<std::size_t> reference::farthest_point_sample<T>(std::span<const T>,       \
                                                                        std::size_t, std::size_t); \
  template std::vector<std::size_t> reference::knn<T>(std::span<const T>,                         \
                                                      std::span<const std::size_t>, std::size_t);

POINTNORM_INSTANTIATE_KERNELS(float)
POINTNORM_INSTANTIATE_KERNELS(double)

#undef POINTNORM_INSTANTIATE_KERNELS

}  // namespace pointnorm::kernels
