#include "pointnorm/geometry.hpp"

#include <cmath>
#include <string>

#include "pointnorm/kernels.hpp"
#include "pointnorm/ops.hpp"

namespace pointnorm {

template <typename T>
std::size_t fps_seed(std::span<const T> coords, SeedRule rule, std::size_t index) {
  const std::size_t n = coords.size() / 3;
  if (n == 0) throw ArgumentError("fps_seed: empty cloud");
  if (rule == SeedRule::Index) {
    if (index >= n) throw ArgumentError("fps_seed: seed index " + std::to_string(index) + " >= " + std::to_string(n));
    return index;
  }
  T centroid[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) centroid[c] += coords[3 * i + c];
  }
  for (auto& c : centroid) c /= static_cast<T>(n);
  std::vector<T> dist(n);
  kernels::squared_distances<T>(coords, centroid, dist);
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (dist[i] > dist[best]) best = i;
  }
  return best;
}

template <typename T>
std::vector<std::size_t> farthest_point_sample(std::span<const T> coords, std::size_t m, SeedRule rule,
                                               std::size_t seed_index) {
  const std::size_t n = coords.size() / 3;
  if (coords.size() % 3 != 0) throw DimensionError("farthest_point_sample: coords length not a multiple of 3");
  if (m < 1 || m > n) {
    throw ArgumentError("farthest_point_sample: need 1 <= m <= n, got m=" + std::to_string(m) +
                        " n=" + std::to_string(n));
  }
  return kernels::farthest_point_sample<T>(coords, m, fps_seed(coords, rule, seed_index));
}

template <typename T>
std::vector<std::size_t> knn_group(std::span<const T> coords, std::span<const std::size_t> sample_indices,
                                   std::size_t k) {
  const std::size_t n = coords.size() / 3;
  if (k < 1 || k > n) {
    throw ArgumentError("knn_group: need 1 <= k <= n, got k=" + std::to_string(k) + " n=" + std::to_string(n));
  }
  for (std::size_t s : sample_indices) {
    if (s >= n) throw IndexError("knn_group: sample index " + std::to_string(s) + " >= " + std::to_string(n));
  }
  return kernels::knn<T>(coords, sample_indices, k);
}

template <typename T>
GroupedSet<T> gather_groups(const Tensor<T>& features, std::span<const std::size_t> sample_indices,
                            std::span<const std::size_t> neighbor_indices, std::size_t k) {
  if (features.rank() != 2) throw DimensionError("gather_groups: features must be [n, d], got " + to_string(features.shape()));
  const std::size_t m = sample_indices.size();
  if (neighbor_indices.size() != m * k) {
    throw DimensionError("gather_groups: " + std::to_string(neighbor_indices.size()) + " neighbor indices for m=" +
                         std::to_string(m) + " k=" + std::to_string(k));
  }
  const Shape batched{1, features.dim(0), features.dim(1)};
  const auto feats = reshape(features, batched);
  GroupedSet<T> out;
  out.sample_indices.assign(sample_indices.begin(), sample_indices.end());
  out.neighbor_indices.assign(neighbor_indices.begin(), neighbor_indices.end());
  out.k = k;
  out.x_s = reshape(gather_rows(feats, sample_indices, {1, m}), {m, features.dim(1)});
  out.x_g = reshape(gather_rows(feats, neighbor_indices, {1, m, k}), {m, k, features.dim(1)});
  return out;
}

template <typename T>
std::vector<T> normalize_unit_sphere(std::span<const T> coords) {
  const std::size_t n = coords.size() / 3;
  std::vector<T> out(coords.begin(), coords.end());
  if (n == 0) return out;
  double centroid[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) centroid[c] += coords[3 * i + c];
  }
  for (auto& c : centroid) c /= static_cast<double>(n);
  double max_norm = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = static_cast<double>(coords[3 * i + c]) - centroid[c];
      sq += v * v;
    }
    max_norm = std::max(max_norm, std::sqrt(sq));
  }
  const double scale = max_norm > 0 ? 1.0 / max_norm : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      out[3 * i + c] = static_cast<T>((static_cast<double>(coords[3 * i + c]) - centroid[c]) * scale);
    }
  }
  return out;
}

#define POINTNORM_INSTANTIATE_GEOMETRY(T)                                                                      \
  template std::size_t fps_seed<T>(std::span<const T>, SeedRule, std::size_t);                                 \
  template std::vector<std::size_t> farthest_point_sample<T>(std::span<const T>, std::size_t, SeedRule,        \
                                                             std::size_t);                                     \
  template std::vector<std::size_t> knn_group<T>(std::span<const T>, std::span<const std::size_t>, std::size_t); \
  template GroupedSet<T> gather_groups<T>(const Tensor<T>&, std::span<const std::size_t>,                      \
                                          std::span<const std::size_t>, std::size_t);                          \
  template std::vector<T> normalize_unit_sphere<T>(std::span<const T>);

POINTNORM_INSTANTIATE_GEOMETRY(float)
POINTNORM_INSTANTIATE_GEOMETRY(double)

#undef POINTNORM_INSTANTIATE_GEOMETRY

}  // namespace pointnorm
