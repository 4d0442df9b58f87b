#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pointnorm/tensor.hpp"

namespace pointnorm {

// One labeled cloud. coords is n x 3 row-major; features (optional) is
// n x feature_dim. label < 0 means unlabeled.
struct PointCloud {
  std::vector<float> coords;
  std::vector<float> features;
  std::size_t feature_dim = 0;
  std::int64_t label = -1;

  std::size_t size() const { return coords.size() / 3; }
};

enum class SeedRule {
  // Point farthest from the centroid, ties to the lowest index. Makes the
  // selected set independent of input order.
  FarthestFromCentroid,
  // Fixed index (0 unless given), for cross-implementation comparison.
  Index,
};

template <typename T>
std::size_t fps_seed(std::span<const T> coords, SeedRule rule, std::size_t index = 0);

// Greedy farthest point sampling; returns m indices in selection order.
template <typename T>
std::vector<std::size_t> farthest_point_sample(std::span<const T> coords, std::size_t m,
                                               SeedRule rule = SeedRule::FarthestFromCentroid,
                                               std::size_t seed_index = 0);

// m x k neighbor indices (row-major) of each sample, nearest first. The
// sample itself is its own nearest neighbor unless it has duplicates with a
// lower index.
template <typename T>
std::vector<std::size_t> knn_group(std::span<const T> coords, std::span<const std::size_t> sample_indices,
                                   std::size_t k);

template <typename T>
struct GroupedSet {
  std::vector<std::size_t> sample_indices;    // m
  std::vector<std::size_t> neighbor_indices;  // m x k
  std::size_t k = 0;
  Tensor<T> x_s;  // [m, d]
  Tensor<T> x_g;  // [m, k, d]
};

// Pure gather of features [n, d]; differentiable wrt features.
template <typename T>
GroupedSet<T> gather_groups(const Tensor<T>& features, std::span<const std::size_t> sample_indices,
                            std::span<const std::size_t> neighbor_indices, std::size_t k);

// Centroid to the origin, max point norm to 1. Coincident points all map to
// the origin.
template <typename T>
std::vector<T> normalize_unit_sphere(std::span<const T> coords);

}  // namespace pointnorm
