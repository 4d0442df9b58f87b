#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "pointnorm/geometry.hpp"

namespace pointnorm {

enum class CloudFormat { XyzText, PackedBinary };

CloudFormat parse_cloud_format(std::string_view name);
std::string_view cloud_format_name(CloudFormat format);
// .xyz/.txt -> text, .pcn/.bin -> binary.
CloudFormat cloud_format_for(const std::filesystem::path& path);

// xyz-text: one point per line, three whitespace-separated decimals; blank
// lines are skipped. packed-binary: "PCN1", u32 count, count float32 LE
// triples. Coordinates are returned as stored. Malformed input throws
// ParseError naming the line or byte offset.
PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format);
PointCloud load_cloud(const std::filesystem::path& path);
// Text output uses the shortest round-trip decimal form, so either format
// reloads bit-identical float32 values.
void save_cloud(const std::filesystem::path& path, const PointCloud& cloud, CloudFormat format);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory unless absolute
  std::int64_t label = 0;
  std::string split;  // "train" or "test"
};

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;

  std::string name;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;
  std::size_t points_per_cloud = 0;
  std::vector<ManifestEntry> entries;

  // Labels in range, splits valid, class_names sized num_classes. With
  // `for_training`, both splits must be nonempty. Throws ConfigError.
  void validate(bool for_training = false) const;
  std::size_t count(std::string_view split) const;

  std::string to_json() const;
  static DatasetManifest from_json(std::string_view text);
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Clouds resampled to a fixed size and normalized to the unit sphere.
struct Dataset {
  std::vector<PointCloud> clouds;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;
  std::size_t points = 0;

  std::size_t size() const { return clouds.size(); }
  bool empty() const { return clouds.empty(); }
};

// FPS down to n when larger (order-invariant seed); when smaller, keeps every
// point and fills up with draws with replacement.
PointCloud resample_to_n(const PointCloud& cloud, std::size_t n, std::mt19937_64& rng);

// Loads every entry of `split` (in parallel), resamples to `points` with a
// per-entry seed and normalizes. Throws ParseError/ConfigError.
Dataset load_split(const DatasetManifest& manifest, const std::filesystem::path& manifest_dir, std::string_view split,
                   std::size_t points, std::uint64_t seed);

inline const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> names{"sphere", "cube",    "cylinder", "cone",
                                              "torus",  "pyramid", "plane",    "helix"};
  return names;
}

struct SynthSpec {
  std::vector<std::string> classes = synth_class_names();
  std::size_t points = 256;
  std::size_t train_count = 512;  // total over classes, split evenly
  std::size_t test_count = 128;
  double noise_sigma = 0.01;
  std::uint64_t seed = 1;

  void validate() const;
  // Instances of `class_index` in a split of `total` clouds (remainder to the
  // lowest class indices).
  std::size_t per_class(std::size_t total, std::size_t class_index) const;
};

// One instance: surface samples scaled to a random size, centered at the
// shape's own center, rotated about y by a random angle, plus Gaussian noise.
// Deterministic in (spec.seed, class, split, index).
PointCloud synth_instance(const SynthSpec& spec, std::size_t class_index, bool train, std::size_t index);

// Noise-free, unrotated surface sample of `shape` with the given size.
std::vector<float> synth_surface(std::string_view shape, std::size_t n, double size, std::mt19937_64& rng);

// In-memory train and test sets (clouds ordered by class, then index).
struct SynthData {
  Dataset train;
  Dataset test;
};
SynthData synth_dataset(const SynthSpec& spec);

// Writes every cloud under out_dir/{train,test}/ plus out_dir/manifest.json.
DatasetManifest synth_generate(const SynthSpec& spec, const std::filesystem::path& out_dir,
                               CloudFormat format = CloudFormat::PackedBinary);

}  // namespace pointnorm
