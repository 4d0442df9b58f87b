#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pointnorm/network.hpp"

// Flat binary container, little-endian throughout:
//
//   "PNCK"  u32 version  u64 config digest
//   u32 len + config JSON
//   u32 len + metadata JSON
//   u32 record count, then per record:
//     u32 len + name, u8 dtype (0 = f32, 1 = f64), u32 ndim, u64 dims[ndim],
//     numel raw values
//
// Records cover parameters followed by buffers, in model order.
namespace pointnorm {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct CheckpointRecord {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::vector<double> values;  // widened; f32 values are exact in double
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::uint64_t digest = 0;
  std::string config_json;
  std::string metadata_json = "{}";
  std::vector<CheckpointRecord> records;

  ModelConfig config() const { return ModelConfig::from_json(config_json); }
  const CheckpointRecord* find(const std::string& name) const;
};

// Serialized bytes; write_checkpoint goes through a temporary file and a
// rename, so an interrupted write leaves the previous file intact.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint");
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// ParseError on bad magic, unknown version, truncation or a digest that does
// not match the embedded config.
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename T>
Checkpoint capture(const PointNormModel<T>& model, std::string metadata_json = "{}");

// Copies every parameter and buffer into `model`. ConfigError when the
// checkpoint digest differs from the model's (message shows both), or a
// record is missing or has the wrong shape.
template <typename T>
void restore(PointNormModel<T>& model, const Checkpoint& ckpt);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const PointNormModel<T>& model,
                     std::string metadata_json = "{}") {
  write_checkpoint(path, capture(model, std::move(metadata_json)));
}

}  // namespace pointnorm
