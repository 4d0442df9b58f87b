#include "pointnorm/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pointnorm/errors.hpp"

namespace pointnorm {

namespace {

constexpr char kMagic[4] = {'P', 'N', 'C', 'K'};

std::string hex(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename U>
void put(std::string& out, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string get_string(const char* what) {
    const auto len = get<std::uint32_t>(what);
    need(len, what);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw ParseError(origin_ + ": truncated " + what + " at offset " + std::to_string(pos_));
    }
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(origin_ + ": " + msg + " at offset " + std::to_string(pos_));
  }

 private:
  const std::string& bytes_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::F32 : DType::F64;
}

template <typename T>
void append_tensors(std::vector<CheckpointRecord>& out, const std::vector<NamedTensor<T>>& tensors) {
  for (const auto& t : tensors) {
    CheckpointRecord r;
    r.name = t.name;
    r.dtype = dtype_of<T>();
    r.shape = t.tensor.shape();
    r.values.assign(t.tensor.values().begin(), t.tensor.values().end());
    out.push_back(std::move(r));
  }
}

template <typename T>
void copy_into(std::vector<NamedTensor<T>>& tensors, const Checkpoint& ckpt) {
  for (auto& t : tensors) {
    const auto* r = ckpt.find(t.name);
    if (!r) throw ConfigError("checkpoint has no record '" + t.name + "'");
    if (r->shape != t.tensor.shape()) {
      throw ConfigError("checkpoint record '" + t.name + "' has shape " + to_string(r->shape) + ", model expects " +
                        to_string(t.tensor.shape()));
    }
    auto dst = t.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r->values[i]);
  }
}

}  // namespace

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, ckpt.version);
  put<std::uint64_t>(out, ckpt.digest);
  put_string(out, ckpt.config_json);
  put_string(out, ckpt.metadata_json);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    put_string(out, r.name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) put<std::uint64_t>(out, d);
    if (r.values.size() != numel(r.shape)) {
      throw DimensionError("checkpoint record '" + r.name + "': value count does not match shape");
    }
    for (double v : r.values) {
      if (r.dtype == DType::F32) {
        put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  Reader in(bytes, origin);
  in.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw ParseError(origin + ": bad magic (not a checkpoint)");
  in.get<std::uint32_t>("magic");
  Checkpoint ckpt;
  ckpt.version = in.get<std::uint32_t>("version");
  if (ckpt.version != Checkpoint::kVersion) in.fail("unsupported version " + std::to_string(ckpt.version));
  ckpt.digest = in.get<std::uint64_t>("digest");
  ckpt.config_json = in.get_string("config");
  ckpt.metadata_json = in.get_string("metadata");
  ModelConfig config;
  try {
    config = ModelConfig::from_json(ckpt.config_json);
  } catch (const std::exception& e) {
    throw ParseError(origin + ": embedded config unreadable: " + e.what());
  }
  if (config.digest() != ckpt.digest) {
    throw ParseError(origin + ": header digest " + hex(ckpt.digest) + " does not match embedded config " +
                     hex(config.digest()));
  }
  const auto count = in.get<std::uint32_t>("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = in.get_string("record name");
    const auto dtype = in.get<std::uint8_t>("dtype");
    if (dtype > 1) in.fail("unknown dtype " + std::to_string(dtype) + " in record '" + r.name + "'");
    r.dtype = static_cast<DType>(dtype);
    const auto ndim = in.get<std::uint32_t>("ndim");
    if (ndim > 8) in.fail("implausible rank " + std::to_string(ndim) + " in record '" + r.name + "'");
    for (std::uint32_t d = 0; d < ndim; ++d) r.shape.push_back(static_cast<std::size_t>(in.get<std::uint64_t>("dims")));
    const std::size_t n = numel(r.shape);
    in.need(n * (r.dtype == DType::F32 ? 4 : 8), "values");
    r.values.resize(n);
    for (auto& v : r.values) {
      v = r.dtype == DType::F32 ? static_cast<double>(std::bit_cast<float>(in.get<std::uint32_t>("values")))
                                : std::bit_cast<double>(in.get<std::uint64_t>("values"));
    }
    ckpt.records.push_back(std::move(r));
  }
  if (!in.done()) in.fail("trailing bytes");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError(tmp.string() + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ParseError(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), path.string());
}

template <typename T>
Checkpoint capture(const PointNormModel<T>& model, std::string metadata_json) {
  Checkpoint ckpt;
  ckpt.config_json = model.config().to_json();
  ckpt.digest = model.config().digest();
  ckpt.metadata_json = std::move(metadata_json);
  append_tensors(ckpt.records, model.parameters());
  append_tensors(ckpt.records, model.buffers());
  return ckpt;
}

template <typename T>
void restore(PointNormModel<T>& model, const Checkpoint& ckpt) {
  const auto expected = model.config().digest();
  if (ckpt.digest != expected) {
    throw ConfigError("checkpoint config digest " + hex(ckpt.digest) + " does not match model digest " + hex(expected));
  }
  copy_into(model.parameters(), ckpt);
  copy_into(model.buffers(), ckpt);
}

template Checkpoint capture<float>(const PointNormModel<float>&, std::string);
template Checkpoint capture<double>(const PointNormModel<double>&, std::string);
template void restore<float>(PointNormModel<float>&, const Checkpoint&);
template void restore<double>(PointNormModel<double>&, const Checkpoint&);

}  // namespace pointnorm
