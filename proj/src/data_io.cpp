#include "pointnorm/data_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>

#include "json.hpp"
#include "pointnorm/errors.hpp"
#include "pointnorm/random.hpp"

namespace pointnorm {

namespace {

constexpr char kCloudMagic[4] = {'P', 'C', 'N', '1'};

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PointCloud parse_text(const std::string& text, const std::filesystem::path& path) {
  PointCloud cloud;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    const char* p = text.data() + pos;
    const char* last = text.data() + end;
    if (last > p && last[-1] == '\r') --last;
    pos = end + 1;
    auto skip_space = [&] {
      while (p < last && (*p == ' ' || *p == '\t')) ++p;
    };
    skip_space();
    if (p == last) continue;
    float xyz[3];
    for (float& v : xyz) {
      skip_space();
      if (p < last && *p == '+') ++p;
      auto [next, ec] = std::from_chars(p, last, v);
      if (ec != std::errc() || next == p) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected three decimal numbers");
      }
      p = next;
      if (p < last && *p != ' ' && *p != '\t') {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
      }
    }
    skip_space();
    if (p != last) throw ParseError(path.string() + ":" + std::to_string(line_no) + ": more than three values");
    for (float v : xyz) {
      if (!std::isfinite(v)) throw ParseError(path.string() + ":" + std::to_string(line_no) + ": non-finite value");
    }
    cloud.coords.insert(cloud.coords.end(), xyz, xyz + 3);
  }
  if (cloud.coords.empty()) throw ParseError(path.string() + ": no points");
  return cloud;
}

PointCloud parse_binary(const std::string& bytes, const std::filesystem::path& path) {
  if (bytes.size() < 8) {
    throw ParseError(path.string() + ": truncated header at offset " + std::to_string(bytes.size()) + " (need 8 bytes)");
  }
  if (std::memcmp(bytes.data(), kCloudMagic, 4) != 0) throw ParseError(path.string() + ": bad magic at offset 0");
  std::uint32_t count = 0;
  std::memcpy(&count, bytes.data() + 4, 4);
  count = to_le(count);
  const std::size_t need = 8 + static_cast<std::size_t>(count) * 12;
  if (bytes.size() < need) {
    throw ParseError(path.string() + ": short file, expected " + std::to_string(need) + " bytes, data ends at offset " +
                     std::to_string(bytes.size()));
  }
  if (bytes.size() > need) {
    throw ParseError(path.string() + ": trailing bytes after offset " + std::to_string(need));
  }
  if (count == 0) throw ParseError(path.string() + ": no points");
  PointCloud cloud;
  cloud.coords.resize(static_cast<std::size_t>(count) * 3);
  for (std::size_t i = 0; i < cloud.coords.size(); ++i) {
    std::uint32_t raw = 0;
    std::memcpy(&raw, bytes.data() + 8 + 4 * i, 4);
    const float v = std::bit_cast<float>(to_le(raw));
    if (!std::isfinite(v)) throw ParseError(path.string() + ": non-finite value at offset " + std::to_string(8 + 4 * i));
    cloud.coords[i] = v;
  }
  return cloud;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

void push(std::vector<float>& out, double x, double y, double z) {
  out.push_back(static_cast<float>(x));
  out.push_back(static_cast<float>(y));
  out.push_back(static_cast<float>(z));
}

// Uniform point on the triangle (a, b, c).
void triangle_point(std::vector<float>& out, const double* a, const double* b, const double* c,
                    std::mt19937_64& rng) {
  const double r1 = std::sqrt(unit_uniform(rng));
  const double r2 = unit_uniform(rng);
  double p[3];
  for (int i = 0; i < 3; ++i) p[i] = (1 - r1) * a[i] + r1 * (1 - r2) * b[i] + r1 * r2 * c[i];
  push(out, p[0], p[1], p[2]);
}

// Picks an index with probability proportional to weights.
std::size_t pick(const std::vector<double>& weights, std::mt19937_64& rng) {
  double total = 0;
  for (double w : weights) total += w;
  double u = unit_uniform(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

Dataset make_dataset(std::size_t num_classes, std::vector<std::string> names, std::size_t points) {
  Dataset d;
  d.num_classes = num_classes;
  d.class_names = std::move(names);
  d.points = points;
  return d;
}

void normalize_in_place(PointCloud& cloud) {
  cloud.coords = normalize_unit_sphere<float>(cloud.coords);
}

}  // namespace

CloudFormat parse_cloud_format(std::string_view name) {
  const auto key = lower(name);
  if (key == "xyz-text" || key == "xyz" || key == "text") return CloudFormat::XyzText;
  if (key == "packed-binary" || key == "binary" || key == "pcn") return CloudFormat::PackedBinary;
  throw ConfigError("unknown cloud format '" + std::string(name) + "' (expected xyz-text or packed-binary)");
}

std::string_view cloud_format_name(CloudFormat format) {
  return format == CloudFormat::XyzText ? "xyz-text" : "packed-binary";
}

CloudFormat cloud_format_for(const std::filesystem::path& path) {
  const auto ext = lower(path.extension().string());
  if (ext == ".xyz" || ext == ".txt") return CloudFormat::XyzText;
  if (ext == ".pcn" || ext == ".bin") return CloudFormat::PackedBinary;
  throw ParseError(path.string() + ": cannot infer cloud format from extension '" + ext + "'");
}

PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format) {
  const std::string bytes = read_file(path);
  return format == CloudFormat::XyzText ? parse_text(bytes, path) : parse_binary(bytes, path);
}

PointCloud load_cloud(const std::filesystem::path& path) { return load_cloud(path, cloud_format_for(path)); }

void save_cloud(const std::filesystem::path& path, const PointCloud& cloud, CloudFormat format) {
  if (cloud.coords.size() % 3 != 0) throw DimensionError("save_cloud: coords length not a multiple of 3");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path.string() + ": cannot open for writing");
  if (format == CloudFormat::XyzText) {
    char buf[64];
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      std::string line;
      for (int a = 0; a < 3; ++a) {
        auto [end, ec] = std::to_chars(buf, buf + sizeof buf, cloud.coords[3 * i + a]);
        (void)ec;
        if (a) line += ' ';
        line.append(buf, end);
      }
      line += '\n';
      out << line;
    }
  } else {
    out.write(kCloudMagic, 4);
    const std::uint32_t count = to_le(static_cast<std::uint32_t>(cloud.size()));
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (float v : cloud.coords) {
      const std::uint32_t raw = to_le(std::bit_cast<std::uint32_t>(v));
      out.write(reinterpret_cast<const char*>(&raw), 4);
    }
  }
  if (!out) throw ParseError(path.string() + ": write failed");
}

void DatasetManifest::validate(bool for_training) const {
  if (num_classes == 0) throw ConfigError("manifest: num_classes must be positive");
  if (!class_names.empty() && class_names.size() != num_classes) {
    throw ConfigError("manifest: " + std::to_string(class_names.size()) + " class names for " +
                      std::to_string(num_classes) + " classes");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= num_classes) {
      throw ConfigError("manifest entry " + std::to_string(i) + " (" + e.path + "): label " + std::to_string(e.label) +
                        " outside [0, " + std::to_string(num_classes) + ")");
    }
    if (e.split != "train" && e.split != "test") {
      throw ConfigError("manifest entry " + std::to_string(i) + ": split must be train or test, got '" + e.split + "'");
    }
  }
  if (for_training && (count("train") == 0 || count("test") == 0)) {
    throw ConfigError("manifest: both train and test splits must be nonempty");
  }
}

std::size_t DatasetManifest::count(std::string_view split) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.split == split; }));
}

std::string DatasetManifest::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["name"] = name;
  j["num_classes"] = num_classes;
  j["class_names"] = class_names;
  j["points_per_cloud"] = points_per_cloud;
  auto& list = j["entries"] = nlohmann::json::array();
  for (const auto& e : entries) list.push_back({{"path", e.path}, {"label", e.label}, {"split", e.split}});
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json(std::string_view text) {
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    const int version = j.value("schema_version", kSchemaVersion);
    if (version != kSchemaVersion) throw ConfigError("manifest: unsupported schema_version " + std::to_string(version));
    m.name = j.at("name").get<std::string>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.class_names = j.value("class_names", std::vector<std::string>{});
    m.points_per_cloud = j.value("points_per_cloud", std::size_t{0});
    for (const auto& e : j.at("entries")) {
      m.entries.push_back({e.at("path").get<std::string>(), e.at("label").get<std::int64_t>(),
                           e.at("split").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("manifest JSON: ") + e.what());
  }
  m.validate();
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) { return DatasetManifest::from_json(read_file(path)); }

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ParseError(path.string() + ": cannot open for writing");
  out << manifest.to_json();
}

PointCloud resample_to_n(const PointCloud& cloud, std::size_t n, std::mt19937_64& rng) {
  const std::size_t have = cloud.size();
  if (have == 0) throw ArgumentError("resample_to_n: empty cloud");
  if (n == 0) throw ArgumentError("resample_to_n: target size must be positive");
  if (have == n) return cloud;
  std::vector<std::size_t> keep;
  if (have > n) {
    keep = farthest_point_sample<float>(cloud.coords, n);
  } else {
    keep.resize(have);
    for (std::size_t i = 0; i < have; ++i) keep[i] = i;
    while (keep.size() < n) keep.push_back(uniform_index(rng, have));
  }
  PointCloud out;
  out.label = cloud.label;
  out.feature_dim = cloud.feature_dim;
  out.coords.reserve(3 * n);
  for (std::size_t i : keep) {
    out.coords.insert(out.coords.end(), cloud.coords.begin() + 3 * i, cloud.coords.begin() + 3 * i + 3);
    if (cloud.feature_dim) {
      const auto f = cloud.features.begin() + static_cast<std::ptrdiff_t>(i * cloud.feature_dim);
      out.features.insert(out.features.end(), f, f + static_cast<std::ptrdiff_t>(cloud.feature_dim));
    }
  }
  return out;
}

Dataset load_split(const DatasetManifest& manifest, const std::filesystem::path& manifest_dir, std::string_view split,
                   std::size_t points, std::uint64_t seed) {
  manifest.validate();
  std::vector<const ManifestEntry*> entries;
  for (const auto& e : manifest.entries) {
    if (e.split == split) entries.push_back(&e);
  }
  Dataset data = make_dataset(manifest.num_classes, manifest.class_names, points);
  data.clouds.resize(entries.size());
  std::vector<std::optional<std::string>> errors(entries.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::size_t i = 0; i < entries.size(); ++i) {
    try {
      std::filesystem::path p = entries[i]->path;
      if (p.is_relative()) p = manifest_dir / p;
      auto cloud = load_cloud(p);
      std::mt19937_64 rng(derive_seed(seed, {i}));
      cloud = resample_to_n(cloud, points, rng);
      normalize_in_place(cloud);
      cloud.label = entries[i]->label;
      data.clouds[i] = std::move(cloud);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& err : errors) {
    if (err) throw ParseError(*err);
  }
  return data;
}

void SynthSpec::validate() const {
  if (points < 32) throw ConfigError("synthetic spec: points must be >= 32");
  if (!(noise_sigma >= 0.0)) throw ConfigError("synthetic spec: noise_sigma must be >= 0");
  if (classes.empty()) throw ConfigError("synthetic spec: no classes");
  for (const auto& c : classes) {
    const auto& known = synth_class_names();
    if (std::find(known.begin(), known.end(), c) == known.end()) {
      throw ConfigError("synthetic spec: unknown class '" + c + "'");
    }
  }
  if (train_count < classes.size() || test_count < classes.size()) {
    throw ConfigError("synthetic spec: need at least one train and one test instance per class");
  }
}

std::size_t SynthSpec::per_class(std::size_t total, std::size_t class_index) const {
  const std::size_t c = classes.size();
  return total / c + (class_index < total % c ? 1 : 0);
}

std::vector<float> synth_surface(std::string_view shape, std::size_t n, double size, std::mt19937_64& rng) {
  using std::numbers::pi;
  std::vector<float> out;
  out.reserve(3 * n);
  if (shape == "sphere") {
    for (std::size_t i = 0; i < n; ++i) {
      double v[3], norm = 0;
      do {
        norm = 0;
        for (double& x : v) {
          x = standard_normal(rng);
          norm += x * x;
        }
      } while (norm < 1e-12);
      norm = std::sqrt(norm);
      push(out, size * v[0] / norm, size * v[1] / norm, size * v[2] / norm);
    }
  } else if (shape == "cube") {
    const double h = 0.6 * size;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t face = uniform_index(rng, 6);
      const double u = uniform(rng, -h, h);
      const double v = uniform(rng, -h, h);
      const double s = face % 2 ? h : -h;
      switch (face / 2) {
        case 0: push(out, s, u, v); break;
        case 1: push(out, u, s, v); break;
        default: push(out, u, v, s); break;
      }
    }
  } else if (shape == "cylinder") {
    const double r = size * uniform(rng, 0.3, 0.6);
    const double h = size * uniform(rng, 0.6, 1.0);
    const std::vector<double> areas{2 * pi * r * 2 * h, pi * r * r, pi * r * r};
    for (std::size_t i = 0; i < n; ++i) {
      const double t = uniform(rng, 0, 2 * pi);
      const std::size_t part = pick(areas, rng);
      if (part == 0) {
        push(out, r * std::cos(t), uniform(rng, -h, h), r * std::sin(t));
      } else {
        const double rr = r * std::sqrt(unit_uniform(rng));
        push(out, rr * std::cos(t), part == 1 ? h : -h, rr * std::sin(t));
      }
    }
  } else if (shape == "cone") {
    const double r = size * uniform(rng, 0.4, 0.7);
    const double h = size * uniform(rng, 0.8, 1.4);
    const double slant = std::hypot(r, h);
    const std::vector<double> areas{pi * r * slant, pi * r * r};
    for (std::size_t i = 0; i < n; ++i) {
      const double t = uniform(rng, 0, 2 * pi);
      const double f = std::sqrt(unit_uniform(rng));
      if (pick(areas, rng) == 0) {
        push(out, r * f * std::cos(t), h / 2 - h * f, r * f * std::sin(t));
      } else {
        push(out, r * f * std::cos(t), -h / 2, r * f * std::sin(t));
      }
    }
  } else if (shape == "torus") {
    const double big = 0.7 * size;
    const double small = size * uniform(rng, 0.15, 0.3);
    while (out.size() < 3 * n) {
      const double u = uniform(rng, 0, 2 * pi);
      const double v = uniform(rng, 0, 2 * pi);
      if (unit_uniform(rng) * (big + small) > big + small * std::cos(v)) continue;
      const double ring = big + small * std::cos(v);
      push(out, ring * std::cos(u), small * std::sin(v), ring * std::sin(u));
    }
  } else if (shape == "pyramid") {
    const double a = size * uniform(rng, 0.5, 0.7);
    const double h = size * uniform(rng, 0.8, 1.3);
    const double apex[3] = {0, h / 2, 0};
    const double base[4][3] = {{-a, -h / 2, -a}, {a, -h / 2, -a}, {a, -h / 2, a}, {-a, -h / 2, a}};
    const double side = 0.5 * 2 * a * std::hypot(h, a);
    const std::vector<double> areas{4 * a * a, side, side, side, side};
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t part = pick(areas, rng);
      if (part == 0) {
        push(out, uniform(rng, -a, a), -h / 2, uniform(rng, -a, a));
      } else {
        triangle_point(out, apex, base[part - 1], base[part % 4], rng);
      }
    }
  } else if (shape == "plane") {
    const double a = size;
    const double b = size * uniform(rng, 0.5, 1.0);
    for (std::size_t i = 0; i < n; ++i) push(out, uniform(rng, -a, a), 0.0, uniform(rng, -b, b));
  } else if (shape == "helix") {
    const double r = size * uniform(rng, 0.4, 0.6);
    const double turns = uniform(rng, 2.0, 4.0);
    const double h = 0.8 * size;
    const double tube = 0.04 * size;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = unit_uniform(rng);
      const double angle = 2 * pi * turns * t;
      push(out, r * std::cos(angle) + tube * standard_normal(rng), -h + 2 * h * t + tube * standard_normal(rng),
           r * std::sin(angle) + tube * standard_normal(rng));
    }
  } else {
    throw ArgumentError("synth_surface: unknown shape '" + std::string(shape) + "'");
  }
  return out;
}

PointCloud synth_instance(const SynthSpec& spec, std::size_t class_index, bool train, std::size_t index) {
  std::mt19937_64 rng(derive_seed(spec.seed, {class_index, train ? 0u : 1u, index}));
  const double size = uniform(rng, 0.7, 1.0);
  auto coords = synth_surface(spec.classes.at(class_index), spec.points, size, rng);
  const double angle = uniform(rng, 0, 2 * std::numbers::pi);
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  for (std::size_t i = 0; i < spec.points; ++i) {
    float* p = coords.data() + 3 * i;
    const double x = p[0];
    const double z = p[2];
    p[0] = static_cast<float>(c * x + s * z);
    p[2] = static_cast<float>(-s * x + c * z);
    if (spec.noise_sigma > 0) {
      for (int a = 0; a < 3; ++a) p[a] = static_cast<float>(p[a] + spec.noise_sigma * standard_normal(rng));
    }
  }
  PointCloud cloud;
  cloud.coords = std::move(coords);
  cloud.label = static_cast<std::int64_t>(class_index);
  return cloud;
}

SynthData synth_dataset(const SynthSpec& spec) {
  spec.validate();
  SynthData data{make_dataset(spec.classes.size(), spec.classes, spec.points),
                 make_dataset(spec.classes.size(), spec.classes, spec.points)};
  for (const bool train : {true, false}) {
    Dataset& d = train ? data.train : data.test;
    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
      for (std::size_t i = 0; i < spec.per_class(train ? spec.train_count : spec.test_count, c); ++i) {
        jobs.emplace_back(c, i);
      }
    }
    d.clouds.resize(jobs.size());
#pragma omp parallel for schedule(dynamic, 8)
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      auto cloud = synth_instance(spec, jobs[j].first, train, jobs[j].second);
      normalize_in_place(cloud);
      d.clouds[j] = std::move(cloud);
    }
  }
  return data;
}

DatasetManifest synth_generate(const SynthSpec& spec, const std::filesystem::path& out_dir, CloudFormat format) {
  spec.validate();
  DatasetManifest manifest;
  manifest.name = "synthetic";
  manifest.num_classes = spec.classes.size();
  manifest.class_names = spec.classes;
  manifest.points_per_cloud = spec.points;
  const std::string ext = format == CloudFormat::XyzText ? ".xyz" : ".pcn";
  for (const bool train : {true, false}) {
    const std::string split = train ? "train" : "test";
    std::vector<ManifestEntry> entries;
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
      for (std::size_t i = 0; i < spec.per_class(train ? spec.train_count : spec.test_count, c); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "_%04zu", i);
        entries.push_back({split + "/" + spec.classes[c] + name + ext, static_cast<std::int64_t>(c), split});
      }
    }
    std::vector<std::optional<std::string>> errors(entries.size());
#pragma omp parallel for schedule(dynamic, 8)
    for (std::size_t j = 0; j < entries.size(); ++j) {
      try {
        const auto& e = entries[j];
        const std::size_t index = std::stoul(e.path.substr(e.path.rfind('_') + 1));
        save_cloud(out_dir / e.path, synth_instance(spec, static_cast<std::size_t>(e.label), train, index), format);
      } catch (const std::exception& ex) {
        errors[j] = ex.what();
      }
    }
    for (const auto& err : errors) {
      if (err) throw ParseError(*err);
    }
    manifest.entries.insert(manifest.entries.end(), entries.begin(), entries.end());
  }
  save_manifest(out_dir / "manifest.json", manifest);
  return manifest;
}

}  // namespace pointnorm
