#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pointnorm/checkpoint.hpp"
#include "pointnorm/data_io.hpp"
#include "pointnorm/gradcheck_suite.hpp"
#include "pointnorm/ops.hpp"
#include "pointnorm/random.hpp"
#include "pointnorm/training.hpp"

namespace pointnorm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct DataOptions {
  std::string synth;
  std::string manifest;
  std::size_t points = 256;
  std::uint64_t data_seed = 1;
  std::size_t synth_train = 512;
  std::size_t synth_test = 128;
  double synth_noise = 0.01;
};

struct ModelOptions {
  std::string model = "full";
  std::size_t layers = 40;
  std::string stats_mode = "LMGS";
  bool disable_pn = false;
  bool disable_rpn = false;
  std::string block_kind = "cres";
  std::optional<double> bottleneck_ratio;
  bool scalar_affine = false;
};

struct RunOptions {
  DataOptions data;
  ModelOptions model;
  TrainConfig train;
  std::string precision = "float32";
  std::string out;
  std::size_t checkpoint_every = 1;
  bool delta_log = false;
  double target_oa = 0;
  double max_minutes = 0;
};

struct Datasets {
  Dataset train;
  Dataset test;
};

void add_data_options(CLI::App& app, DataOptions& o) {
  app.add_option("--synth", o.synth, "Synthetic benchmark preset (default)")->check(CLI::IsMember({"default"}));
  app.add_option("--manifest", o.manifest, "Dataset manifest JSON");
  app.add_option("--points", o.points, "Points per cloud")->capture_default_str();
  app.add_option("--data-seed", o.data_seed, "Seed for generation and resampling")->capture_default_str();
  app.add_option("--synth-train", o.synth_train, "Synthetic training clouds")->capture_default_str();
  app.add_option("--synth-test", o.synth_test, "Synthetic test clouds")->capture_default_str();
  app.add_option("--synth-noise", o.synth_noise, "Synthetic noise sigma")->capture_default_str();
}

void add_model_options(CLI::App& app, ModelOptions& o) {
  app.add_option("--model", o.model, "full or tiny")->check(CLI::IsMember({"full", "tiny"}))->capture_default_str();
  app.add_option("--layers", o.layers, "Layer count of the full model")
      ->check(CLI::IsMember({24, 40, 56}))
      ->capture_default_str();
  app.add_option("--stats-mode", o.stats_mode, "LMGS, LMLS, GMLS or GMGS")->capture_default_str();
  app.add_flag("--disable-pn", o.disable_pn, "Drop point normalization");
  app.add_flag("--disable-rpn", o.disable_rpn, "Drop reverse point normalization");
  app.add_option("--block-kind", o.block_kind, "cres or invres")->capture_default_str();
  app.add_option("--bottleneck-ratio", o.bottleneck_ratio, "Residual block hidden ratio");
  app.add_flag("--scalar-affine", o.scalar_affine, "One alpha/beta per normalization");
}

void add_train_options(CLI::App& app, RunOptions& o) {
  auto& t = o.train;
  app.add_option("--epochs", t.epochs)->capture_default_str();
  app.add_option("--batch-size", t.batch_size)->capture_default_str();
  app.add_option("--lr-init", t.lr_init)->capture_default_str();
  app.add_option("--lr-final", t.lr_final)->capture_default_str();
  app.add_option("--weight-decay", t.weight_decay)->capture_default_str();
  app.add_option("--label-smoothing", t.label_smoothing)->capture_default_str();
  app.add_option("--seed", t.seed)->capture_default_str();
  app.add_option("--precision", o.precision, "float32 or float64")->capture_default_str();
  app.add_flag("--deterministic", t.deterministic, "Single-threaded run");
  app.add_flag("!--no-augment", t.augment, "Disable rotation/translation augmentation");
  app.add_option("--checkpoint-every", o.checkpoint_every, "Epochs between last.pnck writes")->capture_default_str();
  app.add_flag("--delta-log", o.delta_log, "Write per-stage DualNorm statistics to delta.jsonl");
  app.add_option("--target-oa", o.target_oa, "Stop once test OA reaches this value (0 = off)");
  app.add_option("--max-minutes", o.max_minutes, "Stop after the epoch that crosses this budget (0 = off)");
}

ModelConfig build_model_config(const ModelOptions& o, std::size_t num_classes, std::size_t points) {
  ModelConfig c = o.model == "tiny" ? pointnorm_tiny_config(num_classes, points)
                                    : pointnorm_config(num_classes, points, o.layers);
  c.stats_mode = StatsMode::parse(o.stats_mode);
  c.disable_pn = o.disable_pn;
  c.disable_rpn = o.disable_rpn;
  c.block_kind = parse_block_kind(o.block_kind);
  if (o.bottleneck_ratio) c.bottleneck_ratio = *o.bottleneck_ratio;
  c.scalar_affine = o.scalar_affine;
  if (o.model == "tiny") c.name = "pointnorm-tiny";
  c.validate();
  return c;
}

Datasets load_data(const DataOptions& o) {
  if (!o.synth.empty() && !o.manifest.empty()) throw ConfigError("--synth and --manifest are mutually exclusive");
  if (!o.manifest.empty()) {
    const fs::path path = o.manifest;
    const auto manifest = load_manifest(path);
    manifest.validate(true);
    const auto dir = path.parent_path();
    return {load_split(manifest, dir, "train", o.points, o.data_seed),
            load_split(manifest, dir, "test", o.points, derive_seed(o.data_seed, {1}))};
  }
  SynthSpec spec;
  spec.points = o.points;
  spec.train_count = o.synth_train;
  spec.test_count = o.synth_test;
  spec.noise_sigma = o.synth_noise;
  spec.seed = o.data_seed;
  auto data = synth_dataset(spec);
  return {std::move(data.train), std::move(data.test)};
}

std::string hex(std::uint64_t v) {
  std::ostringstream ss;
  ss << "0x" << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

json per_class_json(const MetricsRecord& m, const std::vector<std::string>& names) {
  json j = json::object();
  for (std::size_t c = 0; c < m.per_class.size(); ++c) {
    const std::string key = c < names.size() ? names[c] : std::to_string(c);
    j[key] = std::isnan(m.per_class[c]) ? json(nullptr) : json(m.per_class[c]);
  }
  return j;
}

json metrics_json(const MetricsRecord& m, const std::vector<std::string>& names) {
  return {{"oa", m.overall_accuracy},
          {"macc", m.mean_class_accuracy},
          {"loss", m.loss},
          {"samples", m.samples},
          {"per_class", per_class_json(m, names)}};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ParseError(path.string() + ": cannot open for writing");
  out << text;
}

struct TrainOutcome {
  json summary;
  int code = kOk;
};

template <typename T>
TrainOutcome train_model(const ModelConfig& mc, const TrainConfig& tc, const Datasets& data, const RunOptions& o,
                         const fs::path& dir, std::ostream& log) {
  fs::create_directories(dir);
  PointNormModel<T> model(mc, tc.seed);
  const auto cost = count_params_flops(mc, mc.input_points);
  std::ofstream csv(dir / "metrics.csv");
  csv << "schema_version,epoch,loss,train_oa,oa,macc,lr,seconds\n";
  std::ofstream delta;
  if (o.delta_log) delta.open(dir / "delta.jsonl");
  const auto metadata = [&](std::size_t epoch) {
    return json{{"epoch", epoch}, {"precision", precision_name(tc.precision)}, {"train", json::parse(tc.to_json())}}
        .dump();
  };

  double best_oa = -1;
  std::size_t best_epoch = 0;
  const auto start = Clock::now();
  std::ostringstream row;
  const auto on_epoch = [&](const EpochResult& r) {
    const auto& tr = r.train;
    const auto& te = r.test;
    row.str("");
    row << kSchemaVersion << ',' << tr.epoch + 1 << ',' << tr.loss << ',' << tr.overall_accuracy << ','
        << te.overall_accuracy << ',' << te.mean_class_accuracy << ',' << tr.lr << ','
        << tr.wall_seconds + te.wall_seconds << '\n';
    csv << row.str() << std::flush;
    log << "epoch " << tr.epoch + 1 << '/' << tc.epochs << "  loss " << std::fixed << std::setprecision(4) << tr.loss
        << "  train " << tr.overall_accuracy << "  test " << te.overall_accuracy << "  mAcc "
        << te.mean_class_accuracy << "  lr " << std::setprecision(6) << tr.lr << "  " << std::setprecision(1)
        << tr.wall_seconds + te.wall_seconds << "s\n"
        << std::defaultfloat << std::setprecision(6) << std::flush;
    if (o.delta_log) {
      std::vector<DualNormTrace> traces;
      ForwardContext ctx;
      ctx.traces = &traces;
      std::vector<const PointCloud*> clouds;
      for (std::size_t i = 0; i < std::min<std::size_t>(data.test.size(), tc.batch_size); ++i) {
        clouds.push_back(&data.test.clouds[i]);
      }
      {
        NoGradGuard no_grad;
        model.forward(batch_coords<T>(clouds), ctx);
      }
      for (std::size_t s = 0; s < traces.size(); ++s) {
        const auto& t = traces[s];
        json j{{"epoch", tr.epoch + 1}, {"stage", s}, {"has_pn", t.has_pn}, {"sigma1", t.sigma1},
               {"alpha_norm", t.alpha_norm}};
        if (t.has_pn && t.sigma1 > 0) {
          j["delta"] = t.alpha_norm / t.sigma1;
          j["regime"] = regime_name(classify_regime(t.alpha_norm, t.sigma1, 1e-3));
        }
        delta << j.dump() << '\n';
      }
      delta.flush();
    }
    if (te.overall_accuracy > best_oa) {
      best_oa = te.overall_accuracy;
      best_epoch = tr.epoch + 1;
      save_checkpoint(dir / "best.pnck", model, metadata(tr.epoch + 1));
    }
    if (o.checkpoint_every > 0 && (tr.epoch + 1) % o.checkpoint_every == 0) {
      save_checkpoint(dir / "last.pnck", model, metadata(tr.epoch + 1));
    }
    if (o.target_oa > 0 && te.overall_accuracy >= o.target_oa) return false;
    if (o.max_minutes > 0 && seconds_since(start) >= 60.0 * o.max_minutes) return false;
    return true;
  };

  TrainOutcome outcome;
  auto& s = outcome.summary;
  s["schema_version"] = kSchemaVersion;
  s["model"] = json::parse(mc.to_json());
  s["config_digest"] = hex(mc.digest());
  s["train_config"] = json::parse(tc.to_json());
  s["params"] = model.parameter_count();
  s["flops"] = cost.flops;
  s["class_names"] = data.train.class_names;
  FitResult fitted;
  try {
    fitted = fit(model, data.train, data.test, tc, on_epoch);
  } catch (const NumericError& e) {
    log << "numeric failure: " << e.what() << '\n';
    s["status"] = "numeric_failure";
    s["error"] = e.what();
    s["best_oa"] = best_oa < 0 ? json(nullptr) : json(best_oa);
    write_text(dir / "summary.json", s.dump(2) + "\n");
    outcome.code = kNumericError;
    return outcome;
  }
  save_checkpoint(dir / "final.pnck", model, metadata(fitted.epochs.size()));
  const auto& last = fitted.epochs.back();
  double train_seconds = 0, test_seconds = 0;
  std::size_t train_samples = 0;
  for (const auto& e : fitted.epochs) {
    train_seconds += e.train.wall_seconds;
    test_seconds += e.test.wall_seconds;
    train_samples += e.train.samples;
  }
  const double epochs = static_cast<double>(fitted.epochs.size());
  s["status"] = "ok";
  s["epochs_run"] = fitted.epochs.size();
  s["stopped_early"] = fitted.stopped_early;
  s["final"] = metrics_json(last.test, data.test.class_names);
  s["final_train_oa"] = last.train.overall_accuracy;
  s["best_oa"] = best_oa;
  s["best_epoch"] = best_epoch;
  // Everything outside "timing" is reproducible for a fixed seed.
  s["timing"] = {
      {"train_seconds_per_epoch", train_seconds / epochs},
      {"test_seconds_per_epoch", test_seconds / epochs},
      {"train_samples_per_sec", train_seconds > 0 ? static_cast<double>(train_samples) / train_seconds : 0.0},
      {"test_samples_per_sec",
       test_seconds > 0 ? static_cast<double>(data.test.size()) * epochs / test_seconds : 0.0},
      {"wall_seconds", fitted.seconds}};
  write_text(dir / "summary.json", s.dump(2) + "\n");
  return outcome;
}

TrainOutcome train_any(const ModelConfig& mc, const TrainConfig& tc, const Datasets& data, const RunOptions& o,
                       const fs::path& dir, std::ostream& log) {
  return tc.precision == Precision::Float64 ? train_model<double>(mc, tc, data, o, dir, log)
                                            : train_model<float>(mc, tc, data, o, dir, log);
}

TrainConfig finish_train_config(const RunOptions& o) {
  TrainConfig tc = o.train;
  tc.precision = parse_precision(o.precision);
  tc.validate();
  return tc;
}

int cmd_train(const RunOptions& o, std::ostream& out) {
  const auto tc = finish_train_config(o);
  const auto data = load_data(o.data);
  const auto mc = build_model_config(o.model, data.train.num_classes, o.data.points);
  const auto dir = resolve_output(o.out.empty() ? fs::path("runs") / "train" : fs::path(o.out));
  out << "training " << mc.name << " (" << count_params_flops(mc, mc.input_points).params << " params) on "
      << data.train.size() << "/" << data.test.size() << " clouds -> " << dir.string() << '\n';
  const auto outcome = train_any(mc, tc, data, o, dir, out);
  if (outcome.code == kOk) {
    out << "final test OA " << outcome.summary["final"]["oa"].get<double>() << ", mAcc "
        << outcome.summary["final"]["macc"].get<double>() << '\n';
  }
  return outcome.code;
}

template <typename T>
json eval_model(const Checkpoint& ckpt, const ModelConfig& mc, const Dataset& data, std::size_t batch) {
  PointNormModel<T> model(mc, 0);
  restore(model, ckpt);
  const auto m = evaluate(model, data, batch);
  json j = metrics_json(m, data.class_names);
  j["schema_version"] = kSchemaVersion;
  j["config_digest"] = hex(mc.digest());
  return j;
}

struct EvalOptions {
  std::string checkpoint;
  std::string model_config;
  std::string split = "test";
  std::size_t batch_size = 32;
  std::string out;
  DataOptions data;
};

int cmd_eval(EvalOptions o, std::ostream& out) {
  const auto ckpt = read_checkpoint(o.checkpoint);
  ModelConfig mc = ckpt.config();
  if (!o.model_config.empty()) {
    std::ifstream in(o.model_config);
    if (!in) throw ParseError(o.model_config + ": cannot open");
    std::stringstream ss;
    ss << in.rdbuf();
    mc = ModelConfig::from_json(ss.str());
    if (mc.digest() != ckpt.digest) {
      throw ConfigError("checkpoint digest " + hex(ckpt.digest) + " does not match model config digest " +
                        hex(mc.digest()));
    }
  }
  o.data.points = mc.input_points;
  auto data = load_data(o.data);
  const Dataset& split = o.split == "train" ? data.train : data.test;
  if (split.num_classes != mc.num_classes) {
    throw ConfigError("dataset has " + std::to_string(split.num_classes) + " classes, checkpoint " +
                      std::to_string(mc.num_classes));
  }
  const bool f64 = !ckpt.records.empty() && ckpt.records.front().dtype == DType::F64;
  const auto start = Clock::now();
  json j = f64 ? eval_model<double>(ckpt, mc, split, o.batch_size) : eval_model<float>(ckpt, mc, split, o.batch_size);
  j["seconds"] = seconds_since(start);
  j["checkpoint"] = o.checkpoint;
  j["split"] = o.split;
  out << j.dump(2) << '\n';
  if (!o.out.empty()) write_text(resolve_output(o.out), j.dump(2) + "\n");
  return kOk;
}

struct BenchOptions {
  std::vector<std::string> models{"full", "tiny"};
  std::size_t points = 1024;
  std::size_t batch = 32;
  std::size_t repeats = 3;
  std::size_t classes = 15;
  std::size_t layers = 40;
  bool train = true;
  std::string out;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

json bench_model(const ModelConfig& mc, const BenchOptions& o) {
  PointNormModel<float> model(mc, 1);
  SynthSpec spec;
  spec.points = o.points;
  std::vector<PointCloud> clouds;
  for (std::size_t i = 0; i < o.batch; ++i) {
    auto c = synth_instance(spec, i % spec.classes.size(), true, i);
    c.coords = normalize_unit_sphere<float>(c.coords);
    clouds.push_back(std::move(c));
  }
  std::vector<const PointCloud*> ptrs;
  std::vector<std::int64_t> labels;
  for (const auto& c : clouds) {
    ptrs.push_back(&c);
    labels.push_back(c.label % static_cast<std::int64_t>(mc.num_classes));
  }
  const auto coords = batch_coords<float>(ptrs);
  const auto test_pass = [&] {
    NoGradGuard no_grad;
    ForwardContext ctx;
    model.forward(coords, ctx);
  };
  std::mt19937_64 rng(1);
  const auto train_pass = [&] {
    ForwardContext ctx;
    ctx.training = true;
    ctx.rng = &rng;
    model.zero_grad();
    backward(label_smoothed_ce(model.forward(coords, ctx), labels, 0.2), BackwardOptions{true});
  };
  const auto timed = [&](const auto& pass) {
    pass();  // warm-up
    std::vector<double> rates;
    for (std::size_t r = 0; r < o.repeats; ++r) {
      const auto start = Clock::now();
      pass();
      rates.push_back(static_cast<double>(o.batch) / seconds_since(start));
    }
    return rates;
  };
  const auto cost = count_params_flops(mc, o.points);
  json j{{"model", mc.name}, {"params", cost.params}, {"flops", cost.flops}, {"points", o.points}, {"batch", o.batch}};
  const auto test_rates = timed(test_pass);
  j["test_samples_per_sec"] = median(test_rates);
  j["test_runs"] = test_rates;
  if (o.train) {
    const auto train_rates = timed(train_pass);
    j["train_samples_per_sec"] = median(train_rates);
    j["train_runs"] = train_rates;
  }
  return j;
}

int cmd_bench(const BenchOptions& o, std::ostream& out) {
  if (o.repeats == 0 || o.batch < 2) throw ConfigError("bench: need repeats >= 1 and batch >= 2");
  json report{{"schema_version", kSchemaVersion}, {"results", json::array()}};
  for (const auto& name : o.models) {
    if (name != "full" && name != "tiny") throw ConfigError("bench: unknown model '" + name + "' (full, tiny)");
    ModelOptions mo;
    mo.model = name;
    mo.layers = o.layers;
    const auto mc = build_model_config(mo, o.classes, o.points);
    auto j = bench_model(mc, o);
    out << std::left << std::setw(16) << mc.name << " params " << std::setw(10) << j["params"].get<std::uint64_t>()
        << " GFLOPs " << std::setw(8) << std::setprecision(4) << j["flops"].get<double>() / 1e9 << " test "
        << std::setprecision(1) << std::fixed << j["test_samples_per_sec"].get<double>() << "/s";
    if (o.train) out << "  train " << j["train_samples_per_sec"].get<double>() << "/s";
    out << std::defaultfloat << std::setprecision(6) << '\n';
    report["results"].push_back(std::move(j));
  }
  if (!o.out.empty()) write_text(resolve_output(o.out), report.dump(2) + "\n");
  return kOk;
}

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"stats_mode", "bottleneck_ratio", "block_kind",
                                             "layer_number", "disable_pn",      "disable_rpn"};
  return axes;
}

bool parse_bool(const std::string& axis, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("ablate: axis " + axis + " expects true/false, got '" + v + "'");
}

void apply_axis(ModelOptions& m, const std::string& axis, const std::string& v) {
  if (axis == "stats_mode") {
    StatsMode::parse(v);
    m.stats_mode = v;
  } else if (axis == "bottleneck_ratio") {
    try {
      m.bottleneck_ratio = std::stod(v);
    } catch (const std::exception&) {
      throw ConfigError("ablate: bottleneck_ratio value '" + v + "' is not a number");
    }
  } else if (axis == "block_kind") {
    parse_block_kind(v);
    m.block_kind = v;
  } else if (axis == "layer_number") {
    if (v != "24" && v != "40" && v != "56") throw ConfigError("ablate: layer_number must be 24, 40 or 56");
    m.layers = std::stoul(v);
  } else if (axis == "disable_pn") {
    m.disable_pn = parse_bool(axis, v);
  } else {
    m.disable_rpn = parse_bool(axis, v);
  }
}

struct AblateOptions {
  RunOptions run;
  std::vector<std::string> grid;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

int cmd_ablate(const AblateOptions& o, std::ostream& out) {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const auto& g : o.grid) {
    const auto eq = g.find('=');
    const std::string axis = g.substr(0, eq);
    const auto& valid = ablation_axes();
    if (eq == std::string::npos || std::find(valid.begin(), valid.end(), axis) == valid.end()) {
      std::string list;
      for (const auto& a : valid) list += (list.empty() ? "" : ", ") + a;
      throw ConfigError("ablate: invalid axis '" + axis + "'; valid axes: " + list);
    }
    std::vector<std::string> values;
    std::stringstream ss(g.substr(eq + 1));
    for (std::string v; std::getline(ss, v, ',');) {
      if (!v.empty()) values.push_back(v);
    }
    if (values.empty()) throw ConfigError("ablate: axis " + axis + " has no values");
    axes.emplace_back(axis, values);
  }
  if (axes.empty()) throw ConfigError("ablate: give at least one --grid axis=v1,v2");
  if (o.seeds.empty()) throw ConfigError("ablate: need at least one seed");
  std::vector<std::vector<std::pair<std::string, std::string>>> cells{{}};
  for (const auto& [axis, values] : axes) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& cell : cells) {
      for (const auto& v : values) {
        auto c = cell;
        c.emplace_back(axis, v);
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }
  const auto tc_base = finish_train_config(o.run);
  // Validate every cell before any training starts.
  for (const auto& cell : cells) {
    ModelOptions m = o.run.model;
    for (const auto& [axis, v] : cell) apply_axis(m, axis, v);
    build_model_config(m, 2, o.run.data.points);
  }
  const auto data = load_data(o.run.data);
  const auto dir = resolve_output(o.run.out.empty() ? fs::path("runs") / "ablate" : fs::path(o.run.out));
  fs::create_directories(dir);
  std::ofstream csv(dir / "ablation.csv");
  csv << "schema_version,variant,seed,oa,macc,flops,params,train_s_per_epoch,test_s_per_epoch,epochs\n";
  int code = kOk;
  for (const auto& cell : cells) {
    ModelOptions m = o.run.model;
    std::string variant;
    for (const auto& [axis, v] : cell) {
      apply_axis(m, axis, v);
      variant += (variant.empty() ? "" : ";") + axis + "=" + v;
    }
    const auto mc = build_model_config(m, data.train.num_classes, o.run.data.points);
    for (auto seed : o.seeds) {
      auto tc = tc_base;
      tc.seed = seed;
      std::string slug = variant + "-seed" + std::to_string(seed);
      std::replace(slug.begin(), slug.end(), ';', '_');
      std::replace(slug.begin(), slug.end(), '=', '-');
      out << "[" << variant << " seed " << seed << "]\n";
      std::ostringstream quiet;
      const auto outcome = train_any(mc, tc, data, o.run, dir / "cells" / slug, quiet);
      const auto& s = outcome.summary;
      if (outcome.code != kOk) {
        out << "  numeric failure: " << s["error"].get<std::string>() << '\n';
        csv << kSchemaVersion << ',' << variant << ',' << seed << ",nan,nan," << s["flops"] << ',' << s["params"]
            << ",nan,nan,0\n";
        code = outcome.code;
        continue;
      }
      out << "  OA " << s["final"]["oa"].get<double>() << "  mAcc " << s["final"]["macc"].get<double>() << '\n';
      csv << kSchemaVersion << ',' << variant << ',' << seed << ',' << s["final"]["oa"].get<double>() << ','
          << s["final"]["macc"].get<double>() << ',' << s["flops"] << ',' << s["params"] << ','
          << s["timing"]["train_seconds_per_epoch"].get<double>() << ','
          << s["timing"]["test_seconds_per_epoch"].get<double>() << ','
          << s["epochs_run"] << '\n'
          << std::flush;
    }
  }
  out << "wrote " << (dir / "ablation.csv").string() << '\n';
  return code;
}

struct GradcheckOptions {
  std::string scope = "all";
  std::size_t seeds = 100;
  std::size_t model_seeds = 3;
  std::string out;
};

int cmd_gradcheck(const GradcheckOptions& o, std::ostream& out) {
  std::vector<std::pair<std::string, CheckCase>> cases;
  if (o.scope == "op" || o.scope == "all") {
    for (auto& c : op_check_cases()) cases.emplace_back("op", std::move(c));
  }
  if (o.scope == "module" || o.scope == "all") {
    for (auto& c : dualnorm_check_cases()) cases.emplace_back("module", std::move(c));
  }
  if (o.scope == "model" || o.scope == "all") cases.emplace_back("model", micro_model_check());
  if (o.seeds == 0) throw ConfigError("gradcheck: --seeds must be positive");
  json report{{"schema_version", kSchemaVersion},
              {"scope", o.scope},
              {"precision", "float64"},
              {"note", "sampling and neighbor indices are frozen per probe; they are piecewise constant in the "
                       "coordinates and carry no gradient"},
              {"cases", json::array()}};
  std::size_t failed = 0;
  const auto start = Clock::now();
  for (const auto& [scope, c] : cases) {
    const std::size_t seeds = scope == "model" ? o.model_seeds : o.seeds;
    double worst = 0;
    std::size_t checked = 0, skipped = 0;
    bool passed = true;
    std::string error;
    for (std::size_t s = 0; s < seeds; ++s) {
      try {
        const auto r = c.run(s);
        worst = std::max(worst, r.max_rel_error);
        checked += r.checked;
        skipped += r.skipped.size();
        passed = passed && r.passed;
      } catch (const std::exception& e) {
        passed = false;
        error = e.what();
        break;
      }
    }
    if (!passed) ++failed;
    out << (passed ? "PASS " : "FAIL ") << std::left << std::setw(40) << c.name << " max rel err "
        << std::scientific << std::setprecision(2) << worst << std::defaultfloat << std::setprecision(6) << '\n';
    json j{{"scope", scope},         {"name", c.name},       {"seeds", seeds},    {"max_rel_error", worst},
           {"coordinates", checked}, {"skipped", skipped},   {"passed", passed}};
    if (!error.empty()) j["error"] = error;
    report["cases"].push_back(std::move(j));
  }
  report["failed"] = failed;
  report["seconds"] = seconds_since(start);
  out << cases.size() - failed << "/" << cases.size() << " cases passed\n";
  if (!o.out.empty()) write_text(resolve_output(o.out), report.dump(2) + "\n");
  return failed ? kNumericError : kOk;
}

struct SynthOptions {
  std::string out;
  std::size_t points = 256;
  std::size_t train = 512;
  std::size_t test = 128;
  double noise = 0.01;
  std::uint64_t seed = 1;
  std::string format = "packed-binary";
  std::vector<std::string> classes;
};

int cmd_synth(const SynthOptions& o, std::ostream& out) {
  SynthSpec spec;
  spec.points = o.points;
  spec.train_count = o.train;
  spec.test_count = o.test;
  spec.noise_sigma = o.noise;
  spec.seed = o.seed;
  if (!o.classes.empty()) spec.classes = o.classes;
  const auto dir = resolve_output(o.out.empty() ? fs::path("data") / "synthetic" : fs::path(o.out));
  const auto manifest = synth_generate(spec, dir, parse_cloud_format(o.format));
  out << "wrote " << manifest.entries.size() << " clouds and " << (dir / "manifest.json").string() << '\n';
  return kOk;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ParseError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return kDataError;
  if (dynamic_cast<const NumericError*>(&e)) return kNumericError;
  return kConfigError;
}

}  // namespace

fs::path resolve_output(const fs::path& path) {
  const char* root = std::getenv("POINTNORM_OUTPUT_ROOT");
  if (path.is_absolute() || !root || !*root) return path;
  return fs::path(root) / path;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"PointNorm point cloud classification"};
  app.set_config("--config", "", "TOML file; [train], [eval], ... sections mirror the flags");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  RunOptions train_opts;
  auto* train = app.add_subcommand("train", "Train a model and write metrics, checkpoints and a summary");
  add_data_options(*train, train_opts.data);
  add_model_options(*train, train_opts.model);
  add_train_options(*train, train_opts);
  train->add_option("--out", train_opts.out, "Output directory");

  EvalOptions eval_opts;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_opts.checkpoint)->required();
  eval->add_option("--model-config", eval_opts.model_config, "Model config JSON the checkpoint must match");
  eval->add_option("--split", eval_opts.split)->check(CLI::IsMember({"train", "test"}))->capture_default_str();
  eval->add_option("--batch-size", eval_opts.batch_size)->capture_default_str();
  eval->add_option("--out", eval_opts.out, "Also write the metrics JSON here");
  add_data_options(*eval, eval_opts.data);

  BenchOptions bench_opts;
  auto* bench = app.add_subcommand("bench", "Measure test/train throughput");
  bench->add_option("--models", bench_opts.models)->delimiter(',')->capture_default_str();
  bench->add_option("--points", bench_opts.points)->capture_default_str();
  bench->add_option("--batch", bench_opts.batch)->capture_default_str();
  bench->add_option("--repeats", bench_opts.repeats)->capture_default_str();
  bench->add_option("--classes", bench_opts.classes)->capture_default_str();
  bench->add_option("--layers", bench_opts.layers)->check(CLI::IsMember({24, 40, 56}))->capture_default_str();
  bench->add_flag("!--no-train", bench_opts.train, "Skip the forward+backward measurement");
  bench->add_option("--out", bench_opts.out, "JSON report path");

  AblateOptions ablate_opts;
  auto* ablate = app.add_subcommand("ablate", "Train every cell of an ablation grid");
  ablate->add_option("--grid", ablate_opts.grid, "axis=v1,v2 (repeatable)")->required();
  ablate->add_option("--seeds", ablate_opts.seeds)->delimiter(',')->capture_default_str();
  add_data_options(*ablate, ablate_opts.run.data);
  add_model_options(*ablate, ablate_opts.run.model);
  add_train_options(*ablate, ablate_opts.run);
  ablate->add_option("--out", ablate_opts.run.out, "Output directory");

  GradcheckOptions gc_opts;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--scope", gc_opts.scope)
      ->check(CLI::IsMember({"op", "module", "model", "all"}))
      ->capture_default_str();
  gradcheck->add_option("--seeds", gc_opts.seeds, "Random seeds per op/module case")->capture_default_str();
  gradcheck->add_option("--model-seeds", gc_opts.model_seeds, "Seeds for the micro-model")->capture_default_str();
  gradcheck->add_option("--out", gc_opts.out, "JSON report path");

  SynthOptions synth_opts;
  auto* synth = app.add_subcommand("synth", "Write the synthetic benchmark to disk");
  synth->add_option("--out", synth_opts.out, "Output directory");
  synth->add_option("--points", synth_opts.points)->capture_default_str();
  synth->add_option("--train", synth_opts.train)->capture_default_str();
  synth->add_option("--test", synth_opts.test)->capture_default_str();
  synth->add_option("--noise", synth_opts.noise)->capture_default_str();
  synth->add_option("--seed", synth_opts.seed)->capture_default_str();
  synth->add_option("--format", synth_opts.format)->capture_default_str();
  synth->add_option("--classes", synth_opts.classes)->delimiter(',');

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    if (train->parsed()) return cmd_train(train_opts, out);
    if (eval->parsed()) return cmd_eval(eval_opts, out);
    if (bench->parsed()) return cmd_bench(bench_opts, out);
    if (ablate->parsed()) return cmd_ablate(ablate_opts, out);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_opts, out);
    if (synth->parsed()) return cmd_synth(synth_opts, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kConfigError;
}

}  // namespace pointnorm::cli
