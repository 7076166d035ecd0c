#pragma once

// Experiment runner behind the command-line tool: resolved settings with
// dotted-key overrides, run manifests, and the train / eval / ablate / sweep
// protocols.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dtc/binary_io.hpp"
#include "dtc/data.hpp"
#include "dtc/metrics.hpp"
#include "dtc/nn.hpp"
#include "dtc/trainer.hpp"

namespace dtc {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

/// Bad command-line input: unknown keys, unparsable values, missing files
/// named on the command line.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Settings {
  GenConfig gen;
  std::uint64_t gen_seed = 0;
  NetConfig net;
  TrainConfig train;
  double labeled_fraction = 0.2;
  std::uint64_t split_seed = 0;
  DistanceScale lsf_scale = DistanceScale::normalized;
  double threshold = 0.5;

  /// One seed drives the network init, batch sampling and the label split.
  void set_seed(std::uint64_t seed) {
    net.seed = seed;
    train.seed = seed;
    split_seed = seed;
  }
};

namespace detail {

inline std::string to_text(DistanceScale s) { return s == DistanceScale::raw ? "raw" : "normalized"; }

template <typename T>
T parse_value(const std::string& key, std::string_view text) {
  auto bad = [&](const char* what) {
    return UsageError(key + "=" + std::string(text) + ": " + what);
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw bad("expected true or false");
  } else if constexpr (std::is_same_v<T, TrainMode>) {
    try {
      return parse_mode(text);
    } catch (const std::invalid_argument& e) {
      throw bad(e.what());
    }
  } else if constexpr (std::is_same_v<T, DistanceScale>) {
    if (text == "normalized") return DistanceScale::normalized;
    if (text == "raw") return DistanceScale::raw;
    throw bad("expected normalized or raw");
  } else if constexpr (std::is_integral_v<T>) {
    T v{};
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || end != text.data() + text.size()) throw bad("expected a non-negative integer");
    return v;
  } else {
    const std::string s(text);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) throw bad("expected a finite number");
    return v;
  }
}

template <typename T>
Json to_json_value(const T& v) {
  if constexpr (std::is_same_v<T, TrainMode>)
    return to_string(v);
  else if constexpr (std::is_same_v<T, DistanceScale>)
    return to_text(v);
  else
    return v;
}

template <typename T>
T from_json_value(const std::string& key, const Json& j) {
  try {
    if constexpr (std::is_same_v<T, TrainMode> || std::is_same_v<T, DistanceScale>)
      return parse_value<T>(key, j.get<std::string>());
    else
      return j.get<T>();
  } catch (const Json::exception& e) {
    throw UsageError("setting " + key + ": " + e.what());
  }
}

}  // namespace detail

/// A settable configuration key.
struct SettingKey {
  std::string key;
  std::string help;
  std::function<Json(const Settings&)> get;
  std::function<void(Settings&, std::string_view)> set_text;
  std::function<void(Settings&, const Json&)> set_json;
};

template <typename T, typename Access>
SettingKey make_key(std::string key, std::string help, Access access) {
  return {key, std::move(help), [access](const Settings& s) { return detail::to_json_value<T>(access(s)); },
          [access, key](Settings& s, std::string_view text) { access(s) = detail::parse_value<T>(key, text); },
          [access, key](Settings& s, const Json& j) { access(s) = detail::from_json_value<T>(key, j); }};
}

#define DTC_KEY(type, name, field, help) \
  make_key<type>(name, help, [](auto& s) -> auto& { return s.field; })

inline const std::vector<SettingKey>& setting_keys() {
  static const std::vector<SettingKey> keys = {
      DTC_KEY(std::uint32_t, "gen.image_size", gen.image_size, "image side in pixels"),
      DTC_KEY(std::uint32_t, "gen.train_count", gen.train_count, "training images"),
      DTC_KEY(std::uint32_t, "gen.test_count", gen.test_count, "test images"),
      DTC_KEY(double, "gen.noise_std", gen.noise_std, "Gaussian pixel noise"),
      DTC_KEY(double, "gen.contrast", gen.contrast, "foreground minus background intensity"),
      DTC_KEY(double, "gen.background", gen.background, "background intensity"),
      DTC_KEY(double, "gen.axis_min", gen.axis_min, "smallest ellipse semi-axis / image size"),
      DTC_KEY(double, "gen.axis_max", gen.axis_max, "largest ellipse semi-axis / image size"),
      DTC_KEY(double, "gen.deform_amplitude", gen.deform_amplitude, "relative radial deformation"),
      DTC_KEY(std::uint32_t, "gen.deform_harmonics", gen.deform_harmonics, "number of deformation harmonics"),
      DTC_KEY(double, "gen.bias_amplitude", gen.bias_amplitude, "smooth intensity bias field amplitude"),
      DTC_KEY(std::uint32_t, "gen.distractors", gen.distractors, "unlabeled bright blobs per image"),
      DTC_KEY(double, "gen.distractor_contrast", gen.distractor_contrast, "peak intensity of distractor blobs"),
      DTC_KEY(double, "gen.distractor_radius", gen.distractor_radius, "distractor radius / image size"),
      DTC_KEY(std::uint64_t, "gen.seed", gen_seed, "dataset seed"),
      DTC_KEY(std::uint32_t, "net.in_channels", net.in_channels, "input channels"),
      DTC_KEY(std::uint32_t, "net.base_channels", net.base_channels, "channels at the first level"),
      DTC_KEY(std::uint32_t, "net.depth", net.depth, "pooling levels"),
      DTC_KEY(double, "net.leaky_slope", net.leaky_slope, "leaky ReLU negative slope"),
      DTC_KEY(std::uint64_t, "net.seed", net.seed, "weight initialisation seed"),
      DTC_KEY(std::uint64_t, "train.t_max", train.t_max, "last iteration index"),
      DTC_KEY(double, "train.lr0", train.lr0, "initial learning rate"),
      DTC_KEY(double, "train.lr_decay", train.lr_decay, "learning-rate decay factor"),
      DTC_KEY(std::uint64_t, "train.lr_milestone", train.lr_milestone, "decay period, 0 = t_max * 2500 / 6000"),
      DTC_KEY(double, "train.momentum", train.momentum, "SGD momentum"),
      DTC_KEY(double, "train.k", train.k, "sharpness of the inverse level-set transform"),
      DTC_KEY(TrainMode, "train.mode", train.mode, "seg, lsf, seg+lsf or seg+lsf+dtc"),
      DTC_KEY(std::uint32_t, "train.labeled_batch", train.labeled_batch, "labeled images per batch"),
      DTC_KEY(std::uint32_t, "train.unlabeled_batch", train.unlabeled_batch, "unlabeled images per batch"),
      DTC_KEY(std::uint64_t, "train.seed", train.seed, "batch sampling and augmentation seed"),
      DTC_KEY(bool, "train.augment", train.augment, "random flips and quarter turns"),
      DTC_KEY(bool, "train.zero_init_heads", train.zero_init_heads, "start both heads at zero"),
      DTC_KEY(std::uint64_t, "train.checkpoint_every", train.checkpoint_every, "resume checkpoint period, 0 = off"),
      DTC_KEY(double, "data.labeled_fraction", labeled_fraction, "share of training images kept labeled"),
      DTC_KEY(std::uint64_t, "data.split_seed", split_seed, "seed of the labeled/unlabeled split"),
      DTC_KEY(DistanceScale, "data.lsf_scale", lsf_scale, "level-set targets: normalized or raw"),
      DTC_KEY(double, "eval.threshold", threshold, "probability threshold for the predicted mask"),
  };
  return keys;
}

#undef DTC_KEY

inline const SettingKey& find_key(std::string_view key) {
  for (const auto& k : setting_keys())
    if (k.key == key) return k;
  throw UsageError("unknown setting '" + std::string(key) + "' (run `dtc keys` for the list)");
}

/// Applies "key=value".
inline void apply_override(Settings& s, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw UsageError("--set expects key=value, got '" + std::string(assignment) + "'");
  find_key(assignment.substr(0, eq)).set_text(s, assignment.substr(eq + 1));
}

inline Json settings_to_json(const Settings& s) {
  Json j = Json::object();
  for (const auto& k : setting_keys()) j[k.key] = k.get(s);
  return j;
}

/// Keys absent from `j` keep their defaults; unknown keys are rejected.
inline Settings settings_from_json(const Json& j) {
  if (!j.is_object()) throw UsageError("settings must be a JSON object");
  Settings s;
  for (const auto& [key, value] : j.items()) find_key(key).set_json(s, value);
  return s;
}

inline void validate(const Settings& s) {
  s.net.validate();
  s.train.validate();
  if (!(s.labeled_fraction > 0.0 && s.labeled_fraction <= 1.0))
    throw std::invalid_argument("data.labeled_fraction must be in (0, 1]");
  if (!(s.threshold >= 0.0 && s.threshold < 1.0)) throw std::invalid_argument("eval.threshold must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// Files and manifests

inline constexpr int kManifestFormat = 1;

/// Default output root: $DTC_OUT_DIR, else ./dtc-runs.
inline fs::path default_out_dir() {
  if (const char* env = std::getenv("DTC_OUT_DIR"); env != nullptr && *env != '\0') return env;
  return "dtc-runs";
}

/// Identifies file contents in manifests as "<bytes>:<adler32>". A whole-file
/// CRC32 would be useless here: dataset files end in their own CRC32, which
/// drives the CRC of the whole file to a constant.
inline std::string file_digest(const fs::path& path) {
  const auto bytes = read_file(path);
  uLong a = ::adler32(0L, Z_NULL, 0);
  a = ::adler32(a, bytes.data(), static_cast<uInt>(bytes.size()));
  char buf[48];
  std::snprintf(buf, sizeof buf, "%zu:%08lx", bytes.size(), static_cast<unsigned long>(a));
  return buf;
}

inline Json manifest_header(const std::string& command, const Settings& s) {
  Json m = Json::object();
  m["tool"] = "dtc";
  m["format"] = kManifestFormat;
  m["command"] = command;
  m["settings"] = settings_to_json(s);
  return m;
}

inline void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline Json read_json(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return Json::parse(bytes.begin(), bytes.end());
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline Json input_record(const fs::path& path) {
  return Json{{"path", fs::absolute(path).lexically_normal().string()}, {"digest", file_digest(path)}};
}

/// Rejects an input that no longer matches the manifest that named it.
inline fs::path check_input_record(const Json& rec, const std::string& what) {
  const fs::path path = rec.at("path").get<std::string>();
  if (!fs::exists(path)) throw std::runtime_error(what + " " + path.string() + " no longer exists");
  const std::string digest = file_digest(path);
  if (digest != rec.at("digest").get<std::string>())
    throw std::runtime_error(what + " " + path.string() + " changed since the manifest was written (digest " + digest +
                             ", recorded " + rec.at("digest").get<std::string>() + ")");
  return path;
}

inline Dataset load_dataset(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("dataset " + path.string() + " does not exist");
  return load(path);
}

// ---------------------------------------------------------------------------
// Single runs

/// Dataset as seen by one run: split, optionally stripped of the unlabeled
/// pool, with level-set targets filled in.
inline Dataset prepare_run_data(const Dataset& base, const Settings& s) {
  Dataset ds = split(base, s.labeled_fraction, s.split_seed);
  if (s.train.mode != TrainMode::seg_lsf_dtc) ds = labeled_only(ds);
  precompute_lsf(ds, s.lsf_scale);
  return ds;
}

inline std::vector<std::string> log_notes(const Dataset& ds, const Settings& s) {
  return {"labeled=" + std::to_string(ds.labeled_ids.size()) + " unlabeled=" + std::to_string(ds.unlabeled_ids.size()) +
          " test=" + std::to_string(ds.test_ids.size()) + " mode=" + to_string(s.train.mode)};
}

struct RunResult {
  TrainState state;
  MetricsReport metrics;
  std::size_t labeled = 0;
  std::size_t unlabeled = 0;
  double seconds = 0.0;
};

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

/// Trains into `out` (model.dtcn, train_log.csv, periodic resume checkpoints)
/// and, if `evaluate_test` is set, scores the test split into metrics.csv.
inline RunResult train_and_save(const Dataset& base, const Settings& s, const fs::path& out, bool resume,
                                bool evaluate_test) {
  validate(s);
  const auto start = std::chrono::steady_clock::now();
  const Dataset ds = prepare_run_data(base, s);
  const fs::path ckpt = out / "checkpoint.dtcn";
  const fs::path ckpt_state = out / "checkpoint.dtcs";

  RunResult result;
  result.labeled = ds.labeled_ids.size();
  result.unlabeled = ds.unlabeled_ids.size();
  if (resume && fs::exists(ckpt) && fs::exists(ckpt_state)) {
    result.state = load_state(ckpt, ckpt_state);
    if (!(result.state.net.config == s.net))
      throw std::runtime_error("resume checkpoint " + ckpt.string() + " was written with a different network config");
    if (result.state.t > s.train.t_max + 1)
      throw std::runtime_error("resume checkpoint is past train.t_max");
  } else {
    result.state = start_training(ds, s.net, s.train);
  }
  continue_training(result.state, ds, s.train,
                    [&](const TrainState& st) { save_state(st, ckpt, ckpt_state); });
  save_checkpoint(result.state.net, out / "model.dtcn");
  write_text(out / "train_log.csv", log_csv(result.state.history, log_notes(ds, s)));
  if (evaluate_test) {
    result.metrics = evaluate(result.state.net, ds, s.threshold, head_for(s.train.mode), Sharpness(s.train.k));
    write_text(out / "metrics.csv", to_csv(result.metrics));
  }
  result.seconds = seconds_since(start);
  return result;
}

// ---------------------------------------------------------------------------
// Commands. Each returns the manifest it wrote.

inline Json run_gen_data(const Settings& s, const fs::path& out, bool force) {
  if (fs::exists(out) && !force) throw UsageError(out.string() + " exists (pass --force to overwrite)");
  const Dataset ds = generate(s.gen, s.gen_seed);
  save(ds, out);
  Json m = manifest_header("gen-data", s);
  m["outputs"] = Json{{"dataset", Json{{"path", fs::absolute(out).lexically_normal().string()}, {"digest", file_digest(out)}}}};
  write_json(fs::path(out.string() + ".manifest.json"), m);
  return m;
}

/// manifest.json and timings.json for a finished training run in `out`.
inline Json write_train_manifest(const Settings& s, const Json& data_record, const RunResult& r, const fs::path& out) {
  Json m = manifest_header("train", s);
  m["inputs"] = Json{{"data", data_record}};
  m["outputs"] = Json{{"checkpoint", "model.dtcn"}, {"log", "train_log.csv"}};
  m["partition"] = Json{{"labeled", r.labeled}, {"unlabeled", r.unlabeled}};
  write_json(out / "manifest.json", m);
  write_json(out / "timings.json", Json{{"train_seconds", r.seconds}});
  return m;
}

inline Json run_train(const Settings& s, const fs::path& data, const fs::path& out, bool resume = false) {
  validate(s);
  const Dataset base = load_dataset(data);
  const Json input = input_record(data);
  fs::create_directories(out);
  const RunResult r = train_and_save(base, s, out, resume, false);
  return write_train_manifest(s, input, r, out);
}

/// Inference head for a checkpoint: the level-set head when the run that
/// wrote it trained in lsf mode, else the segmentation head.
inline InferenceHead infer_head(const fs::path& checkpoint) {
  const fs::path manifest = checkpoint.parent_path() / "manifest.json";
  if (!fs::exists(manifest)) return InferenceHead::seg;
  const Json m = read_json(manifest);
  if (m.contains("settings") && m["settings"].contains("train.mode") && m["settings"]["train.mode"] == "lsf")
    return InferenceHead::lsf;
  return InferenceHead::seg;
}

inline std::string head_name(InferenceHead h) { return h == InferenceHead::lsf ? "lsf" : "seg"; }

inline InferenceHead parse_head(std::string_view s) {
  if (s == "seg") return InferenceHead::seg;
  if (s == "lsf") return InferenceHead::lsf;
  throw UsageError("--head expects seg or lsf, got '" + std::string(s) + "'");
}

inline std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string metrics_markdown_row(const std::string& name, const MetricsReport& r) {
  return "| " + name + " | " + fixed(r.dice.mean) + " | " + fixed(r.jaccard.mean) + " | " + fixed(r.asd.mean) + " | " +
         fixed(r.hd95.mean) + " | " + std::to_string(r.degenerate_count) + "/" + std::to_string(r.rows.size()) + " |";
}

inline Json run_eval(const Settings& s, const fs::path& checkpoint, const fs::path& data, const fs::path& out,
                     std::optional<InferenceHead> head = std::nullopt) {
  if (!fs::exists(checkpoint)) throw UsageError("checkpoint " + checkpoint.string() + " does not exist");
  const Dataset ds = load_dataset(data);
  DualTaskNet net = load_checkpoint(checkpoint);
  if (ds.test_ids.empty()) throw std::runtime_error(data.string() + " has no test samples");
  const Sample& probe = ds.sample(ds.test_ids.front());
  try {
    check_input(net.config, Shape{1, net.config.in_channels, probe.image.height, probe.image.width});
  } catch (const ShapeError& e) {
    throw std::runtime_error("checkpoint " + checkpoint.string() + " does not fit dataset " + data.string() + ": " +
                             e.what());
  }
  const InferenceHead h = head ? *head : infer_head(checkpoint);
  const MetricsReport report = evaluate(net, ds, s.threshold, h, Sharpness(s.train.k));
  fs::create_directories(out);
  write_text(out / "metrics.csv", to_csv(report));
  write_text(out / "metrics.md", "| Model | Dice (%) | Jaccard (%) | ASD (px) | 95HD (px) | Degenerate |\n"
                                 "|---|---|---|---|---|---|\n" +
                                     metrics_markdown_row(checkpoint.parent_path().filename().string(), report) + "\n");
  Json m = manifest_header("eval", s);
  m["inputs"] = Json{{"checkpoint", input_record(checkpoint)}, {"data", input_record(data)}};
  m["head"] = head_name(h);
  m["outputs"] = Json{{"metrics", "metrics.csv"}, {"table", "metrics.md"}};
  write_json(out / "manifest.json", m);
  return m;
}

inline std::string run_name(TrainMode mode, double fraction, std::uint64_t seed) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s-f%g-seed%llu", to_string(mode).c_str(), fraction,
                static_cast<unsigned long long>(seed));
  return buf;
}

/// Aggregate over seeds of one (fraction, mode) cell.
struct CellSummary {
  TrainMode mode = TrainMode::seg;
  double fraction = 0.0;
  std::size_t labeled = 0;
  std::size_t unlabeled = 0;
  MeanStd dice, jaccard, asd, hd95;
  std::size_t degenerate = 0;
};

struct GridRun {
  Json record;
  double dice = 0.0, jaccard = 0.0, asd = 0.0, hd95 = 0.0;
  std::size_t degenerate = 0;
  std::size_t labeled = 0, unlabeled = 0;
  double seconds = 0.0;
};

/// Trains and evaluates one configuration per seed under `root/runs/`.
inline std::vector<GridRun> run_seeds(const Dataset& base, const Json& data_record, Settings s, TrainMode mode,
                                      double fraction, const std::vector<std::uint64_t>& seeds, const fs::path& root) {
  std::vector<GridRun> out;
  for (std::uint64_t seed : seeds) {
    s.train.mode = mode;
    s.labeled_fraction = fraction;
    s.set_seed(seed);
    const std::string name = run_name(mode, fraction, seed);
    const RunResult r = train_and_save(base, s, root / "runs" / name, false, true);
    write_train_manifest(s, data_record, r, root / "runs" / name);
    GridRun g;
    g.dice = r.metrics.dice.mean;
    g.jaccard = r.metrics.jaccard.mean;
    g.asd = r.metrics.asd.mean;
    g.hd95 = r.metrics.hd95.mean;
    g.degenerate = r.metrics.degenerate_count;
    g.labeled = r.labeled;
    g.unlabeled = r.unlabeled;
    g.seconds = r.seconds;
    g.record = Json{{"name", name},
                    {"mode", to_string(mode)},
                    {"labeled_fraction", fraction},
                    {"seed", seed},
                    {"dir", "runs/" + name},
                    {"labeled", r.labeled},
                    {"unlabeled", r.unlabeled},
                    {"dice", g.dice}};
    out.push_back(std::move(g));
  }
  return out;
}

inline CellSummary summarize(TrainMode mode, double fraction, const std::vector<GridRun>& runs) {
  CellSummary c;
  c.mode = mode;
  c.fraction = fraction;
  std::vector<double> d, j, a, h;
  for (const auto& r : runs) {
    d.push_back(r.dice);
    j.push_back(r.jaccard);
    a.push_back(r.asd);
    h.push_back(r.hd95);
    c.degenerate += r.degenerate;
    c.labeled = r.labeled;
    c.unlabeled = r.unlabeled;
  }
  c.dice = mean_std(d);
  c.jaccard = mean_std(j);
  c.asd = mean_std(a);
  c.hd95 = mean_std(h);
  return c;
}

inline std::string display_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::seg: return "Seg";
    case TrainMode::lsf: return "LSF";
    case TrainMode::seg_lsf: return "Seg+LSF";
    case TrainMode::seg_lsf_dtc: return "Seg+LSF+DTC";
  }
  return "?";
}

inline std::string pm(const MeanStd& m) { return fixed(m.mean) + " ± " + fixed(m.std); }

inline std::string ablation_markdown(const std::vector<CellSummary>& rows, std::size_t params) {
  std::ostringstream os;
  os << "| Method | Labeled | Unlabeled | Dice (%) | Jaccard (%) | ASD (px) | 95HD (px) | Degenerate | Params (M) |\n";
  os << "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    os << "| " << display_name(r.mode) << " | " << r.labeled << " | " << r.unlabeled << " | " << pm(r.dice) << " | "
       << pm(r.jaccard) << " | " << pm(r.asd) << " | " << pm(r.hd95) << " | " << r.degenerate << " | "
       << fixed(static_cast<double>(params) / 1e6, 3) << " |\n";
  return os.str();
}

inline std::string ablation_csv(const std::vector<CellSummary>& rows, std::size_t params) {
  std::ostringstream os;
  os << "method,labeled,unlabeled,dice_mean,dice_std,jaccard_mean,jaccard_std,asd_mean,asd_std,hd95_mean,hd95_std,"
        "degenerate,params\n";
  for (const auto& r : rows)
    os << to_string(r.mode) << ',' << r.labeled << ',' << r.unlabeled << ',' << format_number(r.dice.mean) << ','
       << format_number(r.dice.std) << ',' << format_number(r.jaccard.mean) << ',' << format_number(r.jaccard.std)
       << ',' << format_number(r.asd.mean) << ',' << format_number(r.asd.std) << ',' << format_number(r.hd95.mean)
       << ',' << format_number(r.hd95.std) << ',' << r.degenerate << ',' << params << '\n';
  return os.str();
}

inline std::string timings_csv(const std::vector<GridRun>& runs) {
  std::ostringstream os;
  os << "run,seconds\n";
  for (const auto& r : runs) os << r.record["name"].get<std::string>() << ',' << fixed(r.seconds, 3) << '\n';
  return os.str();
}

inline std::vector<std::uint64_t> seed_list(std::uint64_t first, std::size_t count) {
  if (count == 0) throw UsageError("--seeds must be at least 1");
  std::vector<std::uint64_t> seeds(count);
  for (std::size_t i = 0; i < count; ++i) seeds[i] = first + i;
  return seeds;
}

struct AblationResult {
  std::vector<CellSummary> rows;  // Seg, LSF, Seg+LSF, Seg+LSF+DTC
  Json manifest;
};

inline AblationResult run_ablate(const Settings& s, const fs::path& data, const fs::path& out,
                                 const std::vector<std::uint64_t>& seeds) {
  validate(s);
  const Dataset base = load_dataset(data);
  const Json input = input_record(data);
  fs::create_directories(out);
  AblationResult result;
  std::vector<GridRun> all;
  Json runs = Json::array();
  for (TrainMode mode : kAllModes) {
    auto cell = run_seeds(base, input, s, mode, s.labeled_fraction, seeds, out);
    result.rows.push_back(summarize(mode, s.labeled_fraction, cell));
    for (auto& r : cell) {
      runs.push_back(r.record);
      all.push_back(std::move(r));
    }
  }
  const std::size_t params = parameter_count(s.net);
  write_text(out / "ablation.md", ablation_markdown(result.rows, params));
  write_text(out / "ablation.csv", ablation_csv(result.rows, params));
  write_text(out / "timings.csv", timings_csv(all));
  Json m = manifest_header("ablate", s);
  m["inputs"] = Json{{"data", input}};
  m["seeds"] = seeds;
  m["outputs"] = Json{{"table", "ablation.md"}, {"csv", "ablation.csv"}};
  m["runs"] = runs;
  write_json(out / "manifest.json", m);
  result.manifest = m;
  return result;
}

struct SweepRow {
  double fraction = 0.0;
  std::string method;  // "supervised" or "dtc"
  MeanStd dice;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  Json manifest;
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "fraction,method,dice_mean,dice_std\n";
  char buf[32];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%g", r.fraction);
    os << buf << ',' << r.method << ',' << format_number(r.dice.mean) << ',' << format_number(r.dice.std) << '\n';
  }
  return os.str();
}

/// Supervised-only (seg mode on the labeled images alone) against full DTC at
/// each labeled fraction.
inline SweepResult run_sweep(const Settings& s, const fs::path& data, const fs::path& out,
                             const std::vector<double>& fractions, const std::vector<std::uint64_t>& seeds) {
  validate(s);
  if (fractions.empty()) throw UsageError("--fractions is empty");
  for (double f : fractions)
    if (!(f > 0.0 && f <= 1.0)) throw UsageError("labeled fractions must be in (0, 1]");
  const Dataset base = load_dataset(data);
  const Json input = input_record(data);
  fs::create_directories(out);
  SweepResult result;
  std::vector<GridRun> all;
  Json runs = Json::array();
  for (double f : fractions) {
    for (auto [mode, method] : {std::pair{TrainMode::seg, "supervised"}, std::pair{TrainMode::seg_lsf_dtc, "dtc"}}) {
      auto cell = run_seeds(base, input, s, mode, f, seeds, out);
      result.rows.push_back({f, method, summarize(mode, f, cell).dice});
      for (auto& r : cell) {
        r.record["method"] = method;
        runs.push_back(r.record);
        all.push_back(std::move(r));
      }
    }
  }
  write_text(out / "sweep.csv", sweep_csv(result.rows));
  write_text(out / "timings.csv", timings_csv(all));
  Json m = manifest_header("sweep", s);
  m["inputs"] = Json{{"data", input}};
  m["fractions"] = fractions;
  m["seeds"] = seeds;
  m["outputs"] = Json{{"csv", "sweep.csv"}};
  m["runs"] = runs;
  write_json(out / "manifest.json", m);
  result.manifest = m;
  return result;
}

/// Re-executes the command recorded in a manifest, writing into `out`.
inline Json replay(const fs::path& manifest_path, const fs::path& out) {
  const Json m = read_json(manifest_path);
  if (m.value("tool", "") != "dtc") throw UsageError(manifest_path.string() + " is not a dtc manifest");
  if (m.value("format", 0) != kManifestFormat)
    throw UsageError(manifest_path.string() + ": unsupported manifest format");
  const Settings s = settings_from_json(m.at("settings"));
  const std::string command = m.at("command").get<std::string>();
  try {
    if (command == "gen-data") return run_gen_data(s, out, true);
    if (command == "train") return run_train(s, check_input_record(m.at("inputs").at("data"), "dataset"), out);
    if (command == "eval")
      return run_eval(s, check_input_record(m.at("inputs").at("checkpoint"), "checkpoint"),
                      check_input_record(m.at("inputs").at("data"), "dataset"), out, parse_head(m.at("head").get<std::string>()));
    if (command == "ablate")
      return run_ablate(s, check_input_record(m.at("inputs").at("data"), "dataset"), out,
                        m.at("seeds").get<std::vector<std::uint64_t>>())
          .manifest;
    if (command == "sweep")
      return run_sweep(s, check_input_record(m.at("inputs").at("data"), "dataset"), out,
                       m.at("fractions").get<std::vector<double>>(), m.at("seeds").get<std::vector<std::uint64_t>>())
          .manifest;
  } catch (const Json::exception& e) {
    throw UsageError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  throw UsageError(manifest_path.string() + ": cannot replay command '" + command + "'");
}

}  // namespace dtc
