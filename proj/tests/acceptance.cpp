// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any
// fails.
//
//   acceptance [--out DIR] [--only N[,N...]]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dtc/experiment.hpp"
#include "dtc/selftest.hpp"

namespace {

using namespace dtc;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool all_passed(const std::vector<selftest::PropertyResult>& rs, std::string& worst) {
  bool ok = true;
  for (const auto& r : rs) {
    if (!r.passed) {
      ok = false;
      worst += " FAILED " + r.name + " (" + r.detail + ")";
    }
  }
  return ok;
}

/// The synthetic task used for the learning criteria: 32x32 images with
/// heavy noise, a strong per-image bias field and three unlabeled bright
/// distractor blobs per image.
Settings desk_settings() {
  Settings s;
  s.gen.image_size = 32;
  s.gen.noise_std = 0.5;
  s.gen.bias_amplitude = 1.0;
  s.gen.distractors = 3;
  s.gen.distractor_contrast = 1.0;
  return s;
}

constexpr std::size_t kSeeds = 3;
constexpr double kAblationFraction = 0.1;

// The ablation's Seg and Seg+LSF+DTC cells are the sweep's 10% cells.
std::optional<AblationResult> g_ablation;

Outcome distance_oracle() {
  const auto t0 = Clock::now();
  const auto r = selftest::check_distance_oracle(500, 32);
  const double secs = seconds_since(t0);
  return {r.passed && secs < 30.0, fmt("%s, max error %.2e, %.1f s", r.detail.c_str(), r.max_error, secs)};
}

Outcome round_trip() {
  const auto r = selftest::check_round_trip(200, 32);
  return {r.passed, r.detail};
}

Outcome gradients() {
  std::vector<selftest::PropertyResult> rs = selftest::check_primitive_gradients();
  rs.push_back(selftest::check_saturated_inverse());
  rs.push_back(selftest::check_inverse_gradient());
  rs.push_back(selftest::check_total_loss_gradient(1500.0));
  std::string failures;
  const bool ok = all_passed(rs, failures);
  double worst = 0.0;
  for (const auto& r : rs) worst = std::max(worst, r.max_error);
  return {ok, fmt("%zu checks, worst error %.2e", rs.size(), worst) + failures};
}

Outcome loss_identities() {
  std::mt19937_64 rng(5);
  NetConfig nc;
  nc.base_channels = 2;
  nc.depth = 1;
  const std::size_t side = 8;
  const Tensor images = selftest::detail::random_tensor(rng, {4, 1, side, side});
  Tensor masks(Shape{2, 1, side, side}), levels(Shape{2, 1, side, side});
  for (std::size_t n = 0; n < 2; ++n) {
    const Mask m = oracle::random_nondegenerate_mask(rng, side);
    Mask padded(side, side, 0);
    for (std::size_t y = 0; y < m.height; ++y)
      for (std::size_t x = 0; x < m.width; ++x) padded(y, x) = m(y, x);
    const LevelSetMap l = signed_distance(padded);
    for (std::size_t i = 0; i < side * side; ++i) {
      masks[n * side * side + i] = padded.cells[i];
      levels[n * side * side + i] = l.values.cells[i];
    }
  }

  double worst_recompose = 0.0, zero_dtc = 0.0;
  for (bool zero : {false, true}) {
    DualTaskNet net = init(nc);
    if (zero) zero_heads(net);
    for (double t : {0.0, 17.0, 50.0, 99.0, 100.0}) {
      Tape tape;
      const DualOutputs out = forward(net, bind(tape, net), tape.constant(images));
      const LabeledTargets targets{2, tape.constant(masks), tape.constant(levels)};
      const LossBreakdown b = total_loss(out, targets, t, 100.0, Sharpness(), LossTerms{}).breakdown;
      worst_recompose = std::max(worst_recompose, std::abs(b.total - (b.seg + b.lsf + b.lambda_d * b.dtc)));
      if (zero) zero_dtc = std::max(zero_dtc, b.dtc);
    }
  }
  const double start = ramp_weight(0.0, 100.0), end = ramp_weight(100.0, 100.0);
  const bool ok = zero_dtc == 0.0 && std::abs(start - std::exp(-5.0)) < 1e-12 && std::abs(start - 0.0067379) < 1e-7 &&
                  std::abs(end - 1.0) < 1e-12 && worst_recompose < 1e-12;
  return {ok, fmt("dtc(zero heads) %.1e, lambda(0) %.10f, lambda(t_max) %.1f, recomposition error %.1e", zero_dtc,
                  start, end, worst_recompose)};
}

Outcome metric_oracle() {
  const auto s = selftest::check_surface_oracle(200, 16);
  const auto o = selftest::check_overlap_hand_case();
  return {s.passed && o.passed, s.detail + "; " + o.detail};
}

fs::path desk_data(const fs::path& root) {
  const fs::path p = root / "data.dtcd";
  if (!fs::exists(p)) run_gen_data(desk_settings(), p, true);
  return p;
}

Outcome ablation(const fs::path& root) {
  Settings s = desk_settings();
  s.labeled_fraction = kAblationFraction;
  const auto t0 = Clock::now();
  const AblationResult& r = g_ablation.emplace(run_ablate(s, desk_data(root), root / "ablate", seed_list(0, kSeeds)));
  const double mins = seconds_since(t0) / 60.0;
  const double seg = r.rows[0].dice.mean, seg_lsf = r.rows[2].dice.mean, full = r.rows[3].dice.mean;
  const bool between = seg <= seg_lsf && seg_lsf <= full;
  const bool near = std::abs(seg_lsf - full) <= 1.0;
  const bool ok = full - seg >= 2.0 && (between || near) && mins < 20.0;
  return {ok, fmt("Dice Seg %.2f, LSF %.2f, Seg+LSF %.2f, Seg+LSF+DTC %.2f (gain %+.2f) over %zu seeds, %.1f min", seg,
                  r.rows[1].dice.mean, seg_lsf, full, full - seg, kSeeds, mins)};
}

Outcome semi_supervised(const fs::path& root) {
  std::vector<double> fractions{0.2, 0.5, 1.0};
  if (!g_ablation) fractions.insert(fractions.begin(), kAblationFraction);
  const SweepResult r = run_sweep(desk_settings(), desk_data(root), root / "sweep", fractions, seed_list(0, kSeeds));
  std::vector<std::pair<double, double>> cells;  // (supervised, dtc) per fraction
  if (g_ablation) {
    fractions.insert(fractions.begin(), kAblationFraction);
    cells.emplace_back(g_ablation->rows[0].dice.mean, g_ablation->rows[3].dice.mean);
  }
  for (std::size_t i = 0; 2 * i + 1 < r.rows.size(); ++i) cells.emplace_back(r.rows[2 * i].dice.mean, r.rows[2 * i + 1].dice.mean);
  std::vector<double> gaps;
  std::string line;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    gaps.push_back(cells[i].second - cells[i].first);
    line += fmt("%s%g: %.2f vs %.2f", i ? ", " : "", fractions[i], cells[i].second, cells[i].first);
  }
  const double at20 = gaps[1];
  const bool last_smallest = gaps.back() <= *std::min_element(gaps.begin(), gaps.end() - 1);
  return {at20 >= 2.0 && last_smallest,
          fmt("gain at 20%% labels %+.2f, gap at 100%% %+.2f; DTC vs supervised Dice ", at20, gaps.back()) + line};
}

Outcome determinism(const fs::path& root) {
  // Replay full-length training runs from their manifests.
  std::vector<fs::path> runs;
  if (g_ablation)
    for (TrainMode m : {TrainMode::seg, TrainMode::seg_lsf_dtc})
      runs.push_back(root / "ablate" / "runs" / run_name(m, kAblationFraction, 0));
  if (runs.empty()) {
    Settings s = desk_settings();
    s.train.t_max = 200;
    run_train(s, desk_data(root), root / "train");
    runs.push_back(root / "train");
  }
  std::size_t identical = 0;
  for (const auto& run : runs) {
    const fs::path again = root / "replay" / run.filename();
    replay(run / "manifest.json", again);
    identical += read_file(run / "model.dtcn") == read_file(again / "model.dtcn") &&
                 read_file(run / "train_log.csv") == read_file(again / "train_log.csv");
  }
  return {identical == runs.size(),
          fmt("%zu/%zu replayed runs with bitwise-identical checkpoint and log", identical, runs.size())};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path root = fs::temp_directory_path() / "dtc-acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--out") == 0 && i + 1 < argc) {
      root = argv[++i];
    } else if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string item; std::getline(ss, item, ',');) only.insert(std::stoi(item));
    } else {
      std::fprintf(stderr, "usage: acceptance [--out DIR] [--only N[,N...]]\n");
      return 2;
    }
  }
  fs::remove_all(root);
  fs::create_directories(root);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"signed distance matches brute force", distance_oracle},
      {"level-set round trip", round_trip},
      {"gradient suite", gradients},
      {"loss identities", loss_identities},
      {"surface metrics match brute force", metric_oracle},
      {"ablation ordering at 10% labels", [&] { return ablation(root); }},
      {"semi-supervised gain at 20% labels", [&] { return semi_supervised(root); }},
      {"training replays bit-identically", [&] { return determinism(root); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
