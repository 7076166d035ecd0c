// dtc: dual-task consistency segmentation experiments on synthetic data.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 selftest failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dtc/experiment.hpp"
#include "dtc/selftest.hpp"

namespace {

using namespace dtc;

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitSelftest = 3;

struct Common {
  std::vector<std::string> overrides;
};

void add_set_option(CLI::App* cmd, Common& common) {
  cmd->add_option("--set", common.overrides, "Override a setting, key=value (repeatable; see `dtc keys`)")
      ->type_name("KEY=VALUE");
}

void apply_all(Settings& s, const Common& common) {
  for (const auto& o : common.overrides) apply_override(s, o);
}

fs::path out_or_default(const std::string& out, const std::string& leaf) {
  return out.empty() ? default_out_dir() / leaf : fs::path(out);
}

std::vector<double> parse_fractions(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(detail::parse_value<double>("--fractions", item));
  return out;
}

void print_dataset_summary(const Dataset& ds, const fs::path& path) {
  double fg = 0.0;
  for (const auto& s : ds.samples) fg += foreground_fraction(*s.mask);
  std::printf("wrote %s: %zu train, %zu test, %ux%u, mean foreground %.3f\n", path.string().c_str(),
              ds.unlabeled_ids.size() + ds.labeled_ids.size(), ds.test_ids.size(), ds.config.image_size,
              ds.config.image_size, fg / static_cast<double>(ds.samples.size()));
}

void print_cells(const std::vector<CellSummary>& rows) {
  for (const auto& r : rows)
    std::printf("%-12s dice %6.2f ± %5.2f  jaccard %6.2f  asd %6.2f  hd95 %6.2f\n", display_name(r.mode).c_str(),
                r.dice.mean, r.dice.std, r.jaccard.mean, r.asd.mean, r.hd95.mean);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-task consistency semi-supervised segmentation on synthetic images.\n"
               "Outputs default to $DTC_OUT_DIR (or ./dtc-runs) when --out is omitted."};
  app.require_subcommand(1);
  app.set_version_flag("--version", "dtc 1.0");

  Settings settings;
  Common common;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  std::string gen_out;
  bool force = false;
  gen->add_option("--out", gen_out, "Dataset file to write (default $DTC_OUT_DIR/data.dtcd)");
  gen->add_option("--seed", settings.gen_seed, "Dataset seed");
  gen->add_option("--size", settings.gen.image_size, "Image side in pixels");
  gen->add_option("--train", settings.gen.train_count, "Training images");
  gen->add_option("--test", settings.gen.test_count, "Test images");
  gen->add_option("--noise", settings.gen.noise_std, "Gaussian noise standard deviation");
  gen->add_flag("--force", force, "Overwrite an existing file");
  add_set_option(gen, common);

  // train
  auto* tr = app.add_subcommand("train", "Train one model");
  std::string data, out;
  std::string mode = "seg+lsf+dtc";
  std::optional<std::uint64_t> seed;
  bool resume = false;
  tr->add_option("--data", data, "Dataset file")->required();
  tr->add_option("--mode", mode, "seg, lsf, seg+lsf or seg+lsf+dtc")->capture_default_str();
  tr->add_option("--labeled-fraction", settings.labeled_fraction, "Share of training images kept labeled")
      ->capture_default_str();
  tr->add_option("--iters", settings.train.t_max, "Last iteration index (t_max)")->capture_default_str();
  tr->add_option("--seed", seed, "Seed for initialisation, batches and the label split");
  tr->add_option("--out", out, "Run directory");
  tr->add_flag("--resume", resume, "Continue from the run directory's last checkpoint");
  add_set_option(tr, common);

  // eval
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on the test split");
  std::string checkpoint, head;
  ev->add_option("--checkpoint", checkpoint, "Checkpoint (.dtcn)")->required();
  ev->add_option("--data", data, "Dataset file")->required();
  ev->add_option("--out", out, "Output directory (default: next to the checkpoint)");
  ev->add_option("--head", head, "seg or lsf (default: from the training manifest)");
  add_set_option(ev, common);

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train all four modes per seed and tabulate");
  std::size_t seeds = 3;
  ab->add_option("--data", data, "Dataset file")->required();
  ab->add_option("--labeled-fraction", settings.labeled_fraction, "Share of training images kept labeled")
      ->capture_default_str();
  ab->add_option("--seeds", seeds, "Number of seeds")->capture_default_str();
  ab->add_option("--seed", seed, "First seed (default 0)");
  ab->add_option("--iters", settings.train.t_max, "Last iteration index (t_max)")->capture_default_str();
  ab->add_option("--out", out, "Output directory");
  add_set_option(ab, common);

  // sweep
  auto* sw = app.add_subcommand("sweep", "Supervised-only against DTC across labeled fractions");
  std::string fractions = "0.05,0.1,0.2,0.5,1.0";
  sw->add_option("--data", data, "Dataset file")->required();
  sw->add_option("--fractions", fractions, "Comma-separated labeled fractions")->capture_default_str();
  sw->add_option("--seeds", seeds, "Number of seeds")->capture_default_str();
  sw->add_option("--seed", seed, "First seed (default 0)");
  sw->add_option("--iters", settings.train.t_max, "Last iteration index (t_max)")->capture_default_str();
  sw->add_option("--out", out, "Output directory");
  add_set_option(sw, common);

  // selftest
  auto* st = app.add_subcommand("selftest", "Gradient, distance-transform and metric property checks");

  // replay
  auto* rp = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  std::string manifest;
  rp->add_option("--manifest", manifest, "manifest.json of an earlier run")->required();
  rp->add_option("--out", out, "Where to write the reproduced outputs")->required();

  // keys
  auto* keys = app.add_subcommand("keys", "List the settings accepted by --set");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (st->parsed()) {
      const auto results = selftest::run_all();
      std::cout << selftest::format_report(results);
      std::size_t failed = 0;
      for (const auto& r : results) failed += !r.passed;
      std::printf("%zu properties, %zu failed\n", results.size(), failed);
      return failed == 0 ? 0 : kExitSelftest;
    }
    if (keys->parsed()) {
      const Json defaults = settings_to_json(Settings{});
      for (const auto& k : setting_keys())
        std::printf("%-24s %-14s %s\n", k.key.c_str(), defaults[k.key].dump().c_str(), k.help.c_str());
      return 0;
    }
    if (rp->parsed()) {
      const Json m = replay(manifest, out);
      std::printf("replayed %s into %s\n", m["command"].get<std::string>().c_str(), out.c_str());
      return 0;
    }

    if (seed) settings.set_seed(*seed);
    if (tr->parsed()) settings.train.mode = detail::parse_value<TrainMode>("--mode", mode);
    apply_all(settings, common);

    if (gen->parsed()) {
      const fs::path path = gen_out.empty() ? default_out_dir() / "data.dtcd" : fs::path(gen_out);
      run_gen_data(settings, path, force);
      print_dataset_summary(load(path), path);
    } else if (tr->parsed()) {
      const fs::path dir =
          out_or_default(out, run_name(settings.train.mode, settings.labeled_fraction, settings.train.seed));
      const Json m = run_train(settings, data, dir, resume);
      std::printf("trained %s (%zu labeled, %zu unlabeled) -> %s\n", to_string(settings.train.mode).c_str(),
                  m["partition"]["labeled"].get<std::size_t>(), m["partition"]["unlabeled"].get<std::size_t>(),
                  (dir / "model.dtcn").string().c_str());
    } else if (ev->parsed()) {
      const fs::path ckpt(checkpoint);
      const fs::path dir = out.empty() ? ckpt.parent_path() / "eval" : fs::path(out);
      std::optional<InferenceHead> h;
      if (!head.empty()) h = parse_head(head);
      run_eval(settings, ckpt, data, dir, h);
      const auto md = read_file(dir / "metrics.md");
      std::cout << std::string(md.begin(), md.end());
    } else if (ab->parsed()) {
      const fs::path dir = out_or_default(out, "ablate");
      const AblationResult r = run_ablate(settings, data, dir, seed_list(seed.value_or(0), seeds));
      print_cells(r.rows);
      std::printf("table: %s\n", (dir / "ablation.md").string().c_str());
    } else if (sw->parsed()) {
      const fs::path dir = out_or_default(out, "sweep");
      const SweepResult r = run_sweep(settings, data, dir, parse_fractions(fractions), seed_list(seed.value_or(0), seeds));
      for (const auto& row : r.rows)
        std::printf("fraction %-5g %-10s dice %6.2f ± %5.2f\n", row.fraction, row.method.c_str(), row.dice.mean,
                    row.dice.std);
      std::printf("csv: %s\n", (dir / "sweep.csv").string().c_str());
    }
    return 0;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "dtc: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dtc: error: %s\n", e.what());
    return kExitRuntime;
  }
}
