// fedsim: run federated training grids and inspect partitions.
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedsim/error.hpp"
#include "fedsim/experiment.hpp"

namespace ex = fedsim::experiment;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitPartial = 2;

int cmd_run(const std::string& config_path, const std::string& out_dir, std::optional<std::uint64_t> seed,
            const ex::RunOptions& opts) {
  auto cfg = ex::load_config(config_path);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  if (seed) cfg.master_seed = *seed;

  const auto bundle = ex::run_grid(cfg, opts);
  std::size_t failed = 0;
  for (const auto& c : bundle.cells) {
    if (c.ok) {
      const auto& last = c.series.records.back();
      std::printf("%-28s %-14s acc=%.4f f1=%.4f sim_time=%.3f\n", c.setting.c_str(), c.strategy.c_str(),
                  last.accuracy, last.macro_f1, c.total_sim_time);
    } else {
      ++failed;
      std::fprintf(stderr, "%s / %s failed: %s\n", c.setting.c_str(), c.strategy.c_str(), c.error.c_str());
    }
  }
  for (const auto& w : bundle.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("%zu cells, %zu failed, results in %s\n", bundle.cells.size(), failed,
              cfg.output_dir.c_str());
  return failed == 0 ? kExitOk : kExitPartial;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator"};
  app.set_version_flag("--version", std::string(ex::kVersion));
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> strategies;
  ex::RunOptions opts;

  auto* run = app.add_subcommand("run", "Run every (setting, strategy) cell of a config");
  run->add_option("--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "Output directory (overrides output_dir)");
  run->add_option("--seed", seed, "Master seed (overrides master_seed)");
  run->add_flag("--dump-schedule", opts.dump_schedule, "Write per-cell instruction schedules");
  run->add_flag("--dump-events", opts.dump_events, "Write per-cell event logs as JSONL");
  run->add_option("--strategies", strategies, "Comma-separated strategy names to run")->delimiter(',');
  run->add_option("--grid-filter", opts.grid_filter, "Regex selecting setting ids");

  auto* report = app.add_subcommand("partition-report", "Print shard sizes and label histograms");
  report->add_option("--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) {
      opts.strategy_filter = strategies;
      opts.threads = ex::thread_count_from_env();
      return cmd_run(config_path, out_dir, seed, opts);
    }
    std::cout << ex::partition_report(ex::load_config(config_path));
    return kExitOk;
  } catch (const fedsim::ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
}
