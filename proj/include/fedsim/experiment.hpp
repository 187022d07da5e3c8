#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/runtime.hpp"
#include "fedsim/strategies.hpp"

namespace fedsim::experiment {

inline constexpr const char* kVersion = "fedsim 0.1.0";

struct SynthSource {
  std::size_t num_classes = 3;
  std::size_t per_class = 1000;
  std::size_t test_per_class = 200;
  std::size_t dim = 8;
  double separation = 6.0;
  double noise_sigma = 1.0;
};

struct IdxSource {
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  std::size_t num_classes = 0;      // 0 infers from the labels
  std::size_t train_per_class = 0;  // 0 keeps every row
  std::size_t test_per_class = 0;
};

struct GridCell {
  data::PartitionMode mode = data::PartitionMode::balanced_iid;
  std::size_t n_clients = 4;
  std::size_t labels_per_client = 1;
  data::SizeProfile size_profile{};
  std::string name;  // defaults to <mode>_n<clients>

  std::string id() const;
};

struct ModelConfig {
  std::vector<std::size_t> hidden{200, 200};
  nn::Activation activation = nn::Activation::relu;
};

struct ExperimentConfig {
  std::variant<SynthSource, IdxSource> dataset;
  ModelConfig model;
  std::vector<GridCell> grid;
  std::vector<strategy::StrategyConfig> strategies;
  std::size_t iterations = 5;
  std::uint64_t master_seed = 0;
  std::string output_dir = "results";
  runtime::CostModel cost{};
  bool reshuffle_chunks = false;
};

/// Parses a JSON config. Missing optional keys take defaults; unknown keys, bad enums and
/// indivisible batch/window pairs raise ConfigError naming the offending key path.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Fully expanded config, suitable for echoing into the run manifest.
std::string config_to_json(const ExperimentConfig& cfg);

/// The default grid: {balanced_iid, imbalanced_iid, imbalanced_noniid} x {4, 10, 40}.
std::vector<GridCell> default_grid();
std::vector<strategy::StrategyConfig> default_strategies();

struct Seeds {
  std::uint64_t data = 0;
  std::uint64_t partition = 0;
  std::uint64_t init = 0;
  std::uint64_t cell = 0;
};

/// Sub-seeds depend only on the master seed and the setting/strategy names, so removing a
/// cell leaves every other cell's seeds unchanged.
Seeds derive_seeds(std::uint64_t master, const std::string& setting, const std::string& strategy);

struct LoadedData {
  data::Dataset train;
  data::Dataset test;
};

LoadedData load_data(const ExperimentConfig& cfg);

struct RunOptions {
  bool dump_schedule = false;
  bool dump_events = false;
  std::string grid_filter;                  // regex searched in the setting id
  std::vector<std::string> strategy_filter; // empty keeps all
  std::size_t threads = 1;
  bool write = true;                        // persist the bundle under output_dir
};

struct CellResult {
  std::string setting;
  std::string strategy;
  Seeds seeds;
  bool ok = false;
  std::string error;
  strategy::RoundSeries series;
  std::string schedule_json;
  std::string events_jsonl;
  double total_sim_time = 0.0;
};

struct ResultsBundle {
  std::filesystem::path output_dir;
  std::size_t num_classes = 0;
  std::vector<std::string> settings;    // grid order
  std::vector<std::string> strategies;  // config order
  std::vector<CellResult> cells;        // setting-major
  std::vector<std::string> warnings;

  bool all_ok() const;
  const CellResult* find(const std::string& setting, const std::string& strategy) const;
};

/// Runs one (setting, strategy) cell to completion; failures are captured in the result.
CellResult run_cell(const ExperimentConfig& cfg, const LoadedData& data, const GridCell& cell,
                    const strategy::StrategyConfig& strategy, const RunOptions& opts);

/// Runs every selected cell (in parallel up to opts.threads) and, with opts.write,
/// persists series/, summary.json, manifest.json, schedules/, events/ and plots/.
ResultsBundle run_grid(const ExperimentConfig& cfg, const RunOptions& opts = {});

/// Writes one CSV per grid setting to `dir`: iteration,strategy,accuracy,macro_f1,sim_time.
/// Panels with a missing or failed series are skipped with a warning.
std::vector<std::filesystem::path> emit_plot_data(ResultsBundle& bundle,
                                                  const std::filesystem::path& dir);

inline constexpr const char* kPlotHeader = "iteration,strategy,accuracy,macro_f1,sim_time";

/// Human-readable shard sizes and label histograms for every grid cell.
std::string partition_report(const ExperimentConfig& cfg);

/// Worker count: FEDSIM_THREADS if set and positive, else hardware concurrency.
std::size_t thread_count_from_env();

}  // namespace fedsim::experiment
