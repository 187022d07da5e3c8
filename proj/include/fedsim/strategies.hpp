#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/metrics.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/runtime.hpp"
#include "fedsim/schedule.hpp"

namespace fedsim::strategy {

enum class StrategyKind { fedavg, wfedavg, cycle, proposed, proposed_semi };

const char* strategy_kind_name(StrategyKind k);
StrategyKind parse_strategy_kind(std::string_view name);

struct OptimizerConfig {
  enum class Kind { adam, sgd };
  Kind kind = Kind::adam;
  double learning_rate = 0.001;

  bool operator==(const OptimizerConfig&) const = default;
};

struct StrategyConfig {
  StrategyKind kind = StrategyKind::proposed;
  std::size_t batch_size = 100;
  std::size_t parallel_window_size = 2;  // proposed
  std::size_t cluster_window_size = 2;   // proposed_semi
  std::size_t local_epochs = 1;          // fedavg, wfedavg, cycle
  std::size_t local_batch_size = 32;
  OptimizerConfig optimizer{};
  /// Display name; defaults to the kind name.
  std::string label;

  std::string name() const { return label.empty() ? strategy_kind_name(kind) : label; }
  std::size_t window() const {
    return kind == StrategyKind::proposed_semi ? cluster_window_size : parallel_window_size;
  }
  /// Throws ConfigError on zero sizes or batch_size not divisible by the window.
  void validate() const;
};

struct IterationResult {
  nn::MlpModel model;
  double duration = 0.0;
};

/// Applies one optimizer update to the model; `adam` is used only for the adam kind.
void apply_update(nn::MlpModel& model, const nn::GradientSet& grads, const OptimizerConfig& opt,
                  nn::AdamState& adam);

/// Trains a copy of `start` for `epochs` passes over the shard in row order with
/// mini-batches of min(shard, batch_size) and a freshly initialised optimizer.
nn::MlpModel train_local(const nn::MlpModel& start, const data::ClientShard& shard,
                         std::size_t epochs, std::size_t batch_size, const OptimizerConfig& opt);

IterationResult fedavg_iteration(runtime::World& world, const StrategyConfig& cfg);
IterationResult wfedavg_iteration(runtime::World& world, const StrategyConfig& cfg);
IterationResult cycle_iteration(runtime::World& world, const StrategyConfig& cfg);
IterationResult proposed_iteration(runtime::World& world, const StrategyConfig& cfg,
                                   const Schedule& schedule);
IterationResult semicentral_iteration(runtime::World& world, const StrategyConfig& cfg,
                                      const Schedule& schedule, const HostAssignment& hosts);

/// Client shard sizes in id order.
std::vector<std::size_t> shard_sizes(const runtime::World& world);

class Strategy {
 public:
  explicit Strategy(StrategyConfig cfg) : cfg_(std::move(cfg)) {}
  virtual ~Strategy() = default;

  const StrategyConfig& config() const { return cfg_; }
  /// Called once before the first iteration (chunking, scheduling).
  virtual void prepare(runtime::World&) {}
  virtual IterationResult run_iteration(runtime::World& world) = 0;
  virtual const Schedule* schedule() const { return nullptr; }
  virtual const HostAssignment* hosts() const { return nullptr; }

 protected:
  StrategyConfig cfg_;
};

std::unique_ptr<Strategy> make_strategy(const StrategyConfig& cfg);

using EvalHook = std::function<metrics::MetricsRecord(const runtime::World&, std::size_t round)>;

struct RoundSeries {
  std::vector<metrics::MetricsRecord> records;
};

/// Evaluates the initial model, then runs `iterations` global iterations evaluating after
/// each. The series therefore has iterations + 1 records.
RoundSeries run_training(Strategy& strategy, runtime::World& world, std::size_t iterations,
                         const EvalHook& eval);

}  // namespace fedsim::strategy
