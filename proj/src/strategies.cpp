#include "fedsim/strategies.hpp"

#include <algorithm>

#include "fedsim/error.hpp"

namespace fedsim::strategy {

using runtime::kServer;
using runtime::World;

const char* strategy_kind_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::fedavg: return "fedavg";
    case StrategyKind::wfedavg: return "wfedavg";
    case StrategyKind::cycle: return "cycle";
    case StrategyKind::proposed: return "proposed";
    case StrategyKind::proposed_semi: return "proposed_semi";
  }
  return "?";
}

StrategyKind parse_strategy_kind(std::string_view name) {
  if (name == "fedavg") return StrategyKind::fedavg;
  if (name == "wfedavg") return StrategyKind::wfedavg;
  if (name == "cycle") return StrategyKind::cycle;
  if (name == "proposed") return StrategyKind::proposed;
  if (name == "proposed_semi") return StrategyKind::proposed_semi;
  throw ConfigError("unknown strategy kind '" + std::string(name) + "'");
}

void StrategyConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
  if (local_batch_size < 1) throw ConfigError("local_batch_size must be >= 1");
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (kind == StrategyKind::proposed || kind == StrategyKind::proposed_semi) {
    const auto w = window();
    const char* key =
        kind == StrategyKind::proposed ? "parallel_window_size" : "cluster_window_size";
    if (w < 1) throw ConfigError(std::string(key) + " must be >= 1");
    if (w > batch_size) throw ConfigError(std::string(key) + " must not exceed batch_size");
    if (batch_size % w != 0) {
      throw ConfigError("batch_size " + std::to_string(batch_size) + " is not divisible by " +
                        key + " " + std::to_string(w));
    }
  }
}

void apply_update(nn::MlpModel& model, const nn::GradientSet& grads, const OptimizerConfig& opt,
                  nn::AdamState& adam) {
  if (opt.kind == OptimizerConfig::Kind::sgd) {
    nn::sgd_step(model, grads, opt.learning_rate);
  } else {
    nn::adam_step(model, grads, adam);
  }
}

nn::MlpModel train_local(const nn::MlpModel& start, const data::ClientShard& shard,
                         std::size_t epochs, std::size_t batch_size, const OptimizerConfig& opt) {
  nn::MlpModel model = start;
  if (shard.size() == 0) return model;
  auto adam = nn::AdamState::for_model(model, opt.learning_rate);
  const std::size_t b = std::min(shard.size(), batch_size);
  for (std::size_t e = 0; e < epochs; ++e) {
    for (std::size_t first = 0; first < shard.size(); first += b) {
      const std::size_t rows = std::min(b, shard.size() - first);
      const auto x = nn::slice_rows(shard.features, first, rows);
      const std::span<const std::size_t> y(shard.labels.data() + first, rows);
      const auto step = nn::loss_and_gradients(model, x, y);
      apply_update(model, step.gradients, opt, adam);
    }
  }
  return model;
}

std::vector<std::size_t> shard_sizes(const World& world) {
  std::vector<std::size_t> sizes;
  for (const auto& c : world.clients) sizes.push_back(c.shard.size());
  return sizes;
}

namespace {

void warn_empty(World& world, const runtime::ClientNode& c) {
  world.log.append({world.clock.now, "skip_empty_client", kServer,
                    static_cast<std::int64_t>(c.id), 0, std::nullopt});
}

void server_aggregate(World& world, std::int64_t who, std::size_t contributions,
                      std::optional<double> loss = std::nullopt) {
  const double t = world.clock.cost.aggregate_time(world.server.global_model.parameter_count(),
                                                   contributions);
  world.clock.now += t;
  world.log.append({world.clock.now, "aggregate", who, who, 0, loss});
}

double mean_loss(std::span<const runtime::LossGradReport> reports) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : reports) {
    sum += r.loss * static_cast<double>(r.grads.sample_count);
    n += r.grads.sample_count;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

std::vector<nn::GradientSet> gradients_by_client(std::vector<runtime::LossGradReport> reports) {
  std::stable_sort(reports.begin(), reports.end(),
                   [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
  std::vector<nn::GradientSet> grads;
  grads.reserve(reports.size());
  for (auto& r : reports) grads.push_back(std::move(r.grads));
  return grads;
}

// Shared body of FedAVG and weighted FedAVG: parallel local training, then a
// (weighted) parameter mean.
IterationResult averaging_iteration(World& world, const StrategyConfig& cfg, bool weighted) {
  const double start = world.clock.now;
  const auto params = nn::to_params(world.server.global_model);

  std::vector<runtime::Lane> lanes;
  std::vector<nn::ModelParams> locals;
  std::vector<double> weights;
  for (auto& c : world.clients) {
    if (c.shard.size() == 0) {
      warn_empty(world, c);
      continue;
    }
    const auto id = static_cast<std::int64_t>(c.id);
    auto lane = runtime::open_lane(world);
    lane.clock = runtime::deliver(runtime::make_message(kServer, id, runtime::ModelBroadcast{params}),
                                  lane.clock, lane.log, world.tap);
    auto local = train_local(world.server.global_model, c.shard, cfg.local_epochs,
                             cfg.local_batch_size, cfg.optimizer);
    runtime::record_compute(lane.clock, lane.log, id,
                            lane.clock.cost.train_time(c.shard.size() * cfg.local_epochs));
    auto local_params = nn::to_params(local);
    lane.clock = runtime::deliver(
        runtime::make_message(id, kServer,
                              runtime::LocalModelReport{c.id, local_params, c.shard.size()}),
        lane.clock, lane.log, world.tap);
    locals.push_back(std::move(local_params));
    weights.push_back(weighted ? static_cast<double>(c.shard.size()) : 1.0);
    lanes.push_back(std::move(lane));
  }
  if (locals.empty()) throw AggregationError("no client holds any data");
  runtime::join_lanes(world, lanes);

  nn::load_params(world.server.global_model, nn::average_params(locals, weights));
  server_aggregate(world, kServer, locals.size());
  return {world.server.global_model, world.clock.now - start};
}

}  // namespace

IterationResult fedavg_iteration(World& world, const StrategyConfig& cfg) {
  return averaging_iteration(world, cfg, false);
}

IterationResult wfedavg_iteration(World& world, const StrategyConfig& cfg) {
  return averaging_iteration(world, cfg, true);
}

IterationResult cycle_iteration(World& world, const StrategyConfig& cfg) {
  const double start = world.clock.now;
  std::vector<const runtime::ClientNode*> visit;
  for (const auto& c : world.clients) {
    if (c.shard.size() == 0) {
      warn_empty(world, c);
    } else {
      visit.push_back(&c);
    }
  }
  if (visit.empty()) return {world.server.global_model, 0.0};

  nn::MlpModel model = world.server.global_model;
  for (std::size_t i = 0; i < visit.size(); ++i) {
    const auto& c = *visit[i];
    const auto id = static_cast<std::int64_t>(c.id);
    if (i == 0) {
      world.clock = runtime::deliver(
          runtime::make_message(kServer, id, runtime::ModelBroadcast{nn::to_params(model)}),
          world.clock, world.log, world.tap);
    } else {
      const auto prev = static_cast<std::int64_t>(visit[i - 1]->id);
      runtime::RelayModel relay;
      relay.from = prev;
      relay.to = id;
      relay.params = nn::to_params(model);
      world.clock = runtime::deliver(runtime::make_message(prev, id, std::move(relay)), world.clock,
                                     world.log, world.tap);
    }
    model = train_local(model, c.shard, cfg.local_epochs, cfg.local_batch_size, cfg.optimizer);
    runtime::record_compute(world.clock, world.log, id,
                            world.clock.cost.train_time(c.shard.size() * cfg.local_epochs));
  }
  const auto& last = *visit.back();
  world.clock = runtime::deliver(
      runtime::make_message(static_cast<std::int64_t>(last.id), kServer,
                            runtime::LocalModelReport{last.id, nn::to_params(model), last.shard.size()}),
      world.clock, world.log, world.tap);
  world.server.global_model = std::move(model);
  return {world.server.global_model, world.clock.now - start};
}

IterationResult proposed_iteration(World& world, const StrategyConfig& cfg, const Schedule& schedule) {
  const double start = world.clock.now;
  runtime::reset_cursors(world.clients, world.reshuffle_chunks, world.seed, world.server.round);

  for (const auto& step : schedule.steps) {
    const auto params = nn::to_params(world.server.global_model);
    auto members = step;
    std::stable_sort(members.begin(), members.end(),
                     [](const auto& a, const auto& b) { return a.client < b.client; });

    std::vector<runtime::Lane> lanes;
    std::vector<runtime::LossGradReport> reports;
    for (const auto& a : members) {
      auto& client = world.clients.at(a.client);
      if (client.cursor != a.chunk_slot) {
        throw SchedulingError("client " + std::to_string(a.client) + " is at chunk " +
                              std::to_string(client.cursor) + " but the schedule expects " +
                              std::to_string(a.chunk_slot));
      }
      const auto id = static_cast<std::int64_t>(a.client);
      auto lane = runtime::open_lane(world);
      lane.clock = runtime::deliver(runtime::make_message(kServer, id, runtime::ModelBroadcast{params}),
                                    lane.clock, lane.log, world.tap);
      auto result = runtime::client_train_chunk(client, params, lane.clock.cost);
      runtime::record_compute(lane.clock, lane.log, id, result.duration, result.report.loss);
      auto msg = runtime::make_message(id, kServer, result.report);
      lane.clock = runtime::deliver(msg, lane.clock, lane.log, world.tap);
      reports.push_back(std::move(result.report));
      lanes.push_back(std::move(lane));
    }
    runtime::join_lanes(world, lanes);

    const double loss = mean_loss(reports);
    const auto grads = gradients_by_client(std::move(reports));
    apply_update(world.server.global_model, nn::average_gradients(grads), cfg.optimizer,
                 world.server.optimizer);
    server_aggregate(world, kServer, grads.size(), loss);
  }
  return {world.server.global_model, world.clock.now - start};
}

IterationResult semicentral_iteration(World& world, const StrategyConfig& cfg,
                                      const Schedule& schedule, const HostAssignment& hosts) {
  if (hosts.host_of_step.size() != schedule.steps.size()) {
    throw ConfigError("host assignment covers " + std::to_string(hosts.host_of_step.size()) +
                      " steps, schedule has " + std::to_string(schedule.steps.size()));
  }
  const double start = world.clock.now;
  runtime::reset_cursors(world.clients, world.reshuffle_chunks, world.seed, world.server.round);
  const bool adam = cfg.optimizer.kind == OptimizerConfig::Kind::adam;

  for (std::size_t t = 0; t < schedule.steps.size(); ++t) {
    const std::size_t host = hosts.host_of_step[t];
    // Relay in generation order with the host moved to the end.
    auto chain = schedule.steps[t];
    auto host_it = std::find_if(chain.begin(), chain.end(),
                                [&](const Assignment& a) { return a.client == host; });
    if (host_it == chain.end()) {
      throw ConfigError("host c" + std::to_string(host) + " is not scheduled in step " +
                        std::to_string(t));
    }
    std::rotate(host_it, host_it + 1, chain.end());

    runtime::RelayModel relay;
    relay.from = kServer;
    relay.to = static_cast<std::int64_t>(chain.front().client);
    relay.params = nn::to_params(world.server.global_model);
    if (adam) relay.optimizer = world.server.optimizer;
    world.clock = runtime::deliver(runtime::make_message(kServer, relay.to, relay), world.clock,
                                   world.log, world.tap);

    for (std::size_t i = 0; i < chain.size(); ++i) {
      auto& client = world.clients.at(chain[i].client);
      if (client.cursor != chain[i].chunk_slot) {
        throw SchedulingError("client " + std::to_string(client.id) + " is at chunk " +
                              std::to_string(client.cursor) + " but the schedule expects " +
                              std::to_string(chain[i].chunk_slot));
      }
      const auto id = static_cast<std::int64_t>(client.id);
      auto result = runtime::client_train_chunk(client, relay.params, world.clock.cost);
      runtime::record_compute(world.clock, world.log, id, result.duration, result.report.loss);
      relay.accumulated_loss += result.report.loss;
      relay.accumulated_grads.push_back(std::move(result.report));
      if (i + 1 < chain.size()) {
        relay.from = id;
        relay.to = static_cast<std::int64_t>(chain[i + 1].client);
        world.clock = runtime::deliver(runtime::make_message(id, relay.to, relay), world.clock,
                                       world.log, world.tap);
      }
    }

    // The host reduces in client-id order, the same order the server uses in the
    // centralized protocol, and applies the update to its copy of the model.
    const auto host_id = static_cast<std::int64_t>(host);
    nn::MlpModel host_model = nn::from_params(relay.params);
    const double loss = mean_loss(relay.accumulated_grads);
    const auto grads = gradients_by_client(std::move(relay.accumulated_grads));
    relay.accumulated_grads.clear();
    nn::AdamState host_adam = adam ? std::move(*relay.optimizer) : nn::AdamState{};
    apply_update(host_model, nn::average_gradients(grads), cfg.optimizer, host_adam);
    server_aggregate(world, host_id, grads.size(), loss);

    runtime::RelayModel back;
    back.from = host_id;
    back.to = kServer;
    back.params = nn::to_params(host_model);
    if (adam) back.optimizer = std::move(host_adam);
    world.clock = runtime::deliver(runtime::make_message(host_id, kServer, back), world.clock,
                                   world.log, world.tap);
    nn::load_params(world.server.global_model, back.params);
    if (adam) world.server.optimizer = std::move(*back.optimizer);
  }
  return {world.server.global_model, world.clock.now - start};
}

namespace {

class AveragingStrategy final : public Strategy {
 public:
  using Strategy::Strategy;
  IterationResult run_iteration(World& world) override {
    switch (cfg_.kind) {
      case StrategyKind::fedavg: return fedavg_iteration(world, cfg_);
      case StrategyKind::wfedavg: return wfedavg_iteration(world, cfg_);
      default: return cycle_iteration(world, cfg_);
    }
  }
};

class ScheduledStrategy final : public Strategy {
 public:
  using Strategy::Strategy;

  void prepare(World& world) override {
    const auto sizes = shard_sizes(world);
    auto generated = generate_instructions_with_hosts(sizes, cfg_.batch_size, cfg_.window());
    schedule_ = std::move(generated.schedule);
    hosts_ = std::move(generated.hosts);
    for (auto& c : world.clients) runtime::set_chunking(c, schedule_.chunk_size);
    if (!schedule_.warnings.empty()) {
      world.log.append({world.clock.now, "schedule_warning", kServer, kServer, 0, std::nullopt});
    }
    prepared_ = true;
  }

  IterationResult run_iteration(World& world) override {
    if (!prepared_) prepare(world);
    if (cfg_.kind == StrategyKind::proposed_semi) {
      return semicentral_iteration(world, cfg_, schedule_, hosts_);
    }
    return proposed_iteration(world, cfg_, schedule_);
  }

  const Schedule* schedule() const override { return prepared_ ? &schedule_ : nullptr; }
  const HostAssignment* hosts() const override {
    return prepared_ && cfg_.kind == StrategyKind::proposed_semi ? &hosts_ : nullptr;
  }

 private:
  Schedule schedule_;
  HostAssignment hosts_;
  bool prepared_ = false;
};

}  // namespace

std::unique_ptr<Strategy> make_strategy(const StrategyConfig& cfg) {
  cfg.validate();
  switch (cfg.kind) {
    case StrategyKind::proposed:
    case StrategyKind::proposed_semi: return std::make_unique<ScheduledStrategy>(cfg);
    default: return std::make_unique<AveragingStrategy>(cfg);
  }
}

RoundSeries run_training(Strategy& strategy, World& world, std::size_t iterations,
                         const EvalHook& eval) {
  strategy.prepare(world);
  RoundSeries series;
  series.records.push_back(eval(world, 0));
  for (std::size_t it = 1; it <= iterations; ++it) {
    strategy.run_iteration(world);
    world.server.round += 1;
    series.records.push_back(eval(world, it));
  }
  return series;
}

}  // namespace fedsim::strategy
