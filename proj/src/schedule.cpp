#include "fedsim/schedule.hpp"

#include <algorithm>
#include <numeric>

#include <json.hpp>

#include "fedsim/error.hpp"

namespace fedsim::strategy {

std::size_t Schedule::scheduled_samples() const {
  std::size_t n = 0;
  for (const auto& step : steps) n += step.size() * chunk_size;
  return n;
}

std::vector<std::size_t> Schedule::chunks_per_client(std::size_t n_clients) const {
  std::vector<std::size_t> out(n_clients, 0);
  for (const auto& step : steps) {
    for (const auto& a : step) ++out.at(a.client);
  }
  return out;
}

namespace {

struct Attempt {
  std::vector<std::vector<Assignment>> steps;
  std::vector<ClientInstruction> instructions;
  bool complete = true;
};

Attempt fill(std::span<const std::size_t> sizes, std::span<const std::size_t> sorted,
             std::size_t batch_size, std::size_t chunk, std::size_t n_steps) {
  Attempt a;
  a.steps.resize(n_steps);
  std::vector<std::size_t> collection(n_steps, 0);
  for (auto client : sorted) {
    const std::size_t d = sizes[client];
    ClientInstruction ins;
    ins.client = client;
    ins.group_size = d >= chunk ? chunk : d;
    ins.has_remainder = d % chunk != 0;
    ins.participates.assign(n_steps, 0);
    std::size_t left = d;
    std::size_t slot = 0;
    for (std::size_t t = 0; t < n_steps; ++t) {
      if (collection[t] < batch_size && left >= chunk) {
        ins.participates[t] = 1;
        left -= chunk;
        collection[t] += chunk;
        a.steps[t].push_back({client, slot++});
      }
    }
    if (left >= chunk) a.complete = false;
    a.instructions.push_back(std::move(ins));
  }
  return a;
}

}  // namespace

Schedule generate_instructions(std::span<const std::size_t> sizes, std::size_t batch_size,
                               std::size_t window) {
  if (window < 1 || batch_size < 1) throw ConfigError("batch_size and window must be >= 1");
  if (window > batch_size) throw ConfigError("window must not exceed batch_size");
  if (batch_size % window != 0) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " is not divisible by window " +
                      std::to_string(window));
  }
  const std::size_t chunk = batch_size / window;

  std::size_t first_train = 0;
  std::size_t contributors = 0;
  for (auto d : sizes) {
    first_train += d - d % chunk;
    contributors += d >= chunk ? 1 : 0;
  }
  if (first_train < batch_size) {
    throw ConfigError("clients hold " + std::to_string(first_train) +
                      " samples in full chunks, fewer than batch_size " +
                      std::to_string(batch_size));
  }

  std::vector<std::size_t> sorted(sizes.size());
  std::iota(sorted.begin(), sorted.end(), std::size_t{0});
  std::stable_sort(sorted.begin(), sorted.end(),
                   [&](std::size_t a, std::size_t b) { return sizes[a] > sizes[b]; });

  std::size_t n_steps = (first_train + batch_size - 1) / batch_size;
  Attempt attempt = fill(sizes, sorted, batch_size, chunk, n_steps);
  while (!attempt.complete) {
    ++n_steps;
    attempt = fill(sizes, sorted, batch_size, chunk, n_steps);
  }

  Schedule s;
  s.batch_size = batch_size;
  s.window = window;
  s.chunk_size = chunk;
  s.steps = std::move(attempt.steps);
  s.instructions = std::move(attempt.instructions);
  if (window > contributors) {
    s.warnings.push_back("window " + std::to_string(window) + " exceeds the " +
                         std::to_string(contributors) +
                         " clients holding a full chunk; steps are underfilled");
  }
  return s;
}

ScheduleWithHosts generate_instructions_with_hosts(std::span<const std::size_t> sizes,
                                                   std::size_t batch_size,
                                                   std::size_t cluster_window) {
  ScheduleWithHosts out;
  out.schedule = generate_instructions(sizes, batch_size, cluster_window);
  for (const auto& step : out.schedule.steps) out.hosts.host_of_step.push_back(step.back().client);
  return out;
}

std::string schedule_to_json(const Schedule& s, const HostAssignment* hosts) {
  nlohmann::ordered_json j;
  j["chunk_size"] = s.chunk_size;
  auto steps = nlohmann::ordered_json::array();
  for (const auto& step : s.steps) {
    auto entries = nlohmann::ordered_json::array();
    for (const auto& a : step) {
      nlohmann::ordered_json e;
      e["client"] = a.client;
      e["chunk_idx"] = a.chunk_slot;
      entries.push_back(std::move(e));
    }
    steps.push_back(std::move(entries));
  }
  j["steps"] = std::move(steps);
  if (hosts) j["hosts"] = hosts->host_of_step;
  return j.dump(2);
}

}  // namespace fedsim::strategy
