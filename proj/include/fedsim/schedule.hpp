#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fedsim::strategy {

/// One chunk of one client, placed in a step. `chunk_slot` is the client's k-th
/// scheduled chunk, i.e. the cursor position it is consumed at.
struct Assignment {
  std::size_t client = 0;
  std::size_t chunk_slot = 0;

  bool operator==(const Assignment&) const = default;
};

/// Per-client instruction vector kept for audit: the chunk size (or the whole size when
/// smaller), a remainder flag, then one participation flag per step.
struct ClientInstruction {
  std::size_t client = 0;
  std::size_t group_size = 0;
  bool has_remainder = false;
  std::vector<std::uint8_t> participates;

  bool operator==(const ClientInstruction&) const = default;
};

struct Schedule {
  std::size_t batch_size = 0;
  std::size_t window = 0;
  std::size_t chunk_size = 0;
  /// Entries of each step in generation order (clients by size descending, id ascending).
  std::vector<std::vector<Assignment>> steps;
  /// In generation order.
  std::vector<ClientInstruction> instructions;
  std::vector<std::string> warnings;

  std::size_t scheduled_samples() const;
  /// Number of chunks each client (by id) is scheduled for.
  std::vector<std::size_t> chunks_per_client(std::size_t n_clients) const;

  bool operator==(const Schedule&) const = default;
};

/// Host client of every step in the semi-centralized protocol.
struct HostAssignment {
  std::vector<std::size_t> host_of_step;

  bool operator==(const HostAssignment&) const = default;
};

/// Greedy chunk scheduler. Chunks have size batch_size / window; clients are visited by
/// size descending (ties by id) and each walks the steps, taking one chunk per step while
/// the step has room and it has full chunks left. The step count starts at
/// ceil(full_chunk_samples / batch_size) and grows until every full chunk fits.
/// Remainder chunks are flagged but never scheduled.
Schedule generate_instructions(std::span<const std::size_t> sizes, std::size_t batch_size,
                               std::size_t window);

struct ScheduleWithHosts {
  Schedule schedule;
  HostAssignment hosts;
};

/// Same schedule; the host of a step is the last client placed into it.
ScheduleWithHosts generate_instructions_with_hosts(std::span<const std::size_t> sizes,
                                                   std::size_t batch_size,
                                                   std::size_t cluster_window);

/// {"chunk_size", "steps": [[{"client","chunk_idx"}...]...], "hosts"?}
std::string schedule_to_json(const Schedule& s, const HostAssignment* hosts = nullptr);

}  // namespace fedsim::strategy
