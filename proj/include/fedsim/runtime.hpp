#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedsim/codec.hpp"
#include "fedsim/data.hpp"
#include "fedsim/nn.hpp"

namespace fedsim::runtime {

/// Principal id of the server; clients use their non-negative index.
inline constexpr std::int64_t kServer = -1;

std::string principal_name(std::int64_t id);

// Message payloads. None of these can hold feature rows or labels; only parameters,
// gradients and scalars cross the wire.

struct ModelBroadcast {
  nn::ModelParams params;
};

struct TrainChunkCmd {
  std::size_t client_id = 0;
};

struct LossGradReport {
  std::size_t client_id = 0;
  double loss = 0.0;
  nn::GradientSet grads;
};

struct LocalModelReport {
  std::size_t client_id = 0;
  nn::ModelParams params;
  std::size_t size = 0;
};

/// Model hand-off between principals. In the semi-centralized protocol it carries the
/// reports accumulated so far in the step and the optimizer state the host will apply.
struct RelayModel {
  std::int64_t from = kServer;
  std::int64_t to = kServer;
  nn::ModelParams params;
  double accumulated_loss = 0.0;
  std::vector<LossGradReport> accumulated_grads;
  std::optional<nn::AdamState> optimizer;
};

using Payload = std::variant<ModelBroadcast, TrainChunkCmd, LossGradReport, LocalModelReport, RelayModel>;

struct Message {
  Payload payload;
  std::int64_t sender = kServer;
  std::int64_t receiver = kServer;
  std::size_t payload_bytes = 0;
};

const char* message_kind(const Payload& p);

/// Fills in payload_bytes from the wire encoding.
Message make_message(std::int64_t sender, std::int64_t receiver, Payload payload);

std::size_t encoded_payload_size(const Payload& p);
/// Wire format: u8 kind, i64 sender, i64 receiver, payload.
codec::Bytes encode_message(const Message& msg);
Message decode_message(std::span<const std::uint8_t> bytes);

struct CostModel {
  double t_fwd_per_sample = 1.0;
  double t_bwd_per_sample = 2.0;
  double t_agg_per_param = 1e-6;
  double t_msg_fixed = 5.0;
  double t_msg_per_byte = 1e-6;

  double message_time(std::size_t bytes) const {
    return t_msg_fixed + t_msg_per_byte * static_cast<double>(bytes);
  }
  double train_time(std::size_t samples) const {
    return (t_fwd_per_sample + t_bwd_per_sample) * static_cast<double>(samples);
  }
  /// Reducing `contributions` parameter vectors of `params` entries and applying the update.
  double aggregate_time(std::size_t params, std::size_t contributions) const {
    return t_agg_per_param * static_cast<double>(params) * static_cast<double>(contributions);
  }
};

struct SimClock {
  double now = 0.0;
  CostModel cost{};
};

struct Event {
  double t = 0.0;
  std::string kind;
  std::int64_t from = kServer;
  std::int64_t to = kServer;
  std::size_t bytes = 0;
  std::optional<double> loss;

  bool operator==(const Event&) const = default;
};

class EventLog {
 public:
  /// Throws Error if `e.t` is earlier than the last logged event.
  void append(Event e);
  const std::vector<Event>& events() const { return events_; }
  std::size_t size() const { return events_.size(); }
  /// One JSON object per line: {"t","kind","from","to","bytes","loss"?}.
  std::string to_jsonl() const;

  bool operator==(const EventLog&) const = default;

 private:
  std::vector<Event> events_;
};

/// Observer handed every message as it is delivered.
using WireTap = std::function<void(const Message&)>;

/// Lossless, in-order delivery: advances the clock by the message cost and logs it.
SimClock deliver(const Message& msg, SimClock clock, EventLog& log, const WireTap& tap = {});

/// Concurrent work costs the longest duration. Empty input is a no-op.
SimClock parallel_elapse(std::span<const double> durations, SimClock clock);

struct ClientNode {
  std::size_t id = 0;
  data::ClientShard shard;
  std::vector<data::Chunk> chunks;
  std::vector<std::size_t> order;  // visiting order over the full chunks
  std::size_t cursor = 0;
  nn::MlpModel scratch_model;

  std::size_t full_chunk_count() const { return order.size(); }
};

ClientNode make_client(data::ClientShard shard);
/// Re-splits the shard into chunks of `chunk_size` and resets the cursor.
void set_chunking(ClientNode& client, std::size_t chunk_size);

struct ChunkTrainResult {
  LossGradReport report;
  double duration = 0.0;
  std::size_t chunk_index = 0;
};

/// Forward, loss and backward on the client's next unused full chunk.
/// Throws SchedulingError if none is left.
ChunkTrainResult client_train_chunk(ClientNode& client, const nn::ModelParams& params,
                                    const CostModel& cost);

/// Rewinds every cursor. With `reshuffle`, the full-chunk order is permuted by a seed
/// derived from (seed, client id, iteration); otherwise it is the shard order.
void reset_cursors(std::span<ClientNode> clients, bool reshuffle = false, std::uint64_t seed = 0,
                   std::uint64_t iteration = 0);

struct ServerNode {
  nn::MlpModel global_model;
  nn::AdamState optimizer;
  std::size_t round = 0;
};

struct World {
  ServerNode server;
  std::vector<ClientNode> clients;
  SimClock clock;
  EventLog log;
  WireTap tap;
  bool reshuffle_chunks = false;
  std::uint64_t seed = 0;
};

World make_world(nn::MlpModel initial_model, std::vector<data::ClientShard> shards,
                 CostModel cost = {}, double learning_rate = 0.001);

/// Work that runs concurrently with other lanes from a common start time. Each lane
/// keeps its own clock and log; `join_lanes` advances the world clock by the longest
/// lane and merges the logs in time order (ties keep lane order).
struct Lane {
  SimClock clock;
  EventLog log;
};

Lane open_lane(const World& world);
void join_lanes(World& world, std::span<Lane> lanes);

/// Logs a client-side computation of `duration` and advances the lane clock.
void record_compute(SimClock& clock, EventLog& log, std::int64_t who, double duration,
                    std::optional<double> loss = std::nullopt);

}  // namespace fedsim::runtime
