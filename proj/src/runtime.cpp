#include "fedsim/runtime.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include <json.hpp>

#include "fedsim/error.hpp"
#include "fedsim/seed.hpp"

namespace fedsim::runtime {

namespace {

enum class Kind : std::uint8_t {
  model_broadcast = 1,
  train_chunk_cmd = 2,
  loss_grad_report = 3,
  local_model_report = 4,
  relay_model = 5,
};

std::size_t report_size(const LossGradReport& r) {
  return 8 + 8 + 8 + codec::encoded_params_size(r.grads.values);
}

std::size_t adam_size(const nn::AdamState& s) {
  return 8 + 4 * 8 + codec::encoded_params_size(s.first_moment) +
         codec::encoded_params_size(s.second_moment);
}

void write_report(codec::ByteWriter& w, const LossGradReport& r) {
  w.u64_le(r.client_id);
  w.f64_le(r.loss);
  w.u64_le(r.grads.sample_count);
  codec::write_params(w, r.grads.values);
}

LossGradReport read_report(codec::ByteReader& r) {
  LossGradReport out;
  out.client_id = r.u64_le();
  out.loss = r.f64_le();
  out.grads.sample_count = r.u64_le();
  out.grads.values = codec::read_params(r);
  return out;
}

void write_adam(codec::ByteWriter& w, const nn::AdamState& s) {
  w.u64_le(s.step_count);
  w.f64_le(s.beta1);
  w.f64_le(s.beta2);
  w.f64_le(s.epsilon);
  w.f64_le(s.learning_rate);
  codec::write_params(w, s.first_moment);
  codec::write_params(w, s.second_moment);
}

nn::AdamState read_adam(codec::ByteReader& r) {
  nn::AdamState s;
  s.step_count = r.u64_le();
  s.beta1 = r.f64_le();
  s.beta2 = r.f64_le();
  s.epsilon = r.f64_le();
  s.learning_rate = r.f64_le();
  s.first_moment = codec::read_params(r);
  s.second_moment = codec::read_params(r);
  return s;
}

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

}  // namespace

std::string principal_name(std::int64_t id) {
  return id == kServer ? std::string("server") : "c" + std::to_string(id);
}

const char* message_kind(const Payload& p) {
  return std::visit(Overloaded{
                        [](const ModelBroadcast&) { return "model_broadcast"; },
                        [](const TrainChunkCmd&) { return "train_chunk_cmd"; },
                        [](const LossGradReport&) { return "loss_grad_report"; },
                        [](const LocalModelReport&) { return "local_model_report"; },
                        [](const RelayModel&) { return "relay_model"; },
                    },
                    p);
}

std::size_t encoded_payload_size(const Payload& p) {
  return std::visit(Overloaded{
                        [](const ModelBroadcast& m) { return codec::encoded_params_size(m.params); },
                        [](const TrainChunkCmd&) -> std::size_t { return 8; },
                        [](const LossGradReport& m) { return report_size(m); },
                        [](const LocalModelReport& m) {
                          return 8 + codec::encoded_params_size(m.params) + 8;
                        },
                        [](const RelayModel& m) {
                          std::size_t n = 8 + 8 + codec::encoded_params_size(m.params) + 8 + 4;
                          for (const auto& r : m.accumulated_grads) n += report_size(r);
                          n += 1;
                          if (m.optimizer) n += adam_size(*m.optimizer);
                          return n;
                        },
                    },
                    p);
}

Message make_message(std::int64_t sender, std::int64_t receiver, Payload payload) {
  Message m{std::move(payload), sender, receiver, 0};
  m.payload_bytes = encoded_payload_size(m.payload);
  return m;
}

codec::Bytes encode_message(const Message& msg) {
  codec::ByteWriter w;
  w.u8(static_cast<std::uint8_t>(msg.payload.index() + 1));
  w.i64_le(msg.sender);
  w.i64_le(msg.receiver);
  std::visit(Overloaded{
                 [&](const ModelBroadcast& m) { codec::write_params(w, m.params); },
                 [&](const TrainChunkCmd& m) { w.u64_le(m.client_id); },
                 [&](const LossGradReport& m) { write_report(w, m); },
                 [&](const LocalModelReport& m) {
                   w.u64_le(m.client_id);
                   codec::write_params(w, m.params);
                   w.u64_le(m.size);
                 },
                 [&](const RelayModel& m) {
                   w.i64_le(m.from);
                   w.i64_le(m.to);
                   codec::write_params(w, m.params);
                   w.f64_le(m.accumulated_loss);
                   w.u32_le(static_cast<std::uint32_t>(m.accumulated_grads.size()));
                   for (const auto& r : m.accumulated_grads) write_report(w, r);
                   w.u8(m.optimizer ? 1 : 0);
                   if (m.optimizer) write_adam(w, *m.optimizer);
                 },
             },
             msg.payload);
  return std::move(w).bytes();
}

Message decode_message(std::span<const std::uint8_t> bytes) {
  codec::ByteReader r(bytes);
  const auto kind = static_cast<Kind>(r.u8());
  const auto sender = r.i64_le();
  const auto receiver = r.i64_le();
  Payload payload;
  switch (kind) {
    case Kind::model_broadcast: payload = ModelBroadcast{codec::read_params(r)}; break;
    case Kind::train_chunk_cmd: payload = TrainChunkCmd{r.u64_le()}; break;
    case Kind::loss_grad_report: payload = read_report(r); break;
    case Kind::local_model_report: {
      LocalModelReport m;
      m.client_id = r.u64_le();
      m.params = codec::read_params(r);
      m.size = r.u64_le();
      payload = std::move(m);
      break;
    }
    case Kind::relay_model: {
      RelayModel m;
      m.from = r.i64_le();
      m.to = r.i64_le();
      m.params = codec::read_params(r);
      m.accumulated_loss = r.f64_le();
      const auto n = r.u32_le();
      for (std::uint32_t i = 0; i < n; ++i) m.accumulated_grads.push_back(read_report(r));
      if (r.u8() != 0) m.optimizer = read_adam(r);
      payload = std::move(m);
      break;
    }
    default: throw FormatError("unknown message kind", 0);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after message", r.offset());
  return make_message(sender, receiver, std::move(payload));
}

void EventLog::append(Event e) {
  if (!events_.empty() && e.t < events_.back().t) {
    throw Error("event log timestamps must be non-decreasing");
  }
  events_.push_back(std::move(e));
}

std::string EventLog::to_jsonl() const {
  std::string out;
  for (const auto& e : events_) {
    nlohmann::ordered_json j;
    j["t"] = e.t;
    j["kind"] = e.kind;
    j["from"] = principal_name(e.from);
    j["to"] = principal_name(e.to);
    j["bytes"] = e.bytes;
    if (e.loss) j["loss"] = *e.loss;
    out += j.dump();
    out += '\n';
  }
  return out;
}

SimClock deliver(const Message& msg, SimClock clock, EventLog& log, const WireTap& tap) {
  if (tap) tap(msg);
  clock.now += clock.cost.message_time(msg.payload_bytes);
  std::optional<double> loss;
  if (const auto* r = std::get_if<LossGradReport>(&msg.payload)) loss = r->loss;
  log.append({clock.now, message_kind(msg.payload), msg.sender, msg.receiver, msg.payload_bytes, loss});
  return clock;
}

SimClock parallel_elapse(std::span<const double> durations, SimClock clock) {
  if (durations.empty()) return clock;
  for (double d : durations) {
    if (!(d >= 0.0)) throw Error("parallel_elapse: negative duration");
  }
  clock.now += *std::max_element(durations.begin(), durations.end());
  return clock;
}

ClientNode make_client(data::ClientShard shard) {
  ClientNode c;
  c.id = shard.client_id;
  c.shard = std::move(shard);
  return c;
}

void set_chunking(ClientNode& client, std::size_t chunk_size) {
  client.chunks = data::chunk_shard(client.shard, chunk_size);
  std::size_t full = 0;
  for (const auto& ch : client.chunks) full += ch.remainder ? 0 : 1;
  client.order.resize(full);
  std::iota(client.order.begin(), client.order.end(), std::size_t{0});
  client.cursor = 0;
}

ChunkTrainResult client_train_chunk(ClientNode& client, const nn::ModelParams& params,
                                    const CostModel& cost) {
  if (client.cursor >= client.full_chunk_count()) {
    throw SchedulingError("client " + std::to_string(client.id) + " has no unused chunk (" +
                          std::to_string(client.full_chunk_count()) + " full chunks)");
  }
  const std::size_t index = client.order[client.cursor];
  const auto& chunk = client.chunks[index];
  if (client.scratch_model.specs() == params.layout) {
    nn::load_params(client.scratch_model, params);
  } else {
    client.scratch_model = nn::from_params(params);
  }
  const auto x = nn::slice_rows(client.shard.features, chunk.first_row, chunk.rows);
  const std::span<const std::size_t> y(client.shard.labels.data() + chunk.first_row, chunk.rows);
  auto result = nn::loss_and_gradients(client.scratch_model, x, y);
  client.cursor += 1;
  return {LossGradReport{client.id, result.loss, std::move(result.gradients)},
          cost.train_time(chunk.rows), index};
}

void reset_cursors(std::span<ClientNode> clients, bool reshuffle, std::uint64_t seed,
                   std::uint64_t iteration) {
  for (auto& c : clients) {
    c.cursor = 0;
    std::iota(c.order.begin(), c.order.end(), std::size_t{0});
    if (reshuffle) {
      std::mt19937_64 rng(derive_seed(seed, {c.id, iteration}));
      std::shuffle(c.order.begin(), c.order.end(), rng);
    }
  }
}

World make_world(nn::MlpModel initial_model, std::vector<data::ClientShard> shards, CostModel cost,
                 double learning_rate) {
  World w;
  w.server.optimizer = nn::AdamState::for_model(initial_model, learning_rate);
  w.server.global_model = std::move(initial_model);
  w.clock.cost = cost;
  for (auto& s : shards) w.clients.push_back(make_client(std::move(s)));
  return w;
}

Lane open_lane(const World& world) { return Lane{world.clock, EventLog{}}; }

void join_lanes(World& world, std::span<Lane> lanes) {
  std::vector<double> durations;
  std::vector<Event> merged;
  for (const auto& lane : lanes) {
    durations.push_back(lane.clock.now - world.clock.now);
    merged.insert(merged.end(), lane.log.events().begin(), lane.log.events().end());
  }
  std::stable_sort(merged.begin(), merged.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });
  for (auto& e : merged) world.log.append(std::move(e));
  world.clock = parallel_elapse(durations, world.clock);
}

void record_compute(SimClock& clock, EventLog& log, std::int64_t who, double duration,
                    std::optional<double> loss) {
  clock.now += duration;
  log.append({clock.now, "compute", who, who, 0, loss});
}

}  // namespace fedsim::runtime
