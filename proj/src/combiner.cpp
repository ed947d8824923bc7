// Copyright 2026 The fedtier Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "fedtier/combiner.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <spdlog/spdlog.h>

#include "fedtier/config.hpp"
#include "fedtier/discovery.hpp"
#include "fedtier/error.hpp"

namespace fedtier {

namespace {

using Clock = std::chrono::steady_clock;
using wire::MessageType;

std::int64_t now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             Clock::now().time_since_epoch())
      .count();
}

Clock::duration seconds(double s) {
  return std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(s));
}

double since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

}  // namespace

wire::Fields CombinerConfig::to_fields() const {
  wire::Fields f;
  f.set("id", id);
  f.set("client_bind", client_bind.str());
  f.set("control_bind", control_bind.str());
  if (discovery) f.set("discovery", discovery->str());
  if (!advertise_host.empty()) f.set("advertise_host", advertise_host);
  f.set("token_secret", token_secret);
  f.set("heartbeat_interval_s", heartbeat_interval_seconds);
  f.set("heartbeat_timeout_s", heartbeat_timeout_seconds);
  f.set("report_interval_s", report_interval_seconds);
  f.set("grace_s", grace_seconds);
  f.set("chunk_size", static_cast<std::uint64_t>(chunk_size));
  f.set("dispatch_threads", static_cast<std::uint64_t>(dispatch_threads));
  return f;
}

CombinerConfig CombinerConfig::from_fields(const wire::Fields& f) {
  ConfigReader r(f);
  CombinerConfig c;
  c.id = r.str("id", c.id);
  c.client_bind = r.endpoint("client_bind", c.client_bind);
  c.control_bind = r.endpoint("control_bind", c.control_bind);
  if (f.has("discovery")) c.discovery = r.endpoint("discovery", {});
  c.advertise_host = r.str("advertise_host", "");
  c.token_secret = r.str("token_secret", c.token_secret);
  c.heartbeat_interval_seconds = r.positive("heartbeat_interval_s", c.heartbeat_interval_seconds);
  c.heartbeat_timeout_seconds = r.positive("heartbeat_timeout_s", c.heartbeat_timeout_seconds);
  c.report_interval_seconds = r.positive("report_interval_s", c.report_interval_seconds);
  c.grace_seconds = r.real("grace_s", c.grace_seconds, 0, 3600);
  c.chunk_size = r.u64("chunk_size", c.chunk_size, wire::kMinChunkSize);
  if (c.chunk_size > wire::kMaxChunkSize) r.problem("chunk_size exceeds the frame limit");
  c.dispatch_threads = r.u64("dispatch_threads", c.dispatch_threads, 1);
  r.finish("combiner");
  return c;
}

Combiner::Combiner(CombinerConfig cfg) : cfg_(std::move(cfg)) {
  wire::check_chunk_size(cfg_.chunk_size);
  client_server_ = std::make_unique<net::Server>(
      cfg_.id, cfg_.client_bind, [this](net::ConnectionPtr c) { serve_client(c); });
  control_server_ = std::make_unique<net::Server>(
      cfg_.id, cfg_.control_bind, [this](net::ConnectionPtr c) { serve_control(c); });
  ticker_ = std::thread([this] { ticker(); });
  spdlog::info("{}: clients on {}, control on {}", cfg_.id, client_endpoint().str(),
               control_endpoint().str());
}

Combiner::~Combiner() { stop(); }

net::Endpoint Combiner::client_endpoint() const {
  auto ep = client_server_->endpoint();
  if (!cfg_.advertise_host.empty()) ep.host = cfg_.advertise_host;
  return ep;
}

net::Endpoint Combiner::control_endpoint() const {
  auto ep = control_server_->endpoint();
  if (!cfg_.advertise_host.empty()) ep.host = cfg_.advertise_host;
  return ep;
}

void Combiner::stop() {
  if (stopping_.exchange(true)) return;
  {
    std::lock_guard lock(round_mu_);
    round_cv_.notify_all();
  }
  ticker_cv_.notify_all();
  if (ticker_.joinable()) ticker_.join();
  {
    std::lock_guard lock(discovery_mu_);
    if (discovery_conn_) discovery_conn_->shutdown();
  }
  client_server_->stop();
  control_server_->stop();
  std::lock_guard lock(sessions_mu_);
  sessions_.clear();
}

bool Combiner::is_stale(const Session& s, std::int64_t now) const {
  const double silent = static_cast<double>(now - s.last_heartbeat_ns.load()) * 1e-9;
  return silent > cfg_.heartbeat_timeout_seconds;
}

std::vector<Combiner::SessionPtr> Combiner::live_sessions() const {
  std::vector<SessionPtr> out;
  const auto now = now_ns();
  std::lock_guard lock(sessions_mu_);
  for (const auto& [id, s] : sessions_) {
    if (!is_stale(*s, now)) out.push_back(s);
  }
  return out;
}

std::vector<ClientSessionInfo> Combiner::sessions() const {
  std::vector<ClientSessionInfo> out;
  const auto now = now_ns();
  std::lock_guard lock(sessions_mu_);
  for (const auto& [id, s] : sessions_) {
    ClientSessionInfo info;
    info.client_id = id;
    info.status = is_stale(*s, now) ? ClientStatus::kStale : s->status.load();
    info.seconds_since_heartbeat = static_cast<double>(now - s->last_heartbeat_ns) * 1e-9;
    out.push_back(info);
  }
  return out;
}

std::size_t Combiner::live_clients() const { return live_sessions().size(); }

bool Combiner::participation_check(const RoundConfig& cfg) const {
  return live_clients() >= cfg.min_clients_per_combiner;
}

void Combiner::set_update_observer(std::function<void(const CapturedUpdate&)> f) {
  std::lock_guard lock(observer_mu_);
  observer_ = std::move(f);
}

std::optional<std::pair<Bytes, wire::Fields>> Combiner::partial(std::uint64_t round_id) const {
  std::lock_guard lock(partial_mu_);
  if (!partial_round_ || *partial_round_ != round_id) return std::nullopt;
  return std::make_pair(partial_bytes_, partial_meta_);
}

// ---- client port -----------------------------------------------------------

void Combiner::serve_client(const net::ConnectionPtr& conn) {
  std::optional<wire::Frame> hello;
  try {
    hello = conn->read_message(std::chrono::seconds(10));
  } catch (const Error&) {
    return;
  }
  if (!hello || hello->type != MessageType::kHello) {
    try {
      conn->send(wire::error_frame(codes::kBadRequest, "expected HELLO"));
    } catch (const Error&) {
    }
    return;
  }
  const auto f = wire::fields_of(*hello);
  const auto client_id = f.get_or("client_id", "");
  if (client_id.empty() || f.get_or("token", "") != client_token(cfg_.token_secret, client_id)) {
    spdlog::warn("{}: rejected HELLO from '{}': invalid token", cfg_.id, client_id);
    try {
      conn->send(wire::error_frame(codes::kAuth, "invalid token"));
    } catch (const Error&) {
    }
    return;
  }

  conn->set_peer(client_id);
  std::size_t chunk = std::min<std::size_t>(
      f.get_u64_or("chunk_size", wire::kDefaultChunkSize), cfg_.chunk_size);
  chunk = std::clamp(chunk, wire::kMinChunkSize, wire::kMaxChunkSize);
  conn->set_chunk_size(chunk);
  conn->set_traffic_tag("down");

  auto session = std::make_shared<Session>();
  session->client_id = client_id;
  session->conn = conn;
  session->last_heartbeat_ns = now_ns();
  SessionPtr replaced;
  {
    std::lock_guard lock(sessions_mu_);
    session->generation = next_generation_++;
    auto& slot = sessions_[client_id];
    replaced = slot;
    slot = session;
  }
  if (replaced) replaced->conn->shutdown();

  wire::Fields ack;
  ack.set("node", cfg_.id);
  ack.set("chunk_size", static_cast<std::uint64_t>(chunk));
  ack.set("heartbeat_interval_ms",
          static_cast<std::uint64_t>(cfg_.heartbeat_interval_seconds * 1000));
  try {
    conn->send(MessageType::kAck, ack);
  } catch (const Error&) {
    client_gone(session);
    return;
  }

  const auto poll = seconds(std::min(1.0, cfg_.heartbeat_interval_seconds));
  while (!stopping_) {
    try {
      auto m = conn->read_message(poll);
      if (!m) continue;
      session->last_heartbeat_ns = now_ns();
      switch (m->type) {
        case MessageType::kHeartbeat:
          break;
        case MessageType::kUpdateMeta:
          on_update(session, conn, *m);
          break;
        case MessageType::kValidationResult:
          on_validation(session, *m);
          break;
        case MessageType::kError:
          on_client_error(session, *m);
          break;
        default:
          break;
      }
    } catch (const NetworkError&) {
      break;
    } catch (const Error& e) {
      spdlog::warn("{}: dropping {}: {}", cfg_.id, client_id, e.what());
      try {
        conn->send(wire::error_frame(codes::kBadRequest, e.what()));
      } catch (const Error&) {
      }
      break;
    }
  }
  client_gone(session);
}

void Combiner::client_gone(const SessionPtr& s) {
  {
    std::lock_guard lock(sessions_mu_);
    auto it = sessions_.find(s->client_id);
    if (it != sessions_.end() && it->second == s) sessions_.erase(it);
  }
  s->conn->shutdown();
  std::lock_guard lock(round_mu_);
  bool still_connected = false;
  {
    std::lock_guard slock(sessions_mu_);
    still_connected = sessions_.contains(s->client_id);
  }
  if (still_connected) return;  // replaced by a newer session
  if (round_ && !round_->closed) round_->pending.erase(s->client_id);
  if (validation_ && !validation_->closed) validation_->pending.erase(s->client_id);
  round_cv_.notify_all();
}

void Combiner::on_update(const SessionPtr& s, const net::ConnectionPtr& conn,
                         const wire::Frame& frame) {
  const auto f = wire::fields_of(frame);
  const auto round_id = f.get_u64("round_id");
  Update u;
  u.client_id = s->client_id;
  u.num_examples = f.get_u64("num_examples");
  u.model = conn->take_stream(wire::stream_id_from_hex(f.get("model")));
  s->status = ClientStatus::kReady;
  bool accepted = false;
  {
    std::lock_guard lock(round_mu_);
    if (round_ && !round_->closed && round_->round_id == round_id &&
        round_->pending.erase(s->client_id) > 0) {
      round_->queue.push_back(std::move(u));
      accepted = true;
      round_cv_.notify_all();
    }
  }
  if (!accepted) spdlog::info("{}: discarded late update from {}", cfg_.id, s->client_id);
  wire::Fields ack;
  ack.set("round_id", round_id);
  ack.set("accepted", accepted);
  conn->send(MessageType::kAck, ack);
}

void Combiner::on_validation(const SessionPtr& s, const wire::Frame& frame) {
  auto rec = ValidationRecord::from_fields(wire::fields_of(frame));
  rec.client_id = s->client_id;
  s->status = ClientStatus::kReady;
  std::lock_guard lock(round_mu_);
  if (!validation_ || validation_->closed || validation_->round_id != rec.round_id) return;
  validation_->results[rec.client_id] = rec;
  validation_->pending.erase(rec.client_id);
  round_cv_.notify_all();
}

void Combiner::on_client_error(const SessionPtr& s, const wire::Frame& frame) {
  const auto f = wire::fields_of(frame);
  spdlog::warn("{}: {} reported {}: {}", cfg_.id, s->client_id, f.get_or("code", "error"),
               f.get_or("message", ""));
  s->status = ClientStatus::kReady;
  if (!f.has("round_id")) return;
  const auto round_id = f.get_u64("round_id");
  std::lock_guard lock(round_mu_);
  if (round_ && !round_->closed && round_->round_id == round_id) {
    round_->pending.erase(s->client_id);
  }
  if (validation_ && !validation_->closed && validation_->round_id == round_id) {
    validation_->pending.erase(s->client_id);
  }
  round_cv_.notify_all();
}

// ---- rounds ----------------------------------------------------------------

std::vector<Combiner::SessionPtr> Combiner::select_clients(const RoundConfig& cfg) const {
  auto live = live_sessions();  // ordered by client_id
  if (cfg.client_sample_fraction >= 1.0 || live.empty()) return live;
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(cfg.client_sample_fraction * live.size())));
  std::mt19937_64 rng(cfg.seed ^ (cfg.round_id * 0x9e3779b97f4a7c15ull));
  for (std::size_t i = live.size(); i > 1; --i) std::swap(live[i - 1], live[rng() % i]);
  live.resize(k);
  std::sort(live.begin(), live.end(),
            [](const SessionPtr& a, const SessionPtr& b) { return a->client_id < b->client_id; });
  return live;
}

void Combiner::dispatch(const std::vector<SessionPtr>& targets,
                        const std::function<void(const SessionPtr&)>& send_one,
                        const std::function<void(const SessionPtr&)>& on_failure,
                        const std::function<bool()>& cancelled) {
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (;;) {
      const auto i = next++;
      if (i >= targets.size() || cancelled()) return;
      try {
        send_one(targets[i]);
      } catch (const Error& e) {
        spdlog::warn("{}: send to {} failed: {}", cfg_.id, targets[i]->client_id, e.what());
        on_failure(targets[i]);
      }
    }
  };
  const auto n = std::min(cfg_.dispatch_threads, targets.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
}

PartialRoundOutcome Combiner::run_partial_round(const RoundConfig& cfg, ByteView seed_model) {
  if (!try_begin_round()) {
    throw RemoteError(codes::kBusy, "a partial round is already in flight");
  }
  struct Release {
    std::atomic<bool>& flag;
    ~Release() { flag = false; }
  } release{busy_};
  return collect_round(cfg, seed_model);
}

PartialRoundOutcome Combiner::collect_round(const RoundConfig& cfg, ByteView seed_model) {
  const auto start = Clock::now();
  PartialRoundOutcome out;
  out.combiner_id = cfg_.id;
  out.round_id = cfg.round_id;
  {
    std::lock_guard lock(partial_mu_);
    partial_round_.reset();
    partial_bytes_.clear();
  }

  std::uint64_t dims = 0;
  try {
    if (inspect_model(seed_model, &dims) != WeightEncoding::kFloat32) {
      throw SerializationError("seed model must be FNP1");
    }
  } catch (const Error& e) {
    out.reason = std::string("corrupt seed model: ") + e.what();
    out.round_seconds = since(start);
    return out;
  }

  const auto targets = select_clients(cfg);
  out.requested_clients = targets.size();
  if (targets.empty()) {
    out.reason = "no live clients";
    out.round_seconds = since(start);
    return out;
  }

  auto round = std::make_shared<ActiveRound>();
  round->round_id = cfg.round_id;
  for (const auto& s : targets) round->pending.insert(s->client_id);
  {
    std::lock_guard lock(round_mu_);
    round_ = round;
  }

  auto request = cfg.effective_task().to_fields();
  request.set("round_id", cfg.round_id);
  request.set("seed", cfg.seed);
  spdlog::info("{}: round {} dispatching to {} clients", cfg_.id, cfg.round_id, targets.size());
  const auto seed_digest = sha256(seed_model);

  std::thread dispatcher([&, request] {
    dispatch(
        targets,
        [&](const SessionPtr& s) {
          s->status = ClientStatus::kTraining;
          const auto id = s->conn->send_object(seed_model, &seed_digest);
          auto req = request;
          req.set("model", wire::to_hex(id));
          s->conn->send(MessageType::kTrainRequest, req);
        },
        [&](const SessionPtr& s) {
          std::lock_guard lock(round_mu_);
          round->pending.erase(s->client_id);
          round_cv_.notify_all();
        },
        [&] {
          std::lock_guard lock(round_mu_);
          return round->closed || stopping_.load();
        });
  });

  ExactSumAggregator agg(dims);
  std::function<void(const CapturedUpdate&)> observer;
  {
    std::lock_guard lock(observer_mu_);
    observer = observer_;
  }
  auto absorb = [&](Update& u) {
    try {
      agg.add_model(u.model, u.num_examples);
      if (observer) observer({u.client_id, cfg.round_id, u.num_examples, std::move(u.model)});
    } catch (const Error& e) {
      spdlog::warn("{}: rejected update from {}: {}", cfg_.id, u.client_id, e.what());
    }
  };

  const auto deadline = start + seconds(cfg.deadline_seconds);
  {
    std::unique_lock lock(round_mu_);
    for (;;) {
      round_cv_.wait_until(lock, deadline, [&] {
        return !round->queue.empty() || round->pending.empty() || stopping_;
      });
      if (!round->queue.empty()) {
        auto u = std::move(round->queue.front());
        round->queue.pop_front();
        lock.unlock();
        absorb(u);
        lock.lock();
        continue;
      }
      if (round->pending.empty() || stopping_ || Clock::now() >= deadline) break;
    }
    round->closed = true;
    round_cv_.notify_all();
  }
  // Updates queued before the close arrived in time.
  for (;;) {
    Update u;
    {
      std::lock_guard lock(round_mu_);
      if (round->queue.empty()) break;
      u = std::move(round->queue.front());
      round->queue.pop_front();
    }
    absorb(u);
  }
  {
    std::lock_guard lock(round_mu_);
    if (round_ == round) round_.reset();
  }
  dispatcher.join();
  for (const auto& s : targets) {
    auto st = ClientStatus::kTraining;
    s->status.compare_exchange_strong(st, ClientStatus::kReady);
  }

  out.reporting_clients = agg.inputs();
  out.round_seconds = since(start);
  if (stopping_) {
    out.reason = "combiner stopped";
    return out;
  }
  if (agg.inputs() == 0) {
    out.reason = "no updates";
    spdlog::warn("{}: round {} failed: no updates", cfg_.id, cfg.round_id);
    return out;
  }
  wire::Fields meta;
  meta.set("combiner_id", cfg_.id);
  meta.set("round_id", cfg.round_id);
  meta.set("total_examples", agg.total_examples());
  meta.set("contributing_clients", static_cast<std::uint64_t>(agg.inputs()));
  auto sum = agg.sum_bytes();
  {
    std::lock_guard lock(partial_mu_);
    partial_bytes_ = std::move(sum);
    partial_meta_ = meta;
    partial_round_ = cfg.round_id;
  }
  out.completed = true;
  out.total_examples = agg.total_examples();
  out.round_seconds = since(start);
  spdlog::info("{}: round {} completed with {}/{} updates in {:.3f}s", cfg_.id, cfg.round_id,
               out.reporting_clients, out.requested_clients, out.round_seconds);
  return out;
}

std::vector<ValidationRecord> Combiner::run_validation_round(const RoundConfig& cfg,
                                                             ByteView global_model) {
  const auto targets = live_sessions();
  auto v = std::make_shared<ActiveValidation>();
  v->round_id = cfg.round_id;
  for (const auto& s : targets) v->pending.insert(s->client_id);
  {
    std::lock_guard lock(round_mu_);
    validation_ = v;
  }
  wire::Fields request;
  request.set("round_id", cfg.round_id);
  const auto task_fields = cfg.effective_task().to_fields();
  for (const auto& [k, val] : task_fields.entries()) request.set(k, val);
  const auto model_digest = sha256(global_model);
  std::thread dispatcher([&] {
    dispatch(
        targets,
        [&](const SessionPtr& s) {
          s->status = ClientStatus::kValidating;
          const auto id = s->conn->send_object(global_model, &model_digest);
          auto req = request;
          req.set("model", wire::to_hex(id));
          s->conn->send(MessageType::kValidateRequest, req);
        },
        [&](const SessionPtr& s) {
          std::lock_guard lock(round_mu_);
          v->pending.erase(s->client_id);
          round_cv_.notify_all();
        },
        [&] {
          std::lock_guard lock(round_mu_);
          return v->closed || stopping_.load();
        });
  });
  const auto deadline = Clock::now() + seconds(cfg.validate_deadline_seconds);
  std::vector<ValidationRecord> out;
  {
    std::unique_lock lock(round_mu_);
    round_cv_.wait_until(lock, deadline, [&] { return v->pending.empty() || stopping_; });
    v->closed = true;
    for (const auto& [id, rec] : v->results) out.push_back(rec);
    if (validation_ == v) validation_.reset();
    round_cv_.notify_all();
  }
  dispatcher.join();
  return out;
}

// ---- control port ----------------------------------------------------------

void Combiner::serve_control(const net::ConnectionPtr& conn) {
  while (!stopping_) {
    std::optional<wire::Frame> m;
    try {
      m = conn->read_message();
    } catch (const Error&) {
      return;
    }
    if (!m) continue;
    try {
      if (m->type != MessageType::kRoundControl) {
        throw ProtocolError(std::string("unexpected ") + wire::to_string(m->type));
      }
      const auto f = wire::fields_of(*m);
      if (f.has("node") && conn->peer().empty()) conn->set_peer(f.get("node"));
      const auto op = f.get("op");
      if (op == ops::kParticipate) {
        RoundConfig cfg;
        cfg.min_clients_per_combiner = f.get_u64_or("min_clients_per_combiner", 1);
        wire::Fields ack;
        ack.set("combiner_id", cfg_.id);
        ack.set("live_clients", static_cast<std::uint64_t>(live_clients()));
        ack.set("participate", participation_check(cfg) && !busy_.load());
        conn->send(MessageType::kAck, ack);
      } else if (op == ops::kTrainRound) {
        const auto cfg = RoundConfig::from_fields(f);
        const auto seed = conn->take_stream(wire::stream_id_from_hex(f.get("model")));
        if (!try_begin_round()) {
          throw RemoteError(codes::kBusy, "a partial round is already in flight");
        }
        struct Release {
          std::atomic<bool>& flag;
          ~Release() { flag = false; }
        } release{busy_};
        wire::Fields accepted;
        accepted.set("op", ops::kTrainRound);
        accepted.set("round_id", cfg.round_id);
        accepted.set("accepted", true);
        conn->send(MessageType::kAck, accepted);
        auto outcome = collect_round(cfg, seed).to_fields();
        outcome.set("op", ops::kRoundOutcome);
        conn->send(MessageType::kAck, outcome);
      } else if (op == ops::kPullPartial) {
        const auto round_id = f.get_u64("round_id");
        auto p = partial(round_id);
        if (!p) throw RemoteError(codes::kNoPartial, "no partial for round");
        conn->set_traffic_tag("pull");
        const auto id = conn->send_object(p->first);
        conn->set_traffic_tag({});
        auto meta = p->second;
        meta.set("model", wire::to_hex(id));
        conn->send(MessageType::kPartialMeta, meta);
      } else if (op == ops::kValidateRound) {
        const auto cfg = RoundConfig::from_fields(f);
        const auto model = conn->take_stream(wire::stream_id_from_hex(f.get("model")));
        const auto records = run_validation_round(cfg, model);
        for (const auto& r : records) conn->send(MessageType::kValidationResult, r.to_fields());
        wire::Fields ack;
        ack.set("round_id", cfg.round_id);
        ack.set("count", static_cast<std::uint64_t>(records.size()));
        conn->send(MessageType::kAck, ack);
      } else if (op == ops::kStatus) {
        wire::Fields ack;
        ack.set("combiner_id", cfg_.id);
        ack.set("live_clients", static_cast<std::uint64_t>(live_clients()));
        ack.set("busy", busy_.load());
        for (const auto& s : sessions()) ack.set("client." + s.client_id, to_string(s.status));
        conn->send(MessageType::kAck, ack);
      } else {
        throw RemoteError(codes::kBadRequest, "unknown op '" + op + "'");
      }
    } catch (const RemoteError& e) {
      try {
        conn->send(wire::error_frame(e.code(), e.what()));
      } catch (const Error&) {
        return;
      }
    } catch (const NetworkError&) {
      return;
    } catch (const Error& e) {
      try {
        conn->send(wire::error_frame(codes::kBadRequest, e.what()));
      } catch (const Error&) {
        return;
      }
    }
  }
}

// ---- background ------------------------------------------------------------

void Combiner::report_to_discovery() {
  if (!cfg_.discovery) return;
  std::lock_guard lock(discovery_mu_);
  if (stopping_) return;
  try {
    if (!discovery_conn_ || discovery_conn_->closed()) {
      discovery_conn_ = net::Connection::connect(cfg_.id, *cfg_.discovery);
      discovery_conn_->set_peer("controller");
    }
    std::vector<std::string> clients;
    for (const auto& s : live_sessions()) clients.push_back(s->client_id);
    wire::Fields hb;
    hb.set("role", "combiner");
    hb.set("node", cfg_.id);
    hb.set("combiner_id", cfg_.id);
    hb.set("client_endpoint", client_endpoint().str());
    hb.set("control_endpoint", control_endpoint().str());
    hb.set("active_clients", static_cast<std::uint64_t>(clients.size()));
    hb.set("clients", join(clients));
    discovery_conn_->send(MessageType::kHeartbeat, hb);
    discovery_conn_->expect(MessageType::kAck, std::chrono::seconds(5));
  } catch (const Error& e) {
    spdlog::warn("{}: discovery report failed: {}", cfg_.id, e.what());
    if (discovery_conn_) discovery_conn_->shutdown();
    discovery_conn_.reset();
  }
}

void Combiner::ticker() {
  auto next_beat = Clock::now() + seconds(cfg_.heartbeat_interval_seconds);
  auto next_report = Clock::now();
  std::unique_lock lock(ticker_mu_);
  while (!stopping_) {
    const auto wake = std::min(next_beat, next_report);
    ticker_cv_.wait_until(lock, wake, [&] { return stopping_.load(); });
    if (stopping_) break;
    lock.unlock();
    const auto now = Clock::now();
    if (now >= next_beat) {
      wire::Fields hb;
      hb.set("node", cfg_.id);
      const auto frame = wire::make_frame(MessageType::kHeartbeat, hb);
      std::vector<SessionPtr> all;
      {
        std::lock_guard slock(sessions_mu_);
        for (const auto& [id, s] : sessions_) all.push_back(s);
      }
      for (const auto& s : all) {
        try {
          s->conn->send(frame);
        } catch (const Error&) {
        }
      }
      next_beat = now + seconds(cfg_.heartbeat_interval_seconds);
    }
    if (now >= next_report) {
      report_to_discovery();
      next_report = Clock::now() + seconds(cfg_.report_interval_seconds);
    }
    lock.lock();
  }
}

}  // namespace fedtier
