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

#include "fedtier/agent.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

#include "fedtier/config.hpp"
#include "fedtier/error.hpp"
#include "fedtier/round.hpp"

namespace fedtier {

namespace {

using Clock = std::chrono::steady_clock;
using wire::MessageType;

net::Duration seconds(double s) {
  return std::chrono::duration_cast<net::Duration>(std::chrono::duration<double>(s));
}

const LocalDataset& empty_dataset() {
  static const LocalDataset d;
  return d;
}

}  // namespace

wire::Fields AgentConfig::to_fields() const {
  wire::Fields f;
  f.set("client_id", client_id);
  f.set("discovery", discovery.str());
  if (!data.empty()) f.set("data", data);
  f.set("heartbeat_interval_s", heartbeat_interval_seconds);
  f.set("missed_heartbeats", missed_heartbeats);
  f.set("backoff_base_s", backoff_base_seconds);
  f.set("backoff_cap_s", backoff_cap_seconds);
  f.set("chunk_size", static_cast<std::uint64_t>(chunk_size));
  return f;
}

AgentConfig AgentConfig::from_fields(const wire::Fields& f) {
  ConfigReader r(f);
  AgentConfig c;
  c.client_id = r.required("client_id");
  c.discovery = r.endpoint("discovery", c.discovery);
  if (!f.has("discovery")) r.problem("missing required key 'discovery'");
  c.data = r.str("data", "");
  c.heartbeat_interval_seconds = r.positive("heartbeat_interval_s", c.heartbeat_interval_seconds);
  c.missed_heartbeats = r.u64("missed_heartbeats", c.missed_heartbeats, 1);
  c.backoff_base_seconds = r.positive("backoff_base_s", c.backoff_base_seconds);
  c.backoff_cap_seconds = r.positive("backoff_cap_s", c.backoff_cap_seconds);
  c.chunk_size = r.u64("chunk_size", c.chunk_size, wire::kMinChunkSize);
  if (c.chunk_size > wire::kMaxChunkSize) r.problem("chunk_size exceeds the frame limit");
  r.finish("client");
  return c;
}

LocalDataset load_data_source(const std::string& source) {
  if (source.rfind("synthetic:", 0) == 0) {
    return make_synthetic(SyntheticSpec::parse(source.substr(10)));
  }
  if (source.rfind("csv:", 0) == 0) return load_csv(source.substr(4));
  return load_csv(source);
}

Agent::Agent(AgentConfig cfg, std::shared_ptr<const LocalDataset> data)
    : cfg_(std::move(cfg)), data_(std::move(data)) {
  if (!data_ && !cfg_.data.empty()) {
    data_ = std::make_shared<const LocalDataset>(load_data_source(cfg_.data));
  }
}

Agent::~Agent() { stop(); }

void Agent::start() {
  std::lock_guard lock(mu_);
  if (loop_.joinable() || stopping_) return;
  loop_ = std::thread([this] { run(); });
}

void Agent::stop() {
  stopping_ = true;
  net::ConnectionPtr conn;
  {
    std::lock_guard lock(mu_);
    conn = conn_;
    cv_.notify_all();
  }
  if (conn) conn->shutdown();
  if (loop_.joinable()) loop_.join();
  join_task();
}

void Agent::drop() {
  spdlog::info("{}: dropping out", cfg_.client_id);
  stop();
}

std::string Agent::combiner_id() const {
  std::lock_guard lock(mu_);
  return connected_ ? combiner_id_ : std::string{};
}

bool Agent::sleep_for(double s) {
  std::unique_lock lock(mu_);
  return !cv_.wait_for(lock, seconds(s), [&] { return stopping_.load(); });
}

std::optional<ClientAssignment> Agent::request_assignment(const std::set<std::string>& avoid) {
  try {
    auto conn = net::Connection::connect(cfg_.client_id, cfg_.discovery);
    conn->set_peer("controller");
    wire::Fields hello;
    hello.set("role", "client");
    hello.set("node", cfg_.client_id);
    hello.set("client_id", cfg_.client_id);
    hello.set("avoid", join(std::vector<std::string>(avoid.begin(), avoid.end())));
    conn->send(MessageType::kHello, hello);
    auto a = ClientAssignment::from_fields(
        wire::fields_of(conn->expect(MessageType::kAssignment, std::chrono::seconds(10))));
    if (!a.task_spec_id.empty()) {
      auto req = control_request(ops::kGetTask, cfg_.client_id);
      req.set("task_spec_id", a.task_spec_id);
      conn->send(MessageType::kRoundControl, req);
      const auto task =
          TaskSpec::from_fields(wire::fields_of(conn->expect(MessageType::kAck, std::chrono::seconds(10))));
      ExecutorRegistry::instance().create(task.executor_name)->check_task(task);
    }
    return a;
  } catch (const Error& e) {
    spdlog::info("{}: no assignment yet: {}", cfg_.client_id, e.what());
    return std::nullopt;
  }
}

void Agent::run() {
  double backoff = cfg_.backoff_base_seconds;
  std::set<std::string> avoid;
  while (!stopping_) {
    auto a = request_assignment(avoid);
    if (a) {
      bool established = false;
      try {
        auto conn = net::Connection::connect(cfg_.client_id, a->endpoint);
        conn->set_peer(a->combiner_id);
        conn->set_chunk_size(cfg_.chunk_size);
        conn->set_traffic_tag("up");
        {
          std::lock_guard lock(mu_);
          conn_ = conn;
        }
        if (stopping_) break;
        wire::Fields hello;
        hello.set("node", cfg_.client_id);
        hello.set("client_id", cfg_.client_id);
        hello.set("token", a->token);
        hello.set("chunk_size", static_cast<std::uint64_t>(cfg_.chunk_size));
        conn->send(MessageType::kHello, hello);
        const auto ack =
            wire::fields_of(conn->expect(MessageType::kAck, std::chrono::seconds(10)));
        conn->set_chunk_size(ack.get_u64_or("chunk_size", cfg_.chunk_size));
        const double server_interval =
            static_cast<double>(ack.get_u64_or("heartbeat_interval_ms", 5000)) / 1000.0;
        established = true;
        {
          std::lock_guard lock(mu_);
          combiner_id_ = a->combiner_id;
        }
        connected_ = true;
        ++assignments_;
        avoid.clear();
        spdlog::debug("{}: joined {}", cfg_.client_id, a->combiner_id);

        auto last_server = Clock::now();
        auto next_beat = Clock::now() + seconds(cfg_.heartbeat_interval_seconds);
        const auto silence_limit =
            seconds(server_interval * static_cast<double>(cfg_.missed_heartbeats));
        while (!stopping_) {
          const auto wait =
              std::clamp<net::Duration>(next_beat - Clock::now(), {}, std::chrono::milliseconds(500));
          auto m = conn->read_message(wait);
          if (m) {
            last_server = Clock::now();
            switch (m->type) {
              case MessageType::kTrainRequest:
                on_train(conn, *m);
                break;
              case MessageType::kValidateRequest:
                on_validate(conn, *m);
                break;
              case MessageType::kError: {
                const auto f = wire::fields_of(*m);
                spdlog::warn("{}: combiner error {}: {}", cfg_.client_id, f.get_or("code", ""),
                             f.get_or("message", ""));
                break;
              }
              default:
                break;
            }
          }
          const auto now = Clock::now();
          if (now >= next_beat) {
            wire::Fields hb;
            hb.set("client_id", cfg_.client_id);
            conn->send(MessageType::kHeartbeat, hb);
            next_beat = now + seconds(cfg_.heartbeat_interval_seconds);
          }
          if (now - last_server > silence_limit) {
            throw NetworkError("combiner missed " + std::to_string(cfg_.missed_heartbeats) +
                               " heartbeats");
          }
        }
      } catch (const Error& e) {
        if (!stopping_) {
          spdlog::info("{}: lost {}: {}", cfg_.client_id, a->combiner_id, e.what());
        }
      }
      connected_ = false;
      net::ConnectionPtr conn;
      {
        std::lock_guard lock(mu_);
        conn.swap(conn_);
      }
      if (conn) conn->shutdown();
      join_task();
      if (established) backoff = cfg_.backoff_base_seconds;
      avoid = {a->combiner_id};
    }
    if (stopping_) break;
    if (!sleep_for(backoff)) break;
    backoff = std::min(backoff * 2, cfg_.backoff_cap_seconds);
  }
  connected_ = false;
}

void Agent::join_task() {
  std::thread t;
  {
    std::lock_guard lock(mu_);
    t = std::move(task_);
  }
  if (t.joinable()) t.join();
}

void Agent::start_task(std::function<void()> body) {
  join_task();
  task_busy_ = true;
  std::lock_guard lock(mu_);
  task_ = std::thread([this, body = std::move(body)] {
    body();
    task_busy_ = false;
  });
}

void Agent::on_train(const net::ConnectionPtr& conn, const wire::Frame& frame) {
  const auto f = wire::fields_of(frame);
  const auto round_id = f.get_u64("round_id");
  auto model = conn->take_stream(wire::stream_id_from_hex(f.get("model")));
  if (task_busy_) {
    ++busy_rejections_;
    auto err = wire::fields_of(wire::error_frame(codes::kBusy, "a task is already running"));
    err.set("round_id", round_id);
    conn->send(MessageType::kError, err);
    return;
  }
  const auto task = TaskSpec::from_fields(f);
  const auto seed = update_seed(f.get_u64_or("seed", 1), cfg_.client_id, round_id);
  start_task([this, conn, task, seed, round_id, model = std::move(model)] {
    try {
      const auto& data = data_ ? *data_ : empty_dataset();
      auto result = execute_update(model, task, data, seed);
      if (stopping_ || conn->closed()) return;
      const auto id = conn->send_object(result.model);
      wire::Fields meta = task.to_fields();
      meta.set("round_id", round_id);
      meta.set("client_id", cfg_.client_id);
      meta.set("model", wire::to_hex(id));
      meta.set("num_examples", result.num_examples);
      meta.set("train_seconds", result.train_seconds);
      conn->send(MessageType::kUpdateMeta, meta);
      ++updates_sent_;
    } catch (const NetworkError&) {
    } catch (const Error& e) {
      spdlog::warn("{}: update for round {} failed: {}", cfg_.client_id, round_id, e.what());
      try {
        auto err = wire::fields_of(wire::error_frame(codes::kExecutor, e.what()));
        err.set("round_id", round_id);
        conn->send(MessageType::kError, err);
      } catch (const Error&) {
      }
    }
  });
}

void Agent::on_validate(const net::ConnectionPtr& conn, const wire::Frame& frame) {
  const auto f = wire::fields_of(frame);
  const auto round_id = f.get_u64("round_id");
  auto model = conn->take_stream(wire::stream_id_from_hex(f.get("model")));
  if (task_busy_) {
    ++busy_rejections_;
    auto err = wire::fields_of(wire::error_frame(codes::kBusy, "a task is already running"));
    err.set("round_id", round_id);
    conn->send(MessageType::kError, err);
    return;
  }
  const auto task = TaskSpec::from_fields(f);
  start_task([this, conn, task, round_id, model = std::move(model)] {
    try {
      const auto& data = data_ ? *data_ : empty_dataset();
      ValidationRecord rec;
      rec.client_id = cfg_.client_id;
      rec.round_id = round_id;
      rec.metrics = execute_validation(model, task, data);
      if (stopping_ || conn->closed()) return;
      conn->send(MessageType::kValidationResult, rec.to_fields());
    } catch (const NetworkError&) {
    } catch (const Error& e) {
      try {
        auto err = wire::fields_of(wire::error_frame(codes::kExecutor, e.what()));
        err.set("round_id", round_id);
        conn->send(MessageType::kError, err);
      } catch (const Error&) {
      }
    }
  });
}

}  // namespace fedtier
