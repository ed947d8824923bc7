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

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>

#include "fedtier/discovery.hpp"
#include "fedtier/executor.hpp"
#include "fedtier/net.hpp"

namespace fedtier {

struct AgentConfig {
  std::string client_id = "client-0";
  net::Endpoint discovery;  // the network's control endpoint
  std::string data;         // CSV path, "csv:PATH" or "synthetic:k=v,..."; empty = none
  double heartbeat_interval_seconds = 5;
  std::uint64_t missed_heartbeats = 3;  // silent server beats before reassignment
  double backoff_base_seconds = 1;
  double backoff_cap_seconds = 30;
  std::size_t chunk_size = wire::kDefaultChunkSize;

  wire::Fields to_fields() const;
  static AgentConfig from_fields(const wire::Fields& f);
};

LocalDataset load_data_source(const std::string& source);

// Egress-only client worker. Every socket it owns is outbound.
class Agent {
 public:
  // `data` overrides cfg.data when given (in-process harness).
  Agent(AgentConfig cfg, std::shared_ptr<const LocalDataset> data = nullptr);
  ~Agent();
  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  void start();
  // Graceful shutdown; an update in progress is abandoned.
  void stop();
  // Fault injection: vanish without notice and never come back.
  void drop();

  const std::string& id() const { return cfg_.client_id; }
  bool connected() const { return connected_.load(); }
  std::string combiner_id() const;
  std::uint64_t updates_sent() const { return updates_sent_.load(); }
  std::uint64_t assignments() const { return assignments_.load(); }
  std::uint64_t busy_rejections() const { return busy_rejections_.load(); }

 private:
  void run();
  std::optional<ClientAssignment> request_assignment(const std::set<std::string>& avoid);
  void session(const ClientAssignment& a);
  void on_train(const net::ConnectionPtr& conn, const wire::Frame& f);
  void on_validate(const net::ConnectionPtr& conn, const wire::Frame& f);
  void start_task(std::function<void()> body);
  void join_task();
  bool sleep_for(double seconds);

  AgentConfig cfg_;
  std::shared_ptr<const LocalDataset> data_;
  std::atomic<bool> stopping_{false};
  std::atomic<bool> connected_{false};
  std::atomic<bool> task_busy_{false};
  std::atomic<std::uint64_t> updates_sent_{0};
  std::atomic<std::uint64_t> assignments_{0};
  std::atomic<std::uint64_t> busy_rejections_{0};

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::string combiner_id_;
  net::ConnectionPtr conn_;
  std::thread task_;
  std::thread loop_;
};

}  // namespace fedtier
