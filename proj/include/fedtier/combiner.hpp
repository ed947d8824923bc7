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
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "fedtier/model.hpp"
#include "fedtier/net.hpp"
#include "fedtier/round.hpp"
#include "fedtier/wire.hpp"

namespace fedtier {

struct CombinerConfig {
  std::string id = "combiner-0";
  net::Endpoint client_bind{"127.0.0.1", 0};
  net::Endpoint control_bind{"127.0.0.1", 0};
  std::optional<net::Endpoint> discovery;  // control endpoint to report to
  std::string advertise_host;  // reported instead of the bind host when set
  std::string token_secret = "fedtier";
  double heartbeat_interval_seconds = 5;
  double heartbeat_timeout_seconds = 15;
  double report_interval_seconds = 5;
  double grace_seconds = 2;
  std::size_t chunk_size = wire::kDefaultChunkSize;
  std::size_t dispatch_threads = 32;

  wire::Fields to_fields() const;
  static CombinerConfig from_fields(const wire::Fields& f);
};

struct ClientSessionInfo {
  std::string client_id;
  ClientStatus status = ClientStatus::kReady;
  double seconds_since_heartbeat = 0;
};

// One update as accepted by the aggregator, for harness capture.
struct CapturedUpdate {
  std::string client_id;
  std::uint64_t round_id = 0;
  std::uint64_t num_examples = 0;
  Bytes model;
};

// Stateless mid-tier aggregation server. Clients connect to the client port;
// the controller and reducers use the control port.
class Combiner {
 public:
  explicit Combiner(CombinerConfig cfg);
  ~Combiner();
  Combiner(const Combiner&) = delete;
  Combiner& operator=(const Combiner&) = delete;

  const std::string& id() const { return cfg_.id; }
  net::Endpoint client_endpoint() const;
  net::Endpoint control_endpoint() const;
  NodeRef ref() const { return {cfg_.id, control_endpoint()}; }

  std::vector<ClientSessionInfo> sessions() const;
  std::size_t live_clients() const;
  bool participation_check(const RoundConfig& cfg) const;

  PartialRoundOutcome run_partial_round(const RoundConfig& cfg, ByteView seed_model);
  std::vector<ValidationRecord> run_validation_round(const RoundConfig& cfg,
                                                     ByteView global_model);

  // FNP3 weighted-sum bytes and metadata of the retained partial for `round_id`.
  std::optional<std::pair<Bytes, wire::Fields>> partial(std::uint64_t round_id) const;

  // Receives every update the aggregator accepts.
  void set_update_observer(std::function<void(const CapturedUpdate&)> f);

  // Both drop every connection without notice; kill() exists for fault
  // injection and reads as such at call sites.
  void stop();
  void kill() { stop(); }
  bool stopped() const { return stopping_.load(); }

 private:
  struct Session {
    std::string client_id;
    net::ConnectionPtr conn;
    std::uint64_t generation = 0;
    std::atomic<std::int64_t> last_heartbeat_ns{0};
    std::atomic<ClientStatus> status{ClientStatus::kReady};
  };
  using SessionPtr = std::shared_ptr<Session>;

  struct Update {
    std::string client_id;
    std::uint64_t num_examples = 0;
    Bytes model;
  };

  // Collection state of the round in flight.
  struct ActiveRound {
    std::uint64_t round_id = 0;
    std::set<std::string> pending;
    std::deque<Update> queue;
    bool closed = false;
  };

  struct ActiveValidation {
    std::uint64_t round_id = 0;
    std::set<std::string> pending;
    std::map<std::string, ValidationRecord> results;
    bool closed = false;
  };

  void serve_client(const net::ConnectionPtr& conn);
  void serve_control(const net::ConnectionPtr& conn);
  void ticker();
  void report_to_discovery();
  void client_gone(const SessionPtr& s);
  void on_update(const SessionPtr& s, const net::ConnectionPtr& conn, const wire::Frame& f);
  void on_validation(const SessionPtr& s, const wire::Frame& f);
  void on_client_error(const SessionPtr& s, const wire::Frame& f);
  bool is_stale(const Session& s, std::int64_t now_ns) const;
  std::vector<SessionPtr> live_sessions() const;
  void dispatch(const std::vector<SessionPtr>& targets,
                const std::function<void(const SessionPtr&)>& send_one,
                const std::function<void(const SessionPtr&)>& on_failure,
                const std::function<bool()>& cancelled);
  bool try_begin_round() { return !busy_.exchange(true); }
  PartialRoundOutcome collect_round(const RoundConfig& cfg, ByteView seed_model);
  std::vector<SessionPtr> select_clients(const RoundConfig& cfg) const;

  CombinerConfig cfg_;
  std::atomic<bool> stopping_{false};
  std::atomic<bool> busy_{false};

  mutable std::mutex sessions_mu_;
  std::map<std::string, SessionPtr> sessions_;
  std::uint64_t next_generation_ = 1;

  std::mutex round_mu_;
  std::condition_variable round_cv_;
  std::shared_ptr<ActiveRound> round_;
  std::shared_ptr<ActiveValidation> validation_;

  mutable std::mutex partial_mu_;
  std::optional<std::uint64_t> partial_round_;
  Bytes partial_bytes_;
  wire::Fields partial_meta_;

  std::mutex observer_mu_;
  std::function<void(const CapturedUpdate&)> observer_;

  std::mutex discovery_mu_;
  net::ConnectionPtr discovery_conn_;

  std::unique_ptr<net::Server> client_server_;
  std::unique_ptr<net::Server> control_server_;
  std::mutex ticker_mu_;
  std::condition_variable ticker_cv_;
  std::thread ticker_;
};

}  // namespace fedtier
