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
#include <string>
#include <thread>
#include <vector>

#include "fedtier/model.hpp"
#include "fedtier/net.hpp"
#include "fedtier/round.hpp"
#include "fedtier/storage.hpp"

namespace fedtier {

struct ReducerConfig {
  std::string id = "reducer-0";
  net::Endpoint control_bind{"127.0.0.1", 0};
  std::string advertise_host;
  std::string lease_name = "reducer";
  double lease_ttl_seconds = 10;
  double renew_interval_seconds = 3;
  bool parallel_pull = false;
  std::uint64_t pull_attempts = 3;
  double pull_backoff_seconds = 2;
  double pull_timeout_seconds = 120;

  wire::Fields to_fields() const;
  // Keys other than the reducer's own (e.g. `store`) are left to the caller.
  static ReducerConfig from_fields(const wire::Fields& f, const std::vector<std::string>& extra = {});
};

enum class Role { kActive, kPassive };
const char* to_string(Role r);

struct ReducerRole {
  std::string instance_id;
  Role role = Role::kPassive;
  WallTime lease_expiry{};
};

class ReduceFailed : public Error {
 public:
  ReduceFailed(std::string combiner_id, const std::string& why)
      : Error("pull from " + combiner_id + " failed: " + why),
        combiner_id_(std::move(combiner_id)) {}
  const std::string& combiner_id() const { return combiner_id_; }

 private:
  std::string combiner_id_;
};

struct ReduceResult {
  ParameterSet params;
  std::uint64_t total_examples = 0;
  ReduceTimings timings;
  std::uint64_t bytes_pulled = 0;
};

// Pulls combiner partials and reduces them into the global model. Instances
// run active-passive: only the holder of an unexpired lease in the shared
// store reduces.
class Reducer {
 public:
  Reducer(ReducerConfig cfg, StorePtr store);
  ~Reducer();
  Reducer(const Reducer&) = delete;
  Reducer& operator=(const Reducer&) = delete;

  const std::string& id() const { return cfg_.id; }
  net::Endpoint endpoint() const;
  const ReducerConfig& config() const { return cfg_; }

  // One lease step; the background loop calls this every renew interval.
  ReducerRole acquire_or_renew_lease(WallTime now);
  bool active(WallTime now = WallClock::now()) const;

  ReduceResult reduce_round(std::uint64_t round_id, const std::vector<NodeRef>& combiners);

  void stop();
  void kill() { stop(); }
  bool stopped() const { return stopping_.load(); }

 private:
  struct Pulled {
    Bytes bytes;
    wire::Fields meta;
    double seconds = 0;
  };
  Pulled pull(std::uint64_t round_id, const NodeRef& ref);
  void lease_loop();
  void serve(const net::ConnectionPtr& conn);

  ReducerConfig cfg_;
  StorePtr store_;
  std::atomic<bool> stopping_{false};
  std::atomic<std::int64_t> lease_expiry_ms_{0};
  std::atomic<Role> role_{Role::kPassive};
  std::mutex reduce_mu_;
  std::unique_ptr<net::Server> server_;
  std::mutex loop_mu_;
  std::condition_variable loop_cv_;
  std::thread loop_;
};

// Control endpoint of the instance currently holding `lease_name`.
std::optional<NodeRef> active_reducer(Store& store, const std::string& lease_name,
                                          WallTime now = WallClock::now());

}  // namespace fedtier
