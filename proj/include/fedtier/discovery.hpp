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

#include <cstdint>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fedtier/executor.hpp"
#include "fedtier/net.hpp"
#include "fedtier/storage.hpp"

namespace fedtier {

struct CombinerInfo {
  std::string combiner_id;
  net::Endpoint client_endpoint;
  net::Endpoint control_endpoint;
  std::uint64_t active_clients = 0;  // as last reported by the combiner
  std::uint64_t assigned_clients = 0;  // load used for assignment
  std::int64_t last_seen_ms = 0;
  bool up = false;

  wire::Fields to_fields() const;
  static CombinerInfo from_fields(const std::string& id, const wire::Fields& f);
};

struct ClientAssignment {
  std::string client_id;
  std::string combiner_id;
  net::Endpoint endpoint;
  std::string token;
  std::string task_spec_id;  // empty until a task is staged

  wire::Fields to_fields() const;
  static ClientAssignment from_fields(const wire::Fields& f);
};

struct DiscoveryConfig {
  double combiner_timeout_seconds = 15;
  std::string policy = "least_loaded";  // or "random"
  std::uint64_t policy_seed = 1;
  std::string token_secret = "fedtier";
  // Assignments younger than this survive a report that does not list the
  // client yet (it may still be connecting).
  double assignment_grace_seconds = 10;
};

// Token a combiner expects in a client's HELLO.
std::string client_token(const std::string& secret, const std::string& client_id);

// Combiner registry and client assignment. All state lives in the shared
// store: combiner/<id> holds registrations, discovery/assignments maps each
// client to its combiner, and load is the number of clients mapped to a
// combiner. Every assignment is one compare-and-set on that single key.
class Discovery {
 public:
  Discovery(StorePtr store, DiscoveryConfig cfg);

  // Registers or refreshes a combiner. `connected` lists the clients it
  // currently serves; assignments it does not confirm expire after the grace.
  CombinerInfo report_combiner(const CombinerInfo& info,
                               const std::vector<std::string>& connected, WallTime now);

  std::vector<CombinerInfo> combiners(WallTime now);
  std::vector<CombinerInfo> up_combiners(WallTime now);
  std::optional<CombinerInfo> combiner(const std::string& id, WallTime now);

  // Picks an UP combiner per policy. `avoid` names combiners the client saw
  // fail; they are skipped unless nothing else is UP. Throws RemoteError
  // "network_unavailable" when no combiner is UP.
  ClientAssignment assign(const std::string& client_id, WallTime now,
                          const std::set<std::string>& avoid = {});

  // Compute-package staging.
  std::string put_task(const TaskSpec& task);
  TaskSpec get_task(const std::string& task_spec_id);
  std::string current_task_id();

  const DiscoveryConfig& config() const { return cfg_; }

 private:
  bool is_up(std::int64_t last_seen_ms, WallTime now) const;

  StorePtr store_;
  DiscoveryConfig cfg_;
  // Serializes this instance's writers so they do not collide on the
  // assignments key; the CAS still guards against other instances.
  std::mutex write_mu_;
  std::mutex rng_mu_;
  std::mt19937_64 rng_;
};

}  // namespace fedtier
