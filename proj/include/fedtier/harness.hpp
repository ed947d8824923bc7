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

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "fedtier/agent.hpp"
#include "fedtier/combiner.hpp"
#include "fedtier/control_server.hpp"
#include "fedtier/controller.hpp"
#include "fedtier/reducer.hpp"
#include "fedtier/remote_store.hpp"
#include "fedtier/shaper.hpp"

namespace fedtier {

// Shape of a network plus the configuration template of every role. Node
// names are fixed: combiner-<i>, client-<i>, reducer-<i> (reducer-0 starts
// first and takes the lease), controller.
struct NetworkSpec {
  std::size_t combiners = 1;
  std::size_t clients = 1;
  std::size_t passive_reducers = 0;
  std::filesystem::path store_dir;  // empty: private temp dir, removed by down()

  ControllerConfig controller;
  CombinerConfig combiner;  // id and binds are overridden per instance
  ReducerConfig reducer;
  AgentConfig agent;        // client_id and discovery are overridden

  // Data source per client; "{i}" expands to the client index. Ignored
  // when `client_data` is set.
  std::string client_data_source;
  std::function<std::shared_ptr<const LocalDataset>(std::size_t)> client_data;

  net::LinkProfile link;               // applied to every link when active
  double combiner_nic_bytes_per_s = 0; // per-combiner NIC cap, 0 = none

  void check() const;
  std::string client_source(std::size_t i) const;

  // Flat keys plus `controller.`, `combiner.`, `reducer.` and `agent.`
  // sections holding the per-role keys.
  wire::Fields to_fields() const;
  static NetworkSpec from_fields(const wire::Fields& f);
};

struct Fault {
  enum class Kind { kKillCombiner, kKillReducer, kDropClient, kPartitionLink };

  Kind kind = Kind::kKillCombiner;
  std::string target;  // node name, or "active" for kill_reducer
  std::string peer;    // partition_link only
  double seconds = 0;  // partition_link only
  std::optional<Phase> at;  // immediate when unset

  // "kill_combiner:combiner-1@mid_collection", "kill_reducer:active",
  // "drop_client:client-2", "partition_link:combiner-0,reducer-0,5".
  static Fault parse(const std::string& text);
  std::string str() const;
};

// A pseudo-distributed network: every component in this process, talking
// over loopback sockets exactly as separate processes would.
class Network {
 public:
  explicit Network(NetworkSpec spec);
  ~Network();
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  // True once every combiner is UP, every live agent is connected and a
  // reducer holds the lease.
  bool wait_ready(std::chrono::milliseconds timeout);
  void down();

  Controller& controller() { return *controller_; }
  ControlServer& control_server() { return *control_; }
  net::Endpoint control_endpoint() const { return control_->endpoint(); }
  Discovery& discovery() { return *discovery_; }
  StorePtr store() const { return store_; }
  const std::filesystem::path& store_dir() const { return store_dir_; }
  const NetworkSpec& spec() const { return spec_; }

  std::size_t combiner_count() const { return combiners_.size(); }
  Combiner& combiner(std::size_t i) { return *combiners_.at(i); }
  Combiner& combiner(const std::string& id);
  std::size_t agent_count() const { return agents_.size(); }
  Agent& agent(std::size_t i) { return *agents_.at(i); }
  Agent& agent(const std::string& id);
  std::size_t reducer_count() const { return reducers_.size(); }
  Reducer& reducer(std::size_t i) { return *reducers_.at(i); }
  Reducer* active_reducer();

  // Stores the task and commits `model` as the seed (float32 on the wire).
  TrailEntry seed(const ParameterSet& model, const TaskSpec& task);

  // Applies `f` now, or arms it for the first round that reaches f.at.
  // Unknown targets throw before anything is armed.
  void inject(const Fault& f);
  std::vector<Fault> applied_faults() const;

  // Runs after armed faults at every phase; for tests that need to act
  // inside the round protocol.
  void set_phase_hook(Controller::PhaseHook hook);

 private:
  void apply(const Fault& f);
  void check_target(const Fault& f);
  void on_phase(Phase p, const RoundConfig& cfg);

  NetworkSpec spec_;
  std::filesystem::path store_dir_;
  bool owns_store_dir_ = false;
  bool down_ = false;
  StorePtr store_;
  std::shared_ptr<Discovery> discovery_;
  std::shared_ptr<Controller> controller_;
  std::unique_ptr<ControlServer> control_;
  std::vector<std::unique_ptr<Reducer>> reducers_;
  std::vector<std::unique_ptr<Combiner>> combiners_;
  std::vector<std::unique_ptr<Agent>> agents_;
  std::vector<bool> dropped_;

  mutable std::mutex mu_;
  std::vector<Fault> armed_;
  std::vector<Fault> applied_;
  Controller::PhaseHook extra_hook_;
};

// Multi-process deployment of `spec`: one config file per component plus a
// start script, with every listener on `host` from `base_port` upwards.
// Returns the paths written.
std::vector<std::filesystem::path> emit_deployment(const NetworkSpec& spec,
                                                   const std::filesystem::path& dir,
                                                   const std::string& host,
                                                   std::uint16_t base_port,
                                                   const std::string& binary = "fedtier");

}  // namespace fedtier
