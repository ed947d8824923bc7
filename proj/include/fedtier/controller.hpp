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
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "fedtier/discovery.hpp"
#include "fedtier/round.hpp"
#include "fedtier/storage.hpp"

namespace fedtier {

struct ControllerConfig {
  std::string node = "controller";
  net::Endpoint control_bind{"127.0.0.1", 0};
  std::string advertise_host;
  DiscoveryConfig discovery;
  double participation_timeout_seconds = 5;
  // Extra wait past deadline + grace before a silent combiner counts as failed.
  double outcome_slack_seconds = 30;
  double reduce_timeout_seconds = 600;
  std::string reducer_lease = "reducer";

  wire::Fields to_fields() const;
  static ControllerConfig from_fields(const wire::Fields& f,
                                      const std::vector<std::string>& extra = {});
};

// Points of the round protocol where fault hooks run.
enum class Phase { kBeforeDispatch, kMidCollection, kBeforeReduce, kAfterRound };
const char* to_string(Phase p);
Phase parse_phase(const std::string& text);

struct RoundReport {
  std::string session_id;
  std::uint64_t round_id = 0;
  std::vector<std::string> participating;
  std::vector<std::string> successful;
  bool valid = false;
  std::string global_model_id;  // empty unless valid
  std::string parent_id;
  std::string failure;          // why the round is invalid
  std::map<std::string, PartialRoundOutcome> outcomes;
  bool reduced = false;
  ReduceTimings reduce;
  std::uint64_t total_examples = 0;
  std::uint64_t validations = 0;
  double total_round_seconds = 0;
  bool recovered = false;  // reconstructed on resume from a committed trail entry

  wire::Fields to_fields() const;
  static RoundReport from_fields(const wire::Fields& f);
};

struct SessionConfig {
  std::string session_id;
  std::uint64_t rounds = 0;
  RoundConfig base;

  void check() const;
};

// Thrown by a phase hook to stop the controller where it stands, as a crash
// would. Nothing after the throwing phase is written.
class Interrupted : public Error {
 public:
  using Error::Error;
};

// Round-protocol driver and keeper of the model trail.
class Controller {
 public:
  using PhaseHook = std::function<void(Phase, const RoundConfig&)>;

  Controller(ControllerConfig cfg, StorePtr store, std::shared_ptr<Discovery> discovery);

  // Stores the task and commits `model` (FNP1) as the trail's first entry.
  TrailEntry init_seed(ByteView model, const TaskSpec& task);

  RoundReport run_round(const RoundConfig& cfg, const std::string& session_id = {});
  // open_session records a new session (ConfigError if the id exists); drive runs it.
  std::vector<RoundReport> run_session(const SessionConfig& s);
  void open_session(const SessionConfig& s);
  std::vector<RoundReport> drive(const std::string& session_id);
  std::vector<RoundReport> resume_session(const std::string& session_id);
  TrailEntry commit_global_model(ByteView model, std::uint64_t round_id,
                                 const std::string& parent_id);

  // Stops the running session after the round in flight.
  void abort() { abort_ = true; }
  void set_phase_hook(PhaseHook hook);

  std::optional<RoundReport> latest_report();
  std::vector<RoundReport> session_reports(const std::string& session_id);
  wire::Fields status(const std::string& session_id = {});

  Store& store() { return *store_; }
  Discovery& discovery() { return *discovery_; }
  const ControllerConfig& config() const { return cfg_; }

 private:
  void fire(Phase p, const RoundConfig& cfg);
  std::vector<NodeRef> participation(const RoundConfig& cfg, RoundReport& report);
  void dispatch(const RoundConfig& cfg, const std::vector<NodeRef>& combiners,
                const Bytes& seed, RoundReport& report);
  std::optional<Bytes> reduce(const RoundConfig& cfg, const std::vector<NodeRef>& successful,
                              RoundReport& report);
  void validate(const RoundConfig& cfg, const std::vector<NodeRef>& combiners,
                const Bytes& model, RoundReport& report);
  void persist(const RoundReport& report);

  ControllerConfig cfg_;
  StorePtr store_;
  std::shared_ptr<Discovery> discovery_;
  std::atomic<bool> abort_{false};
  std::mutex round_mu_;
  std::mutex hook_mu_;
  PhaseHook hook_;
};

std::string report_key(const std::string& session_id, std::uint64_t round_id);

}  // namespace fedtier
