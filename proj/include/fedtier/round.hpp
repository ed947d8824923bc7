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
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedtier/executor.hpp"
#include "fedtier/net.hpp"
#include "fedtier/wire.hpp"

namespace fedtier {

// Instruction for one global round. Travels in ROUND_CONTROL payloads.
struct RoundConfig {
  std::uint64_t round_id = 0;
  double deadline_seconds = 60;
  std::uint64_t min_clients_per_combiner = 1;
  std::uint64_t min_successful_combiners = 1;
  double client_sample_fraction = 1.0;
  std::uint64_t local_epochs = 1;
  std::uint64_t seed = 1;  // task seed; client update seeds derive from it
  TaskSpec task;
  bool validate = false;
  double validate_deadline_seconds = 30;

  // Throws ConfigError naming the first violated bound.
  void check() const;
  // The task as sent to clients: hyperparameters with epochs = local_epochs.
  TaskSpec effective_task() const;

  wire::Fields to_fields() const;
  static RoundConfig from_fields(const wire::Fields& f);
};

enum class ClientStatus { kReady, kTraining, kValidating, kStale };
const char* to_string(ClientStatus s);

struct PartialRoundOutcome {
  std::string combiner_id;
  std::uint64_t round_id = 0;
  bool completed = false;
  std::string reason;  // set when !completed
  std::uint64_t requested_clients = 0;
  std::uint64_t reporting_clients = 0;
  std::uint64_t total_examples = 0;
  double round_seconds = 0;

  wire::Fields to_fields() const;
  static PartialRoundOutcome from_fields(const wire::Fields& f);
};

struct ValidationRecord {
  std::string client_id;
  std::uint64_t round_id = 0;
  ValidationMetrics metrics;

  wire::Fields to_fields() const;
  static ValidationRecord from_fields(const wire::Fields& f);
};

// A service instance and its control endpoint, written "id@host:port".
struct NodeRef {
  std::string id;
  net::Endpoint control;

  std::string str() const { return id + "@" + control.str(); }
  static NodeRef parse(const std::string& text);
  friend bool operator==(const NodeRef&, const NodeRef&) = default;
};

std::string join_refs(const std::vector<NodeRef>& refs);
std::vector<NodeRef> split_refs(const std::string& text);

std::string join(const std::vector<std::string>& items, char sep = ',');
std::vector<std::string> split_list(const std::string& text, char sep = ',');

// Seconds spent in each reduce phase. `total` is measured independently of
// the phases, so the sum check is meaningful.
struct ReduceTimings {
  double download = 0;
  double deserialize = 0;
  double aggregate = 0;
  double other = 0;
  double total = 0;

  double phase_sum() const { return download + deserialize + aggregate + other; }
  wire::Fields to_fields(const std::string& prefix = {}) const;
  static ReduceTimings from_fields(const wire::Fields& f, const std::string& prefix = {});
};

// Protocol control operations carried in ROUND_CONTROL `op`.
namespace ops {
inline constexpr const char* kParticipate = "participate";
inline constexpr const char* kTrainRound = "train_round";
inline constexpr const char* kRoundOutcome = "round_outcome";
inline constexpr const char* kPullPartial = "pull_partial";
inline constexpr const char* kValidateRound = "validate_round";
inline constexpr const char* kStatus = "status";
inline constexpr const char* kReduce = "reduce";
inline constexpr const char* kGetTask = "get_task";
inline constexpr const char* kInitSeed = "init_seed";
inline constexpr const char* kStartSession = "start_session";
inline constexpr const char* kResumeSession = "resume_session";
inline constexpr const char* kAbort = "abort";
inline constexpr const char* kFault = "fault";
inline constexpr const char* kShutdown = "shutdown";
}  // namespace ops

// Error codes carried in ERROR frames.
namespace codes {
inline constexpr const char* kBusy = "busy";
inline constexpr const char* kAuth = "auth";
inline constexpr const char* kNoPartial = "no_partial";
inline constexpr const char* kPassive = "passive";
inline constexpr const char* kUnavailable = "network_unavailable";
inline constexpr const char* kExecutor = "executor";
inline constexpr const char* kBadRequest = "bad_request";
inline constexpr const char* kReduceFailed = "reduce_failed";
inline constexpr const char* kNotFound = "not_found";
inline constexpr const char* kInternal = "internal";
}  // namespace codes

wire::Fields control_request(const std::string& op, const std::string& node);

}  // namespace fedtier
