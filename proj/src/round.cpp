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

#include "fedtier/round.hpp"

#include <sstream>

#include "fedtier/error.hpp"

namespace fedtier {

void RoundConfig::check() const {
  if (!(deadline_seconds > 0)) throw ConfigError("deadline_seconds must be > 0");
  if (min_clients_per_combiner == 0) throw ConfigError("min_clients_per_combiner must be >= 1");
  if (min_successful_combiners == 0) throw ConfigError("min_successful_combiners must be >= 1");
  if (!(client_sample_fraction > 0 && client_sample_fraction <= 1)) {
    throw ConfigError("client_sample_fraction must be in (0, 1]");
  }
  if (local_epochs == 0) throw ConfigError("local_epochs must be >= 1");
  if (!(validate_deadline_seconds > 0)) {
    throw ConfigError("validate_deadline_seconds must be > 0");
  }
  if (!ExecutorRegistry::instance().contains(task.executor_name)) {
    throw ConfigError("unknown executor '" + task.executor_name + "'");
  }
}

TaskSpec RoundConfig::effective_task() const {
  TaskSpec t = task;
  t.hyperparameters.set("epochs", local_epochs);
  return t;
}

wire::Fields RoundConfig::to_fields() const {
  wire::Fields f = task.to_fields();
  f.set("round_id", round_id);
  f.set("deadline_seconds", deadline_seconds);
  f.set("min_clients_per_combiner", min_clients_per_combiner);
  f.set("min_successful_combiners", min_successful_combiners);
  f.set("client_sample_fraction", client_sample_fraction);
  f.set("local_epochs", local_epochs);
  f.set("seed", seed);
  f.set("validate", validate);
  f.set("validate_deadline_seconds", validate_deadline_seconds);
  return f;
}

RoundConfig RoundConfig::from_fields(const wire::Fields& f) {
  RoundConfig c;
  c.task = TaskSpec::from_fields(f);
  c.round_id = f.get_u64_or("round_id", 0);
  c.deadline_seconds = f.get_double_or("deadline_seconds", c.deadline_seconds);
  c.min_clients_per_combiner =
      f.get_u64_or("min_clients_per_combiner", c.min_clients_per_combiner);
  c.min_successful_combiners =
      f.get_u64_or("min_successful_combiners", c.min_successful_combiners);
  c.client_sample_fraction = f.get_double_or("client_sample_fraction", 1.0);
  c.local_epochs = f.get_u64_or("local_epochs", 1);
  c.seed = f.get_u64_or("seed", 1);
  c.validate = f.get_bool_or("validate", false);
  c.validate_deadline_seconds =
      f.get_double_or("validate_deadline_seconds", c.validate_deadline_seconds);
  return c;
}

const char* to_string(ClientStatus s) {
  switch (s) {
    case ClientStatus::kReady: return "READY";
    case ClientStatus::kTraining: return "TRAINING";
    case ClientStatus::kValidating: return "VALIDATING";
    case ClientStatus::kStale: return "STALE";
  }
  return "?";
}

wire::Fields PartialRoundOutcome::to_fields() const {
  wire::Fields f;
  f.set("combiner_id", combiner_id);
  f.set("round_id", round_id);
  f.set("result", completed ? "COMPLETED" : "FAILED");
  if (!reason.empty()) f.set("reason", reason);
  f.set("requested_clients", requested_clients);
  f.set("reporting_clients", reporting_clients);
  f.set("total_examples", total_examples);
  f.set("round_seconds", round_seconds);
  return f;
}

PartialRoundOutcome PartialRoundOutcome::from_fields(const wire::Fields& f) {
  PartialRoundOutcome o;
  o.combiner_id = f.get_or("combiner_id", "");
  o.round_id = f.get_u64("round_id");
  o.completed = f.get("result") == "COMPLETED";
  o.reason = f.get_or("reason", "");
  o.requested_clients = f.get_u64_or("requested_clients", 0);
  o.reporting_clients = f.get_u64_or("reporting_clients", 0);
  o.total_examples = f.get_u64_or("total_examples", 0);
  o.round_seconds = f.get_double_or("round_seconds", 0);
  return o;
}

wire::Fields ValidationRecord::to_fields() const {
  wire::Fields f;
  f.set("client_id", client_id);
  f.set("round_id", round_id);
  f.set("accuracy", metrics.accuracy);
  f.set("loss", metrics.loss);
  f.set("rows", metrics.rows);
  return f;
}

ValidationRecord ValidationRecord::from_fields(const wire::Fields& f) {
  ValidationRecord r;
  r.client_id = f.get("client_id");
  r.round_id = f.get_u64("round_id");
  r.metrics.accuracy = f.get_double("accuracy");
  r.metrics.loss = f.get_double("loss");
  r.metrics.rows = f.get_u64("rows");
  return r;
}

NodeRef NodeRef::parse(const std::string& text) {
  const auto at = text.find('@');
  if (at == std::string::npos || at == 0) {
    throw ProtocolError("combiner reference '" + text + "' is not id@host:port");
  }
  return {text.substr(0, at), net::Endpoint::parse(text.substr(at + 1))};
}

std::string join(const std::vector<std::string>& items, char sep) {
  std::string out;
  for (const auto& s : items) {
    if (!out.empty()) out += sep;
    out += s;
  }
  return out;
}

std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur, sep)) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

std::string join_refs(const std::vector<NodeRef>& refs) {
  std::vector<std::string> parts;
  for (const auto& r : refs) parts.push_back(r.str());
  return join(parts);
}

std::vector<NodeRef> split_refs(const std::string& text) {
  std::vector<NodeRef> out;
  for (const auto& s : split_list(text)) out.push_back(NodeRef::parse(s));
  return out;
}

wire::Fields ReduceTimings::to_fields(const std::string& prefix) const {
  wire::Fields f;
  f.set(prefix + "download_s", download);
  f.set(prefix + "deserialize_s", deserialize);
  f.set(prefix + "aggregate_s", aggregate);
  f.set(prefix + "other_s", other);
  f.set(prefix + "total_s", total);
  return f;
}

ReduceTimings ReduceTimings::from_fields(const wire::Fields& f, const std::string& prefix) {
  ReduceTimings t;
  t.download = f.get_double_or(prefix + "download_s", 0);
  t.deserialize = f.get_double_or(prefix + "deserialize_s", 0);
  t.aggregate = f.get_double_or(prefix + "aggregate_s", 0);
  t.other = f.get_double_or(prefix + "other_s", 0);
  t.total = f.get_double_or(prefix + "total_s", 0);
  return t;
}

wire::Fields control_request(const std::string& op, const std::string& node) {
  wire::Fields f;
  f.set("op", op);
  f.set("node", node);
  return f;
}

}  // namespace fedtier
