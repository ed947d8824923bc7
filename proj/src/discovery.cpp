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

#include "fedtier/discovery.hpp"

#include <algorithm>
#include <map>

#include "fedtier/digest.hpp"
#include "fedtier/error.hpp"
#include "fedtier/round.hpp"

namespace fedtier {

namespace {

constexpr const char* kAssignmentsKey = "discovery/assignments";
constexpr const char* kCombinerPrefix = "combiner/";
constexpr const char* kTaskPointer = "network/task";

struct Mapping {
  std::string combiner;
  std::int64_t assigned_ms = 0;
};

std::map<std::string, Mapping> read_mappings(const wire::Fields& f) {
  std::map<std::string, Mapping> out;
  for (const auto& [k, v] : f.entries()) {
    if (k.rfind("client.", 0) != 0) continue;
    const auto at = v.rfind('@');
    Mapping m;
    m.combiner = v.substr(0, at);
    if (at != std::string::npos) m.assigned_ms = std::stoll(v.substr(at + 1));
    out[k.substr(7)] = m;
  }
  return out;
}

wire::Fields write_mappings(const std::map<std::string, Mapping>& m) {
  wire::Fields f;
  for (const auto& [client, map] : m) {
    f.set("client." + client, map.combiner + "@" + std::to_string(map.assigned_ms));
  }
  return f;
}

std::map<std::string, std::uint64_t> loads_of(const std::map<std::string, Mapping>& m) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& [client, map] : m) ++out[map.combiner];
  return out;
}

}  // namespace

wire::Fields CombinerInfo::to_fields() const {
  wire::Fields f;
  f.set("client_endpoint", client_endpoint.str());
  f.set("control_endpoint", control_endpoint.str());
  f.set("active_clients", active_clients);
  f.set("last_seen_ms", last_seen_ms);
  return f;
}

CombinerInfo CombinerInfo::from_fields(const std::string& id, const wire::Fields& f) {
  CombinerInfo c;
  c.combiner_id = id;
  c.client_endpoint = net::Endpoint::parse(f.get("client_endpoint"));
  c.control_endpoint = net::Endpoint::parse(f.get("control_endpoint"));
  c.active_clients = f.get_u64_or("active_clients", 0);
  c.last_seen_ms = f.get_i64("last_seen_ms");
  return c;
}

wire::Fields ClientAssignment::to_fields() const {
  wire::Fields f;
  f.set("client_id", client_id);
  f.set("combiner_id", combiner_id);
  f.set("endpoint", endpoint.str());
  f.set("token", token);
  f.set("task_spec_id", task_spec_id);
  return f;
}

ClientAssignment ClientAssignment::from_fields(const wire::Fields& f) {
  ClientAssignment a;
  a.client_id = f.get("client_id");
  a.combiner_id = f.get("combiner_id");
  a.endpoint = net::Endpoint::parse(f.get("endpoint"));
  a.token = f.get("token");
  a.task_spec_id = f.get_or("task_spec_id", "");
  return a;
}

std::string client_token(const std::string& secret, const std::string& client_id) {
  return sha256_hex(as_bytes(secret + "\n" + client_id));
}

Discovery::Discovery(StorePtr store, DiscoveryConfig cfg)
    : store_(std::move(store)), cfg_(std::move(cfg)), rng_(cfg_.policy_seed) {
  if (cfg_.policy != "least_loaded" && cfg_.policy != "random") {
    throw ConfigError("unknown assignment policy '" + cfg_.policy + "'");
  }
}

bool Discovery::is_up(std::int64_t last_seen_ms, WallTime now) const {
  const auto silence_ms = to_millis(now) - last_seen_ms;
  return static_cast<double>(silence_ms) <= cfg_.combiner_timeout_seconds * 1000.0;
}

CombinerInfo Discovery::report_combiner(const CombinerInfo& info,
                                        const std::vector<std::string>& connected,
                                        WallTime now) {
  if (info.combiner_id.empty()) throw ProtocolError("combiner report without id");
  CombinerInfo rec = info;
  rec.last_seen_ms = to_millis(now);
  state_update(*store_, kCombinerPrefix + info.combiner_id,
               [&](const std::optional<Versioned>&) { return rec.to_fields(); });

  const std::set<std::string> here(connected.begin(), connected.end());
  const auto grace_ms = static_cast<std::int64_t>(cfg_.assignment_grace_seconds * 1000);
  std::lock_guard lock(write_mu_);
  const auto mappings = state_update(
      *store_, kAssignmentsKey, [&](const std::optional<Versioned>& cur) {
        auto m = cur ? read_mappings(cur->value) : std::map<std::string, Mapping>{};
        for (auto it = m.begin(); it != m.end();) {
          const bool mine = it->second.combiner == info.combiner_id;
          if (mine && !here.contains(it->first) &&
              rec.last_seen_ms - it->second.assigned_ms > grace_ms) {
            it = m.erase(it);
          } else {
            ++it;
          }
        }
        for (const auto& c : here) {
          auto& slot = m[c];
          if (slot.combiner != info.combiner_id) slot = {info.combiner_id, rec.last_seen_ms};
        }
        return write_mappings(m);
      });
  rec.assigned_clients = loads_of(read_mappings(mappings))[info.combiner_id];
  rec.up = true;
  return rec;
}

std::vector<CombinerInfo> Discovery::combiners(WallTime now) {
  std::map<std::string, std::uint64_t> loads;
  if (auto a = store_->state_get(kAssignmentsKey)) loads = loads_of(read_mappings(a->value));
  std::vector<CombinerInfo> out;
  for (const auto& key : store_->state_keys(kCombinerPrefix)) {
    auto v = store_->state_get(key);
    if (!v) continue;
    auto info = CombinerInfo::from_fields(key.substr(std::string(kCombinerPrefix).size()),
                                          v->value);
    info.assigned_clients = loads[info.combiner_id];
    info.up = is_up(info.last_seen_ms, now);
    out.push_back(std::move(info));
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.combiner_id < b.combiner_id; });
  return out;
}

std::vector<CombinerInfo> Discovery::up_combiners(WallTime now) {
  auto all = combiners(now);
  std::erase_if(all, [](const CombinerInfo& c) { return !c.up; });
  return all;
}

std::optional<CombinerInfo> Discovery::combiner(const std::string& id, WallTime now) {
  for (auto& c : combiners(now)) {
    if (c.combiner_id == id) return c;
  }
  return std::nullopt;
}

ClientAssignment Discovery::assign(const std::string& client_id, WallTime now,
                                   const std::set<std::string>& avoid) {
  if (client_id.empty()) throw ProtocolError("assignment request without client_id");
  auto up = up_combiners(now);
  if (up.empty()) throw RemoteError(codes::kUnavailable, "no combiner is up");
  if (std::any_of(up.begin(), up.end(),
                  [&](const CombinerInfo& c) { return !avoid.contains(c.combiner_id); })) {
    std::erase_if(up, [&](const CombinerInfo& c) { return avoid.contains(c.combiner_id); });
  }

  std::size_t random_pick = 0;
  if (cfg_.policy == "random") {
    std::lock_guard lock(rng_mu_);
    random_pick = std::uniform_int_distribution<std::size_t>(0, up.size() - 1)(rng_);
  }

  const auto now_ms = to_millis(now);
  std::string chosen;
  std::lock_guard lock(write_mu_);
  state_update(*store_, kAssignmentsKey, [&](const std::optional<Versioned>& cur) {
    auto m = cur ? read_mappings(cur->value) : std::map<std::string, Mapping>{};
    m.erase(client_id);
    if (cfg_.policy == "random") {
      chosen = up[random_pick].combiner_id;
    } else {
      auto loads = loads_of(m);
      // `up` is sorted by id, so the first minimum is the lexicographic one.
      const auto best = std::min_element(
          up.begin(), up.end(), [&](const CombinerInfo& a, const CombinerInfo& b) {
            return loads[a.combiner_id] < loads[b.combiner_id];
          });
      chosen = best->combiner_id;
    }
    m[client_id] = {chosen, now_ms};
    return write_mappings(m);
  });

  ClientAssignment a;
  a.client_id = client_id;
  a.combiner_id = chosen;
  for (const auto& c : up) {
    if (c.combiner_id == chosen) a.endpoint = c.client_endpoint;
  }
  a.token = client_token(cfg_.token_secret, client_id);
  a.task_spec_id = current_task_id();
  return a;
}

std::string Discovery::put_task(const TaskSpec& task) {
  if (!ExecutorRegistry::instance().contains(task.executor_name)) {
    throw ConfigError("unknown executor '" + task.executor_name + "'");
  }
  const auto fields = task.to_fields();
  const auto id = sha256_hex(as_bytes(fields.encode())).substr(0, 16);
  state_update(*store_, "task/" + id, [&](const std::optional<Versioned>&) { return fields; });
  state_update(*store_, kTaskPointer, [&](const std::optional<Versioned>&) {
    wire::Fields f;
    f.set("task_spec_id", id);
    return f;
  });
  return id;
}

TaskSpec Discovery::get_task(const std::string& task_spec_id) {
  auto v = store_->state_get("task/" + task_spec_id);
  if (!v) throw NotFound("unknown task spec '" + task_spec_id + "'");
  return TaskSpec::from_fields(v->value);
}

std::string Discovery::current_task_id() {
  auto v = store_->state_get(kTaskPointer);
  return v ? v->value.get_or("task_spec_id", "") : std::string{};
}

}  // namespace fedtier
