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

#include "fedtier/controller.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdio>
#include <thread>

#include <spdlog/spdlog.h>

#include "fedtier/config.hpp"
#include "fedtier/error.hpp"
#include "fedtier/reducer.hpp"

namespace fedtier {

namespace {

using Clock = std::chrono::steady_clock;
using wire::MessageType;

net::Duration seconds(double s) {
  return std::chrono::duration_cast<net::Duration>(std::chrono::duration<double>(s));
}

double since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

wire::Fields with_prefix(const wire::Fields& f, const std::string& prefix) {
  wire::Fields out;
  for (const auto& [k, v] : f.entries()) out.set(prefix + k, v);
  return out;
}

wire::Fields strip_prefix(const wire::Fields& f, const std::string& prefix) {
  wire::Fields out;
  for (const auto& [k, v] : f.entries()) {
    if (k.rfind(prefix, 0) == 0) out.set(k.substr(prefix.size()), v);
  }
  return out;
}

void merge(wire::Fields& into, const wire::Fields& from) {
  for (const auto& [k, v] : from.entries()) into.set(k, v);
}

std::string session_key(const std::string& id) { return "session/" + id; }

}  // namespace

std::string report_key(const std::string& session_id, std::uint64_t round_id) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%010llu", static_cast<unsigned long long>(round_id));
  return "report/" + (session_id.empty() ? std::string("_") : session_id) + "/" + buf;
}

// ---- config ----------------------------------------------------------------

wire::Fields ControllerConfig::to_fields() const {
  wire::Fields f;
  f.set("node", node);
  f.set("control_bind", control_bind.str());
  if (!advertise_host.empty()) f.set("advertise_host", advertise_host);
  f.set("combiner_timeout_s", discovery.combiner_timeout_seconds);
  f.set("assign_policy", discovery.policy);
  f.set("assign_seed", discovery.policy_seed);
  f.set("token_secret", discovery.token_secret);
  f.set("assignment_grace_s", discovery.assignment_grace_seconds);
  f.set("participation_timeout_s", participation_timeout_seconds);
  f.set("outcome_slack_s", outcome_slack_seconds);
  f.set("reduce_timeout_s", reduce_timeout_seconds);
  f.set("reducer_lease", reducer_lease);
  return f;
}

ControllerConfig ControllerConfig::from_fields(const wire::Fields& f,
                                               const std::vector<std::string>& extra) {
  ConfigReader r(f);
  for (const auto& k : extra) r.str(k, "");
  ControllerConfig c;
  c.node = r.str("node", c.node);
  c.control_bind = r.endpoint("control_bind", c.control_bind);
  c.advertise_host = r.str("advertise_host", "");
  c.discovery.combiner_timeout_seconds =
      r.positive("combiner_timeout_s", c.discovery.combiner_timeout_seconds);
  c.discovery.policy = r.choice("assign_policy", c.discovery.policy, {"least_loaded", "random"});
  c.discovery.policy_seed = r.u64("assign_seed", c.discovery.policy_seed);
  c.discovery.token_secret = r.str("token_secret", c.discovery.token_secret);
  c.discovery.assignment_grace_seconds =
      r.real("assignment_grace_s", c.discovery.assignment_grace_seconds, 0, 3600);
  c.participation_timeout_seconds =
      r.positive("participation_timeout_s", c.participation_timeout_seconds);
  c.outcome_slack_seconds = r.real("outcome_slack_s", c.outcome_slack_seconds, 0, 86400);
  c.reduce_timeout_seconds = r.positive("reduce_timeout_s", c.reduce_timeout_seconds);
  c.reducer_lease = r.str("reducer_lease", c.reducer_lease);
  r.finish("controller");
  return c;
}

const char* to_string(Phase p) {
  switch (p) {
    case Phase::kBeforeDispatch: return "before_dispatch";
    case Phase::kMidCollection: return "mid_collection";
    case Phase::kBeforeReduce: return "before_reduce";
    case Phase::kAfterRound: return "after_round";
  }
  return "?";
}

Phase parse_phase(const std::string& text) {
  for (auto p : {Phase::kBeforeDispatch, Phase::kMidCollection, Phase::kBeforeReduce,
                 Phase::kAfterRound}) {
    if (text == to_string(p)) return p;
  }
  throw ConfigError("unknown round phase '" + text + "'");
}

// ---- reports ---------------------------------------------------------------

wire::Fields RoundReport::to_fields() const {
  wire::Fields f;
  f.set("session_id", session_id);
  f.set("round_id", round_id);
  f.set("participating", join(participating));
  f.set("successful", join(successful));
  f.set("valid", valid);
  if (!global_model_id.empty()) f.set("global_model_id", global_model_id);
  f.set("parent_id", parent_id);
  if (!failure.empty()) f.set("failure", failure);
  for (const auto& [id, o] : outcomes) merge(f, with_prefix(o.to_fields(), "outcome." + id + "."));
  f.set("reduced", reduced);
  if (reduced) merge(f, reduce.to_fields("reduce."));
  f.set("total_examples", total_examples);
  f.set("validations", validations);
  f.set("total_round_seconds", total_round_seconds);
  if (recovered) f.set("recovered", true);
  return f;
}

RoundReport RoundReport::from_fields(const wire::Fields& f) {
  RoundReport r;
  r.session_id = f.get_or("session_id", "");
  r.round_id = f.get_u64("round_id");
  r.participating = split_list(f.get_or("participating", ""));
  r.successful = split_list(f.get_or("successful", ""));
  r.valid = f.get_bool("valid");
  r.global_model_id = f.get_or("global_model_id", "");
  r.parent_id = f.get_or("parent_id", "");
  r.failure = f.get_or("failure", "");
  for (const auto& id : r.participating) {
    const auto sub = strip_prefix(f, "outcome." + id + ".");
    if (sub.has("round_id")) r.outcomes[id] = PartialRoundOutcome::from_fields(sub);
  }
  r.reduced = f.get_bool_or("reduced", false);
  if (r.reduced) r.reduce = ReduceTimings::from_fields(f, "reduce.");
  r.total_examples = f.get_u64_or("total_examples", 0);
  r.validations = f.get_u64_or("validations", 0);
  r.total_round_seconds = f.get_double_or("total_round_seconds", 0);
  r.recovered = f.get_bool_or("recovered", false);
  return r;
}

void SessionConfig::check() const {
  if (session_id.empty()) throw ConfigError("session_id must not be empty");
  if (session_id.find_first_of("/\n") != std::string::npos) {
    throw ConfigError("session_id must not contain '/' or newlines");
  }
  if (rounds == 0) throw ConfigError("a session needs at least one round");
  base.check();
}

// ---- controller ------------------------------------------------------------

Controller::Controller(ControllerConfig cfg, StorePtr store, std::shared_ptr<Discovery> discovery)
    : cfg_(std::move(cfg)), store_(std::move(store)), discovery_(std::move(discovery)) {}

void Controller::set_phase_hook(PhaseHook hook) {
  std::lock_guard lock(hook_mu_);
  hook_ = std::move(hook);
}

void Controller::fire(Phase p, const RoundConfig& cfg) {
  PhaseHook hook;
  {
    std::lock_guard lock(hook_mu_);
    hook = hook_;
  }
  if (hook) hook(p, cfg);
}

TrailEntry Controller::init_seed(ByteView model, const TaskSpec& task) {
  std::uint64_t count = 0;
  if (inspect_model(model, &count) != WeightEncoding::kFloat32) {
    throw SerializationError("seed model must be FNP1");
  }
  if (store_->trail_head()) throw TrailConflict("the network already has a seed model");
  const auto task_id = discovery_->put_task(task);
  auto entry = commit_global_model(model, 0, kNullModelId);
  state_update(*store_, "network/seed", [&](const std::optional<Versioned>&) {
    wire::Fields f;
    f.set("model_id", entry.model_id);
    f.set("task_spec_id", task_id);
    f.set("element_count", count);
    return f;
  });
  spdlog::info("{}: seed {} committed ({} weights, task {})", cfg_.node, entry.model_id, count,
               task_id);
  return entry;
}

TrailEntry Controller::commit_global_model(ByteView model, std::uint64_t round_id,
                                           const std::string& parent_id) {
  TrailEntry e;
  e.model_id = store_->put_model(model);
  e.round_id = round_id;
  e.parent_id = parent_id;
  e.created_at_ms = to_millis(WallClock::now());
  e.byte_size = model.size();
  store_->trail_append(e);
  return e;
}

std::vector<NodeRef> Controller::participation(const RoundConfig& cfg, RoundReport& report) {
  const auto candidates = discovery_->up_combiners(WallClock::now());
  std::vector<int> answers(candidates.size(), 0);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    threads.emplace_back([&, i] {
      const auto& c = candidates[i];
      try {
        const auto timeout = seconds(cfg_.participation_timeout_seconds);
        auto conn = net::Connection::connect(cfg_.node, c.control_endpoint, timeout);
        conn->set_peer(c.combiner_id);
        auto req = control_request(ops::kParticipate, cfg_.node);
        req.set("round_id", cfg.round_id);
        req.set("min_clients_per_combiner", cfg.min_clients_per_combiner);
        conn->send(MessageType::kRoundControl, req);
        const auto ack = wire::fields_of(conn->expect(MessageType::kAck, timeout));
        answers[i] = ack.get_bool_or("participate", false) ? 1 : 0;
      } catch (const Error& e) {
        spdlog::warn("{}: {} did not answer participation: {}", cfg_.node, c.combiner_id,
                     e.what());
      }
    });
  }
  for (auto& t : threads) t.join();
  std::vector<NodeRef> out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (answers[i]) {
      out.push_back({candidates[i].combiner_id, candidates[i].control_endpoint});
      report.participating.push_back(candidates[i].combiner_id);
    }
  }
  return out;
}

void Controller::dispatch(const RoundConfig& cfg, const std::vector<NodeRef>& combiners,
                          const Bytes& seed, RoundReport& report) {
  std::mutex mu;
  std::condition_variable cv;
  std::size_t settled = 0;  // accepted or failed before acceptance
  std::vector<PartialRoundOutcome> outcomes(combiners.size());
  std::vector<std::thread> threads;
  auto fields = cfg.to_fields();
  for (std::size_t i = 0; i < combiners.size(); ++i) {
    threads.emplace_back([&, i] {
      const auto& ref = combiners[i];
      auto& out = outcomes[i];
      out.combiner_id = ref.id;
      out.round_id = cfg.round_id;
      bool signalled = false;
      auto settle = [&] {
        if (signalled) return;
        signalled = true;
        std::lock_guard lock(mu);
        ++settled;
        cv.notify_all();
      };
      try {
        auto conn = net::Connection::connect(cfg_.node, ref.control);
        conn->set_peer(ref.id);
        const auto id = conn->send_object(seed);
        auto req = fields;
        req.set("op", ops::kTrainRound);
        req.set("node", cfg_.node);
        req.set("model", wire::to_hex(id));
        conn->send(MessageType::kRoundControl, req);
        conn->expect(MessageType::kAck, std::chrono::seconds(30));
        settle();
        const auto wait = seconds(cfg.deadline_seconds + cfg_.outcome_slack_seconds);
        out = PartialRoundOutcome::from_fields(
            wire::fields_of(conn->expect(MessageType::kAck, wait)));
        out.combiner_id = ref.id;
      } catch (const Error& e) {
        out.completed = false;
        out.reason = e.what();
        spdlog::warn("{}: round {} on {} failed: {}", cfg_.node, cfg.round_id, ref.id, e.what());
      }
      settle();
    });
  }
  {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return settled == combiners.size(); });
  }
  std::exception_ptr hook_error;
  try {
    fire(Phase::kMidCollection, cfg);
  } catch (...) {
    hook_error = std::current_exception();
  }
  for (auto& t : threads) t.join();
  if (hook_error) std::rethrow_exception(hook_error);
  for (auto& o : outcomes) {
    if (o.completed) report.successful.push_back(o.combiner_id);
    report.outcomes[o.combiner_id] = std::move(o);
  }
}

std::optional<Bytes> Controller::reduce(const RoundConfig& cfg,
                                        const std::vector<NodeRef>& successful,
                                        RoundReport& report) {
  const auto reducer = active_reducer(*store_, cfg_.reducer_lease);
  if (!reducer) {
    report.failure = "no active reducer";
    return std::nullopt;
  }
  try {
    auto conn = net::Connection::connect(cfg_.node, reducer->control);
    conn->set_peer(reducer->id);
    auto req = control_request(ops::kReduce, cfg_.node);
    req.set("round_id", cfg.round_id);
    req.set("combiners", join_refs(successful));
    conn->send(MessageType::kRoundControl, req);
    const auto ack =
        wire::fields_of(conn->expect(MessageType::kAck, seconds(cfg_.reduce_timeout_seconds)));
    auto bytes = conn->take_stream(wire::stream_id_from_hex(ack.get("model")));
    if (inspect_model(bytes) != WeightEncoding::kFloat32) {
      throw SerializationError("reducer returned a non-FNP1 model");
    }
    report.reduced = true;
    report.reduce = ReduceTimings::from_fields(ack);
    report.total_examples = ack.get_u64("total_examples");
    return bytes;
  } catch (const Error& e) {
    report.failure = std::string("reduce failed: ") + e.what();
    spdlog::warn("{}: round {} {}", cfg_.node, cfg.round_id, report.failure);
    return std::nullopt;
  }
}

void Controller::validate(const RoundConfig& cfg, const std::vector<NodeRef>& combiners,
                          const Bytes& model, RoundReport& report) {
  std::mutex mu;
  std::vector<std::thread> threads;
  for (const auto& ref : combiners) {
    threads.emplace_back([&, ref] {
      try {
        auto conn = net::Connection::connect(cfg_.node, ref.control);
        conn->set_peer(ref.id);
        const auto id = conn->send_object(model);
        auto req = cfg.to_fields();
        req.set("op", ops::kValidateRound);
        req.set("node", cfg_.node);
        req.set("model", wire::to_hex(id));
        conn->send(MessageType::kRoundControl, req);
        const auto wait = seconds(cfg.validate_deadline_seconds + cfg_.outcome_slack_seconds);
        for (;;) {
          auto m = conn->read_message(wait);
          if (!m) throw NetworkError("validation timed out");
          wire::throw_if_error(*m);
          if (m->type == MessageType::kAck) break;
          if (m->type != MessageType::kValidationResult) continue;
          const auto rec = ValidationRecord::from_fields(wire::fields_of(*m));
          state_update(*store_,
                       "validation/" + std::to_string(cfg.round_id) + "/" + rec.client_id,
                       [&](const std::optional<Versioned>&) { return rec.to_fields(); });
          std::lock_guard lock(mu);
          ++report.validations;
        }
      } catch (const Error& e) {
        spdlog::warn("{}: validation on {} failed: {}", cfg_.node, ref.id, e.what());
      }
    });
  }
  for (auto& t : threads) t.join();
}

void Controller::persist(const RoundReport& report) {
  const auto fields = report.to_fields();
  state_update(*store_, report_key(report.session_id, report.round_id),
               [&](const std::optional<Versioned>&) { return fields; });
  state_update(*store_, "controller/latest", [&](const std::optional<Versioned>&) {
    wire::Fields f;
    f.set("key", report_key(report.session_id, report.round_id));
    return f;
  });
}

RoundReport Controller::run_round(const RoundConfig& cfg, const std::string& session_id) {
  std::lock_guard one_round(round_mu_);
  cfg.check();
  const auto start = Clock::now();
  RoundReport report;
  report.session_id = session_id;
  report.round_id = cfg.round_id;

  const auto head = store_->trail_head();
  if (!head) throw Error("no seed model committed");
  if (cfg.round_id <= head->round_id) {
    throw ConfigError("round " + std::to_string(cfg.round_id) + " does not advance the trail");
  }
  report.parent_id = head->model_id;
  const auto seed = store_->get_model(head->model_id);

  auto finish = [&](std::string failure) {
    report.failure = std::move(failure);
    report.total_round_seconds = since(start);
    persist(report);
    fire(Phase::kAfterRound, cfg);
    spdlog::info("{}: round {} {} ({:.3f}s){}{}", cfg_.node, cfg.round_id,
                 report.valid ? "valid" : "invalid", report.total_round_seconds,
                 report.failure.empty() ? "" : ": ", report.failure);
    return report;
  };

  // 1. participation
  const auto participants = participation(cfg, report);
  if (participants.empty()) return finish("no participating combiners");

  // 2-3. dispatch, then wait for completion or timeout
  fire(Phase::kBeforeDispatch, cfg);
  dispatch(cfg, participants, seed, report);

  // 4. validity over combiner outcomes
  if (report.successful.size() < cfg.min_successful_combiners) {
    return finish("too few successful combiners (" + std::to_string(report.successful.size()) +
                  " < " + std::to_string(cfg.min_successful_combiners) + ")");
  }
  std::vector<NodeRef> successful;
  for (const auto& p : participants) {
    if (std::find(report.successful.begin(), report.successful.end(), p.id) !=
        report.successful.end()) {
      successful.push_back(p);
    }
  }

  // 5. reduce
  fire(Phase::kBeforeReduce, cfg);
  auto global = reduce(cfg, successful, report);
  if (!global) return finish(report.failure);
  std::uint64_t dims = 0, seed_dims = 0;
  inspect_model(*global, &dims);
  inspect_model(seed, &seed_dims);
  if (dims != seed_dims) return finish("reduced model has the wrong dimension");

  // 6. validation (advisory)
  if (cfg.validate) validate(cfg, successful, *global, report);

  // 7. commit
  try {
    const auto entry = commit_global_model(*global, cfg.round_id, head->model_id);
    report.global_model_id = entry.model_id;
    report.valid = true;
  } catch (const Error& e) {
    return finish(std::string("commit failed: ") + e.what());
  }
  return finish({});
}

std::vector<RoundReport> Controller::run_session(const SessionConfig& s) {
  open_session(s);
  return drive(s.session_id);
}

void Controller::open_session(const SessionConfig& s) {
  s.check();
  if (!store_->trail_head()) throw Error("no seed model committed");
  const auto head = store_->trail_head();
  wire::Fields rec = with_prefix(s.base.to_fields(), "cfg.");
  rec.set("rounds", s.rounds);
  rec.set("completed", std::uint64_t{0});
  rec.set("status", "running");
  rec.set("start_round", head->round_id);
  rec.set("last_round_id", head->round_id);
  if (!store_->state_cas(session_key(s.session_id), 0, rec)) {
    throw ConfigError("session '" + s.session_id + "' already exists; resume it instead");
  }
}

std::vector<RoundReport> Controller::session_reports(const std::string& session_id) {
  std::vector<RoundReport> out;
  for (const auto& key : store_->state_keys("report/" + session_id + "/")) {
    if (auto v = store_->state_get(key)) out.push_back(RoundReport::from_fields(v->value));
  }
  return out;
}

std::vector<RoundReport> Controller::resume_session(const std::string& session_id) {
  auto rec = store_->state_get(session_key(session_id));
  if (!rec) throw NotFound("unknown session '" + session_id + "'");
  if (rec->value.get_or("status", "") == "completed") return {};

  // A round committed to the trail whose report never landed still counts.
  const auto reports = session_reports(session_id);
  std::uint64_t last_reported = rec->value.get_u64("start_round");
  for (const auto& r : reports) last_reported = std::max(last_reported, r.round_id);
  const auto head = store_->trail_head();
  if (head && head->round_id > last_reported) {
    RoundReport r;
    r.session_id = session_id;
    r.round_id = head->round_id;
    r.valid = true;
    r.global_model_id = head->model_id;
    r.parent_id = head->parent_id;
    r.recovered = true;
    persist(r);
    spdlog::info("{}: recovered report for committed round {}", cfg_.node, r.round_id);
  }
  state_update(*store_, session_key(session_id), [&](const std::optional<Versioned>& cur) {
    auto f = cur->value;
    const auto n = session_reports(session_id).size();
    f.set("completed", static_cast<std::uint64_t>(n));
    std::uint64_t last = f.get_u64("last_round_id");
    for (const auto& r : session_reports(session_id)) last = std::max(last, r.round_id);
    f.set("last_round_id", last);
    f.set("status", "running");
    return f;
  });
  return drive(session_id);
}

std::vector<RoundReport> Controller::drive(const std::string& session_id) {
  abort_ = false;
  std::vector<RoundReport> out;
  for (;;) {
    const auto rec = store_->state_get(session_key(session_id));
    if (!rec) throw NotFound("session '" + session_id + "' vanished");
    const auto rounds = rec->value.get_u64("rounds");
    const auto completed = rec->value.get_u64("completed");
    auto set_status = [&](const std::string& status) {
      state_update(*store_, session_key(session_id), [&](const std::optional<Versioned>& cur) {
        auto f = cur->value;
        f.set("status", status);
        return f;
      });
    };
    if (completed >= rounds) {
      set_status("completed");
      break;
    }
    if (abort_) {
      set_status("aborted");
      spdlog::info("{}: session {} aborted after {} rounds", cfg_.node, session_id, completed);
      break;
    }
    auto cfg = RoundConfig::from_fields(strip_prefix(rec->value, "cfg."));
    std::uint64_t next = rec->value.get_u64("last_round_id") + 1;
    if (const auto head = store_->trail_head()) next = std::max(next, head->round_id + 1);
    cfg.round_id = next;
    auto report = run_round(cfg, session_id);
    state_update(*store_, session_key(session_id), [&](const std::optional<Versioned>& cur) {
      auto f = cur->value;
      f.set("completed", f.get_u64("completed") + 1);
      f.set("last_round_id", report.round_id);
      return f;
    });
    out.push_back(std::move(report));
  }
  return out;
}

std::optional<RoundReport> Controller::latest_report() {
  const auto ptr = store_->state_get("controller/latest");
  if (!ptr) return std::nullopt;
  const auto v = store_->state_get(ptr->value.get("key"));
  if (!v) return std::nullopt;
  return RoundReport::from_fields(v->value);
}

wire::Fields Controller::status(const std::string& session_id) {
  wire::Fields f;
  if (const auto head = store_->trail_head()) {
    f.set("trail.head", head->model_id);
    f.set("trail.round_id", head->round_id);
    f.set("trail.length", static_cast<std::uint64_t>(store_->trail().size()));
  }
  if (!session_id.empty()) {
    const auto rec = store_->state_get(session_key(session_id));
    if (!rec) throw NotFound("unknown session '" + session_id + "'");
    for (const auto& k : {"rounds", "completed", "status", "last_round_id"}) {
      if (rec->value.has(k)) f.set(std::string("session.") + k, rec->value.get(k));
    }
  }
  if (const auto r = latest_report()) merge(f, with_prefix(r->to_fields(), "report."));
  std::uint64_t up = 0;
  std::uint64_t live = 0;
  for (const auto& c : discovery_->combiners(WallClock::now())) {
    f.set("combiner." + c.combiner_id, c.up ? "UP" : "DOWN");
    up += c.up;
    if (c.up) live += c.active_clients;
  }
  f.set("combiners_up", up);
  f.set("clients_live", live);
  if (const auto lease = read_lease(*store_, cfg_.reducer_lease)) {
    f.set("reducer.active", lease->expiry > WallClock::now() ? lease->holder_id : "");
  }
  return f;
}

}  // namespace fedtier
