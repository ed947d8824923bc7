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

#include "fedtier/reducer.hpp"

#include <spdlog/spdlog.h>

#include "fedtier/config.hpp"
#include "fedtier/error.hpp"

namespace fedtier {

namespace {

using Clock = std::chrono::steady_clock;
using wire::MessageType;

double since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::chrono::milliseconds millis(double seconds) {
  return std::chrono::milliseconds(static_cast<std::int64_t>(seconds * 1000));
}

}  // namespace

const char* to_string(Role r) { return r == Role::kActive ? "ACTIVE" : "PASSIVE"; }

wire::Fields ReducerConfig::to_fields() const {
  wire::Fields f;
  f.set("id", id);
  f.set("control_bind", control_bind.str());
  if (!advertise_host.empty()) f.set("advertise_host", advertise_host);
  f.set("lease_name", lease_name);
  f.set("lease_ttl_s", lease_ttl_seconds);
  f.set("renew_interval_s", renew_interval_seconds);
  f.set("parallel_pull", parallel_pull);
  f.set("pull_attempts", pull_attempts);
  f.set("pull_backoff_s", pull_backoff_seconds);
  f.set("pull_timeout_s", pull_timeout_seconds);
  return f;
}

ReducerConfig ReducerConfig::from_fields(const wire::Fields& f,
                                         const std::vector<std::string>& extra) {
  ConfigReader r(f);
  for (const auto& k : extra) r.str(k, "");
  ReducerConfig c;
  c.id = r.str("id", c.id);
  c.control_bind = r.endpoint("control_bind", c.control_bind);
  c.advertise_host = r.str("advertise_host", "");
  c.lease_name = r.str("lease_name", c.lease_name);
  c.lease_ttl_seconds = r.positive("lease_ttl_s", c.lease_ttl_seconds);
  c.renew_interval_seconds = r.positive("renew_interval_s", c.renew_interval_seconds);
  if (c.renew_interval_seconds >= c.lease_ttl_seconds) {
    r.problem("renew_interval_s must be shorter than lease_ttl_s");
  }
  c.parallel_pull = r.flag("parallel_pull", false);
  c.pull_attempts = r.u64("pull_attempts", c.pull_attempts, 1);
  c.pull_backoff_seconds = r.real("pull_backoff_s", c.pull_backoff_seconds, 0, 3600);
  c.pull_timeout_seconds = r.positive("pull_timeout_s", c.pull_timeout_seconds);
  r.finish("reducer");
  return c;
}

Reducer::Reducer(ReducerConfig cfg, StorePtr store)
    : cfg_(std::move(cfg)), store_(std::move(store)) {
  server_ = std::make_unique<net::Server>(cfg_.id, cfg_.control_bind,
                                          [this](net::ConnectionPtr c) { serve(c); });
  state_update(*store_, "reducer/" + cfg_.id, [&](const std::optional<Versioned>&) {
    wire::Fields f;
    f.set("control_endpoint", endpoint().str());
    return f;
  });
  acquire_or_renew_lease(WallClock::now());
  loop_ = std::thread([this] { lease_loop(); });
}

Reducer::~Reducer() { stop(); }

net::Endpoint Reducer::endpoint() const {
  auto ep = server_->endpoint();
  if (!cfg_.advertise_host.empty()) ep.host = cfg_.advertise_host;
  return ep;
}

void Reducer::stop() {
  if (stopping_.exchange(true)) return;
  loop_cv_.notify_all();
  if (loop_.joinable()) loop_.join();
  server_->stop();
  role_ = Role::kPassive;
}

ReducerRole Reducer::acquire_or_renew_lease(WallTime now) {
  ReducerRole out;
  out.instance_id = cfg_.id;
  const auto ttl = millis(cfg_.lease_ttl_seconds);
  bool held = false;
  try {
    held = !stopping_ && fedtier::acquire_or_renew_lease(*store_, cfg_.lease_name, cfg_.id,
                                                        now, ttl);
  } catch (const Error& e) {
    spdlog::warn("{}: lease store unreachable: {}", cfg_.id, e.what());
  }
  const auto before = role_.load();
  if (held) {
    lease_expiry_ms_ = to_millis(now + ttl);
    role_ = Role::kActive;
    out.role = Role::kActive;
    out.lease_expiry = now + ttl;
  } else {
    role_ = Role::kPassive;
  }
  if (before != role_.load()) {
    spdlog::info("{}: {} -> {}", cfg_.id, to_string(before), to_string(role_.load()));
  }
  return out;
}

bool Reducer::active(WallTime now) const {
  return role_.load() == Role::kActive && to_millis(now) < lease_expiry_ms_.load();
}

void Reducer::lease_loop() {
  std::unique_lock lock(loop_mu_);
  while (!stopping_) {
    loop_cv_.wait_for(lock, millis(cfg_.renew_interval_seconds),
                      [&] { return stopping_.load(); });
    if (stopping_) break;
    lock.unlock();
    acquire_or_renew_lease(WallClock::now());
    lock.lock();
  }
}

Reducer::Pulled Reducer::pull(std::uint64_t round_id, const NodeRef& ref) {
  std::string last_error;
  for (std::uint64_t attempt = 1; attempt <= cfg_.pull_attempts; ++attempt) {
    if (stopping_) throw ReduceFailed(ref.id, "reducer stopped");
    const auto start = Clock::now();
    try {
      auto conn = net::Connection::connect(cfg_.id, ref.control);
      conn->set_peer(ref.id);
      auto req = control_request(ops::kPullPartial, cfg_.id);
      req.set("round_id", round_id);
      conn->send(MessageType::kRoundControl, req);
      const auto timeout = std::chrono::duration_cast<net::Duration>(
          std::chrono::duration<double>(cfg_.pull_timeout_seconds));
      auto meta = wire::fields_of(conn->expect(MessageType::kPartialMeta, timeout));
      Pulled p;
      p.bytes = conn->take_stream(wire::stream_id_from_hex(meta.get("model")));
      p.meta = std::move(meta);
      p.seconds = since(start);
      return p;
    } catch (const RemoteError& e) {
      // A missing partial will not appear on retry.
      throw ReduceFailed(ref.id, e.what());
    } catch (const Error& e) {
      last_error = e.what();
      spdlog::warn("{}: pull {}/{} from {} failed: {}", cfg_.id, attempt, cfg_.pull_attempts,
                   ref.id, last_error);
    }
    if (attempt < cfg_.pull_attempts) {
      std::this_thread::sleep_for(millis(cfg_.pull_backoff_seconds));
    }
  }
  throw ReduceFailed(ref.id, last_error);
}

ReduceResult Reducer::reduce_round(std::uint64_t round_id,
                                   const std::vector<NodeRef>& combiners) {
  std::lock_guard one_at_a_time(reduce_mu_);
  const auto total_start = Clock::now();
  ReduceResult out;
  auto& t = out.timings;

  auto seg = Clock::now();
  if (!active()) throw RemoteError(codes::kPassive, cfg_.id + " is not the active reducer");
  if (combiners.empty()) throw AggregationError("no combiners to reduce");
  std::unique_ptr<ExactSumAggregator> agg;
  t.other += since(seg);

  auto absorb = [&](Pulled& p, const NodeRef& ref) {
    auto s = Clock::now();
    if (p.meta.get_u64("round_id") != round_id) {
      throw ReduceFailed(ref.id, "partial belongs to another round");
    }
    const auto sum = decode_sum(p.bytes, p.meta.get_u64("total_examples"));
    out.bytes_pulled += p.bytes.size();
    Bytes().swap(p.bytes);
    t.deserialize += since(s);

    s = Clock::now();
    if (!agg) agg = std::make_unique<ExactSumAggregator>(sum.hi.size());
    agg->add_sum(sum);
    t.aggregate += since(s);
  };

  if (cfg_.parallel_pull) {
    std::vector<Pulled> pulled(combiners.size());
    std::vector<std::exception_ptr> errors(combiners.size());
    const auto s = Clock::now();
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < combiners.size(); ++i) {
      threads.emplace_back([&, i] {
        try {
          pulled[i] = pull(round_id, combiners[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& th : threads) th.join();
    t.download += since(s);
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    for (std::size_t i = 0; i < combiners.size(); ++i) absorb(pulled[i], combiners[i]);
  } else {
    for (const auto& ref : combiners) {
      const auto s = Clock::now();
      auto p = pull(round_id, ref);
      t.download += since(s);
      absorb(p, ref);
    }
  }

  seg = Clock::now();
  out.params = agg->mean_float32();
  out.total_examples = agg->total_examples();
  agg.reset();
  t.other += since(seg);
  t.total = since(total_start);

  wire::Fields rec = t.to_fields();
  rec.set("reducer_id", cfg_.id);
  rec.set("combiners", static_cast<std::uint64_t>(combiners.size()));
  rec.set("parallel_pull", cfg_.parallel_pull);
  rec.set("bytes_pulled", out.bytes_pulled);
  try {
    state_update(*store_, "reduce/" + std::to_string(round_id),
                 [&](const std::optional<Versioned>&) { return rec; });
  } catch (const Error& e) {
    spdlog::warn("{}: could not record timings: {}", cfg_.id, e.what());
  }
  spdlog::info("{}: reduced round {} from {} partials in {:.3f}s (download {:.3f}s)", cfg_.id,
               round_id, combiners.size(), t.total, t.download);
  return out;
}

void Reducer::serve(const net::ConnectionPtr& conn) {
  while (!stopping_) {
    std::optional<wire::Frame> m;
    try {
      m = conn->read_message();
    } catch (const Error&) {
      return;
    }
    if (!m) continue;
    try {
      if (m->type != MessageType::kRoundControl) {
        throw ProtocolError(std::string("unexpected ") + wire::to_string(m->type));
      }
      const auto f = wire::fields_of(*m);
      if (f.has("node") && conn->peer().empty()) conn->set_peer(f.get("node"));
      const auto op = f.get("op");
      if (op == ops::kReduce) {
        const auto round_id = f.get_u64("round_id");
        auto result = reduce_round(round_id, split_refs(f.get("combiners")));
        const auto bytes = serialize_params(result.params);
        const auto id = conn->send_object(bytes);
        auto ack = result.timings.to_fields();
        ack.set("round_id", round_id);
        ack.set("total_examples", result.total_examples);
        ack.set("bytes_pulled", result.bytes_pulled);
        ack.set("reducer_id", cfg_.id);
        ack.set("model", wire::to_hex(id));
        conn->send(MessageType::kAck, ack);
      } else if (op == ops::kStatus) {
        wire::Fields ack;
        ack.set("reducer_id", cfg_.id);
        ack.set("role", to_string(active() ? Role::kActive : Role::kPassive));
        conn->send(MessageType::kAck, ack);
      } else {
        throw RemoteError(codes::kBadRequest, "unknown op '" + op + "'");
      }
    } catch (const RemoteError& e) {
      try {
        conn->send(wire::error_frame(e.code(), e.what()));
      } catch (const Error&) {
        return;
      }
    } catch (const ReduceFailed& e) {
      try {
        conn->send(wire::error_frame(codes::kReduceFailed, e.what()));
      } catch (const Error&) {
        return;
      }
    } catch (const NetworkError&) {
      return;
    } catch (const Error& e) {
      try {
        conn->send(wire::error_frame(codes::kBadRequest, e.what()));
      } catch (const Error&) {
        return;
      }
    }
  }
}

std::optional<NodeRef> active_reducer(Store& store, const std::string& lease_name,
                                          WallTime now) {
  const auto lease = read_lease(store, lease_name);
  if (!lease || lease->expiry <= now) return std::nullopt;
  const auto rec = store.state_get("reducer/" + lease->holder_id);
  if (!rec || !rec->value.has("control_endpoint")) return std::nullopt;
  return NodeRef{lease->holder_id, net::Endpoint::parse(rec->value.get("control_endpoint"))};
}

}  // namespace fedtier
