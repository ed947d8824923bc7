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

#include "fedtier/remote_store.hpp"

namespace fedtier {

using wire::Fields;
using wire::MessageType;

namespace {

Fields list_fields(const std::vector<std::string>& items) {
  Fields f;
  f.set("count", static_cast<std::uint64_t>(items.size()));
  for (std::size_t i = 0; i < items.size(); ++i) f.set("i" + std::to_string(i), items[i]);
  return f;
}

std::vector<std::string> list_of(const Fields& f) {
  std::vector<std::string> out;
  const auto n = f.get_u64("count");
  for (std::uint64_t i = 0; i < n; ++i) out.push_back(f.get("i" + std::to_string(i)));
  return out;
}

}  // namespace

StoreServer::StoreServer(StorePtr backend, const net::Endpoint& bind_to,
                         std::string node)
    : backend_(std::move(backend)), node_(std::move(node)) {
  server_ = std::make_unique<net::Server>(
      node_, bind_to, [this](net::ConnectionPtr c) { serve(c); });
}

StoreServer::~StoreServer() { stop(); }

void StoreServer::stop() { server_->stop(); }

void StoreServer::serve(const net::ConnectionPtr& conn) {
  for (;;) {
    auto frame = conn->read_message();
    if (!frame) continue;
    if (frame->type != MessageType::kRoundControl) {
      conn->send(wire::error_frame("protocol", "expected ROUND_CONTROL"));
      continue;
    }
    const auto req = wire::fields_of(*frame);
    const auto& op = req.get_or("op", "");
    try {
      Fields reply;
      if (op == "store.put_model") {
        const auto bytes = conn->take_stream(wire::stream_id_from_hex(req.get("stream")));
        reply.set("model_id", backend_->put_model(bytes));
      } else if (op == "store.get_model") {
        const auto bytes = backend_->get_model(req.get("model_id"));
        reply.set("stream", wire::to_hex(conn->send_object(bytes)));
      } else if (op == "store.has_model") {
        reply.set("present", backend_->has_model(req.get("model_id")));
      } else if (op == "store.trail_append") {
        backend_->trail_append(TrailEntry::decode(req.get("entry")));
      } else if (op == "store.trail") {
        std::vector<std::string> lines;
        for (const auto& e : backend_->trail()) lines.push_back(e.encode());
        reply = list_fields(lines);
      } else if (op == "store.state_get") {
        if (auto v = backend_->state_get(req.get("key"))) {
          reply.set("found", true);
          reply.set("version", v->version);
          reply.set("value", v->value.encode());
        } else {
          reply.set("found", false);
        }
      } else if (op == "store.state_cas") {
        const auto v = backend_->state_cas(req.get("key"), req.get_u64("expected"),
                                           Fields::decode(req.get("value")));
        reply.set("ok", v.has_value());
        if (v) reply.set("version", *v);
      } else if (op == "store.state_keys") {
        reply = list_fields(backend_->state_keys(req.get("prefix")));
      } else {
        conn->send(wire::error_frame("unknown_op", op));
        continue;
      }
      conn->send(MessageType::kAck, reply);
    } catch (const NotFound& e) {
      conn->send(wire::error_frame("not_found", e.what()));
    } catch (const IntegrityError& e) {
      conn->send(wire::error_frame("integrity", e.what()));
    } catch (const TrailConflict& e) {
      conn->send(wire::error_frame("trail_conflict", e.what()));
    } catch (const NetworkError&) {
      throw;
    } catch (const Error& e) {
      conn->send(wire::error_frame("store", e.what()));
    }
  }
}

RemoteStore::RemoteStore(net::Endpoint endpoint, std::string node)
    : endpoint_(std::move(endpoint)), node_(std::move(node)) {}

net::Connection& RemoteStore::conn() {
  if (!conn_ || conn_->closed()) {
    conn_ = net::Connection::connect(node_, endpoint_);
    conn_->set_peer("store");
  }
  return *conn_;
}

Fields RemoteStore::call(const Fields& request,
                         const std::function<void(net::Connection&)>& before) {
  auto& c = conn();
  try {
    if (before) before(c);
    c.send(MessageType::kRoundControl, request);
    auto reply = c.read_message(std::chrono::seconds(60));
    if (!reply) throw NetworkError("store request timed out");
    if (reply->type == MessageType::kError) {
      const auto f = wire::fields_of(*reply);
      const auto& code = f.get_or("code", "");
      const auto msg = f.get_or("message", "");
      if (code == "not_found") throw NotFound(msg);
      if (code == "integrity") throw IntegrityError(msg);
      if (code == "trail_conflict") throw TrailConflict(msg);
      throw RemoteError(code, msg);
    }
    return wire::fields_of(*reply);
  } catch (const NetworkError&) {
    conn_.reset();
    throw;
  }
}

std::string RemoteStore::put_model(ByteView bytes) {
  std::lock_guard lock(mu_);
  Fields req{{"op", "store.put_model"}};
  return call(req, [&](net::Connection& c) {
           req.set("stream", wire::to_hex(c.send_object(bytes)));
         }).get("model_id");
}

Bytes RemoteStore::get_model(const std::string& model_id) {
  std::lock_guard lock(mu_);
  const auto reply = call({{"op", "store.get_model"}, {"model_id", model_id}});
  return conn_->take_stream(wire::stream_id_from_hex(reply.get("stream")));
}

bool RemoteStore::has_model(const std::string& model_id) {
  std::lock_guard lock(mu_);
  return call({{"op", "store.has_model"}, {"model_id", model_id}}).get_bool("present");
}

void RemoteStore::trail_append(const TrailEntry& entry) {
  std::lock_guard lock(mu_);
  call({{"op", "store.trail_append"}, {"entry", entry.encode()}});
}

std::vector<TrailEntry> RemoteStore::trail() {
  std::lock_guard lock(mu_);
  std::vector<TrailEntry> out;
  for (const auto& line : list_of(call({{"op", "store.trail"}}))) {
    out.push_back(TrailEntry::decode(line));
  }
  return out;
}

std::optional<Versioned> RemoteStore::state_get(const std::string& key) {
  std::lock_guard lock(mu_);
  const auto reply = call({{"op", "store.state_get"}, {"key", key}});
  if (!reply.get_bool("found")) return std::nullopt;
  return Versioned{reply.get_u64("version"), Fields::decode(reply.get("value"))};
}

std::optional<std::uint64_t> RemoteStore::state_cas(const std::string& key,
                                                    std::uint64_t expected_version,
                                                    const Fields& value) {
  std::lock_guard lock(mu_);
  Fields req{{"op", "store.state_cas"}, {"key", key}, {"value", value.encode()}};
  req.set("expected", expected_version);
  const auto reply = call(req);
  if (!reply.get_bool("ok")) return std::nullopt;
  return reply.get_u64("version");
}

std::vector<std::string> RemoteStore::state_keys(const std::string& prefix) {
  std::lock_guard lock(mu_);
  return list_of(call({{"op", "store.state_keys"}, {"prefix", prefix}}));
}

}  // namespace fedtier
