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

#include "fedtier/control_server.hpp"

#include <spdlog/spdlog.h>

#include "fedtier/error.hpp"

namespace fedtier {

using wire::MessageType;

ControlServer::ControlServer(std::shared_ptr<Controller> controller, const net::Endpoint& bind_to,
                             std::string advertise_host)
    : controller_(std::move(controller)), advertise_host_(std::move(advertise_host)) {
  server_ = std::make_unique<net::Server>(controller_->config().node, bind_to,
                                          [this](net::ConnectionPtr c) { serve(c); });
}

ControlServer::~ControlServer() { stop(); }

net::Endpoint ControlServer::endpoint() const {
  auto ep = server_->endpoint();
  if (!advertise_host_.empty()) ep.host = advertise_host_;
  return ep;
}

void ControlServer::stop() {
  controller_->abort();
  server_->stop();
  wait_session();
  if (shutdown_.joinable() && shutdown_.get_id() != std::this_thread::get_id()) shutdown_.join();
}

void ControlServer::wait_session() {
  std::thread t;
  {
    std::lock_guard lock(mu_);
    t = std::move(session_);
  }
  if (t.joinable()) t.join();
}

void ControlServer::set_fault_handler(std::function<void(const wire::Fields&)> f) {
  std::lock_guard lock(mu_);
  fault_handler_ = std::move(f);
}

void ControlServer::set_shutdown_handler(std::function<void()> f) {
  std::lock_guard lock(mu_);
  shutdown_handler_ = std::move(f);
}

void ControlServer::serve(const net::ConnectionPtr& conn) {
  for (;;) {
    std::optional<wire::Frame> m;
    try {
      m = conn->read_message();
    } catch (const Error&) {
      return;
    }
    if (!m) continue;
    wire::Frame reply;
    try {
      reply = handle(conn, *m);
    } catch (const RemoteError& e) {
      reply = wire::error_frame(e.code(), e.what());
    } catch (const NotFound& e) {
      reply = wire::error_frame(codes::kNotFound, e.what());
    } catch (const Error& e) {
      reply = wire::error_frame(codes::kBadRequest, e.what());
    }
    try {
      conn->send(reply);
    } catch (const Error&) {
      return;
    }
  }
}

wire::Frame ControlServer::handle(const net::ConnectionPtr& conn, const wire::Frame& m) {
  const auto f = wire::fields_of(m);
  if (f.has("node") && conn->peer().empty()) conn->set_peer(f.get("node"));
  auto& discovery = controller_->discovery();
  switch (m.type) {
    case MessageType::kHello: {
      const auto client_id = f.get("client_id");
      if (conn->peer().empty()) conn->set_peer(client_id);
      const auto avoid = split_list(f.get_or("avoid", ""));
      const auto a = discovery.assign(client_id, WallClock::now(),
                                      std::set<std::string>(avoid.begin(), avoid.end()));
      return wire::make_frame(MessageType::kAssignment, a.to_fields());
    }
    case MessageType::kHeartbeat: {
      CombinerInfo info;
      info.combiner_id = f.get("combiner_id");
      info.client_endpoint = net::Endpoint::parse(f.get("client_endpoint"));
      info.control_endpoint = net::Endpoint::parse(f.get("control_endpoint"));
      info.active_clients = f.get_u64_or("active_clients", 0);
      const auto rec = discovery.report_combiner(info, split_list(f.get_or("clients", "")),
                                                 WallClock::now());
      wire::Fields ack;
      ack.set("assigned_clients", rec.assigned_clients);
      return wire::make_frame(MessageType::kAck, ack);
    }
    case MessageType::kRoundControl:
      return wire::make_frame(MessageType::kAck, handle_control(conn, f));
    default:
      throw ProtocolError(std::string("unexpected ") + wire::to_string(m.type));
  }
}

void ControlServer::start_session_thread(const std::function<void()>& prepare,
                                         std::function<void()> body) {
  std::lock_guard lock(mu_);
  if (session_running_) throw RemoteError(codes::kBusy, "a session is already running");
  if (session_.joinable()) session_.join();
  if (prepare) prepare();
  session_running_ = true;
  session_ = std::thread([this, body = std::move(body)] {
    try {
      body();
    } catch (const std::exception& e) {
      spdlog::error("session failed: {}", e.what());
    }
    session_running_ = false;
  });
}

wire::Fields ControlServer::handle_control(const net::ConnectionPtr& conn, const wire::Fields& f) {
  const auto op = f.get("op");
  wire::Fields ack;
  ack.set("op", op);
  if (op == ops::kGetTask) {
    auto id = f.get_or("task_spec_id", "");
    if (id.empty()) id = controller_->discovery().current_task_id();
    if (id.empty()) throw NotFound("no task staged");
    const auto task_fields = controller_->discovery().get_task(id).to_fields();
    for (const auto& [k, v] : task_fields.entries()) {
      ack.set(k, v);
    }
    ack.set("task_spec_id", id);
  } else if (op == ops::kInitSeed) {
    const auto model = conn->take_stream(wire::stream_id_from_hex(f.get("model")));
    const auto entry = controller_->init_seed(model, TaskSpec::from_fields(f));
    ack.set("model_id", entry.model_id);
    ack.set("task_spec_id", controller_->discovery().current_task_id());
  } else if (op == ops::kStartSession) {
    SessionConfig s;
    s.session_id = f.get("session_id");
    s.rounds = f.get_u64("rounds");
    wire::Fields cfg = f;
    if (!f.has("executor")) {
      const auto id = controller_->discovery().current_task_id();
      if (id.empty()) throw NotFound("no task staged; run seed init first");
      const auto task_fields = controller_->discovery().get_task(id).to_fields();
      for (const auto& [k, v] : task_fields.entries()) {
        cfg.set(k, v);
      }
    }
    s.base = RoundConfig::from_fields(cfg);
    s.check();
    start_session_thread([this, &s] { controller_->open_session(s); },
                         [this, id = s.session_id] { controller_->drive(id); });
    ack.set("session_id", s.session_id);
  } else if (op == ops::kResumeSession) {
    const auto id = f.get("session_id");
    start_session_thread([this, &id] { controller_->status(id); },  // NotFound for unknown ids
                         [this, id] { controller_->resume_session(id); });
    ack.set("session_id", id);
  } else if (op == ops::kAbort) {
    controller_->abort();
  } else if (op == ops::kStatus) {
    const auto status = controller_->status(f.get_or("session_id", ""));
    for (const auto& [k, v] : status.entries()) {
      ack.set(k, v);
    }
    ack.set("session_running", session_running_.load());
  } else if (op == ops::kFault) {
    std::function<void(const wire::Fields&)> handler;
    {
      std::lock_guard lock(mu_);
      handler = fault_handler_;
    }
    if (!handler) throw RemoteError(codes::kBadRequest, "fault injection needs an in-process network");
    handler(f);
  } else if (op == ops::kShutdown) {
    std::function<void()> handler;
    {
      std::lock_guard lock(mu_);
      handler = shutdown_handler_;
    }
    if (!handler) throw RemoteError(codes::kBadRequest, "this endpoint cannot be shut down remotely");
    std::lock_guard lock(mu_);
    if (!shutdown_.joinable()) shutdown_ = std::thread(handler);
  } else {
    throw RemoteError(codes::kBadRequest, "unknown op '" + op + "'");
  }
  return ack;
}

}  // namespace fedtier
