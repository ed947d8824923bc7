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
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "fedtier/controller.hpp"
#include "fedtier/discovery.hpp"
#include "fedtier/net.hpp"

namespace fedtier {

// The network's control endpoint: discovery (client HELLO, combiner
// HEARTBEAT) and operator commands for the controller share one port.
class ControlServer {
 public:
  ControlServer(std::shared_ptr<Controller> controller, const net::Endpoint& bind_to,
                std::string advertise_host = {});
  ~ControlServer();

  net::Endpoint endpoint() const;
  void stop();

  // Handles `fault` requests; only in-process networks install one.
  void set_fault_handler(std::function<void(const wire::Fields&)> f);
  // Invoked (from a helper thread) after a `shutdown` request is acknowledged.
  void set_shutdown_handler(std::function<void()> f);
  bool session_running() const { return session_running_.load(); }
  void wait_session();

 private:
  void serve(const net::ConnectionPtr& conn);
  wire::Frame handle(const net::ConnectionPtr& conn, const wire::Frame& m);
  wire::Fields handle_control(const net::ConnectionPtr& conn, const wire::Fields& f);
  // `prepare` runs synchronously under the session lock so its errors reach the caller.
  void start_session_thread(const std::function<void()>& prepare, std::function<void()> body);

  std::shared_ptr<Controller> controller_;
  std::string advertise_host_;
  std::unique_ptr<net::Server> server_;
  std::mutex mu_;
  std::function<void(const wire::Fields&)> fault_handler_;
  std::function<void()> shutdown_handler_;
  std::atomic<bool> session_running_{false};
  std::thread session_;
  std::thread shutdown_;
};

}  // namespace fedtier
