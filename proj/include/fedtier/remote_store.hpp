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

#include <memory>
#include <mutex>

#include "fedtier/net.hpp"
#include "fedtier/storage.hpp"

namespace fedtier {

// Serves a Store over the wire protocol (`store serve`). Requests are
// ROUND_CONTROL frames whose `op` starts with "store."; model bytes travel
// as chunk streams.
class StoreServer {
 public:
  StoreServer(StorePtr backend, const net::Endpoint& bind_to,
              std::string node = "store");
  ~StoreServer();
  net::Endpoint endpoint() const { return server_->endpoint(); }
  void stop();

 private:
  void serve(const net::ConnectionPtr& conn);

  StorePtr backend_;
  std::string node_;
  std::unique_ptr<net::Server> server_;
};

// Store client for a remote StoreServer.
class RemoteStore : public Store {
 public:
  RemoteStore(net::Endpoint endpoint, std::string node);

  std::string put_model(ByteView bytes) override;
  Bytes get_model(const std::string& model_id) override;
  bool has_model(const std::string& model_id) override;
  void trail_append(const TrailEntry& entry) override;
  std::vector<TrailEntry> trail() override;
  std::optional<Versioned> state_get(const std::string& key) override;
  std::optional<std::uint64_t> state_cas(const std::string& key,
                                         std::uint64_t expected_version,
                                         const wire::Fields& value) override;
  std::vector<std::string> state_keys(const std::string& prefix) override;

 private:
  net::Connection& conn();
  wire::Fields call(const wire::Fields& request,
                    const std::function<void(net::Connection&)>& before = {});

  net::Endpoint endpoint_;
  std::string node_;
  std::mutex mu_;
  net::ConnectionPtr conn_;
};

}  // namespace fedtier
