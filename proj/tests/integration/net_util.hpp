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

#include <chrono>
#include <memory>
#include <thread>

#include "fedtier/harness.hpp"

namespace fedtier::testing {

// Second-scale timers so fault scenarios settle quickly.
inline NetworkSpec fast_spec(std::size_t combiners, std::size_t clients) {
  NetworkSpec s;
  s.combiners = combiners;
  s.clients = clients;
  s.combiner.heartbeat_interval_seconds = 0.5;
  s.combiner.heartbeat_timeout_seconds = 2;
  s.combiner.report_interval_seconds = 0.5;
  s.agent.heartbeat_interval_seconds = 0.5;
  s.agent.backoff_base_seconds = 0.2;
  s.agent.backoff_cap_seconds = 1;
  s.controller.discovery.combiner_timeout_seconds = 2;
  s.controller.participation_timeout_seconds = 2;
  s.controller.outcome_slack_seconds = 5;
  s.reducer.lease_ttl_seconds = 2;
  s.reducer.renew_interval_seconds = 0.5;
  s.reducer.pull_backoff_seconds = 0.2;
  return s;
}

inline void use_synthetic_shards(NetworkSpec& s, std::size_t rows, std::uint64_t seed_base = 100) {
  s.client_data = [rows, seed_base](std::size_t i) {
    SyntheticSpec d;
    d.rows = rows;
    d.seed = seed_base + i;
    return std::make_shared<const LocalDataset>(make_synthetic(d));
  };
}

inline TaskSpec sgd_task() {
  TaskSpec t;
  t.executor_name = "sgd_classifier";
  t.hyperparameters.set("learning_rate", 0.01);
  t.hyperparameters.set("batch_size", std::uint64_t{32});
  return t;
}

inline ParameterSet sgd_seed(std::size_t dims = 20, std::size_t classes = 2) {
  return ParameterSet(SgdClassifier::model_size(dims, classes));
}

template <typename Pred>
bool eventually(Pred pred, std::chrono::milliseconds timeout) {
  const auto until = std::chrono::steady_clock::now() + timeout;
  while (!pred()) {
    if (std::chrono::steady_clock::now() >= until) return false;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  return true;
}

}  // namespace fedtier::testing
