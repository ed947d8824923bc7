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

#include "fedtier/shaper.hpp"

#include <algorithm>
#include <thread>

namespace fedtier::net {

namespace {

std::pair<std::string, std::string> undirected(const std::string& a,
                                               const std::string& b) {
  return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
}

// Idle buckets may bank at most this much credit.
constexpr auto kBurst = std::chrono::milliseconds(5);

}  // namespace

Shaper& Shaper::instance() {
  static Shaper s;
  return s;
}

void Shaper::reset() {
  std::lock_guard lock(mu_);
  enabled_ = false;
  default_link_ = {};
  links_.clear();
  link_buckets_.clear();
  node_rates_.clear();
  egress_.clear();
  ingress_.clear();
  partitions_.clear();
}

bool Shaper::enabled() const {
  std::lock_guard lock(mu_);
  return enabled_;
}

void Shaper::set_default_link(LinkProfile p) {
  std::lock_guard lock(mu_);
  default_link_ = p;
  enabled_ = true;
}

void Shaper::set_link(const std::string& a, const std::string& b, LinkProfile p) {
  std::lock_guard lock(mu_);
  links_[undirected(a, b)] = p;
  enabled_ = true;
}

void Shaper::set_node_bandwidth(const std::string& node, double bytes_per_s) {
  std::lock_guard lock(mu_);
  node_rates_[node] = bytes_per_s;
  enabled_ = true;
}

void Shaper::partition(const std::string& a, const std::string& b,
                       Clock::duration duration) {
  std::lock_guard lock(mu_);
  partitions_[undirected(a, b)] = Clock::now() + duration;
  enabled_ = true;
}

bool Shaper::partitioned(const std::string& a, const std::string& b,
                         Clock::time_point now) const {
  auto it = partitions_.find(undirected(a, b));
  return it != partitions_.end() && now < it->second;
}

Shaper::Clock::time_point Shaper::reserve(Bucket& b, std::size_t bytes,
                                          Clock::time_point now) {
  if (b.rate <= 0) return now;
  if (b.next_free < now - kBurst) b.next_free = now - kBurst;
  const auto cost = std::chrono::duration_cast<Clock::duration>(
      std::chrono::duration<double>(static_cast<double>(bytes) / b.rate));
  b.next_free += cost;
  return b.next_free;
}

void Shaper::on_send(const std::string& from, const std::string& to,
                     std::size_t bytes, bool new_message) {
  Clock::time_point done;
  double delay_ms = 0;
  {
    std::unique_lock lock(mu_);
    if (!enabled_) return;
    for (;;) {
      auto now = Clock::now();
      auto it = partitions_.find(undirected(from, to));
      if (it == partitions_.end() || now >= it->second) break;
      const auto until = it->second;
      lock.unlock();
      std::this_thread::sleep_until(until);
      lock.lock();
    }
    const auto now = Clock::now();
    done = now;
    LinkProfile link = default_link_;
    if (auto it = links_.find(undirected(from, to)); it != links_.end()) {
      link = it->second;
    }
    if (link.bandwidth_bytes_per_s > 0) {
      auto& b = link_buckets_[{from, to}];
      b.rate = link.bandwidth_bytes_per_s;
      done = std::max(done, reserve(b, bytes, now));
    }
    if (auto it = node_rates_.find(from); it != node_rates_.end()) {
      auto& b = egress_[from];
      b.rate = it->second;
      done = std::max(done, reserve(b, bytes, now));
    }
    if (auto it = node_rates_.find(to); it != node_rates_.end()) {
      auto& b = ingress_[to];
      b.rate = it->second;
      done = std::max(done, reserve(b, bytes, now));
    }
    if (new_message) delay_ms = link.delay_ms;
  }
  if (delay_ms > 0) {
    done += std::chrono::duration_cast<Clock::duration>(
        std::chrono::duration<double, std::milli>(delay_ms));
  }
  if (done > Clock::now()) std::this_thread::sleep_until(done);
}

}  // namespace fedtier::net
