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
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <utility>

namespace fedtier::net {

struct LinkProfile {
  double delay_ms = 0;           // one-way, charged once per message
  double bandwidth_bytes_per_s = 0;  // 0 = unlimited

  bool active() const { return delay_ms > 0 || bandwidth_bytes_per_s > 0; }
};

// Desk-scale WAN emulation: 40 ms RTT, 50 MB/s per link.
inline constexpr LinkProfile kWanProfile{20.0, 50e6};

// Process-wide emulation of link latency, bandwidth and partitions. Applied
// by connections on the sending side, keyed by node names.
class Shaper {
 public:
  using Clock = std::chrono::steady_clock;

  static Shaper& instance();

  void reset();
  void set_default_link(LinkProfile p);
  void set_link(const std::string& a, const std::string& b, LinkProfile p);
  // Caps the node's NIC in each direction independently.
  void set_node_bandwidth(const std::string& node, double bytes_per_s);
  void partition(const std::string& a, const std::string& b,
                 Clock::duration duration);

  // Blocks the caller for the emulated transfer time of `bytes`.
  void on_send(const std::string& from, const std::string& to,
               std::size_t bytes, bool new_message);

  bool enabled() const;

 private:
  struct Bucket {
    double rate = 0;
    Clock::time_point next_free{};
  };

  Clock::time_point reserve(Bucket& b, std::size_t bytes, Clock::time_point now);
  bool partitioned(const std::string& a, const std::string& b,
                   Clock::time_point now) const;

  mutable std::mutex mu_;
  bool enabled_ = false;
  LinkProfile default_link_;
  std::map<std::pair<std::string, std::string>, LinkProfile> links_;
  std::map<std::pair<std::string, std::string>, Bucket> link_buckets_;
  std::map<std::string, double> node_rates_;
  std::map<std::string, Bucket> egress_;
  std::map<std::string, Bucket> ingress_;
  std::map<std::pair<std::string, std::string>, Clock::time_point> partitions_;
};

}  // namespace fedtier::net
