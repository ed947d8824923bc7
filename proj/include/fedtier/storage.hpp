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
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedtier/bytes.hpp"
#include "fedtier/wire.hpp"

namespace fedtier {

using WallClock = std::chrono::system_clock;
using WallTime = WallClock::time_point;

std::int64_t to_millis(WallTime t);
WallTime from_millis(std::int64_t ms);

// Parent id of the seed model.
inline const std::string kNullModelId(64, '0');

struct TrailEntry {
  std::string model_id;
  std::uint64_t round_id = 0;
  std::string parent_id = kNullModelId;
  std::int64_t created_at_ms = 0;
  std::uint64_t byte_size = 0;

  std::string encode() const;
  static TrailEntry decode(std::string_view line);
  friend bool operator==(const TrailEntry&, const TrailEntry&) = default;
};

struct Versioned {
  std::uint64_t version = 0;
  wire::Fields value;
};

class TrailConflict : public Error {
 public:
  using Error::Error;
};

// Model objects, the model trail and the versioned key/value state shared by
// controller, reducers and discovery.
class Store {
 public:
  virtual ~Store() = default;

  virtual std::string put_model(ByteView bytes) = 0;
  virtual Bytes get_model(const std::string& model_id) = 0;
  virtual bool has_model(const std::string& model_id) = 0;

  // Rejects entries whose parent is not the current head (TrailConflict).
  virtual void trail_append(const TrailEntry& entry) = 0;
  virtual std::vector<TrailEntry> trail() = 0;
  virtual std::optional<TrailEntry> trail_head();

  virtual std::optional<Versioned> state_get(const std::string& key) = 0;
  // Writes `value` iff the key's version equals `expected_version` (0 for
  // absent). Returns the new version, or nullopt on conflict.
  virtual std::optional<std::uint64_t> state_cas(const std::string& key,
                                                 std::uint64_t expected_version,
                                                 const wire::Fields& value) = 0;
  virtual std::vector<std::string> state_keys(const std::string& prefix) = 0;
};

using StorePtr = std::shared_ptr<Store>;

// Filesystem layout:
//   models/<sha256 hex>    FNP objects
//   trail.log              one TrailEntry per line, replaced atomically
//   state/<escaped key>    "version=N" line followed by the value fields
class FsStore : public Store {
 public:
  explicit FsStore(std::filesystem::path root);

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

  const std::filesystem::path& root() const { return root_; }

  // Test hook invoked after each durable step of trail_append
  // ("temp_written", "renamed").
  void set_crash_hook(std::function<void(std::string_view)> hook) {
    crash_hook_ = std::move(hook);
  }

 private:
  std::vector<TrailEntry> read_trail() const;
  std::filesystem::path state_path(const std::string& key) const;

  std::filesystem::path root_;
  std::function<void(std::string_view)> crash_hook_;
};

// Read-modify-write loop over state_cas.
wire::Fields state_update(Store& store, const std::string& key,
                          const std::function<wire::Fields(const std::optional<Versioned>&)>& fn);

// Walks the trail checking parent links and re-hashing every stored object.
// Returns one message per violation; empty means intact.
std::vector<std::string> verify_trail(Store& store);

// ---- leases ----------------------------------------------------------------

struct Lease {
  std::string name;
  std::string holder_id;
  WallTime expiry{};
};

std::optional<Lease> read_lease(Store& store, const std::string& name);

// Takes the lease when absent or expired, renews it when `holder` owns it.
// Returns true iff `holder` holds an unexpired lease afterwards.
bool acquire_or_renew_lease(Store& store, const std::string& name,
                            const std::string& holder, WallTime now,
                            std::chrono::milliseconds ttl);

std::string escape_state_key(std::string_view key);
std::string unescape_state_key(std::string_view name);

}  // namespace fedtier
