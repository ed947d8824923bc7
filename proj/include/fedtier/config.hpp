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

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "fedtier/net.hpp"
#include "fedtier/storage.hpp"
#include "fedtier/wire.hpp"

namespace fedtier {

// Component configuration files: one `key = value` per line, '#' starts a
// comment line, blank lines ignored, duplicate keys rejected.
wire::Fields load_config(const std::filesystem::path& path);
wire::Fields parse_config(const std::string& text, const std::string& origin = "<config>");
void save_config(const std::filesystem::path& path, const wire::Fields& fields,
                 const std::string& comment = {});

// Typed accessor that records every problem instead of stopping at the
// first, then reports them together from finish(). Keys never read are
// reported as unknown.
class ConfigReader {
 public:
  explicit ConfigReader(const wire::Fields& fields, std::string prefix = {});

  std::string str(const std::string& key, const std::string& fallback);
  std::string required(const std::string& key);
  std::uint64_t u64(const std::string& key, std::uint64_t fallback,
                    std::uint64_t min = 0);
  double real(const std::string& key, double fallback, double min, double max);
  double positive(const std::string& key, double fallback);
  bool flag(const std::string& key, bool fallback);
  net::Endpoint endpoint(const std::string& key, const net::Endpoint& fallback);
  std::string choice(const std::string& key, const std::string& fallback,
                     const std::vector<std::string>& allowed);

  // Marks every key under `prefix` as consumed and returns them unprefixed.
  wire::Fields section(const std::string& prefix);
  void problem(const std::string& message) { problems_.push_back(message); }

  // Throws ConfigError listing every problem, including unknown keys.
  void finish(const std::string& what);

 private:
  const std::string* find(const std::string& key);

  const wire::Fields& fields_;
  std::string prefix_;
  std::set<std::string> used_;
  std::vector<std::string> problems_;
};

// "dir:PATH" (or a bare path) opens an FsStore; "tcp:HOST:PORT" connects to
// a `store serve` instance.
StorePtr open_store(const std::string& spec, const std::string& node);

std::string format_number(double s);

}  // namespace fedtier
