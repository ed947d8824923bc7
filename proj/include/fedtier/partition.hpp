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
#include <string>
#include <vector>

#include "fedtier/executor.hpp"

namespace fedtier {

enum class PartitionMode { kIid, kLabelSkew };

struct PartitionResult {
  std::vector<LocalDataset> shards;
  // label_skew only: weights[c][k] is the drawn share of class c for shard
  // k. Each shard holds within one row of weights[c][k] * rows_of_class(c).
  std::vector<std::vector<double>> weights;
};

// iid: shuffled equal split, shard sizes differ by at most one row.
// label_skew: per-class Dirichlet(alpha) allocation over the shards.
PartitionResult partition_dataset(const LocalDataset& data, std::size_t shards,
                                  PartitionMode mode, double alpha, std::uint64_t seed);

// Writes shard-<k>.csv for each shard, plus weights.csv (one line per class)
// for label_skew. Returns the shard paths.
std::vector<std::filesystem::path> write_partition(const PartitionResult& p,
                                                   const std::filesystem::path& dir);

PartitionMode parse_partition_mode(const std::string& text);

}  // namespace fedtier
