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


#include "fedtier/partition.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "fedtier/error.hpp"

namespace fedtier {

namespace {

// Largest-remainder rounding: counts sum to `total` and each lies within one
// of its exact share.
std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights) {
  std::vector<std::size_t> counts(weights.size());
  std::vector<std::pair<double, std::size_t>> rest;
  std::size_t used = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const double exact = weights[k] * static_cast<double>(total);
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    used += counts[k];
    rest.emplace_back(exact - std::floor(exact), k);
  }
  std::stable_sort(rest.begin(), rest.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; used < total; ++i, ++used) ++counts[rest[i % rest.size()].second];
  return counts;
}

}  // namespace

PartitionMode parse_partition_mode(const std::string& text) {
  if (text == "iid") return PartitionMode::kIid;
  if (text == "label_skew") return PartitionMode::kLabelSkew;
  throw ConfigError("unknown partition mode '" + text + "' (iid or label_skew)");
}

PartitionResult partition_dataset(const LocalDataset& data, std::size_t shards,
                                  PartitionMode mode, double alpha, std::uint64_t seed) {
  data.validate();
  if (shards < 1) throw ConfigError("shard count must be at least 1");
  if (data.rows() < shards) {
    throw ConfigError("cannot split " + std::to_string(data.rows()) + " rows into " +
                      std::to_string(shards) + " shards");
  }
  if (mode == PartitionMode::kLabelSkew && !(alpha > 0)) {
    throw ConfigError("label_skew needs alpha > 0");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.rows());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  PartitionResult out;
  out.shards.resize(shards);
  for (auto& s : out.shards) s.dims = data.dims;

  if (mode == PartitionMode::kIid) {
    const std::size_t base = data.rows() / shards;
    const std::size_t extra = data.rows() % shards;
    std::size_t pos = 0;
    for (std::size_t k = 0; k < shards; ++k) {
      const std::size_t n = base + (k < extra ? 1 : 0);
      for (std::size_t i = 0; i < n; ++i, ++pos) {
        out.shards[k].append_row(data.row(order[pos]), data.labels[order[pos]]);
      }
    }
    return out;
  }

  const std::uint32_t classes = *std::max_element(data.labels.begin(), data.labels.end()) + 1;
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (auto r : order) by_class[data.labels[r]].push_back(r);

  std::gamma_distribution<double> gamma(alpha, 1.0);
  out.weights.resize(classes);
  for (std::uint32_t c = 0; c < classes; ++c) {
    auto& w = out.weights[c];
    w.resize(shards);
    double sum = 0;
    // A draw can underflow to zero for tiny alpha; redraw the whole vector.
    while (!(sum > 0)) {
      sum = 0;
      for (auto& x : w) sum += (x = gamma(rng));
    }
    for (auto& x : w) x /= sum;
    const auto counts = apportion(by_class[c].size(), w);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < shards; ++k) {
      for (std::size_t i = 0; i < counts[k]; ++i, ++pos) {
        const auto r = by_class[c][pos];
        out.shards[k].append_row(data.row(r), data.labels[r]);
      }
    }
  }
  return out;
}

std::vector<std::filesystem::path> write_partition(const PartitionResult& p,
                                                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (std::size_t k = 0; k < p.shards.size(); ++k) {
    paths.push_back(dir / ("shard-" + std::to_string(k) + ".csv"));
    write_csv(paths.back(), p.shards[k]);
  }
  if (!p.weights.empty()) {
    std::ofstream out(dir / "weights.csv");
    out.precision(17);
    for (const auto& row : p.weights) {
      for (std::size_t k = 0; k < row.size(); ++k) out << (k ? "," : "") << row[k];
      out << '\n';
    }
    if (!out) throw Error("cannot write " + (dir / "weights.csv").string());
  }
  return paths;
}

}  // namespace fedtier
