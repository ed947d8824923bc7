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
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fedtier/harness.hpp"

namespace fedtier {

struct BenchOptions {
  std::string label = "bench";
  std::vector<std::uint64_t> payload_sizes{1'000'000};  // bytes, multiples of 4
  std::vector<std::size_t> combiners{1};
  std::vector<std::size_t> clients{8};
  std::size_t rounds = 5;
  std::uint64_t train_sleep_ms = 0;
  double round_deadline_seconds = 600;
  double ready_timeout_seconds = 120;
  NetworkSpec base;  // role templates, link profile and NIC caps
};

// One row per round per point. bytes_moved counts model-stream bytes on the
// combiner-client links (both directions) and the reducer pulls.
struct BenchRow {
  std::string label;
  std::uint64_t round_id = 0;
  std::uint64_t payload_bytes = 0;
  std::size_t combiners = 0;
  std::size_t clients = 0;
  double round_s = 0;
  double combiner_s = 0;  // slowest combiner's partial round
  double reduce_s = 0;
  std::uint64_t bytes_moved = 0;

  // Not part of the CSV.
  bool valid = true;
  ReduceTimings reduce;
};

inline constexpr const char* kBenchCsvHeader =
    "label,round_id,payload_bytes,combiners,clients,round_s,combiner_s,reduce_s,bytes_moved";

std::vector<BenchRow> run_bench(const BenchOptions& opts,
                                const std::function<void(const BenchRow&)>& on_row = {});

void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows, bool header = true);
std::vector<BenchRow> read_bench_csv(std::istream& in);

// Model-stream bytes one round should move. Clients exchange float32 models
// (payload + header each way); combiners hand the reducer double-double
// partial sums, four times the payload.
std::uint64_t expected_bytes_moved(std::uint64_t payload_bytes, std::size_t combiners,
                                   std::size_t clients);

struct LinearFit {
  double slope = 0;
  double intercept = 0;
  double r2 = 0;
  std::size_t points = 0;
};

// Ordinary least squares. R² is 1 when y has no variance and the fit is exact.
LinearFit fit_line(std::span<const double> x, std::span<const double> y);

// Per-point means, a round-time fit against payload size for each (C, M)
// series, client and combiner scaling ratios, and flagged points.
std::string bench_summary(std::span<const BenchRow> rows);

// Mean round time against payload size, one line per (C, M) series.
std::string bench_plot_svg(std::span<const BenchRow> rows);

}  // namespace fedtier
