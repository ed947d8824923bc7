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

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace fedtier {

// Flat model weights. Held in double precision in memory; the wire format
// decides how many bits survive a round trip.
struct ParameterSet {
  std::vector<double> weights;

  ParameterSet() = default;
  explicit ParameterSet(std::vector<double> w) : weights(std::move(w)) {}
  explicit ParameterSet(std::size_t n, double fill = 0.0) : weights(n, fill) {}
  ParameterSet(std::initializer_list<double> w) : weights(w) {}

  std::size_t size() const { return weights.size(); }
  bool empty() const { return weights.empty(); }
  double operator[](std::size_t i) const { return weights[i]; }
  double& operator[](std::size_t i) { return weights[i]; }

  // Index of the first non-finite weight, or size() if all are finite.
  std::size_t first_non_finite() const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

// Version byte following the "FNP" magic. '1' objects are float32 (the
// client-facing and at-rest model format); '2' objects are float64. '3'
// objects hold each element as a double-double pair (hi, lo) whose sum is the
// value; combiner partials use it to carry exact example-weighted sums.
enum class WeightEncoding : std::uint8_t { kFloat32 = '1', kFloat64 = '2', kDoubleDouble = '3' };

inline constexpr std::size_t kModelHeaderBytes = 12;

std::vector<std::uint8_t> serialize_params(
    const ParameterSet& p, WeightEncoding enc = WeightEncoding::kFloat32);
ParameterSet deserialize_params(std::span<const std::uint8_t> bytes);

// Validates the header and length without decoding weights.
WeightEncoding inspect_model(std::span<const std::uint8_t> bytes,
                             std::uint64_t* element_count = nullptr);

std::size_t serialized_size(std::size_t element_count,
                            WeightEncoding enc = WeightEncoding::kFloat32);

// One client's contribution to a round. Construction rejects zero examples.
class ModelUpdate {
 public:
  ModelUpdate(std::string client_id, std::uint64_t round_id, ParameterSet params,
              std::uint64_t num_examples, double train_seconds);

  const std::string& client_id() const { return client_id_; }
  std::uint64_t round_id() const { return round_id_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }
  std::uint64_t num_examples() const { return num_examples_; }
  double train_seconds() const { return train_seconds_; }

 private:
  std::string client_id_;
  std::uint64_t round_id_;
  ParameterSet params_;
  std::uint64_t num_examples_;
  double train_seconds_;
};

// A combiner's aggregate for one round.
struct PartialModel {
  std::string combiner_id;
  std::uint64_t round_id = 0;
  ParameterSet params;
  std::uint64_t total_examples = 0;
  std::uint64_t contributing_clients = 0;

  void validate() const;
};

struct WeightedParams {
  ParameterSet params;
  std::uint64_t examples = 0;
};

// Example-count weighted average: sum_k (n_k / n) w_k, n = sum_k n_k.
WeightedParams weighted_mean(std::span<const WeightedParams> updates);

// Streaming form of weighted_mean with constant memory. Maintains the running
// mean m <- m + n_k / (N + n_k) * (w_k - m).
class IncrementalAggregator {
 public:
  explicit IncrementalAggregator(std::size_t element_count);

  void add(const ParameterSet& params, std::uint64_t examples);
  // Adds float32/float64 weights straight from a serialized model.
  void add_serialized(std::span<const std::uint8_t> model_bytes,
                      std::uint64_t examples);

  std::size_t element_count() const { return mean_.size(); }
  std::uint64_t total_examples() const { return total_; }
  std::size_t updates() const { return updates_; }

  WeightedParams finalize() const;

 private:
  std::uint64_t checked_total(std::uint64_t examples) const;

  std::vector<double> mean_;
  std::uint64_t total_ = 0;
  std::size_t updates_ = 0;
};

// Reducer-level FedAvg over combiner partials, weighted by their example
// totals. Equals flat FedAvg over all underlying client updates.
WeightedParams hierarchical_reduce(std::span<const PartialModel> partials);

// Decoded FNP3 object: element i is hi[i] + lo[i].
struct WeightedSum {
  std::vector<double> hi;
  std::vector<double> lo;
  std::uint64_t examples = 0;
};

// Validates an FNP3 object covering `examples` and splits it into pairs.
WeightedSum decode_sum(std::span<const std::uint8_t> sum_bytes, std::uint64_t examples);

// Example-weighted sum kept per element as a double-double. Each weight times
// its count is formed exactly, and the sum stays exact while an element's
// running total spans at most about 100 significant bits. Within that bound the
// result is independent of arrival order and of how updates were grouped
// before being summed, so one combiner and many combiners commit the same bits.
class ExactSumAggregator {
 public:
  explicit ExactSumAggregator(std::size_t element_count);

  // FNP1 or FNP2 weights, scaled by `examples`.
  void add_model(std::span<const std::uint8_t> model_bytes, std::uint64_t examples);
  // An FNP3 sum already weighted by the `examples` it covers.
  void add_sum(std::span<const std::uint8_t> sum_bytes, std::uint64_t examples);
  void add_sum(const WeightedSum& sum);

  std::size_t element_count() const { return hi_.size(); }
  std::uint64_t total_examples() const { return total_; }
  std::size_t inputs() const { return inputs_; }

  // FNP3 object holding the weighted sum.
  std::vector<std::uint8_t> sum_bytes() const;
  // The weighted mean, each element the correctly rounded float32 of
  // sum / total_examples (ties to even), widened to double.
  ParameterSet mean_float32() const;

 private:
  void check_input(std::uint64_t elements, std::uint64_t examples) const;
  std::vector<double> hi_;
  std::vector<double> lo_;
  std::uint64_t total_ = 0;
  std::size_t inputs_ = 0;
};

// Correctly rounded float32 of (hi + lo) / n for a normalized double-double.
float round_quotient_to_float(double hi, double lo, std::uint64_t n);

}  // namespace fedtier
