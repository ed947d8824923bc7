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

#include "fedtier/model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "fedtier/bytes.hpp"
#include "fedtier/error.hpp"

namespace fedtier {
namespace {

ParameterSet random_params(std::mt19937_64& rng, std::size_t n,
                           double scale = 10.0) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  ParameterSet p(n);
  for (auto& w : p.weights) w = dist(rng);
  return p;
}

// Direct sum_k n_k w_k / sum_k n_k, independent of the library code path.
std::vector<double> naive_fedavg(const std::vector<WeightedParams>& in) {
  std::vector<double> acc(in.front().params.size(), 0.0);
  double n = 0;
  for (const auto& u : in) {
    n += static_cast<double>(u.examples);
    for (std::size_t i = 0; i < acc.size(); ++i) {
      acc[i] += static_cast<double>(u.examples) * u.params[i];
    }
  }
  for (auto& a : acc) a /= n;
  return acc;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(Serialize, EmptyIsHeaderOnly) {
  const auto bytes = serialize_params(ParameterSet{});
  ASSERT_EQ(bytes.size(), 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FNP1");
  EXPECT_TRUE(deserialize_params(bytes).empty());
}

TEST(Serialize, TenMegabyteModelPayloadSize) {
  const std::size_t n = 2638895;
  EXPECT_EQ(serialized_size(n) - kModelHeaderBytes, 10555580u);
  const auto bytes = serialize_params(ParameterSet(n, 0.25));
  EXPECT_EQ(bytes.size(), 12u + 10555580u);
}

TEST(Serialize, RoundTripMatchesSinglePrecisionCast) {
  std::mt19937_64 rng(7);
  const auto p = random_params(rng, 1000);
  const auto back = deserialize_params(serialize_params(p));
  ASSERT_EQ(back.size(), p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_EQ(back[i], static_cast<double>(static_cast<float>(p[i])));
  }
}

TEST(Serialize, DoubleEncodingIsExact) {
  std::mt19937_64 rng(8);
  const auto p = random_params(rng, 333);
  const auto bytes = serialize_params(p, WeightEncoding::kFloat64);
  EXPECT_EQ(bytes[3], '2');
  EXPECT_EQ(deserialize_params(bytes), p);
}

TEST(Serialize, NonFiniteWeightNamesIndex) {
  ParameterSet p(5, 1.0);
  p[3] = std::numeric_limits<double>::quiet_NaN();
  try {
    serialize_params(p);
    FAIL() << "expected SerializationError";
  } catch (const SerializationError& e) {
    EXPECT_NE(std::string(e.what()).find("index 3"), std::string::npos);
  }
  p[3] = 1e300;  // finite double, infinite float
  EXPECT_THROW(serialize_params(p), SerializationError);
}

TEST(Serialize, RejectsMalformedObjects) {
  auto bytes = serialize_params(ParameterSet(4, 1.0));
  EXPECT_THROW(deserialize_params(ByteView(bytes).first(11)), SerializationError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_params(bad_magic), SerializationError);
  auto bad_version = bytes;
  bad_version[3] = '9';
  EXPECT_THROW(deserialize_params(bad_version), SerializationError);
  bytes.pop_back();
  EXPECT_THROW(deserialize_params(bytes), SerializationError);
}

// Property: deserialize(serialize(p)) == p for float-representable inputs.
TEST(Serialize, RoundTripPropertyOnRepresentableInputs) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<std::size_t> len(0, 400);
    auto p = random_params(rng, len(rng), 1e6);
    for (auto& w : p.weights) w = static_cast<float>(w);
    EXPECT_EQ(deserialize_params(serialize_params(p)), p);
  }
}

TEST(WeightedMean, SymmetricEqualWeights) {
  std::vector<WeightedParams> in{{ParameterSet({0, 2}), 1},
                                 {ParameterSet({2, 0}), 1}};
  const auto out = weighted_mean(in);
  EXPECT_EQ(out.params, ParameterSet({1, 1}));
  EXPECT_EQ(out.examples, 2u);
}

TEST(WeightedMean, ExampleCountWeighting) {
  std::vector<WeightedParams> in{{ParameterSet({0, 0}), 1},
                                 {ParameterSet({4, 4}), 3}};
  const auto out = weighted_mean(in);
  EXPECT_EQ(out.params, ParameterSet({3, 3}));
  EXPECT_EQ(out.examples, 4u);
}

TEST(WeightedMean, MatchesNaiveSummation) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::uint64_t> count(1, 100);
  std::vector<WeightedParams> in;
  for (int k = 0; k < 7; ++k) in.push_back({random_params(rng, 50), count(rng)});
  const auto out = weighted_mean(in);
  EXPECT_LE(max_abs_diff(out.params.weights, naive_fedavg(in)), 1e-12);
}

TEST(WeightedMean, Errors) {
  EXPECT_THROW(weighted_mean({}), AggregationError);
  std::vector<WeightedParams> mismatch{{ParameterSet(std::size_t{2}), 1}, {ParameterSet(std::size_t{3}), 1}};
  try {
    weighted_mean(mismatch);
    FAIL();
  } catch (const AggregationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find('2'), std::string::npos);
    EXPECT_NE(msg.find('3'), std::string::npos);
  }
  const auto big = std::numeric_limits<std::uint64_t>::max() - 1;
  std::vector<WeightedParams> overflow{{ParameterSet(1), big}, {ParameterSet(1), 5}};
  EXPECT_THROW(weighted_mean(overflow), AggregationError);
}

TEST(WeightedMean, ConvexHullAndConservation) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::uint64_t> count(1, 1000);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<WeightedParams> in;
    std::uint64_t expected_total = 0;
    const int k = 1 + trial % 9;
    for (int i = 0; i < k; ++i) {
      in.push_back({random_params(rng, 16, 1e3), count(rng)});
      expected_total += in.back().examples;
    }
    const auto out = weighted_mean(in);
    EXPECT_EQ(out.examples, expected_total);
    for (std::size_t e = 0; e < 16; ++e) {
      double lo = in[0].params[e], hi = lo;
      for (const auto& u : in) {
        lo = std::min(lo, u.params[e]);
        hi = std::max(hi, u.params[e]);
      }
      EXPECT_GE(out.params[e], lo - 1e-12 * std::max(1.0, std::abs(lo)));
      EXPECT_LE(out.params[e], hi + 1e-12 * std::max(1.0, std::abs(hi)));
    }
  }
}

TEST(ModelUpdate, RejectsZeroExamples) {
  EXPECT_THROW(ModelUpdate("c", 1, ParameterSet(2), 0, 0.0), AggregationError);
  EXPECT_NO_THROW(ModelUpdate("c", 1, ParameterSet(2), 1, 0.0));
}

TEST(Aggregator, SingleAddIsIdentity) {
  IncrementalAggregator agg(2);
  agg.add(ParameterSet({5, 6}), 3);
  const auto out = agg.finalize();
  EXPECT_EQ(out.params, ParameterSet({5, 6}));
  EXPECT_EQ(out.examples, 3u);
}

TEST(Aggregator, ConstantInputIsFixedPoint) {
  IncrementalAggregator agg(2);
  agg.add(ParameterSet({1, 1}), 1);
  agg.add(ParameterSet({1, 1}), 999);
  const auto out = agg.finalize();
  EXPECT_EQ(out.params, ParameterSet({1, 1}));
  EXPECT_EQ(out.examples, 1000u);
}

TEST(Aggregator, OrderInvarianceAgainstWeightedMean) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::uint64_t> count(1, 500);
  std::vector<WeightedParams> in;
  for (int k = 0; k < 10; ++k) in.push_back({random_params(rng, 64), count(rng)});
  const auto oracle = weighted_mean(in);
  for (int perm = 0; perm < 20; ++perm) {
    std::shuffle(in.begin(), in.end(), rng);
    IncrementalAggregator agg(64);
    for (const auto& u : in) agg.add(u.params, u.examples);
    const auto out = agg.finalize();
    EXPECT_LE(max_abs_diff(out.params.weights, oracle.params.weights), 1e-9);
    EXPECT_EQ(out.examples, oracle.examples);
  }
}

TEST(Aggregator, SerializedAddMatchesDecodedAdd) {
  std::mt19937_64 rng(6);
  IncrementalAggregator a(100), b(100);
  for (int k = 0; k < 4; ++k) {
    const auto p = random_params(rng, 100);
    const auto bytes = serialize_params(p);
    a.add_serialized(bytes, k + 1);
    b.add(deserialize_params(bytes), k + 1);
  }
  EXPECT_EQ(a.finalize().params, b.finalize().params);
}

TEST(Aggregator, Errors) {
  IncrementalAggregator agg(3);
  EXPECT_THROW(agg.finalize(), AggregationError);
  EXPECT_THROW(agg.add(ParameterSet(4), 1), AggregationError);
  EXPECT_THROW(agg.add(ParameterSet(3), 0), AggregationError);
  EXPECT_THROW(agg.add_serialized(serialize_params(ParameterSet(2)), 1),
               AggregationError);
  EXPECT_EQ(agg.updates(), 0u);
}

TEST(HierarchicalReduce, SinglePartialIsIdentity) {
  PartialModel p{"A", 3, ParameterSet({1.5, -2}), 7, 2};
  const auto out = hierarchical_reduce(std::vector{p});
  EXPECT_EQ(out.params, p.params);
  EXPECT_EQ(out.examples, 7u);
}

TEST(HierarchicalReduce, TwoCombinersEqualFlatAverage) {
  std::vector<WeightedParams> group_a{{ParameterSet({0, 2}), 1},
                                      {ParameterSet({2, 0}), 1}};
  std::vector<WeightedParams> group_b{{ParameterSet({4, 4}), 2}};
  const auto a = weighted_mean(group_a);
  EXPECT_EQ(a.params, ParameterSet({1, 1}));
  EXPECT_EQ(a.examples, 2u);
  const auto b = weighted_mean(group_b);
  std::vector<PartialModel> partials{{"A", 1, a.params, a.examples, 2},
                                     {"B", 1, b.params, b.examples, 1}};
  const auto global = hierarchical_reduce(partials);
  EXPECT_EQ(global.params, ParameterSet({2.5, 2.5}));
  EXPECT_EQ(global.examples, 4u);

  std::vector<WeightedParams> flat = group_a;
  flat.push_back(group_b[0]);
  EXPECT_EQ(weighted_mean(flat).params, global.params);
}

TEST(HierarchicalReduce, RandomPartitionsMatchFlat) {
  std::mt19937_64 rng(31337);
  std::uniform_int_distribution<std::uint64_t> count(1, 100);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<WeightedParams> clients;
    for (int k = 0; k < 20; ++k) clients.push_back({random_params(rng, 32), count(rng)});
    const int groups = 1 + static_cast<int>(rng() % 5);
    std::vector<std::vector<WeightedParams>> split(groups);
    for (std::size_t k = 0; k < clients.size(); ++k) {
      // First `groups` clients seed each group so none is empty.
      const auto g = k < static_cast<std::size_t>(groups) ? k : rng() % groups;
      split[g].push_back(clients[k]);
    }
    std::vector<PartialModel> partials;
    for (int g = 0; g < groups; ++g) {
      const auto m = weighted_mean(split[g]);
      partials.push_back({"c" + std::to_string(g), 4, m.params, m.examples,
                          split[g].size()});
    }
    const auto global = hierarchical_reduce(partials);
    const auto flat = weighted_mean(clients);
    EXPECT_LE(max_abs_diff(global.params.weights, flat.params.weights), 1e-9);
    EXPECT_EQ(global.examples, flat.examples);
  }
}

TEST(HierarchicalReduce, RejectsMixedRounds) {
  std::vector<PartialModel> partials{{"A", 1, ParameterSet(1), 1, 1},
                                     {"B", 2, ParameterSet(1), 1, 1}};
  EXPECT_THROW(hierarchical_reduce(partials), AggregationError);
  EXPECT_THROW(hierarchical_reduce({}), AggregationError);
}

// Exact oracle for correct float32 rounding of s / n with integer s, n,
// restricted to s >= 2n so every candidate is at least 1.
float oracle_round(__int128 s, std::uint64_t n) {
  const float guess = static_cast<float>(static_cast<long double>(s) / n);
  // g * n - s for a float g >= 1, exactly.
  auto excess = [&](float g) -> __int128 {
    int e = 0;
    const double m = std::frexp(static_cast<double>(g), &e);
    const auto mant = static_cast<__int128>(std::ldexp(m, 24));  // g = mant * 2^(e-24)
    const int shift = e - 24;
    if (shift >= 0) return mant * n * (static_cast<__int128>(1) << shift) - s;
    return mant * n - s * (static_cast<__int128>(1) << -shift);  // scaled by 2^-shift
  };
  float best = guess;
  for (float g : {std::nextafter(guess, 0.0f), guess, std::nextafter(guess, INFINITY)}) {
    // Compare |g*n - s| across candidates on a common scale.
    auto scaled = [&](float x) {
      int e = 0;
      std::frexp(static_cast<double>(x), &e);
      const __int128 v = excess(x);
      const int shift = e - 24;
      // Bring every excess to the scale 2^-23 (the finest candidate scale).
      const int up = shift >= 0 ? 23 : 23 + shift;
      return (v < 0 ? -v : v) * (static_cast<__int128>(1) << up);
    };
    const auto eg = scaled(g), eb = scaled(best);
    if (eg < eb || (eg == eb && (std::bit_cast<std::uint32_t>(g) & 1u) == 0)) best = g;
  }
  return best;
}

TEST(ExactSum, RoundingMatchesIntegerOracle) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20000; ++trial) {
    const std::uint64_t n = 1 + rng() % (1u << 20);
    __int128 s;
    if (trial % 2 == 0) {
      s = 2 * static_cast<__int128>(n) + static_cast<__int128>(rng() >> (rng() % 60)) *
                                         static_cast<__int128>(1 + rng() % (1u << 20));
    } else {
      // An exact midpoint between two floats in [2^24, 2^25): an odd integer.
      const std::uint64_t mid = (std::uint64_t{1} << 24) + 2 * (rng() % (1u << 23)) + 1;
      s = static_cast<__int128>(mid) * n;
    }
    const double hi = static_cast<double>(s);
    const double lo = static_cast<double>(s - static_cast<__int128>(hi));
    ASSERT_EQ(round_quotient_to_float(hi, lo, n), oracle_round(s, n))
        << "trial " << trial << " n " << n;
  }
}

TEST(ExactSum, TiesRoundToEven) {
  // 16777217 = 2^24 + 1 lies midway between 2^24 and 2^24 + 2.
  EXPECT_EQ(round_quotient_to_float(16777217.0 * 3, 0, 3), 16777216.0f);
  EXPECT_EQ(round_quotient_to_float(16777219.0 * 3, 0, 3), 16777220.0f);
  // Just off the midpoint, the low word decides.
  EXPECT_EQ(round_quotient_to_float(16777217.0 * 3, 1e-9, 3), 16777218.0f);
  EXPECT_EQ(round_quotient_to_float(16777217.0 * 3, -1e-9, 3), 16777216.0f);
}

std::vector<std::uint8_t> float_model(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> w(0, 1);
  ParameterSet p(n);
  for (auto& x : p.weights) x = w(rng) * std::ldexp(1.0, static_cast<int>(rng() % 16) - 8);
  return serialize_params(p);
}

TEST(ExactSum, BitsIndependentOfOrderAndGrouping) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t dims = 1 + rng() % 200;
    const std::size_t clients = 2 + rng() % 30;
    std::vector<std::pair<std::vector<std::uint8_t>, std::uint64_t>> updates;
    for (std::size_t k = 0; k < clients; ++k) {
      updates.emplace_back(float_model(rng, dims), 1 + rng() % 100000);
    }
    ExactSumAggregator flat(dims);
    for (const auto& [m, n] : updates) flat.add_model(m, n);
    const auto want = flat.mean_float32();

    std::shuffle(updates.begin(), updates.end(), rng);
    const std::size_t groups = 1 + rng() % std::min<std::size_t>(8, clients);
    std::vector<ExactSumAggregator> parts(groups, ExactSumAggregator(dims));
    for (std::size_t k = 0; k < clients; ++k) {
      parts[k < groups ? k : rng() % groups].add_model(updates[k].first, updates[k].second);
    }
    ExactSumAggregator top(dims);
    for (const auto& g : parts) top.add_sum(g.sum_bytes(), g.total_examples());
    EXPECT_EQ(top.mean_float32(), want) << "trial " << trial;
    EXPECT_EQ(top.total_examples(), flat.total_examples());
    EXPECT_EQ(top.inputs(), groups);
  }
}

TEST(ExactSum, MeanIsWithinHalfUlpOfWeightedMean) {
  std::mt19937_64 rng(8);
  std::vector<WeightedParams> in;
  ExactSumAggregator agg(64);
  for (int k = 0; k < 12; ++k) {
    const auto bytes = float_model(rng, 64);
    const std::uint64_t n = 1 + rng() % 1000;
    agg.add_model(bytes, n);
    in.push_back({deserialize_params(bytes), n});
  }
  const auto oracle = weighted_mean(in);
  const auto out = agg.mean_float32();
  for (std::size_t i = 0; i < 64; ++i) {
    const auto f = static_cast<float>(out[i]);
    EXPECT_EQ(static_cast<double>(f), out[i]);
    const double half_ulp = (std::nextafter(std::abs(f), INFINITY) - std::abs(f)) / 2.0;
    EXPECT_LE(std::abs(out[i] - oracle.params[i]), half_ulp * (1 + 1e-9)) << i;
  }
}

TEST(ExactSum, SumObjectRoundTripsAndErrors) {
  ExactSumAggregator agg(2);
  EXPECT_THROW(agg.sum_bytes(), AggregationError);
  EXPECT_THROW(agg.mean_float32(), AggregationError);
  agg.add_model(serialize_params(ParameterSet{1.5, -2}), 4);
  const auto bytes = agg.sum_bytes();
  EXPECT_EQ(inspect_model(bytes), WeightEncoding::kDoubleDouble);
  EXPECT_EQ(bytes.size(), serialized_size(2, WeightEncoding::kDoubleDouble));
  EXPECT_EQ(deserialize_params(bytes), (ParameterSet{6, -8}));
  EXPECT_EQ(agg.mean_float32(), (ParameterSet{1.5, -2}));

  EXPECT_THROW(agg.add_model(bytes, 1), AggregationError);  // a sum is not a model
  EXPECT_THROW(agg.add_sum(serialize_params(ParameterSet(2)), 1), AggregationError);
  EXPECT_THROW(agg.add_model(serialize_params(ParameterSet(3)), 1), AggregationError);
  EXPECT_THROW(agg.add_model(serialize_params(ParameterSet(2)), 0), AggregationError);
  auto bad = bytes;
  put_le(bad.data() + kModelHeaderBytes + 8, 1e300);  // |lo| > |hi|
  EXPECT_THROW(agg.add_sum(bad, 1), SerializationError);
  IncrementalAggregator inc(2);
  EXPECT_THROW(inc.add_serialized(bytes, 1), AggregationError);
  EXPECT_EQ(agg.inputs(), 1u);
}

}  // namespace
}  // namespace fedtier
