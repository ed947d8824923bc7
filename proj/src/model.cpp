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

#include <bit>
#include <cmath>
#include <cstring>
#include <string>

#include "fedtier/bytes.hpp"
#include "fedtier/error.hpp"

namespace fedtier {

namespace {

constexpr char kMagic[3] = {'F', 'N', 'P'};

std::size_t width(WeightEncoding enc) {
  switch (enc) {
    case WeightEncoding::kFloat32: return 4;
    case WeightEncoding::kFloat64: return 8;
    case WeightEncoding::kDoubleDouble: return 16;
  }
  return 0;
}

// Error-free transforms: a + b == s + e and a * b == p + e exactly.
inline void two_sum(double a, double b, double& s, double& e) {
  s = a + b;
  const double bb = s - a;
  e = (a - (s - bb)) + (b - bb);
}

inline void two_prod(double a, double b, double& p, double& e) {
  p = a * b;
  e = std::fma(a, b, -p);
}

// (hi, lo) += (bh, bl), renormalized so |lo| <= ulp(hi) / 2.
inline void dd_add(double& hi, double& lo, double bh, double bl) {
  double s, e, t, f;
  two_sum(hi, bh, s, e);
  two_sum(lo, bl, t, f);
  e += t;
  two_sum(s, e, s, e);
  e += f;
  two_sum(s, e, hi, lo);
}

// dd_add(hi, lo, b, 0) with the steps that cannot change the result removed.
inline void dd_add1(double& hi, double& lo, double b) {
  double s, e;
  two_sum(hi, b, s, e);
  e += lo;
  two_sum(s, e, hi, lo);
}

// Exact sign of the sum of `terms` via an error-free expansion.
int exact_sign(std::initializer_list<double> terms) {
  double expansion[8];
  std::size_t len = 0;
  for (double b : terms) {
    double q = b;
    for (std::size_t i = 0; i < len; ++i) {
      double s, e;
      two_sum(q, expansion[i], s, e);
      expansion[i] = e;
      q = s;
    }
    expansion[len++] = q;
  }
  // Nonoverlapping components ascend in magnitude; the last nonzero decides.
  for (std::size_t i = len; i-- > 0;) {
    if (expansion[i] > 0) return 1;
    if (expansion[i] < 0) return -1;
  }
  return 0;
}

std::uint64_t add_examples(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out;
  if (__builtin_add_overflow(a, b, &out)) {
    throw AggregationError("example count overflow");
  }
  return out;
}

void check_dims(std::size_t expected, std::size_t got) {
  if (expected != got) {
    throw AggregationError("dimension mismatch: expected " +
                           std::to_string(expected) + " elements, got " +
                           std::to_string(got));
  }
}

struct WeightedRef {
  const ParameterSet* params;
  std::uint64_t examples;
};

WeightedParams mean_of(std::span<const WeightedRef> updates) {
  if (updates.empty()) throw AggregationError("no updates");
  const std::size_t dim = updates.front().params->size();
  std::uint64_t n = 0;
  for (const auto& u : updates) {
    check_dims(dim, u.params->size());
    if (u.examples == 0) throw AggregationError("update with zero examples");
    n = add_examples(n, u.examples);
  }
  ParameterSet out(dim);
  const double total = static_cast<double>(n);
  for (const auto& u : updates) {
    const double c = static_cast<double>(u.examples) / total;
    const double* w = u.params->weights.data();
    double* acc = out.weights.data();
    for (std::size_t i = 0; i < dim; ++i) acc[i] += c * w[i];
  }
  return {std::move(out), n};
}

}  // namespace

std::size_t ParameterSet::first_non_finite() const {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!std::isfinite(weights[i])) return i;
  }
  return weights.size();
}

std::size_t serialized_size(std::size_t element_count, WeightEncoding enc) {
  return kModelHeaderBytes + element_count * width(enc);
}

std::vector<std::uint8_t> serialize_params(const ParameterSet& p,
                                           WeightEncoding enc) {
  const std::size_t n = p.size();
  std::vector<std::uint8_t> out(serialized_size(n, enc));
  std::memcpy(out.data(), kMagic, 3);
  out[3] = static_cast<std::uint8_t>(enc);
  put_le<std::uint64_t>(out.data() + 4, n);
  std::uint8_t* dst = out.data() + kModelHeaderBytes;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = p.weights[i];
    if (!std::isfinite(w)) {
      throw SerializationError("non-finite weight at index " +
                               std::to_string(i));
    }
    if (enc == WeightEncoding::kFloat32) {
      const auto f = static_cast<float>(w);
      if (!std::isfinite(f)) {
        throw SerializationError("weight at index " + std::to_string(i) +
                                 " overflows single precision");
      }
      put_le(dst + 4 * i, f);
    } else if (enc == WeightEncoding::kFloat64) {
      put_le(dst + 8 * i, w);
    } else {
      put_le(dst + 16 * i, w);
      put_le(dst + 16 * i + 8, 0.0);
    }
  }
  return out;
}

WeightEncoding inspect_model(std::span<const std::uint8_t> bytes,
                             std::uint64_t* element_count) {
  if (bytes.size() < kModelHeaderBytes) {
    throw SerializationError("model object shorter than header");
  }
  if (std::memcmp(bytes.data(), kMagic, 3) != 0) {
    throw SerializationError("bad model magic");
  }
  const auto enc = static_cast<WeightEncoding>(bytes[3]);
  if (enc != WeightEncoding::kFloat32 && enc != WeightEncoding::kFloat64 &&
      enc != WeightEncoding::kDoubleDouble) {
    throw SerializationError("unsupported model format version " +
                             std::to_string(bytes[3]));
  }
  const auto n = get_le<std::uint64_t>(bytes.data() + 4);
  if (n > (bytes.size() - kModelHeaderBytes) / width(enc) ||
      bytes.size() != serialized_size(n, enc)) {
    throw SerializationError("model length does not match element count " +
                             std::to_string(n));
  }
  if (element_count) *element_count = n;
  return enc;
}

ParameterSet deserialize_params(std::span<const std::uint8_t> bytes) {
  std::uint64_t n = 0;
  const auto enc = inspect_model(bytes, &n);
  ParameterSet p(n);
  const std::uint8_t* src = bytes.data() + kModelHeaderBytes;
  for (std::size_t i = 0; i < n; ++i) {
    double w;
    switch (enc) {
      case WeightEncoding::kFloat32: w = get_le<float>(src + 4 * i); break;
      case WeightEncoding::kFloat64: w = get_le<double>(src + 8 * i); break;
      default: w = get_le<double>(src + 16 * i) + get_le<double>(src + 16 * i + 8); break;
    }
    if (!std::isfinite(w)) {
      throw SerializationError("non-finite weight at index " +
                               std::to_string(i));
    }
    p.weights[i] = w;
  }
  return p;
}

ModelUpdate::ModelUpdate(std::string client_id, std::uint64_t round_id,
                         ParameterSet params, std::uint64_t num_examples,
                         double train_seconds)
    : client_id_(std::move(client_id)),
      round_id_(round_id),
      params_(std::move(params)),
      num_examples_(num_examples),
      train_seconds_(train_seconds) {
  if (num_examples_ == 0) {
    throw AggregationError("model update from " + client_id_ +
                           " has zero examples");
  }
  if (train_seconds_ < 0) {
    throw AggregationError("negative train_seconds");
  }
  if (const auto bad = params_.first_non_finite(); bad != params_.size()) {
    throw AggregationError("non-finite weight at index " + std::to_string(bad));
  }
}

void PartialModel::validate() const {
  if (contributing_clients == 0) {
    throw AggregationError("partial model without contributing clients");
  }
  if (total_examples < contributing_clients) {
    throw AggregationError("partial model total_examples below client count");
  }
}

WeightedParams weighted_mean(std::span<const WeightedParams> updates) {
  std::vector<WeightedRef> refs;
  refs.reserve(updates.size());
  for (const auto& u : updates) refs.push_back({&u.params, u.examples});
  return mean_of(refs);
}

IncrementalAggregator::IncrementalAggregator(std::size_t element_count)
    : mean_(element_count, 0.0) {}

std::uint64_t IncrementalAggregator::checked_total(
    std::uint64_t examples) const {
  if (examples == 0) throw AggregationError("update with zero examples");
  return add_examples(total_, examples);
}

void IncrementalAggregator::add(const ParameterSet& params,
                                std::uint64_t examples) {
  check_dims(mean_.size(), params.size());
  const std::uint64_t next = checked_total(examples);
  const double c = static_cast<double>(examples) / static_cast<double>(next);
  const double* w = params.weights.data();
  double* m = mean_.data();
  for (std::size_t i = 0, n = mean_.size(); i < n; ++i) m[i] += c * (w[i] - m[i]);
  total_ = next;
  ++updates_;
}

void IncrementalAggregator::add_serialized(
    std::span<const std::uint8_t> model_bytes, std::uint64_t examples) {
  std::uint64_t n = 0;
  const auto enc = inspect_model(model_bytes, &n);
  if (enc == WeightEncoding::kDoubleDouble) {
    throw AggregationError("FNP3 objects are sums, not weights");
  }
  check_dims(mean_.size(), n);
  const std::uint64_t next = checked_total(examples);
  const double c = static_cast<double>(examples) / static_cast<double>(next);
  const std::uint8_t* src = model_bytes.data() + kModelHeaderBytes;
  // Validate first so a bad object leaves the running mean untouched.
  for (std::size_t i = 0; i < n; ++i) {
    const double w = enc == WeightEncoding::kFloat32
                         ? static_cast<double>(get_le<float>(src + 4 * i))
                         : get_le<double>(src + 8 * i);
    if (!std::isfinite(w)) {
      throw SerializationError("non-finite weight at index " +
                               std::to_string(i));
    }
  }
  double* m = mean_.data();
  if (enc == WeightEncoding::kFloat32) {
    for (std::size_t i = 0; i < n; ++i) {
      m[i] += c * (static_cast<double>(get_le<float>(src + 4 * i)) - m[i]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      m[i] += c * (get_le<double>(src + 8 * i) - m[i]);
    }
  }
  total_ = next;
  ++updates_;
}

WeightedParams IncrementalAggregator::finalize() const {
  if (updates_ == 0) throw AggregationError("empty aggregation");
  return {ParameterSet(mean_), total_};
}

WeightedParams hierarchical_reduce(std::span<const PartialModel> partials) {
  if (partials.empty()) throw AggregationError("no updates");
  const auto round = partials.front().round_id;
  std::vector<WeightedRef> inputs;
  inputs.reserve(partials.size());
  for (const auto& p : partials) {
    if (p.round_id != round) {
      throw AggregationError("partials from mixed rounds " +
                             std::to_string(round) + " and " +
                             std::to_string(p.round_id));
    }
    p.validate();
    inputs.push_back({&p.params, p.total_examples});
  }
  return mean_of(inputs);
}

ExactSumAggregator::ExactSumAggregator(std::size_t element_count)
    : hi_(element_count, 0.0), lo_(element_count, 0.0) {}

void ExactSumAggregator::check_input(std::uint64_t elements, std::uint64_t examples) const {
  check_dims(hi_.size(), elements);
  if (examples == 0) throw AggregationError("update with zero examples");
  // Counts must convert to double exactly.
  if (add_examples(total_, examples) > (std::uint64_t{1} << 53)) {
    throw AggregationError("example count too large");
  }
}

void ExactSumAggregator::add_model(std::span<const std::uint8_t> model_bytes,
                                   std::uint64_t examples) {
  std::uint64_t n = 0;
  const auto enc = inspect_model(model_bytes, &n);
  if (enc == WeightEncoding::kDoubleDouble) {
    throw AggregationError("FNP3 objects are sums; use add_sum");
  }
  check_input(n, examples);
  const std::uint8_t* src = model_bytes.data() + kModelHeaderBytes;
  const bool narrow = enc == WeightEncoding::kFloat32;
  // Validate first so a bad object leaves the sums untouched.
  for (std::size_t i = 0; i < n; ++i) {
    const double w = narrow ? get_le<float>(src + 4 * i) : get_le<double>(src + 8 * i);
    if (!std::isfinite(w)) {
      throw SerializationError("non-finite weight at index " + std::to_string(i));
    }
  }
  const double c = static_cast<double>(examples);
  // A 24-bit significand times an integer below 2^29 fits in 53 bits.
  if (narrow && examples < (std::uint64_t{1} << 29)) {
    for (std::size_t i = 0; i < n; ++i) dd_add1(hi_[i], lo_[i], get_le<float>(src + 4 * i) * c);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const double w = narrow ? get_le<float>(src + 4 * i) : get_le<double>(src + 8 * i);
      double p, e;
      two_prod(w, c, p, e);
      dd_add(hi_[i], lo_[i], p, e);
    }
  }
  total_ += examples;
  ++inputs_;
}

WeightedSum decode_sum(std::span<const std::uint8_t> sum_bytes, std::uint64_t examples) {
  std::uint64_t n = 0;
  if (inspect_model(sum_bytes, &n) != WeightEncoding::kDoubleDouble) {
    throw AggregationError("partial sums must be FNP3 objects");
  }
  if (examples == 0) throw AggregationError("partial sum covers zero examples");
  WeightedSum out;
  out.hi.resize(n);
  out.lo.resize(n);
  out.examples = examples;
  const std::uint8_t* src = sum_bytes.data() + kModelHeaderBytes;
  for (std::size_t i = 0; i < n; ++i) {
    const double h = get_le<double>(src + 16 * i);
    const double l = get_le<double>(src + 16 * i + 8);
    if (!std::isfinite(h) || !std::isfinite(l) || std::abs(l) > std::abs(h)) {
      throw SerializationError("malformed double-double at index " + std::to_string(i));
    }
    out.hi[i] = h;
    out.lo[i] = l;
  }
  return out;
}

void ExactSumAggregator::add_sum(std::span<const std::uint8_t> sum_bytes,
                                 std::uint64_t examples) {
  add_sum(decode_sum(sum_bytes, examples));
}

void ExactSumAggregator::add_sum(const WeightedSum& sum) {
  check_input(sum.hi.size(), sum.examples);
  for (std::size_t i = 0; i < sum.hi.size(); ++i) dd_add(hi_[i], lo_[i], sum.hi[i], sum.lo[i]);
  total_ += sum.examples;
  ++inputs_;
}

std::vector<std::uint8_t> ExactSumAggregator::sum_bytes() const {
  if (inputs_ == 0) throw AggregationError("empty aggregation");
  const std::size_t n = hi_.size();
  std::vector<std::uint8_t> out(serialized_size(n, WeightEncoding::kDoubleDouble));
  std::memcpy(out.data(), kMagic, 3);
  out[3] = static_cast<std::uint8_t>(WeightEncoding::kDoubleDouble);
  put_le<std::uint64_t>(out.data() + 4, n);
  std::uint8_t* dst = out.data() + kModelHeaderBytes;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(hi_[i])) {
      throw AggregationError("weighted sum overflows at index " + std::to_string(i));
    }
    put_le(dst + 16 * i, hi_[i]);
    put_le(dst + 16 * i + 8, lo_[i]);
  }
  return out;
}

ParameterSet ExactSumAggregator::mean_float32() const {
  if (inputs_ == 0) throw AggregationError("empty aggregation");
  ParameterSet out(hi_.size());
  for (std::size_t i = 0; i < hi_.size(); ++i) {
    if (!std::isfinite(hi_[i])) {
      throw AggregationError("weighted sum overflows at index " + std::to_string(i));
    }
    out.weights[i] = round_quotient_to_float(hi_[i], lo_[i], total_);
  }
  return out;
}

float round_quotient_to_float(double hi, double lo, std::uint64_t n) {
  const double d = static_cast<double>(n);
  // q approximates the quotient to about 2^-100 relative.
  double q = hi / d;
  q += (std::fma(-q, d, hi) + lo) / d;
  const float f = static_cast<float>(q);
  // q can only sit on the wrong side of a float32 rounding boundary when it
  // is within its own error of a midpoint; settle those exactly.
  for (const float other : {std::nextafter(f, -INFINITY), std::nextafter(f, INFINITY)}) {
    if (!std::isfinite(other)) continue;
    const double mid = (static_cast<double>(f) + static_cast<double>(other)) / 2;  // exact
    if (std::abs(q - mid) > std::abs(mid) * 0x1p-80) continue;
    double p, e;
    two_prod(mid, d, p, e);
    const int side = exact_sign({lo, hi, -e, -p});  // sign of quotient - mid
    const bool other_is_up = other > f;
    if (side == 0) {
      const bool f_even = (std::bit_cast<std::uint32_t>(f) & 1u) == 0;
      return f_even ? f : other;
    }
    return (side > 0) == other_is_up ? other : f;
  }
  return f;
}

}  // namespace fedtier
