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

#include "fedtier/executor.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "fedtier/error.hpp"

namespace fedtier {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Fisher-Yates with an explicit draw so the order does not depend on the
// standard library's shuffle.
void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::swap(idx[i - 1], idx[rng() % i]);
  }
}

double elapsed_seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

void LocalDataset::validate() const {
  if (features.size() != rows() * dims) {
    throw ExecutorError("dataset feature count does not match rows x dims");
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (std::isnan(features[i])) {
      throw ExecutorError("NaN feature in row " + std::to_string(i / dims));
    }
  }
}

void LocalDataset::append_row(const double* x, std::uint32_t label) {
  features.insert(features.end(), x, x + dims);
  labels.push_back(label);
}

LocalDataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ExecutorError("cannot open dataset " + path.string());
  LocalDataset data;
  std::string line;
  std::size_t lineno = 0;
  std::vector<double> row;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() < 2) {
      throw ExecutorError(path.string() + ":" + std::to_string(lineno) +
                          ": need at least one feature and a label");
    }
    if (data.rows() == 0) data.dims = cols.size() - 1;
    if (cols.size() - 1 != data.dims) {
      throw ExecutorError(path.string() + ":" + std::to_string(lineno) +
                          ": inconsistent column count");
    }
    row.assign(data.dims, 0.0);
    for (std::size_t j = 0; j < data.dims; ++j) {
      try {
        std::size_t used = 0;
        row[j] = std::stod(cols[j], &used);
      } catch (const std::exception&) {
        throw ExecutorError(path.string() + ":" + std::to_string(lineno) +
                            ": bad feature '" + cols[j] + "'");
      }
    }
    std::uint32_t label = 0;
    const auto& lab = cols.back();
    auto [ptr, ec] = std::from_chars(lab.data(), lab.data() + lab.size(), label);
    if (ec != std::errc() || ptr != lab.data() + lab.size()) {
      throw ExecutorError(path.string() + ":" + std::to_string(lineno) +
                          ": bad label '" + lab + "'");
    }
    data.append_row(row.data(), label);
  }
  data.validate();
  return data;
}

void write_csv(const std::filesystem::path& path, const LocalDataset& data) {
  std::ofstream out(path);
  if (!out) throw ExecutorError("cannot write " + path.string());
  out.precision(17);
  for (std::size_t r = 0; r < data.rows(); ++r) {
    const double* x = data.row(r);
    for (std::size_t j = 0; j < data.dims; ++j) out << x[j] << ',';
    out << data.labels[r] << '\n';
  }
}

wire::Fields SyntheticSpec::to_fields() const {
  wire::Fields f;
  f.set("classes", static_cast<std::uint64_t>(classes));
  f.set("dims", static_cast<std::uint64_t>(dims));
  f.set("rows", static_cast<std::uint64_t>(rows));
  f.set("seed", seed);
  f.set("centre_seed", centre_seed);
  f.set("separation", separation);
  if (!imbalance.empty()) {
    std::string s;
    for (std::size_t i = 0; i < imbalance.size(); ++i) {
      if (i) s += ':';
      char buf[32];
      auto [end, ec] = std::to_chars(buf, buf + sizeof buf, imbalance[i]);
      s.append(buf, end);
    }
    f.set("imbalance", s);
  }
  return f;
}

SyntheticSpec SyntheticSpec::from_fields(const wire::Fields& f) {
  SyntheticSpec s;
  s.classes = f.get_u64_or("classes", s.classes);
  s.dims = f.get_u64_or("dims", s.dims);
  s.rows = f.get_u64_or("rows", s.rows);
  s.seed = f.get_u64_or("seed", s.seed);
  s.centre_seed = f.get_u64_or("centre_seed", s.centre_seed);
  s.separation = f.get_double_or("separation", s.separation);
  if (f.has("imbalance")) {
    for (const auto& part : split(f.get("imbalance"), ':')) {
      s.imbalance.push_back(std::stod(part));
    }
  }
  return s;
}

SyntheticSpec SyntheticSpec::parse(const std::string& text) {
  wire::Fields f;
  for (const auto& kv : split(text, ',')) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("bad synthetic spec item '" + kv + "'");
    f.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  try {
    return from_fields(f);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad synthetic spec: ") + e.what());
  }
}

LocalDataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.dims == 0 || spec.rows == 0) {
    throw ExecutorError("synthetic data needs >= 2 classes, >= 1 dim, >= 1 row");
  }
  if (!spec.imbalance.empty() && spec.imbalance.size() != spec.classes) {
    throw ExecutorError("imbalance vector must have one entry per class");
  }
  std::mt19937_64 centre_rng(spec.centre_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> centres(spec.classes * spec.dims);
  const double radius = spec.separation / std::sqrt(2.0);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    double norm = 0;
    for (std::size_t j = 0; j < spec.dims; ++j) {
      const double v = normal(centre_rng);
      centres[c * spec.dims + j] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < spec.dims; ++j) centres[c * spec.dims + j] *= radius / norm;
  }
  std::vector<double> weights = spec.imbalance;
  if (weights.empty()) weights.assign(spec.classes, 1.0);
  std::discrete_distribution<std::uint32_t> pick(weights.begin(), weights.end());

  std::mt19937_64 rng(spec.seed);
  LocalDataset data;
  data.dims = spec.dims;
  data.features.reserve(spec.rows * spec.dims);
  std::vector<double> x(spec.dims);
  for (std::size_t r = 0; r < spec.rows; ++r) {
    const auto label = pick(rng);
    for (std::size_t j = 0; j < spec.dims; ++j) {
      x[j] = centres[label * spec.dims + j] + normal(rng);
    }
    data.append_row(x.data(), label);
  }
  return data;
}

wire::Fields TaskSpec::to_fields() const {
  wire::Fields f;
  f.set("executor", executor_name);
  if (!data_source.empty()) f.set("data_source", data_source);
  for (const auto& [k, v] : hyperparameters.entries()) f.set("hp." + k, v);
  return f;
}

TaskSpec TaskSpec::from_fields(const wire::Fields& f) {
  TaskSpec t;
  t.executor_name = f.get("executor");
  t.data_source = f.get_or("data_source", "");
  for (const auto& [k, v] : f.entries()) {
    if (k.rfind("hp.", 0) == 0) t.hyperparameters.set(k.substr(3), v);
  }
  return t;
}

ExecutorRegistry::ExecutorRegistry() {
  add("sgd_classifier", [] { return std::make_unique<SgdClassifier>(); });
  add("payload_bench", [] { return std::make_unique<PayloadBench>(); });
}

ExecutorRegistry& ExecutorRegistry::instance() {
  static ExecutorRegistry r;
  return r;
}

void ExecutorRegistry::add(const std::string& name, Factory f) {
  factories_[name] = std::move(f);
}

bool ExecutorRegistry::contains(const std::string& name) const {
  return factories_.contains(name);
}

std::unique_ptr<Executor> ExecutorRegistry::create(const std::string& name) const {
  auto it = factories_.find(name);
  if (it == factories_.end()) throw ExecutorError("unknown executor '" + name + "'");
  return it->second();
}

// ---- sgd_classifier -------------------------------------------------------

void SgdClassifier::check_task(const TaskSpec& spec) const {
  try {
    if (spec.learning_rate() < 0) throw ExecutorError("learning_rate must be >= 0");
    if (spec.batch_size() == 0) throw ExecutorError("batch_size must be >= 1");
    if (spec.epochs() == 0) throw ExecutorError("epochs must be >= 1");
  } catch (const ProtocolError& e) {
    throw ExecutorError(std::string("bad hyperparameter: ") + e.what());
  }
}

std::size_t SgdClassifier::classes_for(const ParameterSet& model, std::size_t dims) {
  const std::size_t stride = dims + 1;
  if (dims == 0 || model.size() % stride != 0 || model.size() / stride < 2) {
    throw ExecutorError("model of " + std::to_string(model.size()) +
                        " weights does not fit " + std::to_string(dims) +
                        " features");
  }
  return model.size() / stride;
}

double SgdClassifier::loss_and_gradient(const ParameterSet& model,
                                        const LocalDataset& data,
                                        std::span<const std::size_t> rows,
                                        std::vector<double>* gradient) {
  const std::size_t d = data.dims;
  const std::size_t c = classes_for(model, d);
  const double* w = model.weights.data();
  std::vector<double> logits(c);
  if (gradient) gradient->assign(model.size(), 0.0);
  double loss = 0;
  const double scale = 1.0 / static_cast<double>(rows.size());
  for (const std::size_t r : rows) {
    const double* x = data.row(r);
    const auto y = data.labels[r];
    if (y >= c) throw ExecutorError("label " + std::to_string(y) + " exceeds class count");
    for (std::size_t k = 0; k < c; ++k) logits[k] = w[d * c + k];
    for (std::size_t j = 0; j < d; ++j) {
      const double xj = x[j];
      const double* wj = w + j * c;
      for (std::size_t k = 0; k < c; ++k) logits[k] += xj * wj[k];
    }
    const double top = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (auto& l : logits) {
      l = std::exp(l - top);
      z += l;
    }
    loss += (std::log(z) + top - (std::log(logits[y]) + top)) * scale;
    if (gradient) {
      double* g = gradient->data();
      for (std::size_t k = 0; k < c; ++k) {
        const double delta = (logits[k] / z - (k == y ? 1.0 : 0.0)) * scale;
        for (std::size_t j = 0; j < d; ++j) g[j * c + k] += x[j] * delta;
        g[d * c + k] += delta;
      }
    }
  }
  return loss;
}

UpdateResult SgdClassifier::update(const ParameterSet& model, const TaskSpec& spec,
                                   const LocalDataset& data, std::uint64_t seed) const {
  const auto start = std::chrono::steady_clock::now();
  check_task(spec);
  if (data.rows() == 0) throw ExecutorError("empty dataset");
  classes_for(model, data.dims);
  const double lr = spec.learning_rate();
  const std::size_t batch = spec.batch_size();
  ParameterSet w = model;
  std::vector<std::size_t> order(data.rows());
  std::vector<double> grad;
  std::mt19937_64 rng(seed);
  for (std::uint64_t epoch = 0; epoch < spec.epochs(); ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_indices(order, rng);
    for (std::size_t off = 0; off < order.size(); off += batch) {
      const auto n = std::min(batch, order.size() - off);
      loss_and_gradient(w, data, std::span(order).subspan(off, n), &grad);
      for (std::size_t i = 0; i < w.size(); ++i) w.weights[i] -= lr * grad[i];
    }
  }
  return {std::move(w), data.rows(), elapsed_seconds(start)};
}

ValidationMetrics SgdClassifier::validate(const ParameterSet& model,
                                          const LocalDataset& data) const {
  if (data.rows() == 0) throw ExecutorError("empty dataset");
  const std::size_t d = data.dims;
  const std::size_t c = classes_for(model, d);
  std::vector<std::size_t> all(data.rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  ValidationMetrics m;
  m.rows = data.rows();
  m.loss = loss_and_gradient(model, data, all, nullptr);
  std::size_t correct = 0;
  std::vector<double> logits(c);
  for (std::size_t r = 0; r < data.rows(); ++r) {
    const double* x = data.row(r);
    for (std::size_t k = 0; k < c; ++k) {
      double s = model[d * c + k];
      for (std::size_t j = 0; j < d; ++j) s += x[j] * model[j * c + k];
      logits[k] = s;
    }
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    correct += static_cast<std::size_t>(best) == data.labels[r];
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(data.rows());
  return m;
}

// ---- payload_bench --------------------------------------------------------

void PayloadBench::check_task(const TaskSpec& spec) const {
  if (spec.payload_bytes() % 4 != 0) {
    throw ExecutorError("payload_bytes must be a multiple of 4");
  }
}

double PayloadBench::perturbation(std::size_t index, std::uint64_t seed) {
  return 1e-3 * static_cast<double>(static_cast<std::int64_t>((index + seed) % 7) - 3);
}

UpdateResult PayloadBench::update(const ParameterSet& model, const TaskSpec& spec,
                                  const LocalDataset& data, std::uint64_t seed) const {
  const auto start = std::chrono::steady_clock::now();
  check_task(spec);
  const auto expected = spec.payload_bytes() / 4;
  if (spec.payload_bytes() != 0 && model.size() != expected) {
    throw ExecutorError("model has " + std::to_string(model.size()) +
                        " weights, payload_bytes implies " + std::to_string(expected));
  }
  if (spec.train_sleep_ms() > 0) {
    std::this_thread::sleep_for(std::chrono::milliseconds(spec.train_sleep_ms()));
  }
  ParameterSet out = model;
  const std::uint64_t salt = seed % 7;
  for (std::size_t i = 0; i < out.size(); ++i) out.weights[i] += perturbation(i, salt);
  const std::uint64_t n = data.rows() > 0
                              ? data.rows()
                              : spec.hyperparameters.get_u64_or("num_examples", 1);
  if (n == 0) throw ExecutorError("empty dataset");
  return {std::move(out), n, elapsed_seconds(start)};
}

ValidationMetrics PayloadBench::validate(const ParameterSet&, const LocalDataset& data) const {
  return {0.0, 0.0, data.rows()};
}

SerializedUpdate execute_update(ByteView model_in, const TaskSpec& spec,
                                const LocalDataset& data, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  auto exec = ExecutorRegistry::instance().create(spec.executor_name);
  const auto model = deserialize_params(model_in);
  auto result = exec->update(model, spec, data, seed);
  if (result.num_examples == 0) throw ExecutorError("executor reported zero examples");
  SerializedUpdate out;
  out.model = serialize_params(result.params);
  out.num_examples = result.num_examples;
  out.train_seconds = elapsed_seconds(start);
  return out;
}

ValidationMetrics execute_validation(ByteView model_in, const TaskSpec& spec,
                                     const LocalDataset& data) {
  auto exec = ExecutorRegistry::instance().create(spec.executor_name);
  return exec->validate(deserialize_params(model_in), data);
}

std::uint64_t update_seed(std::uint64_t task_seed, const std::string& client_id,
                          std::uint64_t round_id) {
  return mix(fnv1a(client_id) ^ mix(task_seed) ^ mix(round_id * 0x100000001b3ull));
}

}  // namespace fedtier
