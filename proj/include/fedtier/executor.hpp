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
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedtier/bytes.hpp"
#include "fedtier/model.hpp"
#include "fedtier/wire.hpp"

namespace fedtier {

// Local training rows: row-major features plus integer labels.
struct LocalDataset {
  std::size_t dims = 0;
  std::vector<double> features;
  std::vector<std::uint32_t> labels;

  std::size_t rows() const { return labels.size(); }
  const double* row(std::size_t r) const { return features.data() + r * dims; }
  void validate() const;

  void append_row(const double* x, std::uint32_t label);
};

// CSV: one row per line, feature columns then an integer label, no header.
LocalDataset load_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const LocalDataset& data);

// Gaussian class blobs. Class centres derive from `centre_seed` only, so
// datasets drawn with different `seed`s share one distribution.
struct SyntheticSpec {
  std::size_t classes = 2;
  std::size_t dims = 20;
  std::size_t rows = 1000;
  std::uint64_t seed = 1;
  std::uint64_t centre_seed = 1234;
  double separation = 2.5;        // distance between class centres
  std::vector<double> imbalance;  // class probabilities; empty = uniform

  wire::Fields to_fields() const;
  static SyntheticSpec from_fields(const wire::Fields& f);
  // "classes=2,dims=20,rows=1000,seed=3,imbalance=0.7:0.3"
  static SyntheticSpec parse(const std::string& text);
};

LocalDataset make_synthetic(const SyntheticSpec& spec);

// What a client executes: a registered executor plus its hyperparameters.
struct TaskSpec {
  std::string executor_name = "sgd_classifier";
  wire::Fields hyperparameters;
  std::string data_source;  // optional default data source for agents

  double learning_rate() const { return hyperparameters.get_double_or("learning_rate", 0.01); }
  std::uint64_t batch_size() const { return hyperparameters.get_u64_or("batch_size", 32); }
  std::uint64_t epochs() const { return hyperparameters.get_u64_or("epochs", 1); }
  std::uint64_t payload_bytes() const { return hyperparameters.get_u64_or("payload_bytes", 0); }
  std::uint64_t train_sleep_ms() const { return hyperparameters.get_u64_or("train_sleep_ms", 0); }

  wire::Fields to_fields() const;
  static TaskSpec from_fields(const wire::Fields& f);
};

struct UpdateResult {
  ParameterSet params;
  std::uint64_t num_examples = 0;
  double train_seconds = 0;
};

struct ValidationMetrics {
  double accuracy = 0;
  double loss = 0;
  std::uint64_t rows = 0;
};

// Black-box model update: model in, model out plus metadata.
class Executor {
 public:
  virtual ~Executor() = default;
  virtual std::string name() const = 0;
  virtual void check_task(const TaskSpec& spec) const = 0;
  virtual UpdateResult update(const ParameterSet& model, const TaskSpec& spec,
                              const LocalDataset& data, std::uint64_t seed) const = 0;
  virtual ValidationMetrics validate(const ParameterSet& model,
                                     const LocalDataset& data) const = 0;
};

class ExecutorRegistry {
 public:
  using Factory = std::function<std::unique_ptr<Executor>()>;
  static ExecutorRegistry& instance();
  void add(const std::string& name, Factory f);
  std::unique_ptr<Executor> create(const std::string& name) const;
  bool contains(const std::string& name) const;

 private:
  ExecutorRegistry();
  std::map<std::string, Factory> factories_;
};

// Multinomial logistic regression trained by mini-batch SGD on the
// cross-entropy loss. Weights are a row-major (dims + 1) x classes matrix,
// bias row last.
class SgdClassifier : public Executor {
 public:
  std::string name() const override { return "sgd_classifier"; }
  void check_task(const TaskSpec& spec) const override;
  UpdateResult update(const ParameterSet& model, const TaskSpec& spec,
                      const LocalDataset& data, std::uint64_t seed) const override;
  ValidationMetrics validate(const ParameterSet& model,
                             const LocalDataset& data) const override;

  static std::size_t classes_for(const ParameterSet& model, std::size_t dims);
  static std::size_t model_size(std::size_t dims, std::size_t classes) {
    return (dims + 1) * classes;
  }
  // Mean cross-entropy over `rows` and its gradient (same layout as model).
  static double loss_and_gradient(const ParameterSet& model, const LocalDataset& data,
                                  std::span<const std::size_t> rows,
                                  std::vector<double>* gradient);
};

// Synthetic payload executor for transport benchmarks: sleeps, then returns a
// deterministic perturbation of its input.
class PayloadBench : public Executor {
 public:
  std::string name() const override { return "payload_bench"; }
  void check_task(const TaskSpec& spec) const override;
  UpdateResult update(const ParameterSet& model, const TaskSpec& spec,
                      const LocalDataset& data, std::uint64_t seed) const override;
  ValidationMetrics validate(const ParameterSet& model,
                             const LocalDataset& data) const override;

  static double perturbation(std::size_t index, std::uint64_t seed);
};

struct SerializedUpdate {
  Bytes model;
  std::uint64_t num_examples = 0;
  double train_seconds = 0;
};

// SISO entry points used by the agent: bytes in, bytes out.
SerializedUpdate execute_update(ByteView model_in, const TaskSpec& spec,
                                const LocalDataset& data, std::uint64_t seed);
ValidationMetrics execute_validation(ByteView model_in, const TaskSpec& spec,
                                     const LocalDataset& data);

// Seed for one client's update in one round; independent of topology.
std::uint64_t update_seed(std::uint64_t task_seed, const std::string& client_id,
                          std::uint64_t round_id);

}  // namespace fedtier
