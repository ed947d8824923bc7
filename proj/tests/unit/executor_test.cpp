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

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <fstream>
#include <random>

#include "fedtier/error.hpp"
#include "test_util.hpp"

namespace fedtier {
namespace {

LocalDataset tiny(std::size_t dims, std::size_t rows, std::size_t classes, std::uint64_t seed) {
  SyntheticSpec s;
  s.dims = dims;
  s.rows = rows;
  s.classes = classes;
  s.seed = seed;
  return make_synthetic(s);
}

ParameterSet random_model(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  ParameterSet p(n);
  for (auto& w : p.weights) w = u(rng);
  return p;
}

TaskSpec sgd(double lr, std::uint64_t batch, std::uint64_t epochs) {
  TaskSpec t;
  t.hyperparameters.set("learning_rate", lr);
  t.hyperparameters.set("batch_size", batch);
  t.hyperparameters.set("epochs", epochs);
  return t;
}

// Central-difference loss oracle, independent of the analytic gradient.
double numeric_partial(const ParameterSet& m, const LocalDataset& d, std::size_t i) {
  std::vector<std::size_t> all(d.rows());
  std::iota(all.begin(), all.end(), 0);
  const double h = 1e-6;
  ParameterSet plus = m, minus = m;
  plus.weights[i] += h;
  minus.weights[i] -= h;
  return (SgdClassifier::loss_and_gradient(plus, d, all, nullptr) -
          SgdClassifier::loss_and_gradient(minus, d, all, nullptr)) /
         (2 * h);
}

TEST(Executor, TaskDefaults) {
  TaskSpec t;
  EXPECT_EQ(t.epochs(), 1u);
  EXPECT_EQ(t.batch_size(), 32u);
  EXPECT_DOUBLE_EQ(t.learning_rate(), 0.01);
  EXPECT_EQ(t.executor_name, "sgd_classifier");
}

TEST(Executor, TaskSpecRoundTrip) {
  auto t = sgd(0.2, 8, 3);
  t.data_source = "synthetic:rows=10";
  const auto back = TaskSpec::from_fields(wire::Fields::decode(t.to_fields().encode()));
  EXPECT_EQ(back.executor_name, t.executor_name);
  EXPECT_EQ(back.data_source, t.data_source);
  EXPECT_DOUBLE_EQ(back.learning_rate(), 0.2);
  EXPECT_EQ(back.batch_size(), 8u);
  EXPECT_EQ(back.epochs(), 3u);
}

TEST(Executor, SingleStepMatchesFiniteDifference) {
  const auto data = tiny(4, 1, 3, 11);
  const auto model = random_model(SgdClassifier::model_size(4, 3), 5);
  const double lr = 0.1;
  SgdClassifier exec;
  const auto out = exec.update(model, sgd(lr, 1, 1), data, 0);
  EXPECT_EQ(out.num_examples, 1u);
  for (std::size_t i = 0; i < model.size(); ++i) {
    const double expected = -lr * numeric_partial(model, data, i);
    const double got = out.params[i] - model[i];
    EXPECT_NEAR(got, expected, 1e-5 * std::max(1e-3, std::abs(expected))) << "weight " << i;
  }
}

TEST(Executor, BatchGradientMatchesFiniteDifference) {
  const auto data = tiny(5, 17, 4, 3);
  const auto model = random_model(SgdClassifier::model_size(5, 4), 9);
  std::vector<std::size_t> all(data.rows());
  std::iota(all.begin(), all.end(), 0);
  std::vector<double> grad;
  SgdClassifier::loss_and_gradient(model, data, all, &grad);
  for (std::size_t i = 0; i < model.size(); ++i) {
    const double num = numeric_partial(model, data, i);
    EXPECT_NEAR(grad[i], num, 1e-5 * std::max(1e-3, std::abs(num)));
  }
}

TEST(Executor, ZeroLearningRateIsIdentity) {
  const auto data = tiny(3, 50, 2, 2);
  const auto model = random_model(SgdClassifier::model_size(3, 2), 1);
  const auto out = SgdClassifier().update(model, sgd(0.0, 7, 3), data, 42);
  EXPECT_EQ(out.params, model);
  EXPECT_EQ(out.num_examples, 50u);
}

TEST(Executor, UniformModelLossIsLogClasses) {
  for (std::size_t c : {2u, 3u, 10u}) {
    const auto data = tiny(6, 40, c, c);
    const auto m = SgdClassifier().validate(ParameterSet(SgdClassifier::model_size(6, c)), data);
    EXPECT_NEAR(m.loss, std::log(static_cast<double>(c)), 1e-12);
  }
}

TEST(Executor, AccuracyMatchesNaiveArgmax) {
  const auto data = tiny(4, 200, 3, 8);
  const auto model = random_model(SgdClassifier::model_size(4, 3), 77);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < data.rows(); ++r) {
    std::size_t best = 0;
    double best_score = -INFINITY;
    for (std::size_t k = 0; k < 3; ++k) {
      double s = model[4 * 3 + k];
      for (std::size_t j = 0; j < 4; ++j) s += data.row(r)[j] * model[j * 3 + k];
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    correct += best == data.labels[r];
  }
  const auto m = SgdClassifier().validate(model, data);
  EXPECT_DOUBLE_EQ(m.accuracy, static_cast<double>(correct) / 200.0);
  EXPECT_EQ(m.rows, 200u);
}

TEST(Executor, PerfectSeparationGivesFullAccuracy) {
  LocalDataset d;
  d.dims = 1;
  for (int i = 0; i < 10; ++i) {
    const double x = i < 5 ? -1.0 - i : 1.0 + i;
    d.append_row(&x, i < 5 ? 0 : 1);
  }
  ParameterSet m{-1.0, 1.0, 0.0, 0.0};
  EXPECT_DOUBLE_EQ(SgdClassifier().validate(m, d).accuracy, 1.0);
}

TEST(Executor, TrainingImprovesSeparableData) {
  const auto train = tiny(20, 1000, 2, 1);
  const auto test = tiny(20, 1000, 2, 2);
  const ParameterSet zero(SgdClassifier::model_size(20, 2));
  const auto out = SgdClassifier().update(zero, sgd(0.05, 32, 3), train, 9);
  const auto m = SgdClassifier().validate(out.params, test);
  EXPECT_GT(m.accuracy, 0.85);
  EXPECT_LT(m.loss, std::log(2.0));
}

TEST(Executor, DeterministicForSeed) {
  const auto data = tiny(5, 100, 2, 4);
  const ParameterSet zero(SgdClassifier::model_size(5, 2));
  const auto a = SgdClassifier().update(zero, sgd(0.1, 8, 2), data, 3);
  const auto b = SgdClassifier().update(zero, sgd(0.1, 8, 2), data, 3);
  const auto c = SgdClassifier().update(zero, sgd(0.1, 8, 2), data, 4);
  EXPECT_EQ(a.params, b.params);
  EXPECT_NE(a.params, c.params);
}

TEST(Executor, Errors) {
  SgdClassifier e;
  const auto data = tiny(3, 10, 2, 1);
  EXPECT_THROW(e.update(ParameterSet(7), sgd(0.1, 1, 1), data, 0), ExecutorError);
  EXPECT_THROW(e.update(ParameterSet(8), sgd(0.1, 1, 1), LocalDataset{3, {}, {}}, 0),
               ExecutorError);
  EXPECT_THROW(e.update(ParameterSet(8), sgd(0.1, 0, 1), data, 0), ExecutorError);
  EXPECT_THROW(ExecutorRegistry::instance().create("nope"), ExecutorError);
}

TEST(Executor, SerializedEntryPoint) {
  const auto data = tiny(3, 30, 2, 1);
  const auto in = serialize_params(ParameterSet(8));
  const auto out = execute_update(in, sgd(0.1, 4, 1), data, 1);
  EXPECT_EQ(out.num_examples, 30u);
  std::uint64_t count = 0;
  inspect_model(out.model, &count);
  EXPECT_EQ(count, 8u);
  const auto m = execute_validation(out.model, sgd(0.1, 4, 1), data);
  EXPECT_EQ(m.rows, 30u);
}

TEST(Executor, PayloadBench) {
  TaskSpec t;
  t.executor_name = "payload_bench";
  t.hyperparameters.set("payload_bytes", std::uint64_t{400});
  t.hyperparameters.set("num_examples", std::uint64_t{5});
  const auto out = execute_update(serialize_params(ParameterSet(100)), t, {}, 3);
  EXPECT_EQ(out.num_examples, 5u);
  EXPECT_EQ(out.model.size(), kModelHeaderBytes + 400);
  EXPECT_THROW(execute_update(serialize_params(ParameterSet(99)), t, {}, 3), ExecutorError);
}

TEST(Executor, CsvRoundTrip) {
  testing::TempDir dir;
  const auto data = tiny(3, 25, 3, 6);
  write_csv(dir.path() / "d.csv", data);
  const auto back = load_csv(dir.path() / "d.csv");
  EXPECT_EQ(back.dims, 3u);
  EXPECT_EQ(back.labels, data.labels);
  EXPECT_EQ(back.features, data.features);
}

TEST(Executor, CsvRejectsRaggedRows) {
  testing::TempDir dir;
  {
    std::ofstream out(dir.path() / "bad.csv");
    out << "1,2,0\n1,0\n";
  }
  EXPECT_THROW(load_csv(dir.path() / "bad.csv"), ExecutorError);
}

TEST(Executor, SyntheticParse) {
  const auto s = SyntheticSpec::parse("classes=3,dims=4,rows=9,seed=2,imbalance=0.5:0.25:0.25");
  EXPECT_EQ(s.classes, 3u);
  EXPECT_EQ(s.rows, 9u);
  ASSERT_EQ(s.imbalance.size(), 3u);
  EXPECT_THROW(SyntheticSpec::parse("rows"), ConfigError);
  const auto back = SyntheticSpec::from_fields(s.to_fields());
  EXPECT_EQ(back.imbalance, s.imbalance);
}

TEST(Executor, UpdateSeedIsStable) {
  EXPECT_EQ(update_seed(1, "client-0", 3), update_seed(1, "client-0", 3));
  EXPECT_NE(update_seed(1, "client-0", 3), update_seed(1, "client-1", 3));
  EXPECT_NE(update_seed(1, "client-0", 3), update_seed(1, "client-0", 4));
}

}  // namespace
}  // namespace fedtier
