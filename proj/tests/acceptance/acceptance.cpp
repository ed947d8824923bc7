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

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits 3 if
// any criterion fails. Every tolerance is pinned below.

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fedtier/bench.hpp"
#include "fedtier/combiner.hpp"
#include "fedtier/digest.hpp"
#include "fedtier/discovery.hpp"
#include "fedtier/error.hpp"
#include "fedtier/executor.hpp"
#include "fedtier/harness.hpp"
#include "fedtier/model.hpp"
#include "fedtier/partition.hpp"
#include "fedtier/storage.hpp"

namespace fedtier {
namespace {

using namespace std::chrono_literals;
namespace fs = std::filesystem;

// ---- pinned tolerances and sizes ----------------------------------------------

constexpr double kModelTolerance = 1e-9;  // AC1, AC2: element-wise absolute
constexpr std::size_t kHierarchyCases = 200;
constexpr double kHierarchyBudgetS = 30;

constexpr std::size_t kEquivalenceRounds = 10;
constexpr std::size_t kEquivalenceClients = 12;
constexpr double kEquivalenceBudgetS = 300;

constexpr std::size_t kConvergenceRows = 10'000;
constexpr std::size_t kConvergenceHeldOut = 5'000;
constexpr std::size_t kConvergenceDims = 20;
constexpr std::size_t kConvergenceShards = 10;
constexpr std::size_t kConvergenceRounds = 50;
constexpr double kCentralGap = 0.02;     // accuracy, absolute
constexpr double kTrendSlack = 0.01;     // accuracy, absolute
constexpr double kConvergenceBudgetS = 600;

constexpr double kLinearityMinR2 = 0.9;
constexpr std::size_t kLinearityRounds = 5;
constexpr double kLinearityBudgetS = 900;

constexpr std::uint64_t kScalingPayload = 20'000'000;
constexpr std::size_t kScalingClients = 16;
constexpr std::size_t kScalingRounds = 3;
constexpr double kScalingMargin = 1.10;      // C=4 may be at most 10% slower than C=1
constexpr double kCombinerNicBytesPerS = 50e6;

constexpr std::uint64_t kClientScalingPayload = 262'144;
constexpr std::size_t kClientScalingRounds = 7;  // round 1 is warm-up and dropped
constexpr double kClientScalingMaxRatio = 5;

constexpr double kFailoverBudgetS = 15;
constexpr double kFaultBudgetS = 300;

constexpr std::uint64_t kTransferBytes = 100'000'000;
constexpr std::size_t kTransferRepetitions = 10;

constexpr double kPhaseSumTolerance = 0.02;  // relative to total
constexpr std::uint64_t kPullPayload = 20'000'000;
constexpr std::size_t kPullRounds = 3;

constexpr std::size_t kGradientCases = 100;
constexpr double kGradientRelTolerance = 1e-5;
// Gradients smaller than this are compared absolutely; the oracle's own
// finite-difference error is far below it.
constexpr double kGradientFloor = 1e-6;

constexpr std::size_t kCrashIterations = 500;

// ---- plumbing --------------------------------------------------------------------

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int precision = 4) {
  std::ostringstream out;
  out.precision(precision);
  out << v;
  return out.str();
}

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : (v[h - 1] + v[h]) / 2;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0 : s / static_cast<double>(v.size());
}

TaskSpec sgd_task(std::uint64_t batch = 32, double lr = 0.01) {
  TaskSpec t;
  t.executor_name = "sgd_classifier";
  t.hyperparameters.set("learning_rate", lr);
  t.hyperparameters.set("batch_size", batch);
  return t;
}

TaskSpec payload_task(std::uint64_t floats, std::uint64_t sleep_ms) {
  TaskSpec t;
  t.executor_name = "payload_bench";
  t.hyperparameters.set("payload_bytes", floats * 4);
  t.hyperparameters.set("train_sleep_ms", sleep_ms);
  return t;
}

RoundConfig round_of(std::uint64_t id, const TaskSpec& task) {
  RoundConfig r;
  r.round_id = id;
  r.task = task;
  return r;
}

// Parent links hold and every model on the trail is present and intact.
std::string chain_problem(Store& store) {
  const auto problems = verify_trail(store);
  return problems.empty() ? std::string{} : problems.front();
}

// ---- AC1: hierarchy transparency ---------------------------------------------------

Outcome hierarchy_transparency() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20260101);
  auto uniform_int = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  std::uniform_real_distribution<double> weight(-1.0, 1.0);
  double worst = 0;
  for (std::size_t c = 0; c < kHierarchyCases; ++c) {
    const std::size_t clients = uniform_int(2, 50);
    const std::size_t groups = uniform_int(1, std::min<std::size_t>(8, clients));
    const std::size_t dims = uniform_int(1, 10'000);
    std::vector<WeightedParams> updates(clients);
    std::vector<std::size_t> group_of(clients);
    for (std::size_t k = 0; k < clients; ++k) {
      updates[k].params = ParameterSet(dims);
      for (auto& w : updates[k].params.weights) w = weight(rng);
      updates[k].examples = uniform_int(1, 100'000);
      // The first `groups` clients seed every group so none is empty.
      group_of[k] = k < groups ? k : uniform_int(0, groups - 1);
    }
    std::vector<PartialModel> partials;
    for (std::size_t g = 0; g < groups; ++g) {
      std::vector<WeightedParams> members;
      for (std::size_t k = 0; k < clients; ++k) {
        if (group_of[k] == g) members.push_back(updates[k]);
      }
      const auto local = weighted_mean(members);
      PartialModel p;
      p.combiner_id = "group-" + std::to_string(g);
      p.round_id = 1;
      p.params = local.params;
      p.total_examples = local.examples;
      p.contributing_clients = members.size();
      partials.push_back(std::move(p));
    }
    const auto tiered = hierarchical_reduce(partials);
    const auto flat = weighted_mean(updates);

    // Oracle: the flat weighted mean in extended precision.
    long double total = 0;
    for (const auto& u : updates) total += static_cast<long double>(u.examples);
    for (std::size_t i = 0; i < dims; ++i) {
      long double acc = 0;
      for (const auto& u : updates) {
        acc += static_cast<long double>(u.examples) * u.params.weights[i];
      }
      const double oracle = static_cast<double>(acc / total);
      worst = std::max({worst, std::abs(tiered.params[i] - flat.params[i]),
                        std::abs(tiered.params[i] - oracle)});
    }
  }
  const double secs = since(t0);
  return {worst <= kModelTolerance && secs < kHierarchyBudgetS,
          std::to_string(kHierarchyCases) + " cases, max |tiered - flat| = " + num(worst) +
              " (tolerance " + num(kModelTolerance) + "), " + num(secs, 3) + " s of " +
              num(kHierarchyBudgetS) + " s"};
}

// ---- AC2: end-to-end equivalence -----------------------------------------------------

std::shared_ptr<const LocalDataset> shard_for(std::size_t i) {
  SyntheticSpec d;
  d.rows = 200;
  d.seed = 500 + i;
  return std::make_shared<const LocalDataset>(make_synthetic(d));
}

std::vector<std::vector<double>> sgd_trajectory(std::size_t combiners) {
  NetworkSpec spec;
  spec.combiners = combiners;
  spec.clients = kEquivalenceClients;
  spec.client_data = shard_for;
  Network net(spec);
  if (!net.wait_ready(60s)) throw Error("network did not come up");
  net.seed(ParameterSet(SgdClassifier::model_size(20, 2)), sgd_task());
  std::vector<std::vector<double>> models;
  for (std::uint64_t r = 1; r <= kEquivalenceRounds; ++r) {
    const auto rep = net.controller().run_round(round_of(r, sgd_task()));
    if (!rep.valid) throw Error("round " + std::to_string(r) + " invalid: " + rep.failure);
    models.push_back(deserialize_params(net.store()->get_model(rep.global_model_id)).weights);
  }
  if (const auto p = chain_problem(*net.store()); !p.empty()) throw Error("trail: " + p);
  return models;
}

Outcome end_to_end_equivalence() {
  const auto t0 = Clock::now();
  const auto one = sgd_trajectory(1);
  const auto three = sgd_trajectory(3);
  double worst = 0;
  bool moved = false;
  for (std::size_t r = 0; r < one.size(); ++r) {
    if (one[r].size() != three[r].size()) return {false, "model sizes differ"};
    for (std::size_t i = 0; i < one[r].size(); ++i) {
      worst = std::max(worst, std::abs(one[r][i] - three[r][i]));
      moved = moved || one[r][i] != 0;
    }
  }
  const double secs = since(t0);
  return {worst <= kModelTolerance && moved && secs < kEquivalenceBudgetS,
          "1 vs 3 combiners, " + std::to_string(kEquivalenceClients) + " clients, " +
              std::to_string(kEquivalenceRounds) + " rounds: max |diff| = " + num(worst) +
              (moved ? "" : " (model never moved)") + ", " + num(secs, 3) + " s"};
}

// ---- AC3: convergence analog ----------------------------------------------------------

double federated_accuracy(const std::vector<LocalDataset>& shards, std::size_t clients,
                          const LocalDataset& held_out) {
  NetworkSpec spec;
  spec.combiners = 1;
  spec.clients = clients;
  spec.client_data = [&shards](std::size_t i) {
    return std::make_shared<const LocalDataset>(shards.at(i));
  };
  Network net(spec);
  if (!net.wait_ready(60s)) throw Error("network did not come up");
  net.seed(ParameterSet(SgdClassifier::model_size(kConvergenceDims, 2)), sgd_task());
  std::string head;
  for (std::uint64_t r = 1; r <= kConvergenceRounds; ++r) {
    const auto rep = net.controller().run_round(round_of(r, sgd_task()));
    if (!rep.valid) throw Error("round " + std::to_string(r) + " invalid: " + rep.failure);
    head = rep.global_model_id;
  }
  const auto model = deserialize_params(net.store()->get_model(head));
  return SgdClassifier().validate(model, held_out).accuracy;
}

Outcome convergence() {
  const auto t0 = Clock::now();
  SyntheticSpec train_spec;
  train_spec.rows = kConvergenceRows;
  train_spec.dims = kConvergenceDims;
  train_spec.seed = 31;
  SyntheticSpec test_spec = train_spec;
  test_spec.rows = kConvergenceHeldOut;
  test_spec.seed = 32;
  const auto train = make_synthetic(train_spec);
  const auto held_out = make_synthetic(test_spec);
  const auto parts = partition_dataset(train, kConvergenceShards, PartitionMode::kIid, 1.0, 7);

  // Same executor, same hyperparameters, one epoch per round on the pooled data.
  auto central_task = sgd_task();
  central_task.hyperparameters.set("epochs", static_cast<std::uint64_t>(kConvergenceRounds));
  const auto central_model = SgdClassifier().update(
      ParameterSet(SgdClassifier::model_size(kConvergenceDims, 2)), central_task, train, 1);
  const double central = SgdClassifier().validate(central_model.params, held_out).accuracy;

  const double acc10 = federated_accuracy(parts.shards, 10, held_out);
  const double acc5 = federated_accuracy(parts.shards, 5, held_out);
  const double acc2 = federated_accuracy(parts.shards, 2, held_out);
  const double secs = since(t0);
  const bool close = std::abs(acc10 - central) <= kCentralGap;
  const bool trend = acc10 >= acc5 - kTrendSlack && acc5 >= acc2 - kTrendSlack;
  return {close && trend && secs < kConvergenceBudgetS,
          "held-out accuracy central " + num(central) + ", federated 10/5/2 clients " +
              num(acc10) + "/" + num(acc5) + "/" + num(acc2) + " (gap " +
              num(std::abs(acc10 - central)) + " <= " + num(kCentralGap) + ", trend slack " +
              num(kTrendSlack) + "), " + num(secs, 3) + " s"};
}

// ---- AC4: round time linear in payload ------------------------------------------------

// Least squares from the CSV alone: x = payload_bytes, y = round_s, using the
// per-point means. R^2 is the squared Pearson correlation.
struct CsvFit {
  double slope = 0;
  double r2 = 0;
  std::size_t rows = 0;
};

CsvFit fit_from_csv(const fs::path& csv) {
  std::ifstream in(csv);
  std::string line;
  std::map<double, std::vector<double>> by_size;
  CsvFit f;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    if (cols.size() != 9) throw Error("malformed bench csv line: " + line);
    by_size[std::stod(cols[2])].push_back(std::stod(cols[5]));
    ++f.rows;
  }
  std::vector<double> x, y;
  for (const auto& [size, times] : by_size) {
    x.push_back(size);
    y.push_back(mean(times));
  }
  const double mx = mean(x), my = mean(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  f.slope = sxy / sxx;
  f.r2 = sxy * sxy / (sxx * syy);
  return f;
}

std::string invalid_rounds(const std::vector<BenchRow>& rows) {
  std::size_t bad = 0;
  for (const auto& r : rows) bad += r.valid ? 0 : 1;
  return bad == 0 ? std::string{} : std::to_string(bad) + " invalid rounds";
}

Outcome round_time_linearity() {
  const auto t0 = Clock::now();
  BenchOptions o;
  o.label = "linearity";
  o.payload_sizes = {1'000'000, 5'000'000, 10'000'000, 20'000'000, 50'000'000};
  o.combiners = {1};
  o.clients = {8};
  o.rounds = kLinearityRounds;
  const auto rows = run_bench(o);
  const auto csv = fs::temp_directory_path() / ("fedtier-linearity-" + std::to_string(::getpid()) + ".csv");
  {
    std::ofstream out(csv);
    write_bench_csv(out, rows);
  }
  const auto fit = fit_from_csv(csv);
  fs::remove(csv);
  const auto bad = invalid_rounds(rows);
  const double secs = since(t0);
  return {bad.empty() && fit.r2 >= kLinearityMinR2 && secs < kLinearityBudgetS,
          "C=1 M=8, 5 sizes x " + std::to_string(kLinearityRounds) + " rounds (" +
              std::to_string(fit.rows) + " csv rows): R2 " + num(fit.r2) + " >= " +
              num(kLinearityMinR2) + ", slope " + num(fit.slope * 1e6) + " s/MB" +
              (bad.empty() ? "" : ", " + bad) + ", " + num(secs, 3) + " s"};
}

// ---- AC5: horizontal scaling relief -------------------------------------------------

std::map<std::size_t, double> mean_round_by(const std::vector<BenchRow>& rows,
                                            std::size_t BenchRow::*key) {
  std::map<std::size_t, std::vector<double>> acc;
  for (const auto& r : rows) acc[r.*key].push_back(r.round_s);
  std::map<std::size_t, double> out;
  for (const auto& [k, v] : acc) out[k] = mean(v);
  return out;
}

Outcome horizontal_scaling() {
  const auto t0 = Clock::now();
  BenchOptions o;
  o.label = "scaling";
  o.payload_sizes = {kScalingPayload};
  o.combiners = {1, 4};
  o.clients = {kScalingClients};
  o.rounds = kScalingRounds;
  o.base.combiner_nic_bytes_per_s = kCombinerNicBytesPerS;
  const auto rows = run_bench(o);
  const auto t = mean_round_by(rows, &BenchRow::combiners);
  const double ratio = t.at(4) / t.at(1);

  // Without NIC emulation every combiner shares one host's CPU; reported only.
  o.base.combiner_nic_bytes_per_s = 0;
  o.rounds = 1;
  const auto plain = mean_round_by(run_bench(o), &BenchRow::combiners);

  const auto bad = invalid_rounds(rows);
  return {bad.empty() && t.at(4) <= kScalingMargin * t.at(1),
          "20 MB, M=16, combiner NIC " + num(kCombinerNicBytesPerS / 1e6) + " MB/s: C=1 " +
              num(t.at(1)) + " s, C=4 " + num(t.at(4)) + " s, ratio " + num(ratio) +
              " <= " + num(kScalingMargin) + "; uncapped ratio " +
              num(plain.at(4) / plain.at(1)) + " (reported)" + (bad.empty() ? "" : ", " + bad) +
              ", " + num(since(t0), 3) + " s"};
}

// ---- AC6: sublinear client scaling -----------------------------------------------------

Outcome client_scaling() {
  const auto t0 = Clock::now();
  BenchOptions o;
  o.label = "clients";
  o.payload_sizes = {kClientScalingPayload};
  o.combiners = {1};
  o.clients = {100, 500};
  o.rounds = kClientScalingRounds;
  const auto rows = run_bench(o);
  // Median of the post-warm-up rounds: the first round pays connection and
  // allocator warm-up, and one CPU makes single rounds noisy.
  std::map<std::size_t, std::vector<double>> by_clients;
  for (const auto& r : rows) {
    if (r.round_id > 1) by_clients[r.clients].push_back(r.round_s);
  }
  std::map<std::size_t, double> t;
  for (const auto& [m, v] : by_clients) t[m] = median(v);
  const double ratio = t.at(500) / t.at(100);
  const auto bad = invalid_rounds(rows);
  return {bad.empty() && ratio <= kClientScalingMaxRatio,
          "256 KB, C=1, median of rounds 2.." + std::to_string(kClientScalingRounds) +
              ": t(100) " + num(t.at(100)) + " s, t(500) " + num(t.at(500)) +
              " s, ratio " + num(ratio) + " <= " + num(kClientScalingMaxRatio) +
              (bad.empty() ? "" : ", " + bad) + ", " + num(since(t0), 3) + " s"};
}

// ---- AC7: fault matrix -----------------------------------------------------------------

// Default timings throughout; payload_bench sleeps keep clients busy when a
// mid-collection fault lands.
struct Scenario {
  const char* name;
  std::function<std::string()> run;  // empty string on success
};

std::string scenario_kill_one_combiner() {
  NetworkSpec spec;
  spec.combiners = 2;
  spec.clients = 4;
  Network net(spec);
  if (!net.wait_ready(60s)) return "network did not come up";
  net.seed(ParameterSet(8), payload_task(8, 500));
  net.inject(Fault::parse("kill_combiner:combiner-1@mid_collection"));
  const auto r1 = net.controller().run_round(round_of(1, payload_task(8, 500)));
  if (!r1.valid) return "round 1 invalid: " + r1.failure;
  if (r1.successful != std::vector<std::string>{"combiner-0"}) return "wrong successful set";
  if (net.store()->trail_head()->model_id != r1.global_model_id) return "round 1 not committed";
  const auto until = Clock::now() + 30s;
  while (net.combiner(0).live_clients() < 4 && Clock::now() < until) std::this_thread::sleep_for(50ms);
  const auto r2 = net.controller().run_round(round_of(2, payload_task(8, 0)));
  if (!r2.valid) return "round 2 invalid: " + r2.failure;
  if (r2.outcomes.at("combiner-0").reporting_clients != 4) return "orphaned clients not reassigned";
  return chain_problem(*net.store());
}

std::string scenario_kill_only_combiner() {
  NetworkSpec spec;
  spec.clients = 2;
  Network net(spec);
  if (!net.wait_ready(60s)) return "network did not come up";
  const auto seed = net.seed(ParameterSet(8), payload_task(8, 500));
  net.inject(Fault::parse("kill_combiner:combiner-0@mid_collection"));
  const auto r = net.controller().run_round(round_of(1, payload_task(8, 500)));
  if (r.valid) return "round unexpectedly valid";
  if (net.store()->trail_head()->model_id != seed.model_id) return "trail head moved";
  return chain_problem(*net.store());
}

std::string scenario_kill_active_reducer() {
  NetworkSpec spec;
  spec.clients = 2;
  spec.passive_reducers = 1;
  Network net(spec);
  if (!net.wait_ready(60s)) return "network did not come up";
  const auto seed = net.seed(ParameterSet(8), payload_task(8, 0));
  Reducer* first = net.active_reducer();
  if (first == nullptr) return "no active reducer";
  net.inject(Fault::parse("kill_reducer:active@before_reduce"));
  // The hook runs right after the armed kill, so failover is timed from the kill.
  Clock::time_point killed{};
  net.set_phase_hook([&](Phase p, const RoundConfig&) {
    if (p == Phase::kBeforeReduce && killed == Clock::time_point{}) killed = Clock::now();
  });
  const auto r1 = net.controller().run_round(round_of(1, payload_task(8, 0)));
  if (r1.valid) return "round 1 unexpectedly valid";
  if (net.store()->trail_head()->model_id != seed.model_id) return "trail head moved";
  Reducer* next = nullptr;
  while (since(killed) < kFailoverBudgetS + 1) {
    next = net.active_reducer();
    if (next != nullptr && next != first) break;
    std::this_thread::sleep_for(50ms);
  }
  const double failover = since(killed);
  if (next == nullptr || next == first || failover > kFailoverBudgetS) {
    return "passive not active within " + num(kFailoverBudgetS) + " s";
  }
  const auto r2 = net.controller().run_round(round_of(2, payload_task(8, 0)));
  if (!r2.valid) return "round 2 invalid: " + r2.failure;
  if (r2.parent_id != seed.model_id) return "round 2 does not build on the seed";
  return chain_problem(*net.store());
}

std::string scenario_drop_client() {
  NetworkSpec spec;
  spec.clients = 3;
  Network net(spec);
  if (!net.wait_ready(60s)) return "network did not come up";
  net.seed(ParameterSet(8), payload_task(8, 800));
  net.inject(Fault::parse("drop_client:client-1@mid_collection"));
  const auto r = net.controller().run_round(round_of(1, payload_task(8, 800)));
  if (!r.valid) return "round invalid: " + r.failure;
  if (r.outcomes.at("combiner-0").reporting_clients != 2) return "expected 2 contributions";
  return chain_problem(*net.store());
}

std::string scenario_controller_crash() {
  NetworkSpec spec;
  spec.clients = 2;
  Network net(spec);
  if (!net.wait_ready(60s)) return "network did not come up";
  net.seed(ParameterSet(8), payload_task(8, 0));
  net.set_phase_hook([](Phase p, const RoundConfig& cfg) {
    if (p == Phase::kAfterRound && cfg.round_id == 2) throw Interrupted("controller crash");
  });
  SessionConfig s;
  s.session_id = "crash";
  s.rounds = 4;
  s.base = round_of(0, payload_task(8, 0));
  try {
    net.controller().run_session(s);
    return "session was not interrupted";
  } catch (const Interrupted&) {
  }
  net.set_phase_hook({});
  const auto before = net.store()->trail();

  auto discovery = std::make_shared<Discovery>(net.store(), spec.controller.discovery);
  Controller again(spec.controller, net.store(), discovery);
  const auto rest = again.resume_session("crash");
  if (rest.size() != 2) return "resume ran " + std::to_string(rest.size()) + " rounds, want 2";
  for (const auto& r : rest) {
    if (!r.valid) return "resumed round invalid: " + r.failure;
  }
  const auto after = net.store()->trail();
  if (after.size() != before.size() + 2) return "trail did not grow by 2";
  if (after[before.size()].parent_id != before.back().model_id) return "resume broke parent link";
  return chain_problem(*net.store());
}

Outcome fault_matrix() {
  const auto t0 = Clock::now();
  const std::vector<Scenario> scenarios{
      {"a", scenario_kill_one_combiner},   {"b", scenario_kill_only_combiner},
      {"c", scenario_kill_active_reducer}, {"d", scenario_drop_client},
      {"e", scenario_controller_crash},
  };
  std::string detail;
  bool pass = true;
  for (const auto& s : scenarios) {
    std::string problem;
    try {
      problem = s.run();
    } catch (const std::exception& e) {
      problem = std::string("exception: ") + e.what();
    }
    pass = pass && problem.empty();
    detail += std::string(detail.empty() ? "" : ", ") + "(" + s.name + ") " +
              (problem.empty() ? "ok" : problem);
  }
  const double secs = since(t0);
  return {pass && secs < kFaultBudgetS, detail + ", " + num(secs, 3) + " s"};
}

// ---- AC8: chunked transfer integrity ---------------------------------------------------

std::optional<wire::Frame> next_message(net::Connection& c, net::Duration timeout) {
  const auto until = Clock::now() + timeout;
  for (;;) {
    auto f = c.read_message(std::max<net::Duration>(until - Clock::now(), 1ms));
    if (!f || f->type != wire::MessageType::kHeartbeat) return f;
  }
}

Bytes random_model(std::size_t floats, std::uint64_t seed) {
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  ParameterSet p(floats);
  std::uniform_real_distribution<float> u(-1e3f, 1e3f);
  for (auto& w : p.weights) w = u(rng);
  return serialize_params(p);
}

Outcome transfer_integrity() {
  const auto t0 = Clock::now();
  CombinerConfig cfg;
  cfg.id = "combiner-0";
  Combiner combiner(cfg);
  const std::string client = "client-0";
  auto conn = net::Connection::connect(client, combiner.client_endpoint());
  wire::Fields hello;
  hello.set("client_id", client);
  hello.set("token", client_token(cfg.token_secret, client));
  conn->send(wire::MessageType::kHello, hello);
  if (auto ack = next_message(*conn, 5s); !ack || ack->type != wire::MessageType::kAck) {
    return {false, "combiner refused the client"};
  }
  std::string uploaded_digest;
  combiner.set_update_observer([&](const CapturedUpdate& u) { uploaded_digest = sha256_hex(u.model); });

  const std::size_t floats = kTransferBytes / 4;
  std::size_t exact = 0;
  double down_s = 0, up_s = 0, pull_s = 0;
  std::uint64_t pulled_bytes = 0;
  std::string failure;
  for (std::size_t rep = 0; rep < kTransferRepetitions && failure.empty(); ++rep) {
    const Bytes model = random_model(floats, 1000 + rep);
    const auto want = sha256_hex(model);
    RoundConfig round;
    round.round_id = rep + 1;
    round.deadline_seconds = 300;
    wire::Fields beat;
    beat.set("client_id", client);
    conn->send(wire::MessageType::kHeartbeat, beat);

    const auto start = Clock::now();
    auto outcome = std::async(std::launch::async,
                              [&] { return combiner.run_partial_round(round, model); });
    auto req = next_message(*conn, 120s);
    if (!req || req->type != wire::MessageType::kTrainRequest) {
      failure = "no train request";
      outcome.wait();
      break;
    }
    const auto received = conn->take_stream(
        wire::stream_id_from_hex(wire::fields_of(*req).get("model")));
    down_s += since(start);
    const bool down_ok = sha256_hex(received) == want;

    const auto up_start = Clock::now();
    const auto id = conn->send_object(received);
    wire::Fields meta;
    meta.set("round_id", round.round_id);
    meta.set("client_id", client);
    meta.set("model", wire::to_hex(id));
    meta.set("num_examples", std::uint64_t{1});
    conn->send(wire::MessageType::kUpdateMeta, meta);
    const auto result = outcome.get();
    up_s += since(up_start);
    next_message(*conn, 5s);  // the update ACK
    if (!result.completed) {
      failure = "round " + std::to_string(round.round_id) + ": " + result.reason;
      break;
    }

    // Pull the partial over the control port, as a reducer does.
    const auto pull_start = Clock::now();
    auto puller = net::Connection::connect("reducer-0", combiner.control_endpoint());
    wire::Fields pull;
    pull.set("op", ops::kPullPartial);
    pull.set("round_id", round.round_id);
    puller->send(wire::MessageType::kRoundControl, pull);
    const auto pmeta = wire::fields_of(puller->expect(wire::MessageType::kPartialMeta, 120s));
    const auto partial = puller->take_stream(wire::stream_id_from_hex(pmeta.get("model")));
    pull_s += since(pull_start);
    pulled_bytes += partial.size();
    // One client with weight 1: the partial holds its weights exactly.
    const bool pull_ok = sha256_hex(serialize_params(deserialize_params(partial))) == want;
    if (down_ok && uploaded_digest == want && pull_ok) ++exact;
  }
  combiner.stop();
  const double mb = static_cast<double>(kTransferBytes) * static_cast<double>(kTransferRepetitions) / 1e6;
  return {failure.empty() && exact == kTransferRepetitions,
          std::to_string(exact) + "/" + std::to_string(kTransferRepetitions) +
              " round trips of 100 MB byte-exact (down, up, pulled partial); throughput down " +
              num(mb / down_s) + " MB/s, up " + num(mb / up_s) + " MB/s, pull " +
              num(static_cast<double>(pulled_bytes) / 1e6 / pull_s) + " MB/s" +
              (failure.empty() ? "" : ", " + failure) + ", " + num(since(t0), 3) + " s"};
}

// ---- AC9: reducer workload breakdown ------------------------------------------------

std::vector<BenchRow> pull_bench(bool parallel) {
  BenchOptions o;
  o.label = parallel ? "parallel_pull" : "sequential_pull";
  o.payload_sizes = {kPullPayload};
  o.combiners = {4};
  o.clients = {4};
  o.rounds = kPullRounds;
  o.base.link = net::kWanProfile;
  o.base.reducer.parallel_pull = parallel;
  return run_bench(o);
}

Outcome reducer_breakdown() {
  const auto t0 = Clock::now();
  const auto seq = pull_bench(false);
  const auto par = pull_bench(true);
  double worst = 0;
  std::vector<double> seq_dl, par_dl;
  for (const auto* rows : {&seq, &par}) {
    for (const auto& r : *rows) {
      if (r.reduce.total <= 0) return {false, "round without reduce timings"};
      worst = std::max(worst, std::abs(r.reduce.phase_sum() - r.reduce.total) / r.reduce.total);
      (rows == &seq ? seq_dl : par_dl).push_back(r.reduce.download);
    }
  }
  const auto bad = invalid_rounds(seq) + invalid_rounds(par);
  const double s = mean(seq_dl), p = mean(par_dl);
  return {bad.empty() && worst <= kPhaseSumTolerance && p < s,
          "phase sum within " + num(worst * 100, 3) + "% of total (limit " +
              num(kPhaseSumTolerance * 100) + "%); WAN profile, C=4, 20 MB: download " +
              num(s) + " s sequential vs " + num(p) + " s parallel" +
              (bad.empty() ? "" : ", " + bad) + ", " + num(since(t0), 3) + " s"};
}

// ---- AC10: gradient oracle -------------------------------------------------------------

// Mean softmax cross-entropy, written independently of the executor.
// Layout: weight (j, k) at j * classes + k, bias k at dims * classes + k.
long double oracle_loss(const std::vector<long double>& w, const LocalDataset& data,
                        std::size_t classes) {
  const std::size_t d = data.dims;
  long double total = 0;
  for (std::size_t r = 0; r < data.rows(); ++r) {
    std::vector<long double> z(classes);
    for (std::size_t k = 0; k < classes; ++k) {
      z[k] = w[d * classes + k];
      for (std::size_t j = 0; j < d; ++j) z[k] += data.row(r)[j] * w[j * classes + k];
    }
    const long double top = *std::max_element(z.begin(), z.end());
    long double sum = 0;
    for (auto v : z) sum += std::exp(v - top);
    total += std::log(sum) + top - z[data.labels[r]];
  }
  return total / static_cast<long double>(data.rows());
}

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(424242);
  std::normal_distribution<double> normal(0, 1);
  std::uniform_real_distribution<double> init(-0.5, 0.5);
  double worst = 0;
  for (std::size_t c = 0; c < kGradientCases; ++c) {
    const std::size_t dims = std::uniform_int_distribution<std::size_t>(1, 30)(rng);
    const std::size_t classes = std::uniform_int_distribution<std::size_t>(2, 6)(rng);
    const std::size_t rows = std::uniform_int_distribution<std::size_t>(1, 40)(rng);
    const double lr = std::uniform_real_distribution<double>(0.01, 0.5)(rng);
    LocalDataset data;
    data.dims = dims;
    std::vector<double> x(dims);
    for (std::size_t r = 0; r < rows; ++r) {
      for (auto& v : x) v = normal(rng);
      data.append_row(x.data(), static_cast<std::uint32_t>(
                                    std::uniform_int_distribution<std::size_t>(0, classes - 1)(rng)));
    }
    ParameterSet model(SgdClassifier::model_size(dims, classes));
    for (auto& w : model.weights) w = init(rng);

    // One full-batch step: the executor's gradient is (w - w') / lr.
    TaskSpec task = sgd_task(rows, lr);
    const auto stepped = SgdClassifier().update(model, task, data, c).params;

    std::vector<long double> w(model.weights.begin(), model.weights.end());
    const long double h = 1e-6L;
    for (std::size_t i = 0; i < model.size(); ++i) {
      auto plus = w, minus = w;
      plus[i] += h;
      minus[i] -= h;
      const double fd = static_cast<double>(
          (oracle_loss(plus, data, classes) - oracle_loss(minus, data, classes)) / (2 * h));
      const double got = (model[i] - stepped[i]) / lr;
      worst = std::max(worst, std::abs(got - fd) / std::max(std::abs(fd), kGradientFloor));
    }
  }
  return {worst <= kGradientRelTolerance,
          std::to_string(kGradientCases) + " single-step cases, max relative error " +
              num(worst) + " <= " + num(kGradientRelTolerance) + ", " + num(since(t0), 3) + " s"};
}

// ---- AC11: storage crash safety ---------------------------------------------------------

// Child body: appends forever; dies by SIGKILL from the parent or at a
// durable step chosen by the parent.
[[noreturn]] void append_until_killed(const fs::path& root, const std::string& crash_at,
                                      int appends_before_crash, std::uint64_t seed) {
  try {
    FsStore store(root);
    int done = 0;
    store.set_crash_hook([&](std::string_view step) {
      if (!crash_at.empty() && step == crash_at && done >= appends_before_crash) ::raise(SIGKILL);
    });
    std::mt19937_64 rng(seed);
    for (;;) {
      const auto head = store.trail_head();
      ParameterSet p(1 + rng() % 64);
      for (auto& w : p.weights) w = static_cast<double>(rng() % 1000);
      const auto bytes = serialize_params(p);
      TrailEntry e;
      e.model_id = store.put_model(bytes);
      e.round_id = head ? head->round_id + 1 : 0;
      e.parent_id = head ? head->model_id : kNullModelId;
      e.created_at_ms = 1;
      e.byte_size = bytes.size();
      store.trail_append(e);
      ++done;
    }
  } catch (...) {
    ::_exit(1);
  }
}

Outcome crash_safety() {
  const auto t0 = Clock::now();
  const auto root = fs::temp_directory_path() / ("fedtier-crash-" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  std::mt19937_64 rng(777);
  std::size_t violations = 0, unexpected_exits = 0;
  std::vector<TrailEntry> previous;
  std::string first_problem;
  for (std::size_t it = 0; it < kCrashIterations; ++it) {
    // Even iterations die at a durable step; odd ones at a random instant.
    const bool at_step = it % 2 == 0;
    const std::string step = at_step ? (rng() % 2 == 0 ? "temp_written" : "renamed") : "";
    const int after = static_cast<int>(rng() % 3);
    const auto delay = std::chrono::microseconds(rng() % 3000);
    const pid_t pid = ::fork();
    if (pid < 0) return {false, std::string("fork failed: ") + std::strerror(errno)};
    if (pid == 0) append_until_killed(root, step, after, it);
    if (!at_step) {
      std::this_thread::sleep_for(delay);
      ::kill(pid, SIGKILL);
    }
    int status = 0;
    ::waitpid(pid, &status, 0);
    if (!WIFSIGNALED(status) || WTERMSIG(status) != SIGKILL) ++unexpected_exits;

    std::string problem;
    try {
      FsStore store(root);
      problem = chain_problem(store);
      const auto now = store.trail();
      if (now.size() < previous.size() || !std::equal(previous.begin(), previous.end(), now.begin())) {
        problem = "committed entries lost or rewritten";
      }
      previous = now;
    } catch (const std::exception& e) {
      problem = e.what();
    }
    if (!problem.empty()) {
      ++violations;
      if (first_problem.empty()) first_problem = problem;
    }
  }
  fs::remove_all(root);
  return {violations == 0 && unexpected_exits == 0 && !previous.empty(),
          std::to_string(kCrashIterations) + " kills, " + std::to_string(violations) +
              " chain violations, " + std::to_string(unexpected_exits) +
              " unexpected exits, trail reached " + std::to_string(previous.size()) +
              " entries" + (first_problem.empty() ? "" : " (" + first_problem + ")") + ", " +
              num(since(t0), 3) + " s"};
}

}  // namespace
}  // namespace fedtier

int main(int argc, char** argv) {
  using namespace fedtier;
  CLI::App app{"fedtier acceptance checks"};
  std::vector<int> only;
  std::string log_level = "error";
  app.add_option("--only", only, "criterion numbers to run (default: all)")->delimiter(',');
  app.add_option("--log-level", log_level, "spdlog level");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  const std::vector<Criterion> criteria{
      {1, "hierarchy transparency", hierarchy_transparency},
      {2, "end-to-end equivalence", end_to_end_equivalence},
      {3, "convergence vs central", convergence},
      {4, "round time linear in payload", round_time_linearity},
      {5, "horizontal scaling relief", horizontal_scaling},
      {6, "sublinear client scaling", client_scaling},
      {7, "fault matrix", fault_matrix},
      {8, "chunked transfer integrity", transfer_integrity},
      {9, "reducer workload breakdown", reducer_breakdown},
      {10, "gradient oracle", gradient_oracle},
      {11, "storage crash safety", crash_safety},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.contains(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << "AC" << c.id << " " << (o.pass ? "PASS" : "FAIL") << " " << c.name << ": "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 3;
}
