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


// Operator CLI: network launcher, per-role processes, sessions, data
// preparation, fault injection and benchmarks.
//
// Exit codes: 0 success, 1 invalid configuration or usage, 2 runtime failure.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <atomic>
#include <csignal>
#include <cmath>
#include <fstream>
#include <iostream>
#include <thread>

#include "fedtier/agent.hpp"
#include "fedtier/bench.hpp"
#include "fedtier/combiner.hpp"
#include "fedtier/config.hpp"
#include "fedtier/control_server.hpp"
#include "fedtier/controller.hpp"
#include "fedtier/harness.hpp"
#include "fedtier/partition.hpp"
#include "fedtier/reducer.hpp"
#include "fedtier/remote_store.hpp"

namespace fedtier {
namespace {

using namespace std::chrono_literals;
using wire::MessageType;

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

void wait_for_stop() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) std::this_thread::sleep_for(100ms);
}

void print_fields(const wire::Fields& f) {
  for (const auto& [k, v] : f.entries()) std::cout << k << " = " << v << '\n';
}

// Parses repeated key=value overrides.
wire::Fields parse_sets(const std::vector<std::string>& sets) {
  wire::Fields f;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + s + "'");
    f.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return f;
}

wire::Fields control_call(const std::string& endpoint, wire::Fields req,
                          std::optional<ByteView> stream = std::nullopt) {
  auto conn = net::Connection::connect("operator", net::Endpoint::parse(endpoint));
  conn->set_peer("controller");
  if (stream) req.set("model", wire::to_hex(conn->send_object(*stream)));
  conn->send(MessageType::kRoundControl, req);
  return wire::fields_of(conn->expect(MessageType::kAck, 120s));
}

// ---- net -----------------------------------------------------------------------

struct NetUpArgs {
  std::string config;
  std::string emit;
  std::string host = "127.0.0.1";
  std::uint16_t base_port = 7100;
  std::string binary = "fedtier";
  std::string endpoint_file;
};

int net_up(const NetUpArgs& a) {
  const auto spec = a.config.empty() ? NetworkSpec{} : NetworkSpec::from_fields(load_config(a.config));
  spec.check();
  if (!a.emit.empty()) {
    for (const auto& p : emit_deployment(spec, a.emit, a.host, a.base_port, a.binary)) {
      std::cout << p.string() << '\n';
    }
    return 0;
  }
  Network net(spec);
  net.control_server().set_shutdown_handler([] { g_stop = true; });
  const auto ready = net.wait_ready(30s);
  const auto ep = net.control_endpoint().str();
  if (!a.endpoint_file.empty()) {
    std::ofstream(a.endpoint_file) << ep << '\n';
  }
  std::cout << (ready ? "READY" : "STARTED (not all clients connected yet)") << " control=" << ep
            << " store=" << net.store_dir().string() << std::endl;
  wait_for_stop();
  net.down();
  return 0;
}

// ---- run <role> ----------------------------------------------------------------

int run_role(const std::string& role, const std::string& config) {
  const auto f = load_config(config);
  auto announce = [&](const std::string& what) {
    std::cout << "READY " << role << " " << what << std::endl;
  };
  if (role == "store") {
    ConfigReader r(f);
    const auto bind = r.endpoint("bind", {"127.0.0.1", 0});
    const auto root = r.required("root");
    r.finish("store");
    StoreServer server(std::make_shared<FsStore>(root), bind);
    announce(server.endpoint().str());
    wait_for_stop();
    server.stop();
  } else if (role == "controller") {
    const auto cfg = ControllerConfig::from_fields(f, {"store"});
    if (!f.has("store")) throw ConfigError("controller: missing required key 'store'");
    auto store = open_store(f.get("store"), cfg.node);
    auto discovery = std::make_shared<Discovery>(store, cfg.discovery);
    auto controller = std::make_shared<Controller>(cfg, store, discovery);
    ControlServer server(controller, cfg.control_bind, cfg.advertise_host);
    server.set_shutdown_handler([] { g_stop = true; });
    announce(server.endpoint().str());
    wait_for_stop();
    controller->abort();
    server.stop();
  } else if (role == "reducer") {
    const auto cfg = ReducerConfig::from_fields(f, {"store"});
    if (!f.has("store")) throw ConfigError("reducer: missing required key 'store'");
    Reducer reducer(cfg, open_store(f.get("store"), cfg.id));
    announce(reducer.endpoint().str());
    wait_for_stop();
    reducer.stop();
  } else if (role == "combiner") {
    Combiner combiner(CombinerConfig::from_fields(f));
    announce(combiner.client_endpoint().str());
    wait_for_stop();
    combiner.stop();
  } else if (role == "client") {
    Agent agent(AgentConfig::from_fields(f));
    agent.start();
    announce(agent.id());
    wait_for_stop();
    agent.stop();
  } else {
    throw ConfigError("unknown role '" + role + "' (store, controller, reducer, combiner, client)");
  }
  return 0;
}

// ---- seed / session / fault ----------------------------------------------------

struct SeedArgs {
  std::string control;
  std::string task;
  std::vector<std::string> sets;
  std::string model;
  std::size_t dims = 0;
  std::size_t classes = 2;
  std::uint64_t payload_bytes = 0;
};

int seed_init(const SeedArgs& a) {
  wire::Fields task_fields = a.task.empty() ? wire::Fields{} : load_config(a.task);
  const auto overrides = parse_sets(a.sets);
  for (const auto& [k, v] : overrides.entries()) task_fields.set(k, v);
  if (!task_fields.has("executor")) task_fields.set("executor", "sgd_classifier");
  const auto task = TaskSpec::from_fields(task_fields);

  Bytes model;
  if (!a.model.empty()) {
    std::ifstream in(a.model, std::ios::binary);
    if (!in) throw ConfigError("cannot read model file " + a.model);
    model.assign(std::istreambuf_iterator<char>(in), {});
  } else if (a.dims > 0) {
    model = serialize_params(ParameterSet(SgdClassifier::model_size(a.dims, a.classes)));
  } else if (a.payload_bytes > 0) {
    if (a.payload_bytes % 4 != 0) throw ConfigError("--payload-bytes must be a multiple of 4");
    model = serialize_params(ParameterSet(a.payload_bytes / 4));
  } else {
    throw ConfigError("seed init needs --model, --dims or --payload-bytes");
  }
  auto req = control_request(ops::kInitSeed, "operator");
  const auto staged = task.to_fields();
  for (const auto& [k, v] : staged.entries()) req.set(k, v);
  print_fields(control_call(a.control, req, ByteView(model)));
  return 0;
}

int session_status(const std::string& control, const std::string& id) {
  auto req = control_request(ops::kStatus, "operator");
  if (!id.empty()) req.set("session_id", id);
  print_fields(control_call(control, req));
  return 0;
}

int session_wait(const std::string& control, const std::string& id) {
  for (;;) {
    auto req = control_request(ops::kStatus, "operator");
    req.set("session_id", id);
    const auto st = control_call(control, req);
    if (!st.get_bool_or("session_running", false)) {
      print_fields(st);
      return st.get_or("session.status", "") == "completed" ? 0 : kExitRuntime;
    }
    std::this_thread::sleep_for(500ms);
  }
}

// ---- bench ---------------------------------------------------------------------

std::vector<std::uint64_t> mb_to_bytes(const std::vector<double>& mb) {
  std::vector<std::uint64_t> out;
  for (double m : mb) {
    if (m < 0) throw ConfigError("payload sizes must not be negative");
    out.push_back(static_cast<std::uint64_t>(std::llround(m * 1e6 / 4)) * 4);
  }
  return out;
}

std::vector<BenchRow> read_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  return read_bench_csv(in);
}

}  // namespace
}  // namespace fedtier

int main(int argc, char** argv) {
  using namespace fedtier;
  CLI::App app{"fedtier: tiered federated learning network"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  // net
  auto* net_cmd = app.add_subcommand("net", "start or stop a network")->require_subcommand(1);
  NetUpArgs up;
  auto* net_up_cmd = net_cmd->add_subcommand("up", "start every component in this process, or emit a multi-process deployment");
  net_up_cmd->add_option("--config", up.config, "network config file");
  net_up_cmd->add_option("--emit", up.emit, "write per-component configs and start.sh here instead");
  net_up_cmd->add_option("--host", up.host, "listen host for emitted configs");
  net_up_cmd->add_option("--base-port", up.base_port, "first port for emitted configs");
  net_up_cmd->add_option("--binary", up.binary, "fedtier binary named in start.sh");
  net_up_cmd->add_option("--endpoint-file", up.endpoint_file, "write the control endpoint here");
  std::string control;
  auto* net_down_cmd = net_cmd->add_subcommand("down", "stop a running network or controller");
  net_down_cmd->add_option("--control", control, "control endpoint HOST:PORT")->required();

  // run
  auto* run_cmd = app.add_subcommand("run", "run one component from its config file");
  std::string role, role_config;
  run_cmd->add_option("role", role, "store, controller, reducer, combiner or client")->required();
  run_cmd->add_option("--config", role_config, "component config file")->required();

  // seed
  auto* seed_cmd = app.add_subcommand("seed", "seed model")->require_subcommand(1);
  SeedArgs seed;
  auto* seed_init_cmd = seed_cmd->add_subcommand("init", "stage the task and commit the seed model");
  seed_init_cmd->add_option("--control", seed.control, "control endpoint HOST:PORT")->required();
  seed_init_cmd->add_option("--task", seed.task, "task file (executor, hp.*, data_source)");
  seed_init_cmd->add_option("--set", seed.sets, "task override key=value");
  seed_init_cmd->add_option("--model", seed.model, "FNP1 model file");
  seed_init_cmd->add_option("--dims", seed.dims, "zero sgd_classifier model with this many features");
  seed_init_cmd->add_option("--classes", seed.classes, "classes for --dims");
  seed_init_cmd->add_option("--payload-bytes", seed.payload_bytes, "zero payload_bench model of this size");

  // session
  auto* session_cmd = app.add_subcommand("session", "training sessions")->require_subcommand(1);
  std::string session_id;
  std::uint64_t rounds = 0;
  std::string round_config;
  std::vector<std::string> round_sets;
  bool wait = false;
  auto* s_start = session_cmd->add_subcommand("start", "start a session on the staged task");
  s_start->add_option("--control", control, "control endpoint HOST:PORT")->required();
  s_start->add_option("--id", session_id, "session id")->required();
  s_start->add_option("--rounds", rounds, "number of rounds")->required();
  s_start->add_option("--round-config", round_config, "round config file");
  s_start->add_option("--set", round_sets, "round override key=value");
  s_start->add_flag("--wait", wait, "block until the session ends");
  auto* s_resume = session_cmd->add_subcommand("resume", "resume an interrupted session");
  s_resume->add_option("--control", control, "control endpoint HOST:PORT")->required();
  s_resume->add_option("--id", session_id, "session id")->required();
  s_resume->add_flag("--wait", wait, "block until the session ends");
  auto* s_abort = session_cmd->add_subcommand("abort", "stop the running session after its current round");
  s_abort->add_option("--control", control, "control endpoint HOST:PORT")->required();
  auto* s_status = session_cmd->add_subcommand("status", "trail head, latest report and session state");
  s_status->add_option("--control", control, "control endpoint HOST:PORT")->required();
  s_status->add_option("--id", session_id, "session id");

  // data
  auto* data_cmd = app.add_subcommand("data", "datasets")->require_subcommand(1);
  std::string input, out;
  std::size_t shards = 0;
  std::string mode = "iid";
  double alpha = 0.5;
  std::uint64_t data_seed = 1;
  auto* d_part = data_cmd->add_subcommand("partition", "split a CSV into shards");
  d_part->add_option("--input", input, "CSV file")->required();
  d_part->add_option("--shards", shards, "shard count")->required();
  d_part->add_option("--mode", mode, "iid or label_skew");
  d_part->add_option("--alpha", alpha, "Dirichlet concentration for label_skew");
  d_part->add_option("--seed", data_seed, "shuffle seed");
  d_part->add_option("--out", out, "output directory")->required();
  std::string synth_spec;
  auto* d_synth = data_cmd->add_subcommand("synth", "write a synthetic Gaussian-blob CSV");
  d_synth->add_option("--spec", synth_spec, "e.g. rows=10000,dims=20,classes=2,seed=1")->required();
  d_synth->add_option("--out", out, "CSV file")->required();

  // fault
  auto* fault_cmd = app.add_subcommand("fault", "fault injection")->require_subcommand(1);
  std::string fault_text;
  auto* f_inject = fault_cmd->add_subcommand("inject", "inject a fault into an in-process network");
  f_inject->add_option("--control", control, "control endpoint HOST:PORT")->required();
  f_inject->add_option("--fault", fault_text, "e.g. kill_combiner:combiner-1@mid_collection")->required();

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "benchmarks")->require_subcommand(1);
  BenchOptions bo;
  std::vector<double> sizes_mb{1};
  std::string bench_config, csv_path, summary_path;
  auto* b_run = bench_cmd->add_subcommand("run", "sweep payload size x combiners x clients");
  b_run->add_option("--label", bo.label, "run label");
  b_run->add_option("--sizes", sizes_mb, "payload sizes in MB")->delimiter(',');
  b_run->add_option("--combiners", bo.combiners, "combiner counts")->delimiter(',');
  b_run->add_option("--clients", bo.clients, "client counts")->delimiter(',');
  b_run->add_option("--rounds", bo.rounds, "rounds per point");
  b_run->add_option("--train-sleep-ms", bo.train_sleep_ms, "emulated client compute per update");
  b_run->add_option("--link-delay-ms", bo.base.link.delay_ms, "one-way delay per message");
  b_run->add_option("--link-bandwidth", bo.base.link.bandwidth_bytes_per_s, "bytes/s per link");
  b_run->add_option("--nic-bandwidth", bo.base.combiner_nic_bytes_per_s, "bytes/s per combiner NIC");
  b_run->add_flag("--parallel-pull", bo.base.reducer.parallel_pull, "reducer pulls partials concurrently");
  b_run->add_option("--config", bench_config, "network config supplying role templates");
  b_run->add_option("--out", csv_path, "CSV output (default stdout)");
  b_run->add_option("--summary", summary_path, "write the summary here as well");
  std::string svg_path;
  auto* b_plot = bench_cmd->add_subcommand("plot", "SVG of mean round time against payload");
  b_plot->add_option("--csv", csv_path, "bench CSV")->required();
  b_plot->add_option("--out", svg_path, "SVG file")->required();
  auto* b_summary = bench_cmd->add_subcommand("summary", "fit and ratios from a bench CSV");
  b_summary->add_option("--csv", csv_path, "bench CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_pattern("[%H:%M:%S.%e] [%l] %v");

  try {
    if (net_up_cmd->parsed()) return net_up(up);
    if (net_down_cmd->parsed()) {
      print_fields(control_call(control, control_request(ops::kShutdown, "operator")));
      return 0;
    }
    if (run_cmd->parsed()) return run_role(role, role_config);
    if (seed_init_cmd->parsed()) return seed_init(seed);
    if (s_start->parsed()) {
      wire::Fields cfg = round_config.empty() ? wire::Fields{} : load_config(round_config);
      const auto overrides = parse_sets(round_sets);
      for (const auto& [k, v] : overrides.entries()) cfg.set(k, v);
      auto req = control_request(ops::kStartSession, "operator");
      for (const auto& [k, v] : cfg.entries()) req.set(k, v);
      req.set("session_id", session_id);
      req.set("rounds", rounds);
      print_fields(control_call(control, req));
      return wait ? session_wait(control, session_id) : 0;
    }
    if (s_resume->parsed()) {
      auto req = control_request(ops::kResumeSession, "operator");
      req.set("session_id", session_id);
      print_fields(control_call(control, req));
      return wait ? session_wait(control, session_id) : 0;
    }
    if (s_abort->parsed()) {
      print_fields(control_call(control, control_request(ops::kAbort, "operator")));
      return 0;
    }
    if (s_status->parsed()) return session_status(control, session_id);
    if (d_part->parsed()) {
      const auto p = partition_dataset(load_csv(input), shards, parse_partition_mode(mode), alpha,
                                       data_seed);
      for (const auto& path : write_partition(p, out)) std::cout << path.string() << '\n';
      return 0;
    }
    if (d_synth->parsed()) {
      write_csv(out, make_synthetic(SyntheticSpec::parse(synth_spec)));
      return 0;
    }
    if (f_inject->parsed()) {
      Fault::parse(fault_text);  // reject malformed faults locally
      auto req = control_request(ops::kFault, "operator");
      req.set("fault", fault_text);
      print_fields(control_call(control, req));
      return 0;
    }
    if (b_run->parsed()) {
      if (!bench_config.empty()) {
        const auto link = bo.base.link;
        const auto nic = bo.base.combiner_nic_bytes_per_s;
        const bool parallel = bo.base.reducer.parallel_pull;
        bo.base = NetworkSpec::from_fields(load_config(bench_config));
        if (link.active()) bo.base.link = link;
        if (nic > 0) bo.base.combiner_nic_bytes_per_s = nic;
        bo.base.reducer.parallel_pull = bo.base.reducer.parallel_pull || parallel;
      }
      bo.payload_sizes = mb_to_bytes(sizes_mb);
      std::ofstream file;
      if (!csv_path.empty()) {
        file.open(csv_path);
        if (!file) throw ConfigError("cannot write " + csv_path);
      }
      std::ostream& csv = csv_path.empty() ? std::cout : file;
      csv << kBenchCsvHeader << '\n';
      const auto rows = run_bench(bo, [&](const BenchRow& r) {
        write_bench_csv(csv, std::span<const BenchRow>(&r, 1), false);
        csv.flush();
      });
      const auto summary = bench_summary(rows);
      (csv_path.empty() ? std::cerr : std::cout) << summary;
      if (!summary_path.empty()) std::ofstream(summary_path) << summary;
      for (const auto& r : rows) {
        if (!r.valid) return kExitRuntime;
      }
      return 0;
    }
    if (b_plot->parsed()) {
      std::ofstream svg(svg_path);
      svg << bench_plot_svg(read_rows(csv_path));
      if (!svg) throw Error("cannot write " + svg_path);
      return 0;
    }
    if (b_summary->parsed()) {
      std::cout << bench_summary(read_rows(csv_path));
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
