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


#include "fedtier/harness.hpp"

#include <spdlog/spdlog.h>
#include <stdlib.h>

#include <fstream>
#include <thread>

#include "fedtier/config.hpp"

namespace fedtier {
namespace {

namespace fs = std::filesystem;
using namespace std::chrono_literals;

void put_section(wire::Fields& into, const wire::Fields& from, const std::string& prefix) {
  for (const auto& [k, v] : from.entries()) into.set(prefix + k, v);
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

fs::path make_temp_dir() {
  std::string tmpl = (fs::temp_directory_path() / "fedtier-net-XXXXXX").string();
  if (::mkdtemp(tmpl.data()) == nullptr) throw Error("cannot create a temporary store directory");
  return tmpl;
}

std::string combiner_name(std::size_t i) { return "combiner-" + std::to_string(i); }
std::string client_name(std::size_t i) { return "client-" + std::to_string(i); }
std::string reducer_name(std::size_t i) { return "reducer-" + std::to_string(i); }

}  // namespace

// ---- NetworkSpec -------------------------------------------------------------

void NetworkSpec::check() const {
  std::vector<std::string> problems;
  if (combiners < 1) problems.emplace_back("combiners must be at least 1");
  if (clients < 1) problems.emplace_back("clients must be at least 1");
  if (link.delay_ms < 0 || link.bandwidth_bytes_per_s < 0) {
    problems.emplace_back("link profile must not be negative");
  }
  if (combiner_nic_bytes_per_s < 0) problems.emplace_back("combiner_nic_bandwidth must not be negative");
  if (!client_data && !client_data_source.empty() &&
      client_data_source.rfind("synthetic:", 0) != 0) {
    for (std::size_t i = 0; i < clients; ++i) {
      auto path = client_source(i);
      if (path.rfind("csv:", 0) == 0) path = path.substr(4);
      if (!fs::exists(path)) problems.push_back("missing data path " + path);
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid network spec:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

std::string NetworkSpec::client_source(std::size_t i) const {
  return replace_all(client_data_source, "{i}", std::to_string(i));
}

wire::Fields NetworkSpec::to_fields() const {
  wire::Fields f;
  f.set("combiners", static_cast<std::uint64_t>(combiners));
  f.set("clients", static_cast<std::uint64_t>(clients));
  f.set("passive_reducers", static_cast<std::uint64_t>(passive_reducers));
  if (!store_dir.empty()) f.set("store", store_dir.string());
  if (!client_data_source.empty()) f.set("client_data", client_data_source);
  f.set("link_delay_ms", link.delay_ms);
  f.set("link_bandwidth", link.bandwidth_bytes_per_s);
  f.set("combiner_nic_bandwidth", combiner_nic_bytes_per_s);
  put_section(f, controller.to_fields(), "controller.");
  auto c = combiner.to_fields();
  put_section(f, c, "combiner.");
  put_section(f, reducer.to_fields(), "reducer.");
  auto a = agent.to_fields();
  put_section(f, a, "agent.");
  return f;
}

NetworkSpec NetworkSpec::from_fields(const wire::Fields& f) {
  ConfigReader r(f);
  NetworkSpec s;
  s.combiners = r.u64("combiners", 1, 1);
  s.clients = r.u64("clients", 1, 1);
  s.passive_reducers = r.u64("passive_reducers", 0);
  s.store_dir = r.str("store", "");
  s.client_data_source = r.str("client_data", "");
  s.link.delay_ms = r.real("link_delay_ms", 0, 0, 1e6);
  s.link.bandwidth_bytes_per_s = r.real("link_bandwidth", 0, 0, 1e15);
  s.combiner_nic_bytes_per_s = r.real("combiner_nic_bandwidth", 0, 0, 1e15);
  auto controller = r.section("controller.");
  auto combiner = r.section("combiner.");
  auto reducer = r.section("reducer.");
  auto agent = r.section("agent.");
  // Per-role readers report their own problems; collect them with ours.
  auto nested = [&r](const char* what, auto&& parse) {
    try {
      parse();
    } catch (const ConfigError& e) {
      r.problem(std::string(what) + ": " + e.what());
    }
  };
  nested("controller", [&] { s.controller = ControllerConfig::from_fields(controller); });
  nested("combiner", [&] { s.combiner = CombinerConfig::from_fields(combiner); });
  nested("reducer", [&] { s.reducer = ReducerConfig::from_fields(reducer); });
  if (!agent.has("client_id")) agent.set("client_id", "client-0");
  if (!agent.has("discovery")) agent.set("discovery", "127.0.0.1:0");
  nested("agent", [&] { s.agent = AgentConfig::from_fields(agent); });
  r.finish("network");
  s.check();
  return s;
}

// ---- Fault -------------------------------------------------------------------

Fault Fault::parse(const std::string& text) {
  Fault f;
  std::string body = text;
  if (auto at = body.rfind('@'); at != std::string::npos) {
    f.at = parse_phase(body.substr(at + 1));
    body = body.substr(0, at);
  }
  const auto colon = body.find(':');
  if (colon == std::string::npos) throw ConfigError("fault needs KIND:TARGET: " + text);
  const auto kind = body.substr(0, colon);
  const auto args = split_list(body.substr(colon + 1));
  if (kind == "kill_combiner") {
    f.kind = Kind::kKillCombiner;
  } else if (kind == "kill_reducer") {
    f.kind = Kind::kKillReducer;
  } else if (kind == "drop_client") {
    f.kind = Kind::kDropClient;
  } else if (kind == "partition_link") {
    f.kind = Kind::kPartitionLink;
  } else {
    throw ConfigError("unknown fault kind '" + kind + "'");
  }
  if (f.kind == Kind::kPartitionLink) {
    if (args.size() != 3) throw ConfigError("partition_link needs A,B,SECONDS: " + text);
    f.target = args[0];
    f.peer = args[1];
    try {
      f.seconds = std::stod(args[2]);
    } catch (const std::exception&) {
      throw ConfigError("bad partition duration in " + text);
    }
    if (!(f.seconds > 0)) throw ConfigError("partition duration must be positive: " + text);
  } else {
    if (args.size() != 1 || args[0].empty()) throw ConfigError("fault needs one target: " + text);
    f.target = args[0];
  }
  return f;
}

std::string Fault::str() const {
  std::string s;
  switch (kind) {
    case Kind::kKillCombiner: s = "kill_combiner:" + target; break;
    case Kind::kKillReducer: s = "kill_reducer:" + target; break;
    case Kind::kDropClient: s = "drop_client:" + target; break;
    case Kind::kPartitionLink:
      s = "partition_link:" + target + "," + peer + "," + format_number(seconds);
      break;
  }
  if (at) s += std::string("@") + to_string(*at);
  return s;
}

// ---- Network -----------------------------------------------------------------

Network::Network(NetworkSpec spec) : spec_(std::move(spec)) {
  spec_.check();
  auto& shaper = net::Shaper::instance();
  shaper.reset();
  if (spec_.link.active()) shaper.set_default_link(spec_.link);
  if (spec_.combiner_nic_bytes_per_s > 0) {
    for (std::size_t i = 0; i < spec_.combiners; ++i) {
      shaper.set_node_bandwidth(combiner_name(i), spec_.combiner_nic_bytes_per_s);
    }
  }
  net::TrafficStats::instance().reset();

  store_dir_ = spec_.store_dir;
  if (store_dir_.empty()) {
    store_dir_ = make_temp_dir();
    owns_store_dir_ = true;
  }
  try {
    store_ = std::make_shared<FsStore>(store_dir_);
    discovery_ = std::make_shared<Discovery>(store_, spec_.controller.discovery);
    controller_ = std::make_shared<Controller>(spec_.controller, store_, discovery_);
    controller_->set_phase_hook([this](Phase p, const RoundConfig& cfg) { on_phase(p, cfg); });
    control_ = std::make_unique<ControlServer>(controller_, spec_.controller.control_bind,
                                               spec_.controller.advertise_host);
    control_->set_fault_handler([this](const wire::Fields& f) {
      inject(Fault::parse(f.get("fault")));
    });

    for (std::size_t i = 0; i <= spec_.passive_reducers; ++i) {
      auto cfg = spec_.reducer;
      cfg.id = reducer_name(i);
      reducers_.push_back(std::make_unique<Reducer>(cfg, store_));
    }

    for (std::size_t i = 0; i < spec_.combiners; ++i) {
      auto cfg = spec_.combiner;
      cfg.id = combiner_name(i);
      cfg.discovery = control_->endpoint();
      combiners_.push_back(std::make_unique<Combiner>(cfg));
    }
    // Agents arriving before the first report would only back off.
    const auto until = std::chrono::steady_clock::now() + 10s;
    while (discovery_->up_combiners(WallClock::now()).size() < spec_.combiners &&
           std::chrono::steady_clock::now() < until) {
      std::this_thread::sleep_for(10ms);
    }

    for (std::size_t i = 0; i < spec_.clients; ++i) {
      auto cfg = spec_.agent;
      cfg.client_id = client_name(i);
      cfg.discovery = control_->endpoint();
      std::shared_ptr<const LocalDataset> data;
      if (spec_.client_data) {
        data = spec_.client_data(i);
      } else if (!spec_.client_data_source.empty()) {
        cfg.data = spec_.client_source(i);
      }
      agents_.push_back(std::make_unique<Agent>(cfg, std::move(data)));
      dropped_.push_back(false);
    }
    for (auto& a : agents_) a->start();
  } catch (...) {
    down();
    throw;
  }
  spdlog::info("network up: {} combiners, {} clients, {} reducers, store {}", spec_.combiners,
               spec_.clients, reducers_.size(), store_dir_.string());
}

Network::~Network() { down(); }

void Network::down() {
  if (down_) return;
  down_ = true;
  for (auto& a : agents_) a->stop();
  for (auto& c : combiners_) c->stop();
  for (auto& r : reducers_) r->stop();
  if (control_) control_->stop();
  net::Shaper::instance().reset();
  if (owns_store_dir_) {
    std::error_code ec;
    fs::remove_all(store_dir_, ec);
  }
}

bool Network::wait_ready(std::chrono::milliseconds timeout) {
  const auto until = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    std::size_t expected_clients = 0;
    bool agents_ok = true;
    {
      std::lock_guard lock(mu_);
      for (std::size_t i = 0; i < agents_.size(); ++i) {
        if (dropped_[i]) continue;
        ++expected_clients;
        agents_ok = agents_ok && agents_[i]->connected();
      }
    }
    std::size_t live_combiners = 0;
    std::size_t served = 0;
    for (auto& c : combiners_) {
      if (c->stopped()) continue;
      ++live_combiners;
      served += c->live_clients();
    }
    const bool ready = agents_ok && served == expected_clients &&
                       discovery_->up_combiners(WallClock::now()).size() >= live_combiners &&
                       active_reducer() != nullptr;
    if (ready) return true;
    if (std::chrono::steady_clock::now() >= until) return false;
    std::this_thread::sleep_for(20ms);
  }
}

Combiner& Network::combiner(const std::string& id) {
  for (auto& c : combiners_) {
    if (c->id() == id) return *c;
  }
  throw NotFound("no combiner " + id);
}

Agent& Network::agent(const std::string& id) {
  for (auto& a : agents_) {
    if (a->id() == id) return *a;
  }
  throw NotFound("no client " + id);
}

Reducer* Network::active_reducer() {
  for (auto& r : reducers_) {
    if (!r->stopped() && r->active()) return r.get();
  }
  return nullptr;
}

TrailEntry Network::seed(const ParameterSet& model, const TaskSpec& task) {
  const auto bytes = serialize_params(model, WeightEncoding::kFloat32);
  return controller_->init_seed(bytes, task);
}

void Network::check_target(const Fault& f) {
  switch (f.kind) {
    case Fault::Kind::kKillCombiner: combiner(f.target); break;
    case Fault::Kind::kDropClient: agent(f.target); break;
    case Fault::Kind::kKillReducer:
      if (f.target != "active") {
        bool found = false;
        for (auto& r : reducers_) found = found || r->id() == f.target;
        if (!found) throw NotFound("no reducer " + f.target);
      }
      break;
    case Fault::Kind::kPartitionLink:
      if (f.target.empty() || f.peer.empty() || f.target == f.peer) {
        throw ConfigError("partition_link needs two distinct nodes");
      }
      break;
  }
}

void Network::inject(const Fault& f) {
  check_target(f);
  if (f.at) {
    std::lock_guard lock(mu_);
    armed_.push_back(f);
    spdlog::info("fault armed: {}", f.str());
    return;
  }
  apply(f);
}

void Network::apply(const Fault& f) {
  spdlog::warn("fault: {}", f.str());
  switch (f.kind) {
    case Fault::Kind::kKillCombiner:
      combiner(f.target).kill();
      break;
    case Fault::Kind::kKillReducer: {
      Reducer* victim = nullptr;
      if (f.target == "active") {
        victim = active_reducer();
        if (victim == nullptr) throw NotFound("no active reducer");
      } else {
        for (auto& r : reducers_) {
          if (r->id() == f.target) victim = r.get();
        }
      }
      victim->kill();
      break;
    }
    case Fault::Kind::kDropClient: {
      auto& a = agent(f.target);
      {
        std::lock_guard lock(mu_);
        for (std::size_t i = 0; i < agents_.size(); ++i) {
          if (agents_[i].get() == &a) dropped_[i] = true;
        }
      }
      a.drop();
      break;
    }
    case Fault::Kind::kPartitionLink:
      net::Shaper::instance().partition(
          f.target, f.peer,
          std::chrono::duration_cast<net::Shaper::Clock::duration>(
              std::chrono::duration<double>(f.seconds)));
      break;
  }
  std::lock_guard lock(mu_);
  applied_.push_back(f);
}

std::vector<Fault> Network::applied_faults() const {
  std::lock_guard lock(mu_);
  return applied_;
}

void Network::set_phase_hook(Controller::PhaseHook hook) {
  std::lock_guard lock(mu_);
  extra_hook_ = std::move(hook);
}

void Network::on_phase(Phase p, const RoundConfig& cfg) {
  std::vector<Fault> due;
  Controller::PhaseHook extra;
  {
    std::lock_guard lock(mu_);
    for (auto it = armed_.begin(); it != armed_.end();) {
      if (it->at == p) {
        due.push_back(*it);
        it = armed_.erase(it);
      } else {
        ++it;
      }
    }
    extra = extra_hook_;
  }
  for (const auto& f : due) apply(f);
  if (extra) extra(p, cfg);
}

// ---- multi-process deployment -------------------------------------------------

std::vector<fs::path> emit_deployment(const NetworkSpec& spec, const fs::path& dir,
                                      const std::string& host, std::uint16_t base_port,
                                      const std::string& binary) {
  spec.check();
  fs::create_directories(dir);
  std::vector<fs::path> written;
  std::uint32_t port = base_port;
  auto next = [&]() -> net::Endpoint {
    if (port > 65535) throw ConfigError("port range exhausted");
    return {host, static_cast<std::uint16_t>(port++)};
  };
  auto write = [&](const std::string& name, const wire::Fields& f, const std::string& role) {
    const auto path = dir / (name + ".conf");
    save_config(path, f, role + " " + name);
    written.push_back(path);
  };

  const auto store_ep = next();
  const auto store_root = spec.store_dir.empty() ? fs::absolute(dir) / "store" : spec.store_dir;
  write("store", wire::Fields{{"bind", store_ep.str()}, {"root", store_root.string()}}, "store");
  const std::string store_spec = "tcp:" + store_ep.str();

  auto controller = spec.controller;
  controller.control_bind = next();
  auto cf = controller.to_fields();
  cf.set("store", store_spec);
  write("controller", cf, "controller");

  for (std::size_t i = 0; i <= spec.passive_reducers; ++i) {
    auto r = spec.reducer;
    r.id = reducer_name(i);
    r.control_bind = next();
    auto f = r.to_fields();
    f.set("store", store_spec);
    write(r.id, f, "reducer");
  }
  for (std::size_t i = 0; i < spec.combiners; ++i) {
    auto c = spec.combiner;
    c.id = combiner_name(i);
    c.client_bind = next();
    c.control_bind = next();
    c.discovery = controller.control_bind;
    write(c.id, c.to_fields(), "combiner");
  }
  for (std::size_t i = 0; i < spec.clients; ++i) {
    auto a = spec.agent;
    a.client_id = client_name(i);
    a.discovery = controller.control_bind;
    a.data = spec.client_data_source.empty() ? a.data : spec.client_source(i);
    write(a.client_id, a.to_fields(), "client");
  }

  // One line per process; on separate hosts run each line where it belongs.
  const auto script = dir / "start.sh";
  std::ofstream out(script);
  out << "#!/bin/sh\n# Starts every component of the network in the background.\nset -e\n"
      << "cd \"$(dirname \"$0\")\"\n";
  auto line = [&](const std::string& role, const std::string& name) {
    out << binary << " run " << role << " --config " << name << ".conf > " << name
        << ".log 2>&1 &\necho $! >> pids\n";
  };
  out << ": > pids\n";
  line("store", "store");
  out << "sleep 1\n";
  line("controller", "controller");
  for (std::size_t i = 0; i <= spec.passive_reducers; ++i) line("reducer", reducer_name(i));
  out << "sleep 1\n";
  for (std::size_t i = 0; i < spec.combiners; ++i) line("combiner", combiner_name(i));
  out << "sleep 1\n";
  for (std::size_t i = 0; i < spec.clients; ++i) line("client", client_name(i));
  out.close();
  if (!out) throw Error("cannot write " + script.string());
  fs::permissions(script, fs::perms::owner_exec | fs::perms::group_exec | fs::perms::others_exec,
                  fs::perm_options::add);
  written.push_back(script);
  return written;
}

}  // namespace fedtier
