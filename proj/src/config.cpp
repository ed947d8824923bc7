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

#include "fedtier/config.hpp"

#include <fstream>
#include <sstream>

#include "fedtier/error.hpp"
#include "fedtier/remote_store.hpp"

namespace fedtier {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

wire::Fields parse_config(const std::string& text, const std::string& origin) {
  wire::Fields out;
  std::vector<std::string> problems;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    const auto where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) {
      problems.push_back(where + ": expected key = value");
      continue;
    }
    const auto key = trim(std::string_view(t).substr(0, eq));
    const auto value = trim(std::string_view(t).substr(eq + 1));
    if (out.has(key)) {
      problems.push_back(where + ": duplicate key '" + key + "'");
      continue;
    }
    try {
      out.set(key, value);
    } catch (const Error& e) {
      problems.push_back(where + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return out;
}

wire::Fields load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

void save_config(const std::filesystem::path& path, const wire::Fields& fields,
                 const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file " + path.string());
  if (!comment.empty()) out << "# " << comment << "\n";
  for (const auto& [k, v] : fields.entries()) out << k << " = " << v << "\n";
}

ConfigReader::ConfigReader(const wire::Fields& fields, std::string prefix)
    : fields_(fields), prefix_(std::move(prefix)) {}

const std::string* ConfigReader::find(const std::string& key) {
  const auto full = prefix_ + key;
  used_.insert(full);
  if (!fields_.has(full)) return nullptr;
  return &fields_.get(full);
}

std::string ConfigReader::str(const std::string& key, const std::string& fallback) {
  const auto* v = find(key);
  return v ? *v : fallback;
}

std::string ConfigReader::required(const std::string& key) {
  const auto* v = find(key);
  if (!v || v->empty()) {
    problems_.push_back("missing required key '" + prefix_ + key + "'");
    return {};
  }
  return *v;
}

std::uint64_t ConfigReader::u64(const std::string& key, std::uint64_t fallback,
                                std::uint64_t min) {
  const auto* v = find(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    if (!v->empty() && (*v)[0] == '-') throw std::invalid_argument("negative");
    const auto n = std::stoull(*v, &used);
    if (used != v->size()) throw std::invalid_argument("trailing");
    if (n < min) {
      problems_.push_back(prefix_ + key + " must be >= " + std::to_string(min));
      return fallback;
    }
    return n;
  } catch (const std::exception&) {
    problems_.push_back(prefix_ + key + ": not a non-negative integer: '" + *v + "'");
    return fallback;
  }
}

double ConfigReader::real(const std::string& key, double fallback, double min, double max) {
  const auto* v = find(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const double d = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument("trailing");
    if (!(d >= min && d <= max)) {
      problems_.push_back(prefix_ + key + " must be in [" + format_number(min) + ", " +
                          format_number(max) + "]");
      return fallback;
    }
    return d;
  } catch (const std::exception&) {
    problems_.push_back(prefix_ + key + ": not a number: '" + *v + "'");
    return fallback;
  }
}

double ConfigReader::positive(const std::string& key, double fallback) {
  const double d = real(key, fallback, 0.0, 1e12);
  if (d <= 0) {
    problems_.push_back(prefix_ + key + " must be > 0");
    return fallback;
  }
  return d;
}

bool ConfigReader::flag(const std::string& key, bool fallback) {
  const auto* v = find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  problems_.push_back(prefix_ + key + ": not a boolean: '" + *v + "'");
  return fallback;
}

net::Endpoint ConfigReader::endpoint(const std::string& key, const net::Endpoint& fallback) {
  const auto* v = find(key);
  if (!v) return fallback;
  try {
    return net::Endpoint::parse(*v);
  } catch (const std::exception& e) {
    problems_.push_back(prefix_ + key + ": " + e.what());
    return fallback;
  }
}

std::string ConfigReader::choice(const std::string& key, const std::string& fallback,
                                 const std::vector<std::string>& allowed) {
  const auto v = str(key, fallback);
  for (const auto& a : allowed) {
    if (a == v) return v;
  }
  std::string list;
  for (const auto& a : allowed) list += (list.empty() ? "" : "|") + a;
  problems_.push_back(prefix_ + key + " must be one of " + list);
  return fallback;
}

wire::Fields ConfigReader::section(const std::string& prefix) {
  wire::Fields out;
  const auto full = prefix_ + prefix;
  for (const auto& [k, v] : fields_.entries()) {
    if (k.rfind(full, 0) == 0) {
      used_.insert(k);
      out.set(k.substr(full.size()), v);
    }
  }
  return out;
}

void ConfigReader::finish(const std::string& what) {
  for (const auto& [k, v] : fields_.entries()) {
    if (k.rfind(prefix_, 0) == 0 && !used_.contains(k)) {
      problems_.push_back("unknown key '" + k + "'");
    }
  }
  if (problems_.empty()) return;
  std::string msg = "invalid " + what + " configuration:";
  for (const auto& p : problems_) msg += "\n  " + p;
  throw ConfigError(msg);
}

StorePtr open_store(const std::string& spec, const std::string& node) {
  if (spec.rfind("tcp:", 0) == 0) {
    return std::make_shared<RemoteStore>(net::Endpoint::parse(spec.substr(4)), node);
  }
  const auto path = spec.rfind("dir:", 0) == 0 ? spec.substr(4) : spec;
  if (path.empty()) throw ConfigError("empty store location");
  return std::make_shared<FsStore>(path);
}

std::string format_number(double s) {
  std::ostringstream o;
  o << s;
  return o.str();
}

}  // namespace fedtier
