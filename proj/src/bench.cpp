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


#include "fedtier/bench.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <tuple>

#include "fedtier/config.hpp"

namespace fedtier {

namespace {

using SeriesKey = std::pair<std::size_t, std::size_t>;  // (combiners, clients)

double mean(const std::vector<double>& v) {
  return v.empty() ? 0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::uint64_t traffic() {
  auto& t = net::TrafficStats::instance();
  return t.get("down") + t.get("up") + t.get("pull");
}

// Mean round time per (C, M, payload), in row order of first appearance.
std::map<std::tuple<std::size_t, std::size_t, std::uint64_t>, std::vector<double>> group(
    std::span<const BenchRow> rows) {
  std::map<std::tuple<std::size_t, std::size_t, std::uint64_t>, std::vector<double>> g;
  for (const auto& r : rows) g[{r.combiners, r.clients, r.payload_bytes}].push_back(r.round_s);
  return g;
}

std::vector<BenchRow> run_point(const BenchOptions& opts, std::uint64_t payload,
                                std::size_t combiners, std::size_t clients,
                                const std::function<void(const BenchRow&)>& on_row) {
  if (payload % 4 != 0) throw ConfigError("payload size must be a multiple of 4 bytes");
  auto spec = opts.base;
  spec.combiners = combiners;
  spec.clients = clients;
  spec.client_data = nullptr;
  spec.client_data_source.clear();
  Network net(spec);
  if (!net.wait_ready(std::chrono::milliseconds(
          static_cast<std::int64_t>(opts.ready_timeout_seconds * 1000)))) {
    throw Error("bench network did not become ready");
  }
  TaskSpec task;
  task.executor_name = "payload_bench";
  task.hyperparameters.set("payload_bytes", payload);
  if (opts.train_sleep_ms > 0) task.hyperparameters.set("train_sleep_ms", opts.train_sleep_ms);
  // A zero payload still needs one weight to form a model.
  net.seed(ParameterSet(std::max<std::uint64_t>(payload / 4, 1)), task);

  std::vector<BenchRow> rows;
  for (std::size_t i = 0; i < opts.rounds; ++i) {
    RoundConfig cfg;
    cfg.round_id = i + 1;
    cfg.deadline_seconds = opts.round_deadline_seconds;
    cfg.task = task;
    const auto before = traffic();
    const auto report = net.controller().run_round(cfg);
    BenchRow row;
    row.label = opts.label;
    row.round_id = report.round_id;
    row.payload_bytes = payload;
    row.combiners = combiners;
    row.clients = clients;
    row.round_s = report.total_round_seconds;
    for (const auto& [id, o] : report.outcomes) row.combiner_s = std::max(row.combiner_s, o.round_seconds);
    row.reduce_s = report.reduce.total;
    row.reduce = report.reduce;
    row.bytes_moved = traffic() - before;
    row.valid = report.valid;
    if (!row.valid) spdlog::warn("bench round {} invalid: {}", row.round_id, report.failure);
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchOptions& opts,
                                const std::function<void(const BenchRow&)>& on_row) {
  if (opts.rounds < 1) throw ConfigError("bench needs at least one round per point");
  if (opts.payload_sizes.empty() || opts.combiners.empty() || opts.clients.empty()) {
    throw ConfigError("bench needs payload sizes, combiner counts and client counts");
  }
  std::vector<BenchRow> all;
  for (auto c : opts.combiners) {
    for (auto m : opts.clients) {
      for (auto p : opts.payload_sizes) {
        spdlog::info("bench point: payload {} B, {} combiners, {} clients", p, c, m);
        auto rows = run_point(opts, p, c, m, on_row);
        all.insert(all.end(), rows.begin(), rows.end());
      }
    }
  }
  return all;
}

std::uint64_t expected_bytes_moved(std::uint64_t payload_bytes, std::size_t combiners,
                                   std::size_t clients) {
  const std::uint64_t client_model = payload_bytes + kModelHeaderBytes;
  const std::uint64_t partial = 4 * payload_bytes + kModelHeaderBytes;
  return 2 * clients * client_model + combiners * partial;
}

void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows, bool header) {
  if (header) out << kBenchCsvHeader << '\n';
  for (const auto& r : rows) {
    out << r.label << ',' << r.round_id << ',' << r.payload_bytes << ',' << r.combiners << ','
        << r.clients << ',' << format_number(r.round_s) << ',' << format_number(r.combiner_s)
        << ',' << format_number(r.reduce_s) << ',' << r.bytes_moved << '\n';
  }
}

std::vector<BenchRow> read_bench_csv(std::istream& in) {
  std::vector<BenchRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == kBenchCsvHeader) continue;
    const auto cols = split_list(line);
    if (cols.size() != 9) {
      throw ConfigError("bench csv line " + std::to_string(lineno) + ": expected 9 columns");
    }
    try {
      BenchRow r;
      r.label = cols[0];
      r.round_id = std::stoull(cols[1]);
      r.payload_bytes = std::stoull(cols[2]);
      r.combiners = std::stoull(cols[3]);
      r.clients = std::stoull(cols[4]);
      r.round_s = std::stod(cols[5]);
      r.combiner_s = std::stod(cols[6]);
      r.reduce_s = std::stod(cols[7]);
      r.bytes_moved = std::stoull(cols[8]);
      rows.push_back(r);
    } catch (const std::exception&) {
      throw ConfigError("bench csv line " + std::to_string(lineno) + ": bad number");
    }
  }
  return rows;
}

LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("fit needs at least two paired points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0) throw Error("fit needs at least two distinct x values");
  LinearFit f;
  f.points = x.size();
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sse = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.intercept + f.slope * x[i]);
    sse += e * e;
  }
  f.r2 = syy == 0 ? (sse == 0 ? 1.0 : 0.0) : 1.0 - sse / syy;
  return f;
}

std::string bench_summary(std::span<const BenchRow> rows) {
  std::ostringstream out;
  const auto g = group(rows);
  out << "points (combiners, clients, payload_bytes: mean round_s over rounds)\n";
  for (const auto& [key, v] : g) {
    const auto& [c, m, p] = key;
    const double t = mean(v);
    out << "  C=" << c << " M=" << m << " payload=" << p << ": " << format_number(t) << " s";
    if (t > 0 && p > 0) out << ", " << format_number(static_cast<double>(p) * m / t / 1e6) << " MB/s client-side";
    out << " (" << v.size() << " rounds)\n";
  }

  std::map<SeriesKey, std::pair<std::vector<double>, std::vector<double>>> series;
  for (const auto& [key, v] : g) {
    const auto& [c, m, p] = key;
    series[{c, m}].first.push_back(static_cast<double>(p) / 1e6);
    series[{c, m}].second.push_back(mean(v));
  }
  out << "fit of mean round_s against payload MB\n";
  for (const auto& [key, xy] : series) {
    if (xy.first.size() < 2) continue;
    const auto f = fit_line(xy.first, xy.second);
    out << "  C=" << key.first << " M=" << key.second << ": slope " << format_number(f.slope)
        << " s/MB, intercept " << format_number(f.intercept) << " s, R2 " << format_number(f.r2)
        << '\n';
  }

  // Scaling ratios against the smallest count at the same other coordinates.
  auto ratios = [&](const char* what, auto key_of, auto count_of) {
    std::map<std::pair<std::size_t, std::uint64_t>, std::map<std::size_t, double>> by;
    for (const auto& [key, v] : g) by[key_of(key)][count_of(key)] = mean(v);
    bool any = false;
    for (const auto& [fixed, counts] : by) {
      if (counts.size() < 2) continue;
      if (!any) out << what << " scaling (mean round_s ratio to smallest count)\n";
      any = true;
      const auto [base_n, base_t] = *counts.begin();
      for (const auto& [n, t] : counts) {
        out << "  at " << fixed.first << "/" << fixed.second << ": " << n << " vs " << base_n
            << " -> " << format_number(base_t > 0 ? t / base_t : 0) << '\n';
      }
    }
  };
  ratios(
      "client", [](const auto& k) { return std::pair{std::get<0>(k), std::get<2>(k)}; },
      [](const auto& k) { return std::get<1>(k); });
  ratios(
      "combiner", [](const auto& k) { return std::pair{std::get<1>(k), std::get<2>(k)}; },
      [](const auto& k) { return std::get<0>(k); });

  std::size_t flagged = 0;
  for (const auto& r : rows) {
    if (r.valid) continue;
    if (flagged++ == 0) out << "flagged points (invalid rounds, rerun advised)\n";
    out << "  C=" << r.combiners << " M=" << r.clients << " payload=" << r.payload_bytes
        << " round " << r.round_id << '\n';
  }
  for (const auto& r : rows) {
    const auto expect = expected_bytes_moved(r.payload_bytes, r.combiners, r.clients);
    if (r.valid && r.bytes_moved != expect) {
      out << "note: round " << r.round_id << " moved " << r.bytes_moved << " bytes, expected "
          << expect << '\n';
    }
  }
  return out.str();
}

std::string bench_plot_svg(std::span<const BenchRow> rows) {
  const double w = 640, h = 420, left = 60, right = 160, top = 20, bottom = 50;
  std::map<SeriesKey, std::vector<std::pair<double, double>>> series;
  double max_x = 0, max_y = 0;
  for (const auto& [key, v] : group(rows)) {
    const auto& [c, m, p] = key;
    const double x = static_cast<double>(p) / 1e6, y = mean(v);
    series[{c, m}].emplace_back(x, y);
    max_x = std::max(max_x, x);
    max_y = std::max(max_y, y);
  }
  if (max_x <= 0) max_x = 1;
  if (max_y <= 0) max_y = 1;
  auto px = [&](double x) { return left + x / max_x * (w - left - right); };
  auto py = [&](double y) { return h - bottom - y / max_y * (h - top - bottom); };
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                 "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<line x1=\"" << left << "\" y1=\"" << py(0) << "\" x2=\"" << px(max_x) << "\" y2=\""
    << py(0) << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << left << "\" y1=\"" << py(0) << "\" x2=\"" << left << "\" y2=\""
    << py(max_y) << "\" stroke=\"black\"/>\n"
    << "<text x=\"" << px(max_x / 2) << "\" y=\"" << h - 15
    << "\" text-anchor=\"middle\">payload (MB)</text>\n"
    << "<text x=\"15\" y=\"" << py(max_y / 2) << "\" transform=\"rotate(-90 15 " << py(max_y / 2)
    << ")\" text-anchor=\"middle\">mean round time (s)</text>\n"
    << "<text x=\"" << left - 5 << "\" y=\"" << py(max_y) + 4 << "\" text-anchor=\"end\">"
    << format_number(max_y) << "</text>\n"
    << "<text x=\"" << px(max_x) << "\" y=\"" << py(0) + 16 << "\" text-anchor=\"middle\">"
    << format_number(max_x) << "</text>\n";
  std::size_t i = 0;
  for (auto& [key, pts] : series) {
    std::sort(pts.begin(), pts.end());
    const char* color = colors[i % 8];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : pts) s << px(x) << ',' << py(y) << ' ';
    s << "\"/>\n";
    for (const auto& [x, y] : pts) {
      s << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << color
        << "\"/>\n";
    }
    s << "<text x=\"" << w - right + 10 << "\" y=\"" << top + 16 * (i + 1) << "\" fill=\""
      << color << "\">C=" << key.first << " M=" << key.second << "</text>\n";
    ++i;
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace fedtier
