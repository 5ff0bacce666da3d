// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// Pairwise judging, Bradley-Terry/Elo fitting with a pinned anchor, and the
// toy metric suite.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cg3d/critic.hpp"
#include "cg3d/render.hpp"

namespace cg3d {

enum class Outcome { a, b, tie };

inline const char* to_string(Outcome o) {
  switch (o) {
    case Outcome::a: return "A";
    case Outcome::b: return "B";
    case Outcome::tie: return "tie";
  }
  return "?";
}

inline Outcome parse_outcome(const std::string& s) {
  if (s == "A") return Outcome::a;
  if (s == "B") return Outcome::b;
  if (s == "tie") return Outcome::tie;
  throw std::invalid_argument("unknown outcome: " + s);
}

struct Comparison {
  std::string method_a;
  std::string method_b;
  std::string prompt;
  Outcome outcome = Outcome::tie;
};

class ComparisonLedger {
 public:
  ComparisonLedger() = default;
  explicit ComparisonLedger(std::vector<std::string> methods) {
    for (auto& m : methods) register_method(std::move(m));
  }

  void register_method(std::string id) {
    if (id.empty() || id.find_first_of(",\n") != std::string::npos) {
      throw std::invalid_argument("invalid method id: '" + id + "'");
    }
    methods_.insert(std::move(id));
  }

  void add(Comparison c) {
    if (!methods_.count(c.method_a)) throw std::invalid_argument("unregistered method: " + c.method_a);
    if (!methods_.count(c.method_b)) throw std::invalid_argument("unregistered method: " + c.method_b);
    if (c.method_a == c.method_b) throw std::invalid_argument("self-comparison of " + c.method_a);
    if (c.prompt.find_first_of(",\n") != std::string::npos) {
      throw std::invalid_argument("prompt id may not contain ',' or newline");
    }
    records_.push_back(std::move(c));
  }

  const std::set<std::string>& methods() const { return methods_; }
  const std::vector<Comparison>& records() const { return records_; }
  bool empty() const { return records_.empty(); }

  std::string to_csv() const {
    std::string out = "method_a,method_b,prompt,outcome\n";
    for (const Comparison& c : records_) {
      out += c.method_a + "," + c.method_b + "," + c.prompt + "," + to_string(c.outcome) + "\n";
    }
    return out;
  }

  static ComparisonLedger from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "method_a,method_b,prompt,outcome") {
      throw std::invalid_argument("ledger CSV has an unexpected header");
    }
    ComparisonLedger ledger;
    std::vector<Comparison> rows;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ls(line);
      for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
      if (f.size() != 4) throw std::invalid_argument("ledger row needs 4 fields: " + line);
      ledger.register_method(f[0]);
      ledger.register_method(f[1]);
      rows.push_back({f[0], f[1], f[2], parse_outcome(f[3])});
    }
    for (Comparison& c : rows) ledger.add(std::move(c));
    return ledger;
  }

 private:
  std::set<std::string> methods_;
  std::vector<Comparison> records_;
};

// A judge scores one asset for a query; remote judges ignore the grid.
using Judge = std::function<CriticVerdict(const CriticQuery&, const ViewSet&, const DensityGrid&)>;

inline Judge toy_judge(const CriticConfig& cfg = {}) {
  return [cfg](const CriticQuery& q, const ViewSet& v, const DensityGrid& g) { return toy_critic_eval(q, v, g, cfg); };
}

struct Asset {
  ViewSet views;
  DensityGrid grid;
};

struct JudgeOptions {
  double delta = 1e-6;
  bool allow_ties = true;
};

struct JudgeResult {
  std::optional<Outcome> outcome;
  std::string skip_reason;
};

inline JudgeResult judge_pair(const Judge& judge, const Asset& a, const Asset& b, const CriticQuery& query,
                              const JudgeOptions& opt = {}) {
  double ra = 0.0, rb = 0.0;
  try {
    ra = judge(query, a.views, a.grid).reward_value();
    rb = judge(query, b.views, b.grid).reward_value();
  } catch (const std::exception& e) {
    return {std::nullopt, std::string("judge failed: ") + e.what()};
  }
  if (ra > rb + opt.delta) return {Outcome::a, {}};
  if (rb > ra + opt.delta) return {Outcome::b, {}};
  if (!opt.allow_ties) return {std::nullopt, "rewards within delta and ties are disabled"};
  return {Outcome::tie, {}};
}

struct EloTable {
  std::map<std::string, double> ratings;
  std::string anchor;
  static constexpr double kAnchorValue = 1000.0;
};

inline double elo_expected(double delta) { return 1.0 / (1.0 + std::pow(10.0, -delta / 400.0)); }

struct EloFitOptions {
  double tolerance = 1e-9;
  std::size_t max_sweeps = 1000000;
  double smoothing = 0.5;  // pseudo-wins added to each ordered compared pair
};

// Bradley-Terry maximum likelihood in Elo units. Ties count half a win to
// each side. Fitted by minorize-maximize coordinate updates on gamma = 10^(r/400).
inline EloTable elo_fit(const ComparisonLedger& ledger, const std::string& anchor, const EloFitOptions& opt = {}) {
  const std::vector<std::string> ids(ledger.methods().begin(), ledger.methods().end());
  const auto at = std::find(ids.begin(), ids.end(), anchor);
  if (at == ids.end()) throw std::invalid_argument("anchor method not in ledger: " + anchor);
  const std::size_t n = ids.size(), ai = static_cast<std::size_t>(at - ids.begin());
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < n; ++i) pos[ids[i]] = i;

  std::vector<double> wins(n * n, 0.0);  // wins[i * n + j]: i over j
  std::vector<bool> compared(n * n, false);
  for (const Comparison& c : ledger.records()) {
    const std::size_t i = pos[c.method_a], j = pos[c.method_b];
    compared[i * n + j] = compared[j * n + i] = true;
    if (c.outcome == Outcome::a) wins[i * n + j] += 1.0;
    if (c.outcome == Outcome::b) wins[j * n + i] += 1.0;
    if (c.outcome == Outcome::tie) wins[i * n + j] += 0.5, wins[j * n + i] += 0.5;
  }
  for (std::size_t k = 0; k < n * n; ++k)
    if (compared[k]) wins[k] += opt.smoothing;

  std::vector<bool> reached(n, false);
  std::vector<std::size_t> stack{ai};
  reached[ai] = true;
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    for (std::size_t j = 0; j < n; ++j)
      if (compared[i * n + j] && !reached[j]) reached[j] = true, stack.push_back(j);
  }
  std::string cut;
  for (std::size_t i = 0; i < n; ++i)
    if (!reached[i]) cut += (cut.empty() ? "" : ", ") + ids[i];
  if (!cut.empty()) throw std::invalid_argument("methods not connected to anchor " + anchor + ": " + cut);

  std::vector<double> total_wins(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) total_wins[i] += wins[i * n + j];

  std::vector<double> gamma(n, 1.0);
  auto gradient_norm = [&] {
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double expected = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double games = wins[i * n + j] + wins[j * n + i];
        if (games > 0.0) expected += games * gamma[i] / (gamma[i] + gamma[j]);
      }
      const double g = total_wins[i] - expected;  // d loglik / d log gamma_i
      sq += g * g;
    }
    return std::sqrt(sq);
  };
  std::size_t sweep = 0;
  while (gradient_norm() >= opt.tolerance) {
    if (++sweep > opt.max_sweeps) throw std::runtime_error("elo_fit did not converge");
    for (std::size_t i = 0; i < n; ++i) {
      double denom = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double games = wins[i * n + j] + wins[j * n + i];
        if (games > 0.0) denom += games / (gamma[i] + gamma[j]);
      }
      if (denom > 0.0) gamma[i] = total_wins[i] / denom;
    }
    const double ga = gamma[ai];
    for (double& g : gamma) g /= ga;
  }

  EloTable table;
  table.anchor = anchor;
  for (std::size_t i = 0; i < n; ++i) {
    table.ratings[ids[i]] = i == ai ? EloTable::kAnchorValue : EloTable::kAnchorValue + 400.0 * std::log10(gamma[i]);
  }
  return table;
}

struct Metrics {
  double content = 0.0;       // mean soft-IoU against the query's template
  double geometry = 0.0;      // view consistency x connectedness
  double connectedness = 0.0;
  double silhouette_variance = 0.0;  // population variance of per-view opacity area
};

inline Metrics metric_suite(const DensityGrid& grid, const CriticQuery& query, std::span<const Camera> cams,
                            const CriticConfig& cfg = {}) {
  const ViewSet views = render_views(grid.detach(), cams);
  Metrics m;
  m.content = content_score(views, make_template(query.template_id, cams)).item();
  m.connectedness = connectedness(grid.detach(), cfg).item();
  m.geometry = views.size() >= 2 ? geometry_score(views, grid.detach(), cfg).item() : m.connectedness;
  std::vector<double> areas;
  for (const Tensor& a : views.alphas) areas.push_back(mean(a).item());
  double mu = 0.0;
  for (double a : areas) mu += a;
  mu /= static_cast<double>(areas.size());
  for (double a : areas) m.silhouette_variance += (a - mu) * (a - mu);
  m.silhouette_variance /= static_cast<double>(areas.size());
  return m;
}

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// One Elo column per judged criterion, in the order given.
struct ReportColumn {
  std::string name;  // e.g. "Alignment", "Plausibility", "Overall"
  EloTable table;
};

struct Report {
  std::string csv;
  std::string summary;
};

inline Report build_report(const std::vector<ReportColumn>& columns) {
  Report r;
  r.csv = "method";
  for (const ReportColumn& c : columns) r.csv += "," + c.name;
  r.csv += "\n";
  std::set<std::string> methods;
  for (const ReportColumn& c : columns)
    for (const auto& [m, _] : c.table.ratings) methods.insert(m);
  std::string header = "Method";
  for (const ReportColumn& c : columns) header += " | " + c.name;
  r.summary = "Toy Elo ratings (anchor pinned at 1000.0)\n" + header + "\n";
  for (const std::string& m : methods) {
    std::string row = m, line = m;
    for (const ReportColumn& c : columns) {
      const auto it = c.table.ratings.find(m);
      const std::string v = it == c.table.ratings.end() ? "" : format_fixed(it->second, 1);
      row += "," + v;
      line += " | " + (v.empty() ? std::string("-") : v);
    }
    r.csv += row + "\n";
    r.summary += line + "\n";
  }
  return r;
}

inline void report_emit(const std::vector<ReportColumn>& columns, const std::filesystem::path& dir) {
  const Report r = build_report(columns);
  for (const auto& [name, text] : {std::pair{"elo.csv", &r.csv}, std::pair{"summary.txt", &r.summary}}) {
    std::ofstream f = open_for_write(dir / name);
    f << *text;
    if (!f) throw IoError("write failed: " + (dir / name).string());
  }
}

}  // namespace cg3d
