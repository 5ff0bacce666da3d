// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// Sectioned key=value run configuration:
//
//   [section]
//   key = value
//
// Every key has a schema entry; unknown sections or keys are rejected.
// Serialization writes every key in schema order, so parse(serialize(c)) == c.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cg3d/critic.hpp"
#include "cg3d/dataset.hpp"
#include "cg3d/diffusion.hpp"
#include "cg3d/guidance.hpp"

namespace cg3d {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ValueKind { integer, real, boolean, text };

struct ConfigKey {
  const char* section;
  const char* key;
  ValueKind kind;
  const char* default_value;
};

inline const std::vector<ConfigKey>& config_schema() {
  using K = ValueKind;
  static const std::vector<ConfigKey> schema = {
      {"run", "seed", K::integer, "0"},
      {"run", "out_dir", K::text, "out"},
      {"run", "jobs", K::integer, "1"},

      {"corpus", "dir", K::text, "corpus"},
      {"corpus", "concepts", K::text, "sphere,cube,two_spheres"},
      {"corpus", "samples_per_concept", K::integer, "30"},
      {"corpus", "resolution", K::integer, "32"},
      {"corpus", "views", K::integer, "4"},
      {"corpus", "elevation_deg", K::real, "15"},
      {"corpus", "image_size", K::integer, "64"},
      {"corpus", "samples_per_ray", K::integer, "64"},
      {"corpus", "split_fraction", K::real, "0"},
      {"corpus", "split_gap", K::real, "0.3"},

      {"schedule", "train_steps", K::integer, "1000"},
      {"schedule", "sample_steps", K::integer, "50"},
      {"schedule", "sigma_min", K::real, "0.01"},
      {"schedule", "sigma_max", K::real, "2"},

      {"train", "checkpoint", K::text, "prior.cg3d"},
      {"train", "steps", K::integer, "2000"},
      {"train", "batch_size", K::integer, "16"},
      {"train", "learning_rate", K::real, "0"},
      {"train", "momentum", K::real, "0.9"},
      {"train", "label_dropout", K::real, "0.1"},
      {"train", "hidden", K::integer, "0"},

      {"guidance", "lambda_vlm_init", K::real, "10"},
      {"guidance", "lambda_vlm_final", K::real, "0.1"},
      {"guidance", "anneal_shape", K::text, "exponential"},
      {"guidance", "total_steps", K::integer, "500"},
      {"guidance", "lambda_ttg", K::real, "0.5"},
      {"guidance", "views_per_reward", K::integer, "4"},
      {"guidance", "reward_every", K::integer, "5"},
      {"guidance", "learning_rate", K::real, "0.1"},

      {"critic", "template", K::text, "sphere"},
      {"critic", "content_text", K::text, "a sphere"},
      {"critic", "include_geometry", K::boolean, "true"},
      {"critic", "content_scale", K::real, "4"},
      {"critic", "geometry_scale", K::real, "4"},
      {"critic", "no_scale", K::real, "8"},
      {"critic", "kappa", K::real, "20"},
      {"critic", "density_threshold", K::real, "1"},

      {"generate", "prior", K::text, "prior.cg3d"},
      {"generate", "resolution", K::integer, "32"},
      {"generate", "label", K::text, "sphere"},
      {"generate", "name", K::text, "asset"},

      {"eval", "methods", K::text, ""},
      {"eval", "anchor", K::text, ""},
      {"eval", "ledger", K::text, ""},
      {"eval", "allow_ties", K::boolean, "true"},

      {"ablate", "modes", K::text, "full,no_geometry_query,single_view"},
      {"ablate", "seeds", K::integer, "4"},
  };
  return schema;
}

inline const ConfigKey* find_key(const std::string& section, const std::string& key) {
  for (const ConfigKey& k : config_schema())
    if (section == k.section && key == k.key) return &k;
  return nullptr;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline void check_value(const ConfigKey& k, const std::string& v) {
  const std::string where = std::string(k.section) + "." + k.key;
  std::size_t used = 0;
  try {
    switch (k.kind) {
      case ValueKind::integer:
        if (v.empty() || v[0] == '-') throw ConfigError(where + " must be a non-negative integer, got '" + v + "'");
        std::stoull(v, &used);
        break;
      case ValueKind::real: {
        const double d = std::stod(v, &used);
        if (!std::isfinite(d)) throw ConfigError(where + " must be finite");
        break;
      }
      case ValueKind::boolean:
        if (v != "true" && v != "false") throw ConfigError(where + " must be true or false, got '" + v + "'");
        used = v.size();
        break;
      case ValueKind::text:
        if (v.find('\n') != std::string::npos) throw ConfigError(where + " may not contain a newline");
        used = v.size();
        break;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::logic_error&) {
    throw ConfigError("bad value for " + where + ": '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("trailing characters in " + where + ": '" + v + "'");
}

class RunConfig {
 public:
  RunConfig() {
    for (const ConfigKey& k : config_schema()) values_[{k.section, k.key}] = k.default_value;
  }

  static RunConfig parse(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        bool known = false;
        for (const ConfigKey& k : config_schema()) known = known || section == k.section;
        if (!known) throw ConfigError("line " + std::to_string(lineno) + ": unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside a section");
      c.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  std::string serialize() const {
    std::string out, section;
    for (const ConfigKey& k : config_schema()) {
      if (section != k.section) {
        out += (section.empty() ? "" : "\n") + std::string("[") + k.section + "]\n";
        section = k.section;
      }
      out += std::string(k.key) + " = " + values_.at({k.section, k.key}) + "\n";
    }
    return out;
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    const ConfigKey* k = find_key(section, key);
    if (!k) throw ConfigError("unknown config key " + section + "." + key);
    check_value(*k, value);
    values_[{section, key}] = value;
  }

  // Applies "--section.key=value".
  void apply_override(const std::string& arg) {
    if (!arg.starts_with("--")) throw ConfigError("override must look like --section.key=value: " + arg);
    const auto eq = arg.find('=');
    const auto dot = arg.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ConfigError("override must look like --section.key=value: " + arg);
    }
    set(arg.substr(2, dot - 2), arg.substr(dot + 1, eq - dot - 1), arg.substr(eq + 1));
  }

  const std::string& text(const std::string& section, const std::string& key) const {
    const auto it = values_.find({section, key});
    if (it == values_.end()) throw ConfigError("unknown config key " + section + "." + key);
    return it->second;
  }
  std::uint64_t integer(const std::string& s, const std::string& k) const { return std::stoull(text(s, k)); }
  double real(const std::string& s, const std::string& k) const { return std::stod(text(s, k)); }
  bool boolean(const std::string& s, const std::string& k) const { return text(s, k) == "true"; }

  bool operator==(const RunConfig&) const = default;

  CorpusManifest manifest() const {
    CorpusManifest m;
    m.concepts.clear();
    std::stringstream ss(text("corpus", "concepts"));
    for (std::string c; std::getline(ss, c, ',');) m.concepts.push_back(trim(c));
    m.samples_per_concept = integer("corpus", "samples_per_concept");
    m.seed = integer("run", "seed");
    m.resolution = integer("corpus", "resolution");
    m.views = integer("corpus", "views");
    m.elevation_deg = real("corpus", "elevation_deg");
    m.image_size = integer("corpus", "image_size");
    m.samples_per_ray = integer("corpus", "samples_per_ray");
    m.split_fraction = real("corpus", "split_fraction");
    m.split_gap = real("corpus", "split_gap");
    try {
      m.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("[corpus] ") + e.what());
    }
    return m;
  }

  DiffusionSchedule schedule(bool sampling) const {
    try {
      return DiffusionSchedule::geometric(integer("schedule", sampling ? "sample_steps" : "train_steps"),
                                          real("schedule", "sigma_min"), real("schedule", "sigma_max"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("[schedule] ") + e.what());
    }
  }

  TrainConfig train() const {
    TrainConfig t;
    t.steps = integer("train", "steps");
    t.batch_size = integer("train", "batch_size");
    t.learning_rate = real("train", "learning_rate");
    t.momentum = real("train", "momentum");
    t.label_dropout = real("train", "label_dropout");
    t.seed = integer("run", "seed");
    if (t.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (!(t.learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0 (0 selects the default)");
    if (!(t.label_dropout >= 0.0 && t.label_dropout <= 1.0)) throw ConfigError("train.label_dropout outside [0,1]");
    return t;
  }

  GuidanceConfig guidance() const {
    GuidanceConfig g;
    g.lambda_vlm_init = real("guidance", "lambda_vlm_init");
    g.lambda_vlm_final = real("guidance", "lambda_vlm_final");
    const std::string& shape = text("guidance", "anneal_shape");
    if (shape == "exponential") g.anneal_shape = AnnealShape::exponential;
    else if (shape == "linear") g.anneal_shape = AnnealShape::linear;
    else throw ConfigError("guidance.anneal_shape must be exponential or linear, got '" + shape + "'");
    g.total_steps = integer("guidance", "total_steps");
    g.lambda_ttg = real("guidance", "lambda_ttg");
    g.views_per_reward = integer("guidance", "views_per_reward");
    g.reward_every = integer("guidance", "reward_every");
    g.learning_rate = real("guidance", "learning_rate");
    try {
      g.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("[guidance] ") + e.what());
    }
    return g;
  }

  CriticConfig critic() const {
    return {real("critic", "content_scale"), real("critic", "geometry_scale"), real("critic", "no_scale"),
            real("critic", "kappa"), real("critic", "density_threshold")};
  }

  CriticQuery query() const {
    try {
      return build_query(text("critic", "content_text"), text("critic", "template"),
                         boolean("critic", "include_geometry"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("[critic] ") + e.what());
    }
  }

 private:
  std::map<std::pair<std::string, std::string>, std::string> values_;
};

}  // namespace cg3d
