/* Copyright 2026 The ELSA Simulator Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

     http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License
==============================================================================*/

#include "elsa/config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <regex>
#include <sstream>

namespace elsa {

std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

struct Field {
  std::string section, key;
  std::function<void(const YAML::Node&)> read;
  std::function<std::string()> show;
};

[[noreturn]] void bad_value(const std::string& what) { throw ConfigError(what); }

std::string scalar(const YAML::Node& n) {
  if (!n.IsScalar()) bad_value("expected a scalar value");
  return n.Scalar();
}

template <typename T>
T parse_int(const std::string& s) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) bad_value("'" + s + "' is not a non-negative integer");
  return v;
}

double parse_real(const std::string& s) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size() || !std::isfinite(v))
    bad_value("'" + s + "' is not a finite number");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  bad_value("'" + s + "' is not true or false");
}

template <typename T>
std::vector<T> parse_list(const YAML::Node& n, T (*one)(const std::string&)) {
  if (!n.IsSequence()) bad_value("expected a list such as [1, 2]");
  std::vector<T> out;
  for (const auto& item : n) out.push_back(one(scalar(item)));
  return out;
}

template <typename T>
std::string show_list(const std::vector<T>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    if constexpr (std::is_floating_point_v<T>)
      s += format_number(v[i]);
    else
      s += std::to_string(v[i]);
  }
  return s + "]";
}

std::vector<Field> fields(SimConfig& c) {
  std::vector<Field> f;
  auto size = [&](std::string sec, std::string key, std::size_t& ref) {
    f.push_back({sec, key, [&ref](const YAML::Node& n) { ref = parse_int<std::size_t>(scalar(n)); },
                 [&ref] { return std::to_string(ref); }});
  };
  auto real = [&](std::string sec, std::string key, double& ref) {
    f.push_back({sec, key, [&ref](const YAML::Node& n) { ref = parse_real(scalar(n)); },
                 [&ref] { return format_number(ref); }});
  };
  auto flag = [&](std::string sec, std::string key, bool& ref) {
    f.push_back({sec, key, [&ref](const YAML::Node& n) { ref = parse_bool(scalar(n)); },
                 [&ref] { return std::string(ref ? "true" : "false"); }});
  };
  auto text = [&](std::string sec, std::string key, std::string& ref) {
    f.push_back({sec, key, [&ref](const YAML::Node& n) { ref = scalar(n); }, [&ref] { return ref; }});
  };
  auto reals = [&](std::string sec, std::string key, std::vector<double>& ref) {
    f.push_back({sec, key, [&ref](const YAML::Node& n) { ref = parse_list<double>(n, parse_real); },
                 [&ref] { return show_list(ref); }});
  };
  auto sizes = [&](std::string sec, std::string key, std::vector<std::size_t>& ref) {
    f.push_back({sec, key,
                 [&ref](const YAML::Node& n) { ref = parse_list<std::size_t>(n, parse_int<std::size_t>); },
                 [&ref] { return show_list(ref); }});
  };

  auto& r = c.run;
  f.push_back({"run", "seed", [&r](const YAML::Node& n) { r.seed = parse_int<std::uint64_t>(scalar(n)); },
               [&r] { return std::to_string(r.seed); }});
  size("run", "n_clients", r.n_clients);
  size("run", "n_edges", r.n_edges);
  size("run", "local_rounds", r.local_rounds);
  real("run", "lr", r.lr);
  size("run", "batch_size", r.batch_size);
  real("run", "xi", r.xi);
  size("run", "max_rounds", r.max_rounds);
  flag("run", "aggregate_head", r.aggregate_head);
  size("run", "fedavg_subset", r.fedavg_subset);
  flag("run", "log_grad_norm", r.log_grad_norm);
  size("run", "jobs", r.jobs);

  auto& m = r.model;
  size("model", "vocab_size", m.vocab_size);
  size("model", "seq_len", m.seq_len);
  size("model", "hidden_dim", m.hidden_dim);
  size("model", "n_blocks", m.n_blocks);
  size("model", "n_heads", m.n_heads);
  size("model", "ffn_dim", m.ffn_dim);
  size("model", "lora_rank", m.lora_rank);
  size("model", "part1_blocks", m.part1_blocks);
  size("model", "part2_blocks", m.part2_blocks);
  size("model", "part3_blocks", m.part3_blocks);
  size("model", "n_classes", m.n_classes);
  real("model", "embedding_decay", m.embedding_decay);
  real("model", "residual_scale", m.residual_scale);

  auto& k = r.codec;
  f.push_back({"codec", "mode", [&k](const YAML::Node& n) { k.mode = parse_channel_mode(scalar(n)); },
               [&k] { return to_string(k.mode); }});
  size("codec", "rows", k.rows);
  size("codec", "buckets", k.buckets);
  size("codec", "rank", k.rank);
  text("codec", "salt", k.salt);
  flag("codec", "compress_gradients", k.compress_gradients);
  flag("codec", "client_derotates", k.client_derotates);
  flag("codec", "edge_inverts_rotation", k.edge_inverts_rotation);
  real("codec", "noise_variance", k.noise_variance);

  real("clustering", "gamma", r.gamma);
  real("clustering", "w_min", r.w_min);
  f.push_back({"clustering", "n_clusters",
               [&r](const YAML::Node& n) {
                 const auto s = scalar(n);
                 if (s == "auto")
                   r.n_clusters.reset();
                 else
                   r.n_clusters = parse_int<std::size_t>(s);
               },
               [&r] { return r.n_clusters ? std::to_string(*r.n_clusters) : std::string("auto"); }});
  size("clustering", "max_clusters", r.max_clusters);
  flag("clustering", "trust_normalize", r.trust_normalize);
  size("clustering", "probe_count", r.probe_count);
  size("clustering", "warmup_steps", r.warmup_steps);
  size("clustering", "refingerprint_every", r.refingerprint_every);

  size("data", "markers", r.markers);
  size("data", "train_samples", r.train_samples);
  size("data", "test_samples", r.test_samples);
  real("data", "alpha", r.alpha);
  size("data", "n_poisoned", r.n_poisoned);
  real("data", "flip_fraction", r.flip_fraction);

  real("topology", "tau_max", r.tau_max);
  real("topology", "home_latency_min", r.home_latency_min);
  real("topology", "home_latency_max", r.home_latency_max);
  real("topology", "other_latency_min", r.other_latency_min);
  real("topology", "other_latency_max", r.other_latency_max);
  real("topology", "bandwidth", r.bandwidth);
  real("topology", "zeta", r.zeta);

  reals("privacy", "rhos", c.privacy.rhos);
  sizes("privacy", "ranks", c.privacy.ranks);
  size("privacy", "samples", c.privacy.samples);
  size("privacy", "victim", c.privacy.victim);

  reals("comm", "rhos", c.comm.rhos);
  real("comm", "rounds", c.comm.rounds);
  f.push_back({"comm", "lora_bytes",
               [&c](const YAML::Node& n) {
                 const auto s = scalar(n);
                 if (s == "auto")
                   c.comm.lora_bytes.reset();
                 else
                   c.comm.lora_bytes = parse_real(s);
               },
               [&c] { return c.comm.lora_bytes ? format_number(*c.comm.lora_bytes) : std::string("auto"); }});

  real("bound", "lipschitz", c.bound.lipschitz);
  real("bound", "gap", c.bound.gap);
  real("bound", "sigma_local", c.bound.sigma_local);
  real("bound", "sigma_noniid", c.bound.sigma_noniid);
  reals("bound", "rounds", c.bound.rounds);

  text("output", "dir", c.out_dir);
  return f;
}

std::string where(std::string_view source, const YAML::Mark& m) {
  return std::string(source) + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1) + ": ";
}

}  // namespace

void validate(const SimConfig& cfg) {
  cfg.run.validate();
  for (double rho : cfg.privacy.rhos)
    if (!(rho > 0)) throw ConfigError("rhos: each compression ratio must be > 0");
  for (double rho : cfg.comm.rhos)
    if (!(rho > 0)) throw ConfigError("rhos: each compression ratio must be > 0");
  if (!(cfg.comm.rounds >= 1)) throw ConfigError("rounds: must be >= 1");
  if (cfg.comm.lora_bytes && *cfg.comm.lora_bytes < 0) throw ConfigError("lora_bytes: must be >= 0");
  const auto& b = cfg.bound;
  if (b.lipschitz < 0 || b.gap < 0 || b.sigma_local < 0 || b.sigma_noniid < 0)
    throw ConfigError("bound: lipschitz, gap, sigma_local and sigma_noniid must be >= 0");
  for (double g : b.rounds)
    if (!(g >= 1)) throw ConfigError("rounds: each G must be >= 1");
  if (cfg.out_dir.empty()) throw ConfigError("dir: output directory must not be empty");
}

SimConfig parse_config(std::string_view text, std::string_view source) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::ParserException& e) {
    throw ConfigError(where(source, e.mark) + e.msg);
  }
  SimConfig cfg;
  auto table = fields(cfg);
  std::map<std::string, YAML::Mark> seen;  // key name -> position, for semantic errors
  std::map<std::string, YAML::Mark> assigned;  // section.key
  if (root.IsNull()) {
    // Empty file: all defaults.
  } else if (!root.IsMap()) {
    throw ConfigError(where(source, root.Mark()) + "top level must be a map of sections");
  } else {
    for (const auto& sec : root) {
      const auto name = sec.first.as<std::string>();
      const bool known = std::any_of(table.begin(), table.end(), [&](const Field& f) { return f.section == name; });
      if (!known) throw ConfigError(where(source, sec.first.Mark()) + "unknown section '" + name + "'");
      if (sec.second.IsNull()) continue;
      if (!sec.second.IsMap()) throw ConfigError(where(source, sec.second.Mark()) + "section '" + name + "' must be a map");
      for (const auto& kv : sec.second) {
        const auto key = kv.first.as<std::string>();
        const auto it = std::find_if(table.begin(), table.end(),
                                     [&](const Field& f) { return f.section == name && f.key == key; });
        if (it == table.end())
          throw ConfigError(where(source, kv.first.Mark()) + "unknown key '" + key + "' in section '" + name + "'");
        if (!assigned.emplace(name + "." + key, kv.first.Mark()).second)
          throw ConfigError(where(source, kv.first.Mark()) + "duplicate key '" + name + "." + key + "'");
        try {
          it->read(kv.second);
        } catch (const Error& e) {
          throw ConfigError(where(source, kv.second.Mark()) + name + "." + key + ": " + e.what());
        }
        seen.emplace(key, kv.first.Mark());
      }
    }
  }
  try {
    validate(cfg);
  } catch (const ConfigError& e) {
    // Point at the file key the message names first.
    const std::string msg = e.what();
    const YAML::Mark* best = nullptr;
    auto best_pos = std::string::npos;
    for (const auto& [key, mark] : seen) {
      std::smatch hit;
      if (std::regex_search(msg, hit, std::regex("\\b" + key + "\\b")) &&
          static_cast<std::size_t>(hit.position(0)) < best_pos) {
        best_pos = static_cast<std::size_t>(hit.position(0));
        best = &mark;
      }
    }
    if (best) throw ConfigError(where(source, *best) + msg);
    throw ConfigError(std::string(source) + ": " + msg);
  }
  return cfg;
}

SimConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open configuration file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::vector<std::pair<std::string, std::string>> resolved_config(const SimConfig& cfg) {
  SimConfig copy = cfg;
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields(copy)) out.emplace_back(f.section + "." + f.key, f.show());
  return out;
}

}  // namespace elsa
