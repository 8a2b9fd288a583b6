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

// elsa_sim: run, cluster, privacy-eval, comm-model and bound subcommands.
// Exit codes: 0 ok, 2 configuration or usage error, 3 runtime error.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "elsa/config.hpp"
#include "elsa/protocol.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace elsa;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

std::string num(double v) { return format_number(v); }

std::string csv_preamble(const std::string& schema, const SimConfig& cfg) {
  std::string s = "# schema: " + schema + "\n# seed: " + std::to_string(cfg.run.seed) + "\n";
  for (const auto& [k, v] : resolved_config(cfg)) s += "# config: " + k + " = " + v + "\n";
  return s;
}

json config_json(const SimConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : resolved_config(cfg)) j[k] = v;
  return j;
}

json envelope(const std::string& schema, const SimConfig& cfg) {
  json j;
  j["schema"] = schema;
  j["seed"] = cfg.run.seed;
  j["config"] = config_json(cfg);
  return j;
}

// Files are written whole, so a rerun either replaces them or fails.
void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UnavailableError("cannot write " + path.string());
  out << content;
  if (!out) throw UnavailableError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

fs::path prepare_out(const SimConfig& cfg) {
  fs::path dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UnavailableError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

// --- run -------------------------------------------------------------------

const char* kRunColumns =
    "round,train_loss,eval_loss,eval_accuracy,delta_norm,comm_bytes,measured_bytes,gradient_bytes,sim_time,"
    "grad_norm_sq\n";

std::string run_row(const RoundRecord& r) {
  std::ostringstream s;
  s << r.round << ',' << num(r.train_loss) << ',' << num(r.eval_loss) << ',' << num(r.eval_accuracy) << ','
    << num(r.delta_norm) << ',' << num(r.comm_bytes) << ',' << num(r.measured_bytes) << ','
    << num(r.gradient_bytes) << ',' << num(r.sim_time) << ',' << (r.grad_norm_sq ? num(*r.grad_norm_sq) : "")
    << '\n';
  return s.str();
}

json assignment_json(const ClusteringResult& cr) {
  const auto& a = cr.assignment;
  json edges = json::array();
  std::vector<double> alphas;
  for (const auto& e : a.edges)
    if (!e.members.empty()) alphas.push_back(compute_alpha(e.coherence, e.trust));
  const auto weights = alphas.empty() ? std::vector<double>{} : normalize_alphas(alphas);
  std::size_t w = 0;
  for (const auto& e : a.edges) {
    json je;
    je["edge"] = e.edge;
    je["members"] = e.members;
    je["trust"] = e.trust;
    je["coherence"] = e.coherence;
    je["weight"] = e.members.empty() ? 0.0 : weights[w++];
    edges.push_back(je);
  }
  json excluded = json::array();
  for (const auto& [n, why] : a.excluded) excluded.push_back({{"client", n}, {"reason", to_string(why)}});
  return {{"clustered", a.clustered_clients()}, {"edges", edges}, {"excluded", excluded}};
}

int cmd_run(const SimConfig& cfg, const std::string& baseline) {
  const auto dir = prepare_out(cfg);
  const std::string stem = "run_" + baseline;
  const std::string schema = "elsa-sim.run.v1";
  std::ofstream csv(dir / (stem + ".csv"), std::ios::binary | std::ios::trunc);
  if (!csv) throw UnavailableError("cannot write " + (dir / (stem + ".csv")).string());
  csv << csv_preamble(schema, cfg) << kRunColumns << std::flush;
  auto on_round = [&](const RoundRecord& r) { csv << run_row(r) << std::flush; };

  json summary = envelope(schema, cfg);
  summary["method"] = baseline;
  try {
    const auto ex = make_experiment(cfg.run);
    RunResult res;
    if (baseline == "elsa")
      res = run_elsa(ex, on_round);
    else
      res = run_fedavg(ex, baseline == "fedavg-random", on_round);
    summary["status"] = "ok";
    summary["global_rounds"] = res.log.global_rounds();
    summary["converged"] = res.log.converged;
    summary["participants"] = res.log.participants;
    summary["poisoned"] = ex.poisoned;
    const auto& last = res.log.rounds.back();
    double total_bytes = 0;
    for (const auto& r : res.log.rounds) total_bytes += r.comm_bytes;
    summary["final"] = {{"eval_accuracy", last.eval_accuracy},
                        {"eval_loss", last.eval_loss},
                        {"train_loss", last.train_loss},
                        {"sim_time", last.sim_time}};
    summary["total_comm_bytes"] = total_bytes;
    if (res.clustering) summary["clustering"] = assignment_json(*res.clustering);
    write_json(dir / (stem + ".json"), summary);
  } catch (const Error& e) {
    csv.flush();
    summary["status"] = "failed";
    summary["error"] = e.what();
    write_json(dir / (stem + ".json"), summary);
    throw;
  }
  return kOk;
}

// --- cluster ---------------------------------------------------------------

int cmd_cluster(const SimConfig& cfg) {
  const auto dir = prepare_out(cfg);
  const std::string schema = "elsa-sim.cluster.v1";
  const auto ex = make_experiment(cfg.run);
  const auto cr = cluster_experiment(ex);
  const auto& a = cr.assignment;
  const std::size_t n = cfg.run.n_clients;

  std::string table = csv_preamble(schema, cfg) + "client,status,edge,subcluster,reason,trust,mean_divergence,poisoned\n";
  for (std::size_t c = 0; c < n; ++c) {
    double mean_div = 0;
    if (n > 1) mean_div = cr.divergence.row(static_cast<Eigen::Index>(c)).sum() / static_cast<double>(n - 1);
    std::string reason;
    for (const auto& [id, why] : a.excluded)
      if (id == c) reason = to_string(why);
    const bool poisoned = std::binary_search(ex.poisoned.begin(), ex.poisoned.end(), static_cast<ClientId>(c));
    table += std::to_string(c) + ',' + (a.edge_of[c] ? "assigned" : "excluded") + ',' +
             (a.edge_of[c] ? std::to_string(*a.edge_of[c]) : "") + ',' +
             (a.subcluster_of[c] >= 0 ? std::to_string(a.subcluster_of[c]) : "") + ',' + reason + ',' +
             num(cr.trust(static_cast<Eigen::Index>(c))) + ',' + num(mean_div) + ',' + (poisoned ? "1" : "0") + '\n';
  }
  write_file(dir / "cluster_assignment.csv", table);

  std::string div = csv_preamble("elsa-sim.divergence.v1", cfg) + "client";
  for (std::size_t c = 0; c < n; ++c) div += "," + std::to_string(c);
  div += '\n';
  for (std::size_t r = 0; r < n; ++r) {
    div += std::to_string(r);
    for (std::size_t c = 0; c < n; ++c)
      div += "," + num(cr.divergence(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
    div += '\n';
  }
  write_file(dir / "cluster_divergence.csv", div);

  json summary = envelope(schema, cfg);
  summary["assignment"] = assignment_json(cr);
  summary["poisoned"] = ex.poisoned;
  write_json(dir / "cluster.json", summary);
  return kOk;
}

// --- privacy-eval ----------------------------------------------------------

int cmd_privacy(const SimConfig& cfg) {
  const auto dir = prepare_out(cfg);
  const std::string schema = "elsa-sim.privacy.v1";
  const auto ex = make_experiment(cfg.run);
  const auto rows = privacy_sweep(ex, cfg.privacy);
  std::string csv = csv_preamble(schema, cfg) + "mode,rank,rho,rho_independent,cos_sim,mse,token_acc,positions,skipped\n";
  json jr = json::array();
  for (const auto& r : rows) {
    csv += r.report.mode + ',' + (r.rank ? std::to_string(r.rank) : "") + ',' + num(r.rho) + ',' +
           (r.rho_independent ? "1" : "0") + ',' + num(r.report.cos_sim) + ',' + num(r.report.mse) + ',' +
           num(r.report.token_acc) + ',' + std::to_string(r.report.positions) + ',' +
           std::to_string(r.report.skipped) + '\n';
    jr.push_back({{"mode", r.report.mode},
                  {"rank", r.rank},
                  {"rho", r.rho},
                  {"rho_independent", r.rho_independent},
                  {"cos_sim", r.report.cos_sim},
                  {"mse", r.report.mse},
                  {"token_acc", r.report.token_acc}});
  }
  write_file(dir / "privacy.csv", csv);
  json summary = envelope(schema, cfg);
  summary["rows"] = jr;
  write_json(dir / "privacy.json", summary);
  return kOk;
}

// --- comm-model ------------------------------------------------------------

int cmd_comm(const SimConfig& cfg) {
  const auto dir = prepare_out(cfg);
  const std::string schema = "elsa-sim.comm.v1";
  const auto& r = cfg.run;
  cfg.run.model.validate();
  const auto model = init_model<double>(r.model, 0);
  const double lora = cfg.comm.lora_bytes ? *cfg.comm.lora_bytes
                                          : r.zeta * static_cast<double>(model.params.size(r.aggregate_head));
  const double hidden = static_cast<double>(r.model.hidden_dim);
  const double batch = static_cast<double>(r.batch_size);
  // Every client assigned to its home edge with the configured batch size.
  std::vector<std::vector<double>> batches(r.n_edges);
  for (std::size_t n = 0; n < r.n_clients; ++n) batches[n % r.n_edges].push_back(batch);

  std::string csv = csv_preamble(schema, cfg) +
                    "rho,comm_bytes_per_round,activation_bytes,lora_bytes,client_time,total_time,rounds\n";
  json jr = json::array();
  for (double rho : cfg.comm.rhos) {
    CommModel cm{r.zeta, static_cast<double>(r.model.seq_len), rho, r.bandwidth, lora};
    const double cost = comm_cost(cm, r.n_edges, batches, static_cast<double>(r.local_rounds), hidden);
    const double t = comm_time(cm, static_cast<double>(r.local_rounds), batch, hidden);
    const std::vector<double> times(r.n_clients, t);
    const double total = total_time(cfg.comm.rounds, times);
    const double lora_total = static_cast<double>(r.n_edges) * lora;
    csv += num(rho) + ',' + num(cost) + ',' + num(cost - lora_total) + ',' + num(lora_total) + ',' + num(t) + ',' +
           num(total) + ',' + num(cfg.comm.rounds) + '\n';
    jr.push_back({{"rho", rho}, {"comm_bytes_per_round", cost}, {"client_time", t}, {"total_time", total}});
  }
  write_file(dir / "comm_model.csv", csv);
  json summary = envelope(schema, cfg);
  summary["rows"] = jr;
  write_json(dir / "comm_model.json", summary);
  return kOk;
}

// --- bound -----------------------------------------------------------------

int cmd_bound(const SimConfig& cfg) {
  const auto& b = cfg.bound;
  if (b.rounds.empty()) throw UsageError("bound: the list of G values is empty");
  const auto dir = prepare_out(cfg);
  const std::string schema = "elsa-sim.bound.v1";
  std::string csv = csv_preamble(schema, cfg) + "rounds,bound,optimization_term,noise_term,noniid_term\n";
  json jr = json::array();
  for (double g : b.rounds) {
    const double v = theorem_bound({b.lipschitz, b.gap, b.sigma_local, b.sigma_noniid, g});
    const double root = std::sqrt(g);
    csv += num(g) + ',' + num(v) + ',' + num(4 * b.lipschitz * b.gap / root) + ',' + num(b.sigma_local / root) + ',' +
           num(b.sigma_noniid) + '\n';
    jr.push_back({{"rounds", g}, {"bound", v}});
  }
  write_file(dir / "bound.csv", csv);
  json summary = envelope(schema, cfg);
  summary["rows"] = jr;
  write_json(dir / "bound.json", summary);
  return kOk;
}

std::uint64_t parse_seed(const std::string& s, const std::string& origin) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw UsageError(origin + ": '" + s + "' is not a non-negative integer seed");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulator for edge-assisted split federated fine-tuning"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::string> seed_flag;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> jobs;
  app.add_option("--config", config_path, "YAML configuration file (defaults when omitted)");
  app.add_option("--seed", seed_flag, "Run seed; overrides ELSA_SIM_SEED and the config");
  app.add_option("--out-dir", out_dir, "Output directory; overrides output.dir");
  app.add_option("--jobs", jobs, "Worker threads for independent edges and clients")->check(CLI::PositiveNumber);

  auto* run = app.add_subcommand("run", "Train with ELSA or a baseline; writes run_<method>.csv/json");
  std::string baseline = "elsa";
  run->add_option("--baseline", baseline, "elsa | fedavg | fedavg-random")
      ->check(CLI::IsMember({"elsa", "fedavg", "fedavg-random"}));
  auto* cluster = app.add_subcommand("cluster", "Fingerprint, score and assign clients");
  auto* privacy = app.add_subcommand("privacy-eval", "Boundary leakage table over modes, rho and rank");
  auto* comm = app.add_subcommand("comm-model", "Per-round traffic and time over the rho grid");
  auto* bound = app.add_subcommand("bound", "Convergence bound over a list of G values");
  std::optional<double> lip, gap, sig_local, sig_noniid;
  std::vector<double> rounds;
  bound->add_option("--lipschitz", lip, "Smoothness constant");
  bound->add_option("--gap", gap, "F(theta_0) - F*");
  bound->add_option("--sigma-local", sig_local, "Local gradient variance sigma_local^2");
  bound->add_option("--sigma-noniid", sig_noniid, "Heterogeneity floor sigma_2^2");
  bound->add_option("--rounds", rounds, "G values")->expected(1, -1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    SimConfig cfg = config_path.empty() ? parse_config("", "<defaults>") : load_config(config_path);
    if (seed_flag)
      cfg.run.seed = parse_seed(*seed_flag, "--seed");
    else if (const char* env = std::getenv("ELSA_SIM_SEED"))
      cfg.run.seed = parse_seed(env, "ELSA_SIM_SEED");
    if (out_dir) cfg.out_dir = *out_dir;
    if (jobs) cfg.run.jobs = *jobs;
    if (lip) cfg.bound.lipschitz = *lip;
    if (gap) cfg.bound.gap = *gap;
    if (sig_local) cfg.bound.sigma_local = *sig_local;
    if (sig_noniid) cfg.bound.sigma_noniid = *sig_noniid;
    if (!rounds.empty()) cfg.bound.rounds = rounds;
    validate(cfg);

    if (*run) return cmd_run(cfg, baseline);
    if (*cluster) return cmd_cluster(cfg);
    if (*privacy) return cmd_privacy(cfg);
    if (*comm) return cmd_comm(cfg);
    if (*bound) return cmd_bound(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kConfigError;
}
