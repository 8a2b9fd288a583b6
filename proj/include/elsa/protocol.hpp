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

// End-to-end training: behavioral clustering, split training rounds through
// the boundary channel, edge consolidation and trust/coherence-weighted
// cloud aggregation. FedAvg and FedAvg(Random) share the same experiment
// setup so runs can be compared pairwise.
//
// Boundary routing for one sample in ssop+sketch mode (row convention, so a
// rotation x -> Qx is applied as X Q^T):
//   client  H1 = Part1(x)               ---- sketch(H1 Q^T) ---->  edge
//   edge    H2 = Part2(received)        ---- sketch(H2) -------->  client
//   client  logits = Part3(H2' Q)       (H2' is the decoded H2; the product
//                                        with Q undoes the rotation on the
//                                        residual stream)
// Backward mirrors it: dH2' = dIn Q^T, sketched to the edge; the edge's
// input gradient is sketched back and mapped through Q before Part 1.

#ifndef ELSA_PROTOCOL_HPP
#define ELSA_PROTOCOL_HPP

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "elsa/clustering.hpp"
#include "elsa/codec.hpp"
#include "elsa/data.hpp"
#include "elsa/fingerprint.hpp"
#include "elsa/log.hpp"
#include "elsa/metrics.hpp"
#include "elsa/model.hpp"

namespace elsa {

struct CodecConfig {
  ChannelMode mode = ChannelMode::ssop_sketch;
  std::size_t rows = 1;      // Y
  std::size_t buckets = 16;  // Z
  std::size_t rank = 8;      // r
  std::string salt = "elsa";
  bool compress_gradients = true;
  bool client_derotates = true;
  bool edge_inverts_rotation = false;  // utility ablation only
  double noise_variance = 0.25;

  [[nodiscard]] double ratio(std::size_t hidden) const;
};

struct RunConfig {
  ModelConfig model;
  std::size_t n_clients = 20;
  std::size_t n_edges = 4;
  std::size_t local_rounds = 5;  // rho-rounds between cloud aggregations
  double lr = 0.05;
  std::size_t batch_size = 8;
  double xi = 1e-3;
  std::size_t max_rounds = 30;
  bool aggregate_head = true;

  CodecConfig codec;

  // Clustering.
  double gamma = 1.0;
  double w_min = 0.05;
  std::optional<std::size_t> n_clusters;
  std::size_t max_clusters = 4;
  bool trust_normalize = true;
  std::size_t probe_count = 32;
  std::size_t warmup_steps = 20;
  std::size_t refingerprint_every = 0;  // 0: cluster once before round 1

  // Data.
  std::size_t markers = 3;
  std::size_t train_samples = 4000;
  std::size_t test_samples = 1000;
  double alpha = 0.1;
  std::size_t n_poisoned = 4;
  double flip_fraction = 0.8;

  // Topology and communication.
  double tau_max = 200.0;
  double home_latency_min = 10.0, home_latency_max = 150.0;
  double other_latency_min = 50.0, other_latency_max = 400.0;
  double bandwidth = 1e6;
  double zeta = 4.0;

  std::size_t fedavg_subset = 0;  // 0 means n_clients / 2
  bool log_grad_norm = false;
  std::size_t jobs = 1;
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

/// Everything that is fixed before training and shared across methods.
struct Experiment {
  RunConfig config;
  SplitModelState<double> initial;
  std::vector<Dataset> shards;
  Dataset test;
  Topology topology;
  std::vector<ClientId> poisoned;
};

[[nodiscard]] Experiment make_experiment(const RunConfig& cfg);

/// Seeded latency matrix: each client's home edge (n mod K) is close, the
/// rest are drawn from the wider "other" range.
[[nodiscard]] Topology make_topology(const RunConfig& cfg);

struct ClusteringResult {
  std::vector<Fingerprint> fingerprints;
  Eigen::MatrixXd divergence;
  Eigen::VectorXd trust;
  ClusterAssignment assignment;
};

/// Warm-up fine-tuning of a copy of the initial model per client, then
/// fingerprints, divergences, trust and the client -> edge assignment.
/// `start` replaces the initial adapters as the warm-up starting point.
[[nodiscard]] ClusteringResult cluster_experiment(const Experiment& ex, const AdapterParams<double>* start = nullptr);

/// Local warm-up model of one client (monolithic SGD from the initial state
/// or from `start`).
[[nodiscard]] SplitModelState<double> warmup_model(const Experiment& ex, ClientId n,
                                                   const AdapterParams<double>* start = nullptr);

/// Part 1 boundary activations of the probe set, one row per valid position.
[[nodiscard]] Eigen::MatrixXd boundary_samples(const SplitModelState<double>& model, const ProbeSet& probe);

struct LocalStepResult {
  double loss = 0;
  AdapterParams<double> grad;    // gradient the step applied, all parts
  double activation_bytes = 0;   // up + down boundary activations
  double gradient_bytes = 0;     // up + down boundary gradients
};

/// One split training step for `client` on a batch: Part 1 on the client,
/// channel, Part 2 on the edge, channel, Part 3 and loss on the client, then
/// the backward pass routed back through the same channel. Applies plain SGD
/// to the client's Parts 1 and 3 and head and to the edge's Part 2.
/// `basis` is required in ssop+sketch mode; `step` seeds the sketch hashes.
LocalStepResult local_split_round(SplitModelState<double>& client, SplitModelState<double>& edge,
                                  std::span<const std::vector<TokenId>> batch, std::span<const int> labels,
                                  const CodecConfig& codec, const PerturbationBasis* basis, ClientId id,
                                  std::uint64_t step, double lr, double zeta = 4.0);

/// Data-size-weighted average of client adapters for Parts 1, 3 and head;
/// Part 2 comes from the edge. Throws AggregationError on an empty list.
[[nodiscard]] AdapterParams<double> edge_consolidate(std::span<const AdapterParams<double>> clients,
                                                     std::span<const double> sizes,
                                                     const AdapterParams<double>& edge);

[[nodiscard]] double compute_alpha(double coherence, double trust);
/// Throws AggregationError when the weights are not positive in total.
[[nodiscard]] std::vector<double> normalize_alphas(std::span<const double> alphas);

/// Element-wise convex combination. Throws AggregationError on shape or
/// count mismatch.
[[nodiscard]] AdapterParams<double> global_aggregate(std::span<const AdapterParams<double>> edges,
                                                     std::span<const double> weights, bool include_head = true);

/// True iff ||now - prev|| <= xi; always false without a predecessor.
[[nodiscard]] bool check_convergence(const AdapterParams<double>& now, const AdapterParams<double>* prev, double xi,
                                     bool include_head = true);

struct Evaluation {
  double loss = 0;
  double accuracy = 0;
};
[[nodiscard]] Evaluation evaluate(const SplitModelState<double>& model, const Dataset& data);

/// Inference as deployed: sample i goes through the channel of
/// clients[i % size] (its rotation and sketches, fresh sketch seeds). Equal
/// to evaluate() in direct mode.
[[nodiscard]] Evaluation evaluate_split(const SplitModelState<double>& model, const Dataset& data,
                                        const CodecConfig& codec, std::span<const ClientId> clients,
                                        std::span<const std::optional<PerturbationBasis>> bases);

/// Squared norm of the full-batch gradient over every shard's training labels.
[[nodiscard]] double full_gradient_norm_sq(const SplitModelState<double>& model, std::span<const Dataset> shards,
                                           bool include_head = true);

struct PrivacySweep {
  std::vector<double> rhos{2, 4, 8};     // compression ratios, D / (Y Z) must be whole
  std::vector<std::size_t> ranks{8, 16};  // ssop+sketch ranks
  std::size_t samples = 64;               // private sequences from the test split
  ClientId victim = 0;                    // whose warmed-up model produces them
};

struct PrivacyRow {
  ChannelMode mode = ChannelMode::direct;
  double rho = 1;
  std::size_t rank = 0;        // 0 unless ssop+sketch
  bool rho_independent = false;  // repeated across the rho grid
  PrivacyReport report;
};

/// Uplink leakage at the Part 1 boundary: what an honest-but-curious edge
/// sees of the victim's activations, attacked with the public-backbone token
/// table. Rows are ordered direct, gaussian-noise, sketch-only, ssop+sketch
/// by rank, each over the rho grid.
[[nodiscard]] std::vector<PrivacyRow> privacy_sweep(const Experiment& ex, const PrivacySweep& sweep);

struct RunResult {
  TrainingLog log;
  AdapterParams<double> final_params;
  std::optional<ClusteringResult> clustering;  // ELSA only, the latest one
};

/// Called after every completed global round.
using RoundCallback = std::function<void(const RoundRecord&)>;

[[nodiscard]] RunResult run_elsa(const Experiment& ex, const RoundCallback& on_round = {});
/// Uses a precomputed clustering instead of recomputing it.
[[nodiscard]] RunResult run_elsa(const Experiment& ex, const ClusteringResult& clustering,
                                 const RoundCallback& on_round = {});

/// Monolithic local SGD on every client (or a seeded random subset per round)
/// with data-size-weighted averaging and no trust filtering.
[[nodiscard]] RunResult run_fedavg(const Experiment& ex, bool random_clients, const RoundCallback& on_round = {});

}  // namespace elsa

#endif  // ELSA_PROTOCOL_HPP
