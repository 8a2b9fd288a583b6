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

// Latency-feasible, trust-weighted spectral clustering of clients per edge
// server, merging of low-trust clusters and the final client -> edge map.

#ifndef ELSA_CLUSTERING_HPP
#define ELSA_CLUSTERING_HPP

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "elsa/common.hpp"
#include "elsa/fingerprint.hpp"

namespace elsa {

struct Topology {
  Eigen::MatrixXd latency;  // clients x edges, milliseconds
  double tau_max = 200.0;   // milliseconds
  double bandwidth = 1e6;   // bytes / second

  [[nodiscard]] std::size_t clients() const { return static_cast<std::size_t>(latency.rows()); }
  [[nodiscard]] std::size_t edges() const { return static_cast<std::size_t>(latency.cols()); }
  /// Throws ConfigError naming the violated invariant.
  void validate() const;
};

/// Edges with latency <= tau_max, ascending.
[[nodiscard]] std::vector<EdgeId> feasible_servers(const Topology& topo, ClientId n);

/// A(i, j) = w_i w_j exp(-gamma R(c_i, c_j)) over the listed candidates.
[[nodiscard]] Eigen::MatrixXd affinity(std::span<const ClientId> candidates, const Eigen::VectorXd& trust,
                                       const Eigen::MatrixXd& divergence, double gamma);

struct SpectralOptions {
  std::optional<std::size_t> n_clusters;  // eigengap when empty
  std::size_t max_clusters = 4;
  std::uint64_t seed = 0;
  std::size_t restarts = 8;
};

/// Cluster count chosen by the largest gap among the smallest eigenvalues
/// of the normalized Laplacian; the eigenvalue after the last is taken as 1.
[[nodiscard]] std::size_t eigengap_count(const Eigen::VectorXd& ascending_eigenvalues, std::size_t cap);

/// Normalized-Laplacian spectral clustering followed by seeded k-means on
/// row-normalized eigenvectors. `ids` label the rows of `a`. Clusters come
/// back with ascending members, ordered by their smallest member, and do
/// not depend on the order of `ids`.
[[nodiscard]] std::vector<std::vector<ClientId>> spectral_cluster(std::span<const ClientId> ids,
                                                                  const Eigen::MatrixXd& a,
                                                                  const SpectralOptions& opts);

/// Gaussian with the mean of the members' means and covariances.
[[nodiscard]] Fingerprint pooled_fingerprint(std::span<const ClientId> members, std::span<const Fingerprint> fps);

struct MergeResult {
  std::vector<std::vector<ClientId>> clusters;
  std::vector<ClientId> excluded;  // low-trust with nowhere to merge
};

/// Each cluster whose mean trust is below w_min joins the high-trust cluster
/// with the closest pooled fingerprint (symmetric KL); without any high-trust
/// cluster its members are excluded. `trust` and `fps` are indexed by id.
[[nodiscard]] MergeResult merge_low_trust(const std::vector<std::vector<ClientId>>& clusters,
                                          const Eigen::VectorXd& trust, std::span<const Fingerprint> fps,
                                          double w_min);

enum class Exclusion { out_of_range, low_trust };
[[nodiscard]] std::string to_string(Exclusion reason);

struct EdgeCluster {
  EdgeId edge = 0;
  std::vector<ClientId> members;  // ascending
  double trust = 0;               // mean member trust
  double coherence = 0;           // mean pairwise divergence, 0 for < 2 members
};

struct ClusterAssignment {
  std::vector<EdgeCluster> edges;                      // one per edge, possibly empty
  std::vector<std::pair<ClientId, Exclusion>> excluded;  // ascending id
  std::vector<std::optional<EdgeId>> edge_of;          // per client
  std::vector<int> subcluster_of;                      // spectral label on its edge, -1 if excluded

  [[nodiscard]] std::size_t active_edges() const;
  [[nodiscard]] std::size_t clustered_clients() const;
};

struct AssignOptions {
  double gamma = 1.0;
  double w_min = 0.05;
  std::uint64_t seed = 0;
  std::optional<std::size_t> n_clusters;
  std::size_t max_clusters = 4;
};

/// Mean pairwise divergence among members.
[[nodiscard]] double mean_pairwise(std::span<const ClientId> members, const Eigen::MatrixXd& divergence);

/// Throws ConfigError when no client survives.
[[nodiscard]] ClusterAssignment assign_clients(const Topology& topo, std::span<const Fingerprint> fps,
                                               const Eigen::VectorXd& trust, const Eigen::MatrixXd& divergence,
                                               const AssignOptions& opts);

}  // namespace elsa

#endif  // ELSA_CLUSTERING_HPP
