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

#include "elsa/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace elsa {

void Topology::validate() const {
  if (latency.size() == 0) throw ConfigError("topology needs at least one client and one edge");
  if (!latency.allFinite() || (latency.array() < 0).any()) throw ConfigError("latencies must be finite and >= 0");
  if (!(tau_max > 0)) throw ConfigError("tau_max must be > 0");
  if (!(bandwidth > 0)) throw ConfigError("bandwidth must be > 0");
}

std::vector<EdgeId> feasible_servers(const Topology& topo, ClientId n) {
  if (n >= topo.clients()) throw InputError("client id " + std::to_string(n) + " outside topology");
  std::vector<EdgeId> out;
  for (std::size_t k = 0; k < topo.edges(); ++k)
    if (topo.latency(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)) <= topo.tau_max) out.push_back(k);
  return out;
}

Eigen::MatrixXd affinity(std::span<const ClientId> candidates, const Eigen::VectorXd& trust,
                         const Eigen::MatrixXd& divergence, double gamma) {
  if (!(gamma > 0)) throw ConfigError("gamma must be > 0");
  const auto m = static_cast<Eigen::Index>(candidates.size());
  Eigen::MatrixXd a(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto ci = static_cast<Eigen::Index>(candidates[i]), cj = static_cast<Eigen::Index>(candidates[j]);
      a(i, j) = trust(ci) * trust(cj) * std::exp(-gamma * divergence(ci, cj));
    }
  return a;
}

std::size_t eigengap_count(const Eigen::VectorXd& ev, std::size_t cap) {
  const auto n = static_cast<std::size_t>(ev.size());
  const std::size_t top = std::min(cap, n);
  std::size_t best = 1;
  double best_gap = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k <= top; ++k) {
    const double next = k < n ? ev(static_cast<Eigen::Index>(k)) : 1.0;
    const double gap = next - ev(static_cast<Eigen::Index>(k - 1));
    if (gap > best_gap + 1e-12) {
      best_gap = gap;
      best = k;
    }
  }
  return best;
}

namespace {

struct KMeansResult {
  std::vector<int> labels;
  double inertia = 0;
};

KMeansResult kmeans_once(const Eigen::MatrixXd& x, std::size_t k, std::mt19937_64& rng) {
  const auto n = x.rows();
  Eigen::MatrixXd centers(static_cast<Eigen::Index>(k), x.cols());
  // k-means++ seeding.
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centers.row(0) = x.row(first(rng));
  Eigen::VectorXd d2 = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (std::size_t c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng), acc = 0;
      for (pick = 0; pick < n - 1; ++pick) {
        acc += d2(pick);
        if (acc >= target) break;
      }
    } else {
      pick = first(rng);
    }
    centers.row(static_cast<Eigen::Index>(c)) = x.row(pick);
    d2 = d2.cwiseMin((x.rowwise() - centers.row(static_cast<Eigen::Index>(c))).rowwise().squaredNorm());
  }

  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (centers.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
      if (labels[static_cast<std::size_t>(i)] != static_cast<int>(best)) {
        labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
        changed = true;
      }
    }
    if (!changed) break;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(centers.rows(), centers.cols());
    std::vector<int> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(labels[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        centers.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / counts[c];
      } else {
        // Empty cluster: move it to the point farthest from its center.
        Eigen::VectorXd dist(n);
        for (Eigen::Index i = 0; i < n; ++i)
          dist(i) = (x.row(i) - centers.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
        Eigen::Index far = 0;
        dist.maxCoeff(&far);
        centers.row(static_cast<Eigen::Index>(c)) = x.row(far);
      }
    }
  }
  KMeansResult r{labels, 0.0};
  for (Eigen::Index i = 0; i < n; ++i) r.inertia += (x.row(i) - centers.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
  return r;
}

}  // namespace

std::vector<std::vector<ClientId>> spectral_cluster(std::span<const ClientId> ids, const Eigen::MatrixXd& a,
                                                    const SpectralOptions& opts) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  if (a.rows() != n || a.cols() != n) throw InputError("affinity size does not match the id list");
  if (n < 2) {
    std::vector<std::vector<ClientId>> out;
    for (auto id : ids) out.push_back({id});
    return out;
  }
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1 + a.cwiseAbs().maxCoeff()) || (a.array() < 0).any())
    throw InputError("affinity must be symmetric and non-negative");

  // Canonical order by id.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return ids[x] < ids[y]; });
  Eigen::MatrixXd s(n, n);
  std::vector<ClientId> sorted(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    sorted[static_cast<std::size_t>(i)] = ids[order[i]];
    for (Eigen::Index j = 0; j < n; ++j) s(i, j) = a(order[i], order[j]);
  }

  const Eigen::VectorXd deg = s.rowwise().sum();
  Eigen::VectorXd inv_sqrt(n);
  for (Eigen::Index i = 0; i < n; ++i) inv_sqrt(i) = deg(i) > 0 ? 1.0 / std::sqrt(deg(i)) : 0.0;
  const Eigen::MatrixXd lap =
      Eigen::MatrixXd::Identity(n, n) - inv_sqrt.asDiagonal() * s * inv_sqrt.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (lap + lap.transpose()));
  if (es.info() != Eigen::Success) throw NumericError("Laplacian eigendecomposition failed");

  std::size_t k = opts.n_clusters ? *opts.n_clusters : eigengap_count(es.eigenvalues(), opts.max_clusters);
  if (k < 1) throw ConfigError("cluster count must be >= 1");
  k = std::min<std::size_t>(k, static_cast<std::size_t>(n));

  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  if (k > 1) {
    Eigen::MatrixXd emb = es.eigenvectors().leftCols(static_cast<Eigen::Index>(k));
    for (Eigen::Index i = 0; i < n; ++i) {
      const double norm = emb.row(i).norm();
      if (norm > 0) emb.row(i) /= norm;
    }
    std::uint64_t seed = opts.seed;
    for (auto id : sorted) seed = hash::combine(seed, id);
    std::mt19937_64 rng(seed);
    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < std::max<std::size_t>(1, opts.restarts); ++r) {
      auto res = kmeans_once(emb, k, rng);
      if (res.inertia < best.inertia - 1e-12) best = std::move(res);
    }
    labels = best.labels;
  }

  std::vector<std::vector<ClientId>> groups(k);
  for (Eigen::Index i = 0; i < n; ++i) groups[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(sorted[static_cast<std::size_t>(i)]);
  std::erase_if(groups, [](const auto& g) { return g.empty(); });
  std::sort(groups.begin(), groups.end(), [](const auto& x, const auto& y) { return x.front() < y.front(); });
  return groups;
}

Fingerprint pooled_fingerprint(std::span<const ClientId> members, std::span<const Fingerprint> fps) {
  if (members.empty()) throw InputError("pooled fingerprint of an empty cluster");
  Fingerprint p;
  const auto& f0 = fps[members[0]];
  p.mean = Eigen::VectorXd::Zero(f0.mean.size());
  p.cov = Eigen::MatrixXd::Zero(f0.cov.rows(), f0.cov.cols());
  double ridge = 0;
  for (auto m : members) {
    p.mean += fps[m].mean;
    p.cov += fps[m].cov;
    ridge += fps[m].ridge;
  }
  const auto count = static_cast<double>(members.size());
  p.mean /= count;
  p.cov /= count;
  p.ridge = ridge / count;
  p.probe_embeddings = f0.probe_embeddings;
  return p;
}

namespace {

double mean_trust(std::span<const ClientId> members, const Eigen::VectorXd& trust) {
  double s = 0;
  for (auto m : members) s += trust(static_cast<Eigen::Index>(m));
  return s / static_cast<double>(members.size());
}

}  // namespace

MergeResult merge_low_trust(const std::vector<std::vector<ClientId>>& clusters, const Eigen::VectorXd& trust,
                            std::span<const Fingerprint> fps, double w_min) {
  std::vector<std::size_t> high, low;
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    if (clusters[c].empty()) continue;
    (mean_trust(clusters[c], trust) < w_min ? low : high).push_back(c);
  }
  MergeResult out;
  std::vector<std::vector<ClientId>> merged;
  for (auto c : high) merged.push_back(clusters[c]);
  std::vector<Fingerprint> centroids;
  for (auto c : high) centroids.push_back(pooled_fingerprint(clusters[c], fps));

  for (auto c : low) {
    if (high.empty()) {
      out.excluded.insert(out.excluded.end(), clusters[c].begin(), clusters[c].end());
      continue;
    }
    const auto centroid = pooled_fingerprint(clusters[c], fps);
    std::size_t target = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t h = 0; h < centroids.size(); ++h) {
      const double d = sym_kl(centroid, centroids[h]);
      if (d < best) {
        best = d;
        target = h;
      }
    }
    merged[target].insert(merged[target].end(), clusters[c].begin(), clusters[c].end());
  }
  for (auto& g : merged) std::sort(g.begin(), g.end());
  std::sort(out.excluded.begin(), out.excluded.end());
  out.clusters = std::move(merged);
  return out;
}

std::string to_string(Exclusion reason) { return reason == Exclusion::out_of_range ? "out-of-range" : "low-trust"; }

std::size_t ClusterAssignment::active_edges() const {
  return static_cast<std::size_t>(std::count_if(edges.begin(), edges.end(), [](const auto& e) { return !e.members.empty(); }));
}

std::size_t ClusterAssignment::clustered_clients() const {
  std::size_t n = 0;
  for (const auto& e : edges) n += e.members.size();
  return n;
}

double mean_pairwise(std::span<const ClientId> members, const Eigen::MatrixXd& divergence) {
  if (members.size() < 2) return 0.0;
  double s = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < members.size(); ++i)
    for (std::size_t j = i + 1; j < members.size(); ++j) {
      s += divergence(static_cast<Eigen::Index>(members[i]), static_cast<Eigen::Index>(members[j]));
      ++pairs;
    }
  return s / static_cast<double>(pairs);
}

ClusterAssignment assign_clients(const Topology& topo, std::span<const Fingerprint> fps, const Eigen::VectorXd& trust,
                                 const Eigen::MatrixXd& divergence, const AssignOptions& opts) {
  topo.validate();
  const std::size_t n = topo.clients(), k_edges = topo.edges();
  if (fps.size() != n || static_cast<std::size_t>(trust.size()) != n ||
      static_cast<std::size_t>(divergence.rows()) != n || static_cast<std::size_t>(divergence.cols()) != n)
    throw InputError("topology, fingerprints, trust and divergence disagree on the client count");

  // Stage (i)-(iii) per edge: surviving clusters and, per client, the label.
  std::vector<std::vector<int>> label_on_edge(k_edges, std::vector<int>(n, -1));
  for (std::size_t k = 0; k < k_edges; ++k) {
    std::vector<ClientId> cand;
    for (std::size_t c = 0; c < n; ++c)
      if (topo.latency(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) <= topo.tau_max) cand.push_back(c);
    if (cand.empty()) continue;
    SpectralOptions so{opts.n_clusters, opts.max_clusters, hash::combine(opts.seed, k), 8};
    const auto groups = spectral_cluster(cand, affinity(cand, trust, divergence, opts.gamma), so);
    const auto merged = merge_low_trust(groups, trust, fps, opts.w_min);
    for (std::size_t g = 0; g < merged.clusters.size(); ++g)
      for (auto c : merged.clusters[g]) label_on_edge[k][c] = static_cast<int>(g);
  }

  ClusterAssignment out;
  out.edges.resize(k_edges);
  for (std::size_t k = 0; k < k_edges; ++k) out.edges[k].edge = k;
  out.edge_of.assign(n, std::nullopt);
  out.subcluster_of.assign(n, -1);
  for (std::size_t c = 0; c < n; ++c) {
    std::optional<EdgeId> best;
    bool feasible = false;
    for (std::size_t k = 0; k < k_edges; ++k) {
      const double lat = topo.latency(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k));
      if (lat > topo.tau_max) continue;
      feasible = true;
      if (label_on_edge[k][c] < 0) continue;
      if (!best || lat < topo.latency(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(*best))) best = k;
    }
    if (!best) {
      out.excluded.emplace_back(c, feasible ? Exclusion::low_trust : Exclusion::out_of_range);
      continue;
    }
    out.edge_of[c] = best;
    out.subcluster_of[c] = label_on_edge[*best][c];
    out.edges[*best].members.push_back(c);
  }
  for (auto& e : out.edges) {
    if (e.members.empty()) continue;
    e.trust = mean_trust(e.members, trust);
    e.coherence = mean_pairwise(e.members, divergence);
  }
  if (out.clustered_clients() == 0) throw ConfigError("no client survived feasibility and trust filtering");
  return out;
}

}  // namespace elsa
