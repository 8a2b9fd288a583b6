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

#include "elsa/fingerprint.hpp"

#include <cmath>
#include <random>

namespace elsa {

ProbeSet build_probe_set(std::uint64_t seed, std::size_t count, std::size_t seq_len, std::size_t vocab) {
  if (count < 2) throw ConfigError("probe set needs at least 2 sequences for a covariance");
  if (seq_len < 1 || vocab < 1) throw ConfigError("probe sequences need positive length and vocabulary");
  std::mt19937_64 rng(hash::combine(seed, 0x50524f4245ULL));
  std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(vocab - 1));
  ProbeSet p;
  p.seed = seed;
  p.inputs.assign(count, std::vector<TokenId>(seq_len));
  for (auto& s : p.inputs)
    for (auto& t : s) t = tok(rng);
  return p;
}

Eigen::MatrixXd Fingerprint::regularized_cov() const {
  return cov + ridge * Eigen::MatrixXd::Identity(cov.rows(), cov.cols());
}

double default_ridge(const Eigen::MatrixXd& cov) {
  return std::max(1e-6, 1e-3 * cov.trace() / static_cast<double>(cov.rows()));
}

Fingerprint fingerprint_from_embeddings(const Eigen::MatrixXd& rows) {
  if (rows.rows() < 2) throw InputError("fingerprint needs at least two embeddings");
  if (!rows.allFinite()) throw NumericError("probe embeddings contain non-finite values");
  Fingerprint f;
  f.probe_embeddings = rows;
  f.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centered = rows.rowwise() - f.mean.transpose();
  f.cov = centered.transpose() * centered / static_cast<double>(rows.rows());
  f.cov = 0.5 * (f.cov + f.cov.transpose());
  f.ridge = default_ridge(f.cov);
  return f;
}

Fingerprint extract_fingerprint(const SplitModelState<double>& model, const ProbeSet& probe) {
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(probe.inputs.size()),
                       static_cast<Eigen::Index>(model.config.hidden_dim));
  for (std::size_t j = 0; j < probe.inputs.size(); ++j)
    rows.row(static_cast<Eigen::Index>(j)) = forward_hidden(model, std::span<const TokenId>(probe.inputs[j])).row(0);
  return fingerprint_from_embeddings(rows);
}

double kl_gauss(const Fingerprint& a, const Fingerprint& b) {
  if (a.mean.size() != b.mean.size()) throw InputError("fingerprints have different dimensions");
  return kl_gauss<double>(a.mean, a.regularized_cov(), b.mean, b.regularized_cov());
}

double sym_kl(const Fingerprint& a, const Fingerprint& b) {
  // Tiny negatives from rounding are clamped; the divergence is >= 0.
  return std::max(0.0, kl_gauss(a, b) + kl_gauss(b, a));
}

Eigen::MatrixXd divergence_matrix(std::span<const Fingerprint> fps) {
  const auto n = static_cast<Eigen::Index>(fps.size());
  if (n < 2) throw InputError("divergence matrix needs at least two fingerprints");
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) r(i, j) = r(j, i) = sym_kl(fps[i], fps[j]);
  return r;
}

TrustTerms trust_terms(std::span<const Fingerprint> fps, const Eigen::MatrixXd& divergence) {
  const auto n = static_cast<Eigen::Index>(fps.size());
  if (divergence.rows() != n || divergence.cols() != n) throw InputError("divergence matrix size mismatch");
  TrustTerms t{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd norms = fps[i].probe_embeddings.rowwise().norm();
    if ((norms.array() <= 0).any()) throw NumericError("zero-norm probe embedding for client " + std::to_string(i));
    t.confidence(i) = norms.cwiseInverse().mean();
    if (n > 1) t.divergence(i) = (divergence.row(i).sum() - divergence(i, i)) / static_cast<double>(n - 1);
  }
  return t;
}

Eigen::VectorXd trust_scores(std::span<const Fingerprint> fps, const Eigen::MatrixXd& divergence, bool normalize) {
  auto t = trust_terms(fps, divergence);
  if (normalize) {
    const double mc = t.confidence.mean(), md = t.divergence.mean();
    if (mc > 0) t.confidence /= mc;
    if (md > 0) t.divergence /= md;
  }
  return (-(t.confidence + t.divergence)).array().exp().matrix();
}

double trust_score(std::size_t n, std::span<const Fingerprint> fps, const Eigen::MatrixXd& divergence,
                   bool normalize) {
  if (n >= fps.size()) throw InputError("client index out of range");
  return trust_scores(fps, divergence, normalize)(static_cast<Eigen::Index>(n));
}

}  // namespace elsa
